//! Train/test splitting, training-set samplers, ablation settings, the
//! budget sweep and the fairness breakdown.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::corpus::{Corpus, StudentId};
use crate::hdp::{self, ClusterModel, HdpError, RefinementConfig};
use crate::mastery::{self, MasteryError, MasteryModelConfig, MasteryTable};
use crate::mvec::{self, EmbeddingSet, MvecError, WalkConfig};
use crate::predictor::{self, PredictorConfig, PredictorError};
use crate::rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HarnessError {
    #[error("budget {budget} exceeds the {available} training traces")]
    BudgetTooLarge { budget: usize, available: usize },
    #[error("test fraction {0} must lie strictly between 0 and 1")]
    BadFraction(f64),
    #[error("{0:?} sampling needs a cluster model")]
    NeedsClusters(SamplingMethod),
    #[error("no test traces have embeddings")]
    EmptyTest,
    #[error("no seeds given")]
    NoSeeds,
    #[error(transparent)]
    Mastery(#[from] MasteryError),
    #[error(transparent)]
    Mvec(#[from] MvecError),
    #[error(transparent)]
    Hdp(#[from] HdpError),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SamplingMethod {
    /// Round-robin over refined global clusters.
    As,
    /// Students drawn in proportion to their trace counts.
    Gs,
    /// Uniform over traces.
    Rs,
    /// Round-robin over random clusters.
    Ns,
}

impl SamplingMethod {
    pub const ALL: [SamplingMethod; 4] = [SamplingMethod::As, SamplingMethod::Gs, SamplingMethod::Rs, SamplingMethod::Ns];

    pub fn name(self) -> &'static str {
        match self {
            SamplingMethod::As => "as",
            SamplingMethod::Gs => "gs",
            SamplingMethod::Rs => "rs",
            SamplingMethod::Ns => "ns",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name().eq_ignore_ascii_case(s))
    }

    pub fn needs_clusters(self) -> bool {
        matches!(self, SamplingMethod::As | SamplingMethod::Ns)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Ablation {
    /// Random clusters over mastery-weighted embeddings.
    Ns,
    /// Refined clusters over embeddings learned without mastery.
    Ss,
    /// The full pipeline.
    SsMs,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::Ns, Ablation::Ss, Ablation::SsMs];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Ns => "ns",
            Ablation::Ss => "ss",
            Ablation::SsMs => "ssms",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let s = s.to_ascii_lowercase().replace('+', "");
        Self::ALL.into_iter().find(|a| a.name() == s)
    }

    pub fn uses_mastery(self) -> bool {
        !matches!(self, Ablation::Ss)
    }
}

/// Per-student split: each student with at least two traces lands on both
/// sides; single-trace students go to train. Returns sorted index lists.
pub fn split_corpus(corpus: &Corpus, test_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>), HarnessError> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(HarnessError::BadFraction(test_fraction));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for s in 0..corpus.students().len() as u32 {
        let mut ts = corpus.traces_of_student(StudentId(s)).to_vec();
        let n = ts.len();
        if n < 2 {
            train.extend(ts);
            continue;
        }
        let mut r = rng::stream(rng::derive(seed, "split") ^ s as u64, "split-student");
        ts.shuffle(&mut r);
        let k = (libm::round(n as f64 * test_fraction) as usize).clamp(1, n - 1);
        test.extend_from_slice(&ts[..k]);
        train.extend_from_slice(&ts[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// A cluster model with uniformly random global clusters and one local
/// cluster per (dataset, global cluster) in use.
pub fn random_clusters(n_students: usize, n_problems: usize, n_clusters: usize, seed: u64) -> ClusterModel {
    let g = n_clusters.max(1);
    let mut r = rng::stream(seed, "random-clusters");
    let draw = |n: usize, r: &mut rng::StreamRng| (0..n).map(|_| r.gen_range(0..g)).collect::<Vec<usize>>();
    let globals = [draw(n_students, &mut r), draw(n_problems, &mut r)];
    let mut used = vec![false; g];
    globals.iter().flatten().for_each(|&p| used[p] = true);
    let mut remap = vec![usize::MAX; g];
    let mut n_used = 0;
    for p in 0..g {
        if used[p] {
            remap[p] = n_used;
            n_used += 1;
        }
    }
    let mut assignments = Vec::new();
    let mut local_global = Vec::new();
    for gl in &globals {
        let mut local_of: BTreeMap<usize, usize> = BTreeMap::new();
        let mut lg = Vec::new();
        let z = gl
            .iter()
            .map(|&p| {
                *local_of.entry(remap[p]).or_insert_with(|| {
                    lg.push(remap[p]);
                    lg.len() - 1
                })
            })
            .collect();
        assignments.push(z);
        local_global.push(lg);
    }
    ClusterModel {
        node_ids: vec![(0..n_students as u32).collect(), (0..n_problems as u32).collect()],
        assignments,
        local_global,
        local_centers: vec![Vec::new(), Vec::new()],
        global_centers: vec![Vec::new(); n_used],
        lambda_local: 0.0,
        lambda_global: 0.0,
        objective: 0.0,
        objective_history: Vec::new(),
        coherence_history: Vec::new(),
        passes: 0,
    }
}

/// Draws `budget` distinct training traces. `clusters` lists the traces of
/// each global cluster and is required for cluster sampling. When the
/// clusters run dry before the budget is met, the rest is drawn uniformly
/// from the unsampled training traces.
pub fn sample_training_set(
    train: &[usize],
    method: SamplingMethod,
    budget: usize,
    clusters: Option<&[Vec<usize>]>,
    corpus: &Corpus,
    seed: u64,
) -> Result<Vec<usize>, HarnessError> {
    if budget > train.len() {
        return Err(HarnessError::BudgetTooLarge { budget, available: train.len() });
    }
    let mut r = rng::stream(seed, "sample-training");
    let mut picked: Vec<usize> = match method {
        SamplingMethod::Rs => {
            let mut all = train.to_vec();
            all.shuffle(&mut r);
            all.truncate(budget);
            all
        }
        SamplingMethod::Gs => {
            let mut by_student: BTreeMap<StudentId, Vec<usize>> = BTreeMap::new();
            for &t in train {
                by_student.entry(corpus.traces()[t].student).or_default().push(t);
            }
            let mut pools: Vec<(f64, Vec<usize>)> = by_student
                .into_values()
                .map(|mut v| {
                    v.shuffle(&mut r);
                    (v.len() as f64, v)
                })
                .collect();
            let mut out = Vec::with_capacity(budget);
            while out.len() < budget {
                let weights: Vec<f64> = pools.iter().map(|(w, v)| if v.is_empty() { 0.0 } else { *w }).collect();
                let Some(i) = rng::weighted_index(&mut r, &weights) else { break };
                out.push(pools[i].1.pop().expect("non-empty pool"));
            }
            out
        }
        SamplingMethod::As | SamplingMethod::Ns => {
            let clusters = clusters.ok_or(HarnessError::NeedsClusters(method))?;
            let in_train: BTreeMap<usize, ()> = train.iter().map(|&t| (t, ())).collect();
            let mut pools: Vec<Vec<usize>> = clusters
                .iter()
                .map(|c| {
                    let mut v: Vec<usize> = c.iter().copied().filter(|t| in_train.contains_key(t)).collect();
                    v.sort_unstable();
                    v.dedup();
                    v.shuffle(&mut r);
                    v
                })
                .filter(|v| !v.is_empty())
                .collect();
            pools.shuffle(&mut r);
            let mut taken = BTreeMap::new();
            let mut out = Vec::with_capacity(budget);
            while out.len() < budget && pools.iter().any(|p| !p.is_empty()) {
                for pool in pools.iter_mut() {
                    if out.len() == budget {
                        break;
                    }
                    while let Some(t) = pool.pop() {
                        if taken.insert(t, ()).is_none() {
                            out.push(t);
                            break;
                        }
                    }
                }
            }
            out
        }
    };
    if picked.len() < budget {
        let chosen: BTreeMap<usize, ()> = picked.iter().map(|&t| (t, ())).collect();
        let mut rest: Vec<usize> = train.iter().copied().filter(|t| !chosen.contains_key(t)).collect();
        rest.shuffle(&mut r);
        picked.extend(rest.into_iter().take(budget - picked.len()));
    }
    Ok(picked)
}

/// Levenshtein distance over the longer length; two empty sequences are
/// identical.
pub fn normalized_edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> f64 {
    let longest = a.len().max(b.len());
    if longest == 0 {
        return 0.0;
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + (x != y) as usize;
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()] as f64 / longest as f64
}

/// Population variance of pairwise normalized edit distances.
pub fn strategy_variance<T: PartialEq>(seqs: &[&[T]]) -> f64 {
    let mut d = Vec::new();
    for i in 0..seqs.len() {
        for j in i + 1..seqs.len() {
            d.push(normalized_edit_distance(seqs[i], seqs[j]));
        }
    }
    if d.is_empty() {
        return 0.0;
    }
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d.len() as f64
}

pub const PERFORMANCE_EDGES: [f64; 4] = [0.3, 0.5, 0.7, 0.9];
pub const PERFORMANCE_LABELS: [&str; 5] = ["<=30", "30-50", "50-70", "70-90", ">=90"];
pub const VARIANCE_GROUPS: usize = 5;

/// Bucket of a first-attempt success rate: `[0, .3]`, then left-open,
/// right-closed buckets up to 1.
pub fn performance_group(rate: f64) -> usize {
    PERFORMANCE_EDGES.iter().position(|&e| rate <= e).unwrap_or(PERFORMANCE_EDGES.len())
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupAccuracy {
    pub label: String,
    /// `None` for a group without students.
    pub accuracy: Option<f64>,
    pub students: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FairnessReport {
    pub performance: Vec<GroupAccuracy>,
    pub variance: Vec<GroupAccuracy>,
    /// Upper edge of each variance bucket.
    pub variance_edges: Vec<f64>,
    pub performance_disparity: f64,
    pub variance_disparity: f64,
}

fn disparity(groups: &[GroupAccuracy]) -> f64 {
    let present: Vec<f64> = groups.iter().filter_map(|g| g.accuracy).collect();
    if present.is_empty() {
        return 0.0;
    }
    let max = present.iter().copied().fold(f64::MIN, f64::max);
    let min = present.iter().copied().fold(f64::MAX, f64::min);
    max - min
}

/// Mean over the group's students of each student's mean accuracy.
fn group_mean(per_student: &BTreeMap<StudentId, Vec<f64>>) -> Option<f64> {
    if per_student.is_empty() {
        return None;
    }
    let total: f64 = per_student.values().map(|v| v.iter().sum::<f64>() / v.len() as f64).sum();
    Some(total / per_student.len() as f64)
}

/// Accuracy by performance group and by section-variance group. `test`
/// lists trace indices and `accuracy` the step accuracy of each. Section
/// variance is measured over every trace of the section in `corpus`.
pub fn fairness_report(corpus: &Corpus, test: &[usize], accuracy: &[f64]) -> FairnessReport {
    let mut rates: BTreeMap<StudentId, (usize, usize)> = BTreeMap::new();
    for &t in test {
        let tr = &corpus.traces()[t];
        let e = rates.entry(tr.student).or_insert((0, 0));
        e.0 += tr.correct_steps();
        e.1 += tr.len();
    }
    let mut perf: Vec<BTreeMap<StudentId, Vec<f64>>> = vec![BTreeMap::new(); PERFORMANCE_LABELS.len()];
    for (&t, &a) in test.iter().zip(accuracy) {
        let s = corpus.traces()[t].student;
        let (c, n) = rates[&s];
        let rate = if n == 0 { 0.0 } else { c as f64 / n as f64 };
        perf[performance_group(rate)].entry(s).or_default().push(a);
    }
    let performance: Vec<GroupAccuracy> = perf
        .iter()
        .zip(PERFORMANCE_LABELS)
        .map(|(m, l)| GroupAccuracy { label: l.into(), accuracy: group_mean(m), students: m.len() })
        .collect();

    let n_sections = corpus.curriculum().sections.len();
    let mut seqs: Vec<Vec<&[crate::corpus::KcId]>> = vec![Vec::new(); n_sections];
    for tr in corpus.traces() {
        seqs[tr.section.index()].push(&tr.kcs);
    }
    let section_var: Vec<Option<f64>> = seqs.iter().map(|s| (!s.is_empty()).then(|| strategy_variance(s))).collect();
    let lo = section_var.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    let hi = section_var.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if lo.is_finite() { (lo, hi) } else { (0.0, 0.0) };
    let width = (hi - lo) / VARIANCE_GROUPS as f64;
    let variance_edges: Vec<f64> = (1..=VARIANCE_GROUPS).map(|i| lo + width * i as f64).collect();
    let bucket = |v: f64| -> usize {
        if width <= 0.0 {
            return 0;
        }
        (((v - lo) / width) as usize).min(VARIANCE_GROUPS - 1)
    };
    let mut var: Vec<BTreeMap<StudentId, Vec<f64>>> = vec![BTreeMap::new(); VARIANCE_GROUPS];
    for (&t, &a) in test.iter().zip(accuracy) {
        let tr = &corpus.traces()[t];
        if let Some(v) = section_var[tr.section.index()] {
            var[bucket(v)].entry(tr.student).or_default().push(a);
        }
    }
    let variance: Vec<GroupAccuracy> = var
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let upper = variance_edges[i];
            let lower = if i == 0 { lo } else { variance_edges[i - 1] };
            GroupAccuracy { label: alloc::format!("{lower:.4}-{upper:.4}"), accuracy: group_mean(m), students: m.len() }
        })
        .collect();
    FairnessReport {
        performance_disparity: disparity(&performance),
        variance_disparity: disparity(&variance),
        performance,
        variance,
        variance_edges,
    }
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len().min(b.len());
    if n < 2 {
        return 1.0;
    }
    let mut table: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    let mut ra: BTreeMap<usize, u64> = BTreeMap::new();
    let mut rb: BTreeMap<usize, u64> = BTreeMap::new();
    for i in 0..n {
        *table.entry((a[i], b[i])).or_default() += 1;
        *ra.entry(a[i]).or_default() += 1;
        *rb.entry(b[i]).or_default() += 1;
    }
    let c2 = |x: u64| (x * x.saturating_sub(1) / 2) as f64;
    let index: f64 = table.values().map(|&x| c2(x)).sum();
    let sa: f64 = ra.values().map(|&x| c2(x)).sum();
    let sb: f64 = rb.values().map(|&x| c2(x)).sum();
    let expected = sa * sb / c2(n as u64);
    let max = (sa + sb) / 2.0;
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub mastery: MasteryModelConfig,
    pub walk: WalkConfig,
    pub refine: RefinementConfig,
    pub predictor: PredictorConfig,
    pub test_fraction: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            mastery: MasteryModelConfig::default(),
            walk: WalkConfig::default(),
            refine: RefinementConfig::desk_scale(),
            predictor: PredictorConfig::default(),
            test_fraction: 0.2,
        }
    }
}

/// Wall-clock seconds spent in each stage.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StageTimes {
    pub mastery: f64,
    pub embed: f64,
    pub cluster: f64,
    pub sample: f64,
    pub train: f64,
    pub evaluate: f64,
}

impl StageTimes {
    pub fn total(&self) -> f64 {
        self.mastery + self.embed + self.cluster + self.sample + self.train + self.evaluate
    }

    fn add(&mut self, o: &StageTimes) {
        self.mastery += o.mastery;
        self.embed += o.embed;
        self.cluster += o.cluster;
        self.sample += o.sample;
        self.train += o.train;
        self.evaluate += o.evaluate;
    }

    fn scale(&mut self, f: f64) {
        for x in [&mut self.mastery, &mut self.embed, &mut self.cluster, &mut self.sample, &mut self.train, &mut self.evaluate] {
            *x *= f;
        }
    }
}

/// Everything one seed shares across cells: the split, the mastery table,
/// both embedding variants and the refined clusterings.
#[derive(Clone, Debug)]
pub struct SeedArtifacts {
    pub seed: u64,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub train_corpus: Corpus,
    pub mastery: Option<MasteryTable>,
    pub with_mastery: Option<EmbeddingSet>,
    pub without_mastery: Option<EmbeddingSet>,
    pub clusters_ms: Option<ClusterModel>,
    pub clusters_ss: Option<ClusterModel>,
    pub times: StageTimes,
}

/// Source of wall-clock seconds; the core crate has no clock of its own.
pub trait Clock {
    fn now(&self) -> f64;
}

/// A clock that never advances.
pub struct NoClock;

impl Clock for NoClock {
    fn now(&self) -> f64 {
        0.0
    }
}

/// Stage seeds derived from one experiment seed.
pub fn seed_config(cfg: &ExperimentConfig, seed: u64) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.walk.seed = rng::derive(seed, "walk");
    c.refine.seed = rng::derive(seed, "refine");
    c.predictor.seed = rng::derive(seed, "predictor");
    c
}

impl SeedArtifacts {
    pub fn new(corpus: &Corpus, cfg: &ExperimentConfig, seed: u64) -> Result<Self, HarnessError> {
        let (train, test) = split_corpus(corpus, cfg.test_fraction, seed)?;
        let train_corpus = corpus.subset(&train);
        Ok(SeedArtifacts {
            seed,
            train,
            test,
            train_corpus,
            mastery: None,
            with_mastery: None,
            without_mastery: None,
            clusters_ms: None,
            clusters_ss: None,
            times: StageTimes::default(),
        })
    }

    fn ensure_mastery(&mut self, cfg: &ExperimentConfig, clock: &dyn Clock) -> Result<(), HarnessError> {
        if self.mastery.is_none() {
            let t0 = clock.now();
            let pairs = mastery::build_training_set(&self.train_corpus);
            let model = mastery::train_cfa_model(&pairs, self.train_corpus.kc_vocab().len(), &cfg.mastery, rng::derive(self.seed, "mastery"))?;
            self.mastery = Some(mastery::compute_alpha(&model, &self.train_corpus)?);
            self.times.mastery += clock.now() - t0;
        }
        Ok(())
    }

    /// Embeddings for the ablation, computed on first use.
    pub fn embeddings(&mut self, ablation: Ablation, cfg: &ExperimentConfig, clock: &dyn Clock) -> Result<&EmbeddingSet, HarnessError> {
        let cfg = seed_config(cfg, self.seed);
        if ablation.uses_mastery() {
            if self.with_mastery.is_none() {
                self.ensure_mastery(&cfg, clock)?;
                let t0 = clock.now();
                self.with_mastery = Some(mvec::generate_mvec(&self.train_corpus, self.mastery.as_ref(), &cfg.walk)?);
                self.times.embed += clock.now() - t0;
            }
            Ok(self.with_mastery.as_ref().expect("just built"))
        } else {
            if self.without_mastery.is_none() {
                let t0 = clock.now();
                self.without_mastery = Some(mvec::generate_mvec(&self.train_corpus, None, &cfg.walk)?);
                self.times.embed += clock.now() - t0;
            }
            Ok(self.without_mastery.as_ref().expect("just built"))
        }
    }

    /// Refined clusters over the ablation's embeddings (mastery-weighted for
    /// everything except SS).
    pub fn refined_clusters(&mut self, ablation: Ablation, cfg: &ExperimentConfig, clock: &dyn Clock) -> Result<&ClusterModel, HarnessError> {
        let with_ms = ablation.uses_mastery();
        let present = if with_ms { self.clusters_ms.is_some() } else { self.clusters_ss.is_some() };
        if !present {
            let scfg = seed_config(cfg, self.seed);
            let emb = self.embeddings(ablation, cfg, clock)?.clone();
            let t0 = clock.now();
            let model = hdp::coarse_to_fine(&self.train_corpus, &emb, &scfg.refine)?;
            self.times.cluster += clock.now() - t0;
            if with_ms {
                self.clusters_ms = Some(model);
            } else {
                self.clusters_ss = Some(model);
            }
        }
        Ok(if with_ms { self.clusters_ms.as_ref() } else { self.clusters_ss.as_ref() }.expect("just built"))
    }
}

/// One trained and evaluated (method, ablation, budget, seed) cell.
#[derive(Clone, Debug, PartialEq)]
pub struct CellOutcome {
    pub accuracy: f64,
    /// Test traces evaluated, and their accuracies in the same order.
    pub test: Vec<usize>,
    pub accuracies: Vec<f64>,
    pub predictions: Vec<Vec<crate::corpus::KcId>>,
    pub skipped_test: usize,
    pub times: StageTimes,
}

/// Trace lists, indexed into `train_corpus`, that cluster sampling draws
/// from. AS uses the refined model; NS, and AS under the NS ablation, use
/// random clusters as many as the refined model has. `None` for RS and GS.
pub fn cell_clusters(
    method: SamplingMethod,
    ablation: Ablation,
    refined: Option<&ClusterModel>,
    train_corpus: &Corpus,
    seed: u64,
) -> Option<Vec<Vec<usize>>> {
    let refined = refined.filter(|_| method.needs_clusters())?;
    if method == SamplingMethod::Ns || ablation == Ablation::Ns {
        let model = random_clusters(train_corpus.students().len(), train_corpus.problems().len(), refined.n_global(), rng::derive(seed, "ns"));
        Some(hdp::cluster_traces(&model, train_corpus))
    } else {
        Some(hdp::cluster_traces(refined, train_corpus))
    }
}

/// Samples, trains and evaluates one cell on prepared seed artifacts.
/// Trace indices in the outcome refer to the full corpus.
pub fn run_cell(
    corpus: &Corpus,
    art: &mut SeedArtifacts,
    method: SamplingMethod,
    ablation: Ablation,
    budget: usize,
    cfg: &ExperimentConfig,
    clock: &dyn Clock,
) -> Result<CellOutcome, HarnessError> {
    let scfg = seed_config(cfg, art.seed);
    let emb = art.embeddings(ablation, cfg, clock)?.clone();
    let refined = if method.needs_clusters() {
        let ablation = if method == SamplingMethod::Ns || ablation == Ablation::Ns { Ablation::SsMs } else { ablation };
        Some(art.refined_clusters(ablation, cfg, clock)?.clone())
    } else {
        None
    };
    let clusters = cell_clusters(method, ablation, refined.as_ref(), &art.train_corpus, art.seed);

    let mut times = StageTimes::default();
    let t0 = clock.now();
    // cluster trace lists index the training sub-corpus, as do the samples
    let local_train: Vec<usize> = (0..art.train.len()).filter(|&i| has_embeddings(&art.train_corpus, i, &emb)).collect();
    let sampled = sample_training_set(&local_train, method, budget.min(local_train.len()), clusters.as_deref(), &art.train_corpus, rng::derive(art.seed, method.name()))?;
    times.sample = clock.now() - t0;

    let t0 = clock.now();
    let train_ex = predictor::examples(&art.train_corpus, &sampled, &emb)?;
    let model = predictor::train_predictor(&train_ex, corpus.kc_vocab().len(), &scfg.predictor)?;
    times.train = clock.now() - t0;

    let t0 = clock.now();
    let test: Vec<usize> = art.test.iter().copied().filter(|&t| has_embeddings(corpus, t, &emb)).collect();
    let skipped_test = art.test.len() - test.len();
    if test.is_empty() {
        return Err(HarnessError::EmptyTest);
    }
    let test_ex = predictor::examples(corpus, &test, &emb)?;
    let preds = predictor::predict_examples(&model, &test_ex)?;
    let accuracies: Vec<f64> = preds.iter().zip(&test_ex).map(|(p, e)| predictor::step_accuracy(&p.kcs, &e.target)).collect();
    times.evaluate = clock.now() - t0;
    let accuracy = accuracies.iter().sum::<f64>() / accuracies.len() as f64;
    Ok(CellOutcome { accuracy, test, accuracies, predictions: preds.into_iter().map(|p| p.kcs).collect(), skipped_test, times })
}

/// Whether both the student and the problem of a trace have embeddings.
pub fn has_embeddings(corpus: &Corpus, trace: usize, emb: &EmbeddingSet) -> bool {
    let t = &corpus.traces()[trace];
    emb.student(t.student).is_some() && emb.problem(t.problem).is_some()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub method: SamplingMethod,
    pub ablation: Ablation,
    pub budget: usize,
    pub accuracy: f64,
    pub seed_accuracies: Vec<f64>,
    /// Per-stage seconds averaged over seeds, shared stages included.
    pub times: StageTimes,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub seeds: Vec<u64>,
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub fn accuracy(&self, method: SamplingMethod, ablation: Ablation, budget: usize) -> Option<f64> {
        self.rows.iter().find(|r| r.method == method && r.ablation == ablation && r.budget == budget).map(|r| r.accuracy)
    }
}

/// Runs every (method, ablation) cell at every budget for every seed and
/// averages accuracy over seeds. Budgets are trace counts. Stages shared by
/// cells of one seed are computed once; their time is charged to each row.
pub fn run_experiment(
    corpus: &Corpus,
    cells: &[(SamplingMethod, Ablation)],
    budgets: &[usize],
    cfg: &ExperimentConfig,
    seeds: &[u64],
    clock: &dyn Clock,
) -> Result<SweepResult, HarnessError> {
    if seeds.is_empty() {
        return Err(HarnessError::NoSeeds);
    }
    let mut acc: BTreeMap<(SamplingMethod, Ablation, usize), (Vec<f64>, StageTimes)> = BTreeMap::new();
    for &seed in seeds {
        let mut art = SeedArtifacts::new(corpus, cfg, seed)?;
        for &(method, ablation) in cells {
            for &budget in budgets {
                let out = run_cell(corpus, &mut art, method, ablation, budget, cfg, clock)?;
                let e = acc.entry((method, ablation, budget)).or_default();
                e.0.push(out.accuracy);
                e.1.add(&out.times);
            }
        }
        for &(method, ablation) in cells {
            for &budget in budgets {
                let e = acc.get_mut(&(method, ablation, budget)).expect("cell ran");
                let mut shared = StageTimes { mastery: art.times.mastery, embed: art.times.embed, cluster: art.times.cluster, ..Default::default() };
                if ablation == Ablation::Ss {
                    shared.mastery = 0.0;
                }
                e.1.add(&shared);
            }
        }
    }
    let rows = acc
        .into_iter()
        .map(|((method, ablation, budget), (accs, mut times))| {
            times.scale(1.0 / seeds.len() as f64);
            SweepRow { method, ablation, budget, accuracy: accs.iter().sum::<f64>() / accs.len() as f64, seed_accuracies: accs, times }
        })
        .collect();
    Ok(SweepResult { seeds: seeds.to_vec(), rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::TransactionRecord;

    fn corpus(traces_per_student: &[usize]) -> Corpus {
        let mut recs = Vec::new();
        for (s, &n) in traces_per_student.iter().enumerate() {
            for p in 0..n {
                recs.push(TransactionRecord {
                    student_id: alloc::format!("s{s}"),
                    problem_id: alloc::format!("p{p:03}"),
                    unit_id: "u".into(),
                    section_id: "sec".into(),
                    step_index: 0,
                    kc_id: "k".into(),
                    cfa: p % 2 == 0,
                });
            }
        }
        Corpus::consolidate(&recs).unwrap()
    }

    #[test]
    fn split_is_stratified_and_deterministic() {
        let c = corpus(&[1, 10, 10, 10, 10, 10, 10, 10, 10, 10, 10]);
        let (train, test) = split_corpus(&c, 0.2, 7).unwrap();
        assert_eq!(test.len(), 20);
        assert_eq!(train.len() + test.len(), c.len());
        assert!(c.traces_of_student(StudentId(0)).iter().all(|t| train.contains(t)));
        assert_eq!(split_corpus(&c, 0.2, 7).unwrap(), (train, test));
        assert!(split_corpus(&c, 1.0, 7).is_err());
    }

    #[test]
    fn round_robin_takes_evenly_from_clusters() {
        let c = corpus(&[40]);
        let train: Vec<usize> = (0..40).collect();
        let clusters: Vec<Vec<usize>> = (0..4).map(|k| (k * 10..k * 10 + 10).collect()).collect();
        let s = sample_training_set(&train, SamplingMethod::As, 8, Some(&clusters), &c, 1).unwrap();
        for cl in &clusters {
            assert_eq!(s.iter().filter(|t| cl.contains(t)).count(), 2);
        }
        assert!(matches!(sample_training_set(&train, SamplingMethod::As, 8, None, &c, 1), Err(HarnessError::NeedsClusters(_))));
    }

    #[test]
    fn random_sampling_of_everything_is_the_whole_set() {
        let c = corpus(&[5, 5]);
        let train: Vec<usize> = (0..10).collect();
        let mut s = sample_training_set(&train, SamplingMethod::Rs, 10, None, &c, 3).unwrap();
        s.sort_unstable();
        assert_eq!(s, train);
        assert!(matches!(sample_training_set(&train, SamplingMethod::Rs, 11, None, &c, 3), Err(HarnessError::BudgetTooLarge { .. })));
    }

    #[test]
    fn edit_distance_worked_value() {
        let a = [1, 2, 3, 4, 5, 6, 7, 8, 9, 10];
        let b = [1, 2, 0, 4, 5, 6, 7, 0, 9, 10];
        assert!((normalized_edit_distance(&a, &b) - 0.2).abs() < 1e-12);
        assert_eq!(normalized_edit_distance::<u8>(&[], &[]), 0.0);
        assert_eq!(normalized_edit_distance(&[1, 2], &[3]), 1.0);
    }

    #[test]
    fn performance_buckets() {
        assert_eq!(performance_group(0.0), 0);
        assert_eq!(performance_group(0.3), 0);
        assert_eq!(performance_group(0.31), 1);
        assert_eq!(performance_group(0.9), 3);
        assert_eq!(performance_group(0.95), 4);
        assert_eq!(performance_group(1.0), 4);
    }

    #[test]
    fn equal_accuracy_means_zero_disparity() {
        let c = corpus(&[4, 4, 4]);
        let test: Vec<usize> = (0..c.len()).collect();
        let acc = vec![0.8; test.len()];
        let r = fairness_report(&c, &test, &acc);
        assert_eq!(r.performance_disparity, 0.0);
        for g in r.performance.iter().filter_map(|g| g.accuracy) {
            assert!((g - 0.8).abs() < 1e-12);
        }
    }

    #[test]
    fn ari_of_identical_and_relabelled_partitions() {
        assert!((adjusted_rand_index(&[0, 0, 1, 1], &[5, 5, 2, 2]) - 1.0).abs() < 1e-12);
        assert!(adjusted_rand_index(&[0, 1, 0, 1], &[0, 0, 1, 1]) < 0.0);
    }

    #[test]
    fn random_clusters_are_valid_partitions() {
        let m = random_clusters(20, 15, 4, 9);
        assert!(m.is_valid_partition());
        assert!(m.n_global() <= 4);
    }

    #[test]
    fn method_and_ablation_names_round_trip() {
        for m in SamplingMethod::ALL {
            assert_eq!(SamplingMethod::parse(m.name()), Some(m));
        }
        for a in Ablation::ALL {
            assert_eq!(Ablation::parse(a.name()), Some(a));
        }
        assert_eq!(Ablation::parse("SS+MS"), Some(Ablation::SsMs));
    }
}
