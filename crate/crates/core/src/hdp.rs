//! Hard hierarchical DP-Means over student and problem embeddings.
//!
//! Each dataset (students, problems) gets its own local clusters; every local
//! cluster hangs off one global cluster shared across datasets. The objective
//! is the within-global-cluster squared error plus `λ_ℓ` per local cluster and
//! `λ_g` per global cluster. [`coarse_to_fine`] lowers `λ_g` step by step for
//! as long as the symmetry coherence of the resulting clusters keeps rising.

use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::corpus::{Corpus, ProblemId, StudentId};
use crate::mvec::EmbeddingSet;
use crate::symmetry::{cluster_coherence, PositionalEncoding, PositionalStrategy, SymmetryError, DEFAULT_PAIR_CAP};

pub const STUDENTS: usize = 0;
pub const PROBLEMS: usize = 1;
pub const MAX_PASSES: usize = 100;
const MONOTONE_SLACK: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HdpError {
    #[error("penalties must be positive (local {local}, global {global})")]
    BadPenalty { local: f64, global: f64 },
    #[error("point {index} of dataset {dataset} has dimension {found}, expected {expected}")]
    Dimension { dataset: usize, index: usize, expected: usize, found: usize },
    #[error("no student or problem has an embedding")]
    NoPoints,
    #[error("global cluster {0} does not exist")]
    NoSuchCluster(usize),
    #[error("objective rose from {before} to {after} in pass {pass}")]
    ObjectiveIncreased { pass: usize, before: f64, after: f64 },
    #[error(transparent)]
    Symmetry(#[from] SymmetryError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterModel {
    /// Node id behind each point, per dataset, ascending.
    pub node_ids: Vec<Vec<u32>>,
    /// Local cluster of each point, per dataset.
    pub assignments: Vec<Vec<usize>>,
    /// Global cluster of each local cluster, per dataset.
    pub local_global: Vec<Vec<usize>>,
    pub local_centers: Vec<Vec<Vec<f64>>>,
    pub global_centers: Vec<Vec<f64>>,
    pub lambda_local: f64,
    pub lambda_global: f64,
    pub objective: f64,
    /// Objective before the first pass and after every pass.
    pub objective_history: Vec<f64>,
    /// Coherence of each refinement step, filled by [`coarse_to_fine`].
    pub coherence_history: Vec<f64>,
    pub passes: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn mean_of<'a>(points: impl Iterator<Item = &'a Vec<f64>>, dim: usize) -> Option<Vec<f64>> {
    let mut acc = vec![0.0; dim];
    let mut n = 0usize;
    for p in points {
        for (a, x) in acc.iter_mut().zip(p) {
            *a += x;
        }
        n += 1;
    }
    (n > 0).then(|| acc.into_iter().map(|a| a / n as f64).collect())
}

impl ClusterModel {
    pub fn n_global(&self) -> usize {
        self.global_centers.len()
    }

    pub fn n_local(&self) -> usize {
        self.local_global.iter().map(Vec::len).sum()
    }

    pub fn global_of(&self, dataset: usize, point: usize) -> usize {
        self.local_global[dataset][self.assignments[dataset][point]]
    }

    /// Global cluster of a node by id; `None` if the node was not clustered.
    pub fn global_of_node(&self, dataset: usize, id: u32) -> Option<usize> {
        let point = self.node_ids.get(dataset)?.binary_search(&id).ok()?;
        Some(self.global_of(dataset, point))
    }

    /// Which datasets contribute points to each global cluster.
    pub fn sides(&self) -> Vec<[bool; 2]> {
        let mut out = vec![[false; 2]; self.n_global()];
        for (j, locals) in self.local_global.iter().enumerate().take(2) {
            for &g in locals {
                out[g][j] = true;
            }
        }
        out
    }

    /// Global clusters holding only students or only problems.
    pub fn one_sided_clusters(&self) -> Vec<usize> {
        self.sides().iter().enumerate().filter(|(_, s)| !(s[0] && s[1])).map(|(p, _)| p).collect()
    }

    /// Objective recomputed from the raw points with freshly averaged global
    /// centers.
    pub fn recompute_objective(&self, datasets: &[&[Vec<f64>]]) -> f64 {
        let dim = datasets.iter().flat_map(|d| d.first()).map(Vec::len).next().unwrap_or(0);
        let mut members: Vec<Vec<&Vec<f64>>> = vec![Vec::new(); self.n_global()];
        for (j, data) in datasets.iter().enumerate() {
            for (i, x) in data.iter().enumerate() {
                members[self.global_of(j, i)].push(x);
            }
        }
        let mut sse = 0.0;
        for m in &members {
            if let Some(mu) = mean_of(m.iter().copied(), dim) {
                sse += m.iter().map(|x| sq_dist(x, &mu)).sum::<f64>();
            }
        }
        sse + self.lambda_local * self.n_local() as f64 + self.lambda_global * self.n_global() as f64
    }

    /// Partition validity: every point in one existing local cluster, every
    /// local cluster non-empty and attached to an existing global cluster,
    /// every global cluster non-empty.
    pub fn is_valid_partition(&self) -> bool {
        let g = self.n_global();
        let mut global_used = vec![false; g];
        for (j, locals) in self.local_global.iter().enumerate() {
            let mut local_used = vec![false; locals.len()];
            for &c in &self.assignments[j] {
                if c >= locals.len() {
                    return false;
                }
                local_used[c] = true;
            }
            if local_used.iter().any(|u| !u) {
                return false;
            }
            for &p in locals {
                if p >= g {
                    return false;
                }
                global_used[p] = true;
            }
        }
        global_used.iter().all(|&u| u)
    }
}

struct Solver<'a> {
    data: &'a [&'a [Vec<f64>]],
    dim: usize,
    lambda_local: f64,
    lambda_global: f64,
    z: Vec<Vec<usize>>,
    v: Vec<Vec<usize>>,
    mu: Vec<Vec<f64>>,
}

impl Solver<'_> {
    fn objective(&self) -> f64 {
        let mut sse = 0.0;
        for (j, data) in self.data.iter().enumerate() {
            for (i, x) in data.iter().enumerate() {
                sse += sq_dist(x, &self.mu[self.v[j][self.z[j][i]]]);
            }
        }
        let k: usize = self.v.iter().map(Vec::len).sum();
        sse + self.lambda_local * k as f64 + self.lambda_global * self.mu.len() as f64
    }

    fn point_pass(&mut self) {
        for j in 0..self.data.len() {
            for i in 0..self.data[j].len() {
                let x = &self.data[j][i];
                let mut best_p = 0;
                let mut best_d = f64::INFINITY;
                for (p, mu) in self.mu.iter().enumerate() {
                    let mut d = sq_dist(x, mu);
                    if !self.v[j].contains(&p) {
                        d += self.lambda_local;
                    }
                    if d < best_d {
                        best_d = d;
                        best_p = p;
                    }
                }
                if best_d > self.lambda_local + self.lambda_global {
                    self.mu.push(x.clone());
                    self.v[j].push(self.mu.len() - 1);
                    self.z[j][i] = self.v[j].len() - 1;
                } else {
                    let current = self.z[j][i];
                    if self.v[j][current] == best_p {
                        continue;
                    }
                    match self.v[j].iter().position(|&p| p == best_p) {
                        Some(c) => self.z[j][i] = c,
                        None => {
                            self.v[j].push(best_p);
                            self.z[j][i] = self.v[j].len() - 1;
                        }
                    }
                }
            }
        }
        self.compact();
    }

    fn local_pass(&mut self) {
        for j in 0..self.data.len() {
            let members = self.local_members(j);
            for (c, idx) in members.iter().enumerate() {
                let pts = idx.iter().map(|&i| &self.data[j][i]);
                let local_mu = mean_of(pts, self.dim).expect("compacted local clusters are non-empty");
                let within: f64 = idx.iter().map(|&i| sq_dist(&self.data[j][i], &local_mu)).sum();
                let mut best_p = 0;
                let mut best_d = f64::INFINITY;
                for (p, mu) in self.mu.iter().enumerate() {
                    let d: f64 = idx.iter().map(|&i| sq_dist(&self.data[j][i], mu)).sum();
                    if d < best_d {
                        best_d = d;
                        best_p = p;
                    }
                }
                if best_d > self.lambda_global + within {
                    self.mu.push(local_mu);
                    self.v[j][c] = self.mu.len() - 1;
                } else {
                    self.v[j][c] = best_p;
                }
            }
        }
        self.compact();
    }

    fn update_means(&mut self) {
        let mut members: Vec<Vec<&Vec<f64>>> = vec![Vec::new(); self.mu.len()];
        for (j, data) in self.data.iter().enumerate() {
            for (i, x) in data.iter().enumerate() {
                members[self.v[j][self.z[j][i]]].push(x);
            }
        }
        for (mu, m) in self.mu.iter_mut().zip(&members) {
            if let Some(mean) = mean_of(m.iter().copied(), self.dim) {
                *mu = mean;
            }
        }
    }

    fn local_members(&self, j: usize) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.v[j].len()];
        for (i, &c) in self.z[j].iter().enumerate() {
            out[c].push(i);
        }
        out
    }

    /// Drops empty local clusters and global clusters without local clusters,
    /// relabelling in order of first appearance so labels stay stable.
    fn compact(&mut self) {
        for j in 0..self.data.len() {
            let mut used = vec![false; self.v[j].len()];
            for &c in &self.z[j] {
                used[c] = true;
            }
            let mut remap = vec![usize::MAX; self.v[j].len()];
            let mut kept = Vec::new();
            for (c, &u) in used.iter().enumerate() {
                if u {
                    remap[c] = kept.len();
                    kept.push(self.v[j][c]);
                }
            }
            self.v[j] = kept;
            for c in &mut self.z[j] {
                *c = remap[*c];
            }
        }
        let mut used = vec![false; self.mu.len()];
        for locals in &self.v {
            for &p in locals {
                used[p] = true;
            }
        }
        let mut remap = vec![usize::MAX; self.mu.len()];
        let mut mu = Vec::new();
        for (p, &u) in used.iter().enumerate() {
            if u {
                remap[p] = mu.len();
                mu.push(core::mem::take(&mut self.mu[p]));
            }
        }
        self.mu = mu;
        for locals in &mut self.v {
            for p in locals.iter_mut() {
                *p = remap[*p];
            }
        }
    }
}

/// Runs hard HDP DP-Means on any number of datasets. Points are visited in
/// the order given; the caller fixes that order.
pub fn dp_means_hdp_multi(datasets: &[&[Vec<f64>]], lambda_local: f64, lambda_global: f64) -> Result<ClusterModel, HdpError> {
    if !(lambda_local > 0.0 && lambda_global > 0.0) {
        return Err(HdpError::BadPenalty { local: lambda_local, global: lambda_global });
    }
    let dim = datasets.iter().flat_map(|d| d.first()).map(Vec::len).next().unwrap_or(0);
    for (j, data) in datasets.iter().enumerate() {
        if let Some((i, x)) = data.iter().enumerate().find(|(_, x)| x.len() != dim) {
            return Err(HdpError::Dimension { dataset: j, index: i, expected: dim, found: x.len() });
        }
    }
    let total: usize = datasets.iter().map(|d| d.len()).sum();
    let identity = || datasets.iter().map(|d| (0..d.len() as u32).collect()).collect();
    let empty_model = |history: Vec<f64>| ClusterModel {
        node_ids: identity(),
        assignments: datasets.iter().map(|d| vec![0; d.len()]).collect(),
        local_global: vec![Vec::new(); datasets.len()],
        local_centers: vec![Vec::new(); datasets.len()],
        global_centers: Vec::new(),
        lambda_local,
        lambda_global,
        objective: 0.0,
        objective_history: history,
        coherence_history: Vec::new(),
        passes: 0,
    };
    if total == 0 {
        return Ok(empty_model(Vec::new()));
    }

    let global_mean = mean_of(datasets.iter().flat_map(|d| d.iter()), dim).expect("non-empty");
    let mut s = Solver {
        data: datasets,
        dim,
        lambda_local,
        lambda_global,
        z: datasets.iter().map(|d| vec![0; d.len()]).collect(),
        v: datasets.iter().map(|d| if d.is_empty() { Vec::new() } else { vec![0] }).collect(),
        mu: vec![global_mean],
    };
    let mut history = vec![s.objective()];
    let mut passes = 0;
    while passes < MAX_PASSES {
        let before = (s.z.clone(), s.v.clone());
        s.point_pass();
        s.local_pass();
        s.update_means();
        passes += 1;
        let obj = s.objective();
        let prev = *history.last().expect("initial objective");
        if obj > prev + MONOTONE_SLACK * prev.abs().max(1.0) {
            return Err(HdpError::ObjectiveIncreased { pass: passes, before: prev, after: obj });
        }
        history.push(obj);
        if (s.z.clone(), s.v.clone()) == before {
            break;
        }
    }

    let local_centers = (0..datasets.len())
        .map(|j| {
            s.local_members(j)
                .iter()
                .map(|idx| mean_of(idx.iter().map(|&i| &datasets[j][i]), dim).expect("non-empty local"))
                .collect()
        })
        .collect();
    let objective = s.objective();
    Ok(ClusterModel {
        node_ids: identity(),
        assignments: s.z,
        local_global: s.v,
        local_centers,
        global_centers: s.mu,
        lambda_local,
        lambda_global,
        objective,
        objective_history: history,
        coherence_history: Vec::new(),
        passes,
    })
}

/// Student and problem points clustered jointly.
pub fn dp_means_hdp(
    student_points: &[Vec<f64>],
    problem_points: &[Vec<f64>],
    lambda_local: f64,
    lambda_global: f64,
) -> Result<ClusterModel, HdpError> {
    dp_means_hdp_multi(&[student_points, problem_points], lambda_local, lambda_global)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefinementConfig {
    pub lambda_local: f64,
    pub lambda_global: f64,
    pub epsilon: f64,
    pub max_iterations: usize,
    pub pair_cap: usize,
    pub seed: u64,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        RefinementConfig { lambda_local: 7.0, lambda_global: 9.0, epsilon: 1.0, max_iterations: 10, pair_cap: DEFAULT_PAIR_CAP, seed: 0 }
    }
}

impl RefinementConfig {
    /// Penalties for 32-dimensional desk embeddings, whose points sit within
    /// a squared distance of about 1 to 15 of their neighbours. The 300-d
    /// defaults never open a second cluster at that scale.
    pub fn desk_scale() -> Self {
        RefinementConfig { lambda_local: 0.5, lambda_global: 1.5, epsilon: 0.25, ..Self::default() }
    }
}

/// The refinement loop with clustering and scoring abstracted: cluster at
/// the current global penalty, score, lower the penalty by `epsilon`; keep
/// going while the score strictly improves, at most `max_iterations` times,
/// and while the penalty stays positive. Returns the best-scoring model with
/// the full score history attached.
pub fn refine_with<C, S>(cfg: &RefinementConfig, mut cluster: C, mut score: S) -> Result<ClusterModel, HdpError>
where
    C: FnMut(f64, f64) -> Result<ClusterModel, HdpError>,
    S: FnMut(&ClusterModel) -> Result<f64, HdpError>,
{
    let mut lambda_g = cfg.lambda_global;
    let mut previous = 0.0;
    let mut history = Vec::new();
    let mut best: Option<(f64, ClusterModel)> = None;
    for t in 1..=cfg.max_iterations.max(1) {
        if lambda_g <= 0.0 {
            break;
        }
        let model = cluster(cfg.lambda_local, lambda_g)?;
        let coh = score(&model)?;
        history.push(coh);
        if best.as_ref().is_none_or(|(b, _)| coh > *b) {
            best = Some((coh, model));
        }
        if !(coh > previous) || t >= cfg.max_iterations {
            break;
        }
        previous = coh;
        lambda_g -= cfg.epsilon;
    }
    let (_, mut model) = best.ok_or(HdpError::BadPenalty { local: cfg.lambda_local, global: cfg.lambda_global })?;
    model.coherence_history = history;
    Ok(model)
}

/// Trace indices of every global cluster: traces whose student and problem
/// both fall in the cluster, or, for a cluster holding only one side, every
/// trace touching that side.
pub fn cluster_traces(model: &ClusterModel, corpus: &Corpus) -> Vec<Vec<usize>> {
    let sides = model.sides();
    let mut out = vec![Vec::new(); model.n_global()];
    for (i, t) in corpus.traces().iter().enumerate() {
        let (Some(gs), Some(gp)) = (model.global_of_node(STUDENTS, t.student.0), model.global_of_node(PROBLEMS, t.problem.0)) else {
            continue;
        };
        if gs == gp {
            out[gs].push(i);
            continue;
        }
        if !sides[gs][PROBLEMS] {
            out[gs].push(i);
        }
        if !sides[gp][STUDENTS] {
            out[gp].push(i);
        }
    }
    out
}

pub fn strategies_of_cluster(model: &ClusterModel, corpus: &Corpus, p: usize) -> Result<Vec<usize>, HdpError> {
    if p >= model.n_global() {
        return Err(HdpError::NoSuchCluster(p));
    }
    Ok(cluster_traces(model, corpus).swap_remove(p))
}

/// Positional strategies for every trace. KCs without an embedding
/// contribute only their positional encoding.
pub fn positional_strategies(corpus: &Corpus, embeddings: &EmbeddingSet) -> Result<Vec<PositionalStrategy>, HdpError> {
    let dim = embeddings.dim();
    let pe = PositionalEncoding::new(dim, corpus.max_trace_len());
    let zero = vec![0.0; dim];
    corpus
        .traces()
        .iter()
        .map(|t| {
            let vecs: Vec<&[f64]> = t.kcs.iter().map(|&k| embeddings.kc(k).unwrap_or(&zero)).collect();
            PositionalStrategy::new(&vecs, &pe).map_err(HdpError::from)
        })
        .collect()
}

/// Points of every student and problem that has a trace in the corpus and an
/// embedding, in id order, with their ids.
pub struct CorpusPoints {
    pub student_ids: Vec<u32>,
    pub students: Vec<Vec<f64>>,
    pub problem_ids: Vec<u32>,
    pub problems: Vec<Vec<f64>>,
}

pub fn corpus_points(corpus: &Corpus, embeddings: &EmbeddingSet) -> CorpusPoints {
    let mut has_s = vec![false; corpus.students().len()];
    let mut has_p = vec![false; corpus.problems().len()];
    for t in corpus.traces() {
        has_s[t.student.index()] = true;
        has_p[t.problem.index()] = true;
    }
    let mut out = CorpusPoints { student_ids: Vec::new(), students: Vec::new(), problem_ids: Vec::new(), problems: Vec::new() };
    for (i, _) in has_s.iter().enumerate().filter(|(_, &h)| h) {
        if let Some(v) = embeddings.student(StudentId(i as u32)) {
            out.student_ids.push(i as u32);
            out.students.push(v.to_vec());
        }
    }
    for (i, _) in has_p.iter().enumerate().filter(|(_, &h)| h) {
        if let Some(v) = embeddings.problem(ProblemId(i as u32)) {
            out.problem_ids.push(i as u32);
            out.problems.push(v.to_vec());
        }
    }
    out
}

/// Coherence of a clustering over the corpus strategies.
pub fn model_coherence(
    model: &ClusterModel,
    corpus: &Corpus,
    strategies: &[PositionalStrategy],
    pair_cap: usize,
    seed: u64,
) -> Result<f64, HdpError> {
    let groups = cluster_traces(model, corpus);
    Ok(cluster_coherence(&groups, strategies, pair_cap, seed)?)
}

/// Coarse-to-fine refinement of the joint student/problem clustering.
pub fn coarse_to_fine(corpus: &Corpus, embeddings: &EmbeddingSet, cfg: &RefinementConfig) -> Result<ClusterModel, HdpError> {
    let pts = corpus_points(corpus, embeddings);
    if pts.students.is_empty() && pts.problems.is_empty() {
        return Err(HdpError::NoPoints);
    }
    let ids = vec![pts.student_ids.clone(), pts.problem_ids.clone()];
    let strategies = positional_strategies(corpus, embeddings)?;
    refine_with(
        cfg,
        |ll, lg| {
            let mut m = dp_means_hdp(&pts.students, &pts.problems, ll, lg)?;
            m.node_ids = ids.clone();
            Ok(m)
        },
        |m| model_coherence(m, corpus, &strategies, cfg.pair_cap, cfg.seed),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(v: &[[f64; 2]]) -> Vec<Vec<f64>> {
        v.iter().map(|p| p.to_vec()).collect()
    }

    #[test]
    fn far_apart_points_open_two_clusters() {
        let m = dp_means_hdp(&pts(&[[0.0, 0.0]]), &pts(&[[10.0, 10.0]]), 1.0, 1.0).unwrap();
        assert_eq!(m.n_global(), 2);
        assert_eq!(m.n_local(), 2);
        assert!(m.is_valid_partition());
    }

    #[test]
    fn huge_penalties_keep_one_global_cluster() {
        let s = pts(&[[0.0, 0.0], [1.0, 0.5], [0.3, 2.0]]);
        let p = pts(&[[2.0, 1.0], [-1.0, 0.0]]);
        let m = dp_means_hdp(&s, &p, 1e6, 1e6).unwrap();
        assert_eq!(m.n_global(), 1);
        assert!((m.objective - m.recompute_objective(&[&s, &p])).abs() < 1e-6);
    }

    #[test]
    fn empty_input_is_empty_model() {
        let m = dp_means_hdp(&[], &[], 1.0, 1.0).unwrap();
        assert_eq!(m.n_global(), 0);
        assert!(m.is_valid_partition());
    }

    #[test]
    fn rejects_bad_penalties_and_dimensions() {
        assert!(matches!(dp_means_hdp(&[], &[], 0.0, 1.0), Err(HdpError::BadPenalty { .. })));
        let s = pts(&[[0.0, 0.0]]);
        let p = vec![vec![1.0]];
        assert!(matches!(dp_means_hdp(&s, &p, 1.0, 1.0), Err(HdpError::Dimension { .. })));
    }

    fn fake_model(tag: f64) -> ClusterModel {
        let mut m = dp_means_hdp(&pts(&[[0.0, 0.0]]), &[], 1.0, 1.0).unwrap();
        m.lambda_global = tag;
        m
    }

    #[test]
    fn refinement_returns_best_of_history() {
        let scores = [0.4, 0.6, 0.55, 0.9];
        let mut i = 0;
        let cfg = RefinementConfig { lambda_global: 9.0, max_iterations: 10, ..Default::default() };
        let m = refine_with(&cfg, |_, lg| Ok(fake_model(lg)), |_| {
            i += 1;
            Ok(scores[i - 1])
        })
        .unwrap();
        assert_eq!(m.coherence_history, [0.4, 0.6, 0.55]);
        assert_eq!(m.lambda_global, 8.0);
    }

    #[test]
    fn single_iteration_budget() {
        let cfg = RefinementConfig { max_iterations: 1, ..Default::default() };
        let mut calls = 0;
        let m = refine_with(&cfg, |_, lg| {
            calls += 1;
            Ok(fake_model(lg))
        }, |_| Ok(0.5))
        .unwrap();
        assert_eq!(calls, 1);
        assert_eq!(m.lambda_global, 9.0);
    }

    #[test]
    fn penalty_exhaustion_stops_refinement() {
        let cfg = RefinementConfig { lambda_global: 2.0, epsilon: 1.0, max_iterations: 50, ..Default::default() };
        let mut k = 0.0;
        let m = refine_with(&cfg, |_, lg| Ok(fake_model(lg)), |_| {
            k += 0.1;
            Ok(k)
        })
        .unwrap();
        assert_eq!(m.coherence_history.len(), 2);
        assert_eq!(m.lambda_global, 1.0);
    }
}
