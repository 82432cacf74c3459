//! Mastery-weighted node embeddings.
//!
//! Paths ⟨student, KC, problem⟩ are drawn online from a factored
//! distribution: a uniform student, a KC weighted by the student's mean
//! mastery per opportunity, then a problem weighted by the mastery shown on
//! it. A skip-gram model with negative sampling turns the paths into vectors.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use thiserror::Error;

use crate::corpus::{Corpus, KcId, ProblemId, StudentId};
use crate::mastery::MasteryTable;
use crate::rng;

pub const WALKS_PER_TRACE: usize = 50;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MvecError {
    #[error("invalid walk config: {0}")]
    Config(&'static str),
    #[error("no walks to train on")]
    NoWalks,
    #[error("no mastery score for student {student}, problem {problem}, kc {kc}")]
    MissingAlpha { student: u32, problem: u32, kc: u32 },
    #[error("embedding of length {found}, expected {expected}")]
    Dimension { expected: usize, found: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct WalkConfig {
    /// Number of paths; `None` means 50 per trace.
    pub n_walks: Option<usize>,
    pub embed_dim: usize,
    pub window: usize,
    pub negatives: usize,
    pub sg_epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for WalkConfig {
    fn default() -> Self {
        WalkConfig { n_walks: None, embed_dim: 32, window: 2, negatives: 5, sg_epochs: 2, learning_rate: 0.025, seed: 0 }
    }
}

impl WalkConfig {
    pub fn paper_scale() -> Self {
        WalkConfig { embed_dim: 300, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), MvecError> {
        if self.embed_dim == 0 {
            return Err(MvecError::Config("embed_dim must be positive"));
        }
        if self.window < 2 {
            return Err(MvecError::Config("window must be at least 2"));
        }
        if self.negatives == 0 || self.sg_epochs == 0 {
            return Err(MvecError::Config("negatives and sg_epochs must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(MvecError::Config("learning_rate must be positive"));
        }
        if self.n_walks == Some(0) {
            return Err(MvecError::Config("n_walks must be positive"));
        }
        Ok(())
    }

    pub fn walk_budget(&self, corpus: &Corpus) -> usize {
        self.n_walks.unwrap_or(WALKS_PER_TRACE * corpus.len())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Node {
    Student(StudentId),
    Kc(KcId),
    Problem(ProblemId),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Walk {
    pub student: StudentId,
    pub kc: KcId,
    pub problem: ProblemId,
}

impl Walk {
    pub fn nodes(&self) -> [Node; 3] {
        [Node::Student(self.student), Node::Kc(self.kc), Node::Problem(self.problem)]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KcChoice {
    pub kc: KcId,
    pub prob: f64,
    pub problems: Vec<(ProblemId, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudentTable {
    pub student: StudentId,
    pub kcs: Vec<KcChoice>,
}

/// Q(K|S) and Q(P|K,S) for every student with at least one trace.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingTables {
    pub students: Vec<StudentTable>,
    /// Contexts whose weights summed to zero and fell back to uniform.
    pub fallbacks: usize,
}

fn normalize(w: &mut [f64]) -> bool {
    let total: f64 = w.iter().sum();
    if total > 0.0 {
        for x in w.iter_mut() {
            *x /= total;
        }
        false
    } else {
        let u = 1.0 / w.len() as f64;
        w.iter_mut().for_each(|x| *x = u);
        true
    }
}

/// Without a mastery table every observed (student, problem, KC) triple
/// gets the same weight.
pub fn build_sampling_tables(corpus: &Corpus, mastery: Option<&MasteryTable>) -> Result<SamplingTables, MvecError> {
    let mut students = Vec::new();
    let mut fallbacks = 0;
    for s in 0..corpus.students().len() as u32 {
        let s = StudentId(s);
        // kc -> (opportunities, problem -> weight)
        let mut seen: BTreeMap<KcId, (usize, BTreeMap<ProblemId, f64>)> = BTreeMap::new();
        for &t in corpus.traces_of_student(s) {
            let tr = &corpus.traces()[t];
            for &k in &tr.kcs {
                let e = seen.entry(k).or_insert((0, BTreeMap::new()));
                e.0 += 1;
                if e.1.contains_key(&tr.problem) {
                    continue;
                }
                let w = match mastery {
                    Some(m) => m.get(s, tr.problem, k).ok_or(MvecError::MissingAlpha { student: s.0, problem: tr.problem.0, kc: k.0 })?,
                    None => 1.0,
                };
                e.1.insert(tr.problem, w);
            }
        }
        if seen.is_empty() {
            continue;
        }
        let mut kc_w = Vec::with_capacity(seen.len());
        let mut kcs = Vec::with_capacity(seen.len());
        for (k, (opps, probs)) in seen {
            let total: f64 = probs.values().sum();
            kc_w.push(match mastery {
                Some(_) => total / opps as f64,
                None => probs.len() as f64,
            });
            let mut pw: Vec<f64> = probs.values().copied().collect();
            fallbacks += normalize(&mut pw) as usize;
            kcs.push(KcChoice { kc: k, prob: 0.0, problems: probs.keys().copied().zip(pw).collect() });
        }
        fallbacks += normalize(&mut kc_w) as usize;
        for (c, w) in kcs.iter_mut().zip(kc_w) {
            c.prob = w;
        }
        students.push(StudentTable { student: s, kcs });
    }
    Ok(SamplingTables { students, fallbacks })
}

/// Index drawn from cumulative weights that sum to one.
fn draw<R: Rng>(rng: &mut R, probs: impl Iterator<Item = f64> + Clone) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in probs.enumerate() {
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

pub fn sample_walks(tables: &SamplingTables, n: usize, seed: u64) -> Vec<Walk> {
    if tables.students.is_empty() {
        return Vec::new();
    }
    let mut r = rng::stream(seed, "mvec-walks");
    (0..n)
        .map(|_| {
            let st = &tables.students[r.gen_range(0..tables.students.len())];
            let kc = &st.kcs[draw(&mut r, st.kcs.iter().map(|c| c.prob))];
            let p = kc.problems[draw(&mut r, kc.problems.iter().map(|x| x.1))].0;
            Walk { student: st.student, kc: kc.kc, problem: p }
        })
        .collect()
}

/// Vectors for students, problems and KCs, indexed by corpus id.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    dim: usize,
    students: Vec<Option<Vec<f64>>>,
    problems: Vec<Option<Vec<f64>>>,
    kcs: Vec<Option<Vec<f64>>>,
}

impl EmbeddingSet {
    pub fn new(dim: usize, n_students: usize, n_problems: usize, n_kcs: usize) -> Self {
        EmbeddingSet { dim, students: vec![None; n_students], problems: vec![None; n_problems], kcs: vec![None; n_kcs] }
    }

    pub fn for_corpus(dim: usize, corpus: &Corpus) -> Self {
        Self::new(dim, corpus.students().len(), corpus.problems().len(), corpus.kc_vocab().len())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn slot(&self, node: Node) -> Option<&Option<Vec<f64>>> {
        match node {
            Node::Student(s) => self.students.get(s.index()),
            Node::Kc(k) => self.kcs.get(k.index()),
            Node::Problem(p) => self.problems.get(p.index()),
        }
    }

    pub fn get(&self, node: Node) -> Option<&[f64]> {
        self.slot(node).and_then(|v| v.as_deref())
    }

    pub fn student(&self, s: StudentId) -> Option<&[f64]> {
        self.get(Node::Student(s))
    }

    pub fn problem(&self, p: ProblemId) -> Option<&[f64]> {
        self.get(Node::Problem(p))
    }

    pub fn kc(&self, k: KcId) -> Option<&[f64]> {
        self.get(Node::Kc(k))
    }

    pub fn insert(&mut self, node: Node, v: Vec<f64>) -> Result<(), MvecError> {
        if v.len() != self.dim {
            return Err(MvecError::Dimension { expected: self.dim, found: v.len() });
        }
        let (table, i) = match node {
            Node::Student(s) => (&mut self.students, s.index()),
            Node::Kc(k) => (&mut self.kcs, k.index()),
            Node::Problem(p) => (&mut self.problems, p.index()),
        };
        if table.len() <= i {
            table.resize(i + 1, None);
        }
        table[i] = Some(v);
        Ok(())
    }

    /// Present vectors in student, problem, KC order.
    pub fn iter(&self) -> impl Iterator<Item = (Node, &[f64])> + '_ {
        let s = self.students.iter().enumerate().filter_map(|(i, v)| v.as_deref().map(|v| (Node::Student(StudentId(i as u32)), v)));
        let p = self.problems.iter().enumerate().filter_map(|(i, v)| v.as_deref().map(|v| (Node::Problem(ProblemId(i as u32)), v)));
        let k = self.kcs.iter().enumerate().filter_map(|(i, v)| v.as_deref().map(|v| (Node::Kc(KcId(i as u32)), v)));
        s.chain(p).chain(k)
    }

    pub fn len(&self) -> usize {
        self.iter().count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = libm::sqrt(a.iter().map(|x| x * x).sum::<f64>());
    let nb = libm::sqrt(b.iter().map(|x| x * x).sum::<f64>());
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Skip-gram with negative sampling over the walks. Each node predicts the
/// others within `window` positions; negatives come from the unigram
/// distribution raised to 3/4.
pub fn train_skipgram(walks: &[Walk], n_students: usize, n_problems: usize, n_kcs: usize, cfg: &WalkConfig) -> Result<EmbeddingSet, MvecError> {
    cfg.validate()?;
    if walks.is_empty() {
        return Err(MvecError::NoWalks);
    }
    let n_students = n_students.max(walks.iter().map(|w| w.student.index() + 1).max().unwrap_or(0));
    let n_problems = n_problems.max(walks.iter().map(|w| w.problem.index() + 1).max().unwrap_or(0));
    let n_kcs = n_kcs.max(walks.iter().map(|w| w.kc.index() + 1).max().unwrap_or(0));
    let flat = |n: Node| match n {
        Node::Student(s) => s.index(),
        Node::Kc(k) => n_students + k.index(),
        Node::Problem(p) => n_students + n_kcs + p.index(),
    };
    let vocab = n_students + n_kcs + n_problems;
    let d = cfg.embed_dim;

    let mut counts = vec![0usize; vocab];
    for w in walks {
        for n in w.nodes() {
            counts[flat(n)] += 1;
        }
    }
    let mut cumulative = Vec::with_capacity(vocab);
    let mut acc = 0.0;
    for &c in &counts {
        acc += libm::pow(c as f64, 0.75);
        cumulative.push(acc);
    }

    let mut r = rng::stream(cfg.seed, "mvec-skipgram");
    let mut syn0: Vec<f64> = (0..vocab * d).map(|_| (r.gen::<f64>() - 0.5) / d as f64).collect();
    let mut syn1 = vec![0.0; vocab * d];
    let mut grad = vec![0.0; d];
    let total_steps = (cfg.sg_epochs * walks.len()) as f64;
    let mut step = 0usize;
    for _ in 0..cfg.sg_epochs {
        for w in walks {
            let lr = (cfg.learning_rate * (1.0 - step as f64 / total_steps)).max(cfg.learning_rate * 1e-4);
            step += 1;
            let ids = w.nodes().map(flat);
            for (i, &center) in ids.iter().enumerate() {
                for (j, &ctx) in ids.iter().enumerate() {
                    if i == j || i.abs_diff(j) > cfg.window {
                        continue;
                    }
                    grad.iter_mut().for_each(|g| *g = 0.0);
                    for n in 0..=cfg.negatives {
                        let (target, label) = if n == 0 {
                            (ctx, 1.0)
                        } else {
                            let u = r.gen::<f64>() * acc;
                            let t = cumulative.partition_point(|&c| c <= u).min(vocab - 1);
                            if t == ctx {
                                continue;
                            }
                            (t, 0.0)
                        };
                        let v_in = &syn0[center * d..(center + 1) * d];
                        let v_out = &mut syn1[target * d..(target + 1) * d];
                        let dot: f64 = v_in.iter().zip(v_out.iter()).map(|(a, b)| a * b).sum();
                        let g = (label - crate::tensor::sigmoid(dot)) * lr;
                        for k in 0..d {
                            grad[k] += g * v_out[k];
                            v_out[k] += g * v_in[k];
                        }
                    }
                    for (x, g) in syn0[center * d..(center + 1) * d].iter_mut().zip(&grad) {
                        *x += g;
                    }
                }
            }
        }
    }

    let mut out = EmbeddingSet::new(d, n_students, n_problems, n_kcs);
    let mut seen = vec![false; vocab];
    for w in walks {
        for n in w.nodes() {
            let i = flat(n);
            if !seen[i] {
                seen[i] = true;
                out.insert(n, syn0[i * d..(i + 1) * d].to_vec())?;
            }
        }
    }
    Ok(out)
}

/// Tables, walks and skip-gram end to end.
pub fn generate_mvec(corpus: &Corpus, mastery: Option<&MasteryTable>, cfg: &WalkConfig) -> Result<EmbeddingSet, MvecError> {
    cfg.validate()?;
    let tables = build_sampling_tables(corpus, mastery)?;
    let walks = sample_walks(&tables, cfg.walk_budget(corpus), cfg.seed);
    train_skipgram(&walks, corpus.students().len(), corpus.problems().len(), corpus.kc_vocab().len(), cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::TransactionRecord;

    fn rec(s: &str, p: &str, step: u32, kc: &str, cfa: bool) -> TransactionRecord {
        TransactionRecord {
            student_id: s.into(),
            problem_id: p.into(),
            unit_id: "u".into(),
            section_id: "sec".into(),
            step_index: step,
            kc_id: kc.into(),
            cfa,
        }
    }

    fn two_kc_corpus() -> Corpus {
        Corpus::consolidate(&[rec("s", "p1", 0, "k1", true), rec("s", "p2", 0, "k2", false)]).unwrap()
    }

    #[test]
    fn single_triple_is_certain() {
        let c = Corpus::consolidate(&[rec("s", "p", 0, "k", true)]).unwrap();
        let t = build_sampling_tables(&c, None).unwrap();
        assert_eq!(t.students[0].kcs[0].prob, 1.0);
        assert_eq!(t.students[0].kcs[0].problems[0].1, 1.0);
        let walks = sample_walks(&t, 10, 0);
        assert!(walks.iter().all(|w| *w == walks[0]));
        assert!(sample_walks(&t, 0, 0).is_empty());
    }

    #[test]
    fn mastery_weights_normalize_per_context() {
        let c = two_kc_corpus();
        let mut m = MasteryTable::new();
        m.insert(StudentId(0), ProblemId(0), KcId(0), 0.9).unwrap();
        m.insert(StudentId(0), ProblemId(1), KcId(1), 0.3).unwrap();
        let t = build_sampling_tables(&c, Some(&m)).unwrap();
        assert!((t.students[0].kcs[0].prob - 0.75).abs() < 1e-12);
        let mut eq = MasteryTable::new();
        eq.insert(StudentId(0), ProblemId(0), KcId(0), 0.4).unwrap();
        eq.insert(StudentId(0), ProblemId(1), KcId(1), 0.4).unwrap();
        let t = build_sampling_tables(&c, Some(&eq)).unwrap();
        assert_eq!(t.students[0].kcs[0].prob, 0.5);
    }

    #[test]
    fn zero_mastery_falls_back_to_uniform() {
        let c = two_kc_corpus();
        let mut m = MasteryTable::new();
        m.insert(StudentId(0), ProblemId(0), KcId(0), 0.0).unwrap();
        m.insert(StudentId(0), ProblemId(1), KcId(1), 0.0).unwrap();
        let t = build_sampling_tables(&c, Some(&m)).unwrap();
        assert_eq!(t.students[0].kcs[1].prob, 0.5);
        assert!(t.fallbacks > 0);
    }

    #[test]
    fn missing_alpha_is_an_error() {
        let c = two_kc_corpus();
        assert!(matches!(build_sampling_tables(&c, Some(&MasteryTable::new())), Err(MvecError::MissingAlpha { .. })));
    }

    #[test]
    fn single_walk_embeds_all_three_nodes() {
        let w = Walk { student: StudentId(0), kc: KcId(0), problem: ProblemId(0) };
        let e = train_skipgram(&[w; 20], 1, 1, 1, &WalkConfig::default()).unwrap();
        for n in w.nodes() {
            let v = e.get(n).unwrap();
            assert_eq!(v.len(), 32);
            assert!(v.iter().all(|x| x.is_finite()));
        }
        assert_eq!(e.get(Node::Student(StudentId(3))), None);
    }

    #[test]
    fn embedding_insert_checks_dimension() {
        let mut e = EmbeddingSet::new(2, 1, 1, 1);
        assert!(e.insert(Node::Kc(KcId(0)), vec![1.0]).is_err());
        e.insert(Node::Kc(KcId(0)), vec![1.0, 0.0]).unwrap();
        assert_eq!(e.len(), 1);
    }
}
