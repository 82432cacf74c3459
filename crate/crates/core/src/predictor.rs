//! One-to-many LSTM strategy predictor.
//!
//! The concatenated student and problem embeddings enter at the first step;
//! later steps see a zero input. Each step emits a distribution over the KC
//! vocabulary plus a stop symbol, and decoding is greedy.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::corpus::{Corpus, KcId};
use crate::mvec::EmbeddingSet;
use crate::rng;
use crate::tensor::gradcheck;
use crate::tensor::{softmax_in_place, AdamConfig, Matrix, ParamId, ParamStore, Tape, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PredictorError {
    #[error("no embedding for {kind} {name:?}")]
    MissingEmbedding { kind: &'static str, name: alloc::string::String },
    #[error("no training examples")]
    NoData,
    #[error("invalid predictor config: {0}")]
    Config(&'static str),
    #[error("input has width {found}, expected {expected}")]
    InputWidth { expected: usize, found: usize },
    #[error("target KC {kc} outside vocabulary of {vocab}")]
    UnknownKc { kc: usize, vocab: usize },
    #[error("max_decode_len {cap} is shorter than the longest strategy ({longest}) plus stop")]
    DecodeCap { cap: usize, longest: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Greedy decoder output: KCs without the stop symbol, and the softmax over
/// KCs plus stop at every emitted step (including the one that chose stop).
#[derive(Clone, Debug, PartialEq)]
pub struct StrategyPrediction {
    pub kcs: Vec<KcId>,
    pub probs: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictorConfig {
    pub latent_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub dropout_rate: f64,
    /// Decoding cap; `None` means the longest training strategy plus one.
    pub max_decode_len: Option<usize>,
    pub seed: u64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig {
            latent_dim: 64,
            epochs: 30,
            batch_size: 30,
            learning_rate: 0.01,
            dropout_rate: 0.1,
            max_decode_len: None,
            seed: 0,
        }
    }
}

impl PredictorConfig {
    pub fn paper_scale() -> Self {
        PredictorConfig { latent_dim: 200, epochs: 60, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), PredictorError> {
        if self.latent_dim == 0 || self.batch_size == 0 {
            return Err(PredictorError::Config("latent_dim and batch_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(PredictorError::Config("dropout_rate must be in [0, 1)"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(PredictorError::Config("learning_rate must be positive"));
        }
        Ok(())
    }
}

/// One training or evaluation instance: the joint input vector and the KC
/// sequence to emit.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub trace: usize,
    pub input: Vec<f64>,
    pub target: Vec<KcId>,
}

/// Builds examples for the given traces from student and problem vectors.
pub fn examples(corpus: &Corpus, traces: &[usize], embeddings: &EmbeddingSet) -> Result<Vec<Example>, PredictorError> {
    traces
        .iter()
        .map(|&i| {
            let t = &corpus.traces()[i];
            let s = embeddings.student(t.student).ok_or_else(|| PredictorError::MissingEmbedding {
                kind: "student",
                name: corpus.student_name(t.student).into(),
            })?;
            let p = embeddings.problem(t.problem).ok_or_else(|| PredictorError::MissingEmbedding {
                kind: "problem",
                name: corpus.problem_name(t.problem).into(),
            })?;
            let mut input = s.to_vec();
            input.extend_from_slice(p);
            Ok(Example { trace: i, input, target: t.kcs.clone() })
        })
        .collect()
}

#[derive(Clone, Debug)]
struct Layout {
    w: ParamId,
    u: ParamId,
    b: ParamId,
    wy: ParamId,
    by: ParamId,
}

#[derive(Clone, Debug)]
pub struct Predictor {
    config: PredictorConfig,
    input_dim: usize,
    n_kcs: usize,
    max_len: usize,
    store: ParamStore,
    layout: Layout,
    pub loss_history: Vec<f64>,
}

fn init<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, rows: usize, cols: usize) -> Result<ParamId, TensorError> {
    let s = 1.0 / libm::sqrt(rows as f64);
    store.add(name, Matrix::from_fn(rows, cols, |_, _| rng::normal(rng) * s))
}

impl Predictor {
    /// `max_len` caps greedy decoding, stop step included.
    pub fn new(input_dim: usize, n_kcs: usize, max_len: usize, config: &PredictorConfig) -> Result<Self, PredictorError> {
        config.validate()?;
        if input_dim == 0 || n_kcs == 0 {
            return Err(PredictorError::Config("input and vocabulary sizes must be positive"));
        }
        let h = config.latent_dim;
        let mut r = rng::stream(config.seed, "predictor-init");
        let mut store = ParamStore::new();
        let w = init(&mut store, &mut r, "lstm.w", input_dim, 4 * h)?;
        let u = init(&mut store, &mut r, "lstm.u", h, 4 * h)?;
        // forget-gate bias starts at one
        let b = store.add("lstm.b", Matrix::from_fn(1, 4 * h, |_, j| if (h..2 * h).contains(&j) { 1.0 } else { 0.0 }))?;
        let wy = init(&mut store, &mut r, "out.w", h, n_kcs + 1)?;
        let by = store.add("out.b", Matrix::zeros(1, n_kcs + 1))?;
        Ok(Predictor {
            config: config.clone(),
            input_dim,
            n_kcs,
            max_len: max_len.max(1),
            store,
            layout: Layout { w, u, b, wy, by },
            loss_history: Vec::new(),
        })
    }

    pub fn config(&self) -> &PredictorConfig {
        &self.config
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn n_kcs(&self) -> usize {
        self.n_kcs
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn stop_symbol(&self) -> usize {
        self.n_kcs
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Runs `steps` LSTM steps for a batch of inputs (one per row) and
    /// returns the logits of every step.
    fn unroll<R: Rng>(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        inputs: &Matrix,
        steps: usize,
        mut drop: Option<&mut R>,
    ) -> Result<Vec<Var>, TensorError> {
        let h = self.config.latent_dim;
        let n = inputs.rows();
        let l = &self.layout;
        let w = tape.param(store, l.w)?;
        let u = tape.param(store, l.u)?;
        let b = tape.param(store, l.b)?;
        let wy = tape.param(store, l.wy)?;
        let by = tape.param(store, l.by)?;
        let x = tape.input(inputs.clone())?;
        let xw = tape.matmul(x, w)?;
        let mut hs = tape.input(Matrix::zeros(n, h))?;
        let mut cs = hs;
        let mut out = Vec::with_capacity(steps);
        for t in 0..steps {
            let hu = tape.matmul(hs, u)?;
            let pre = if t == 0 { tape.add(xw, hu)? } else { hu };
            let pre = tape.add_row(pre, b)?;
            let i = tape.slice_cols(pre, 0, h)?;
            let i = tape.sigmoid(i)?;
            let f = tape.slice_cols(pre, h, h)?;
            let f = tape.sigmoid(f)?;
            let g = tape.slice_cols(pre, 2 * h, h)?;
            let g = tape.tanh(g)?;
            let o = tape.slice_cols(pre, 3 * h, h)?;
            let o = tape.sigmoid(o)?;
            let fc = tape.hadamard(f, cs)?;
            let ig = tape.hadamard(i, g)?;
            cs = tape.add(fc, ig)?;
            let tc = tape.tanh(cs)?;
            hs = tape.hadamard(o, tc)?;
            let mut hd = hs;
            if let Some(r) = drop.as_mut() {
                let p = self.config.dropout_rate;
                if p > 0.0 {
                    let keep = 1.0 / (1.0 - p);
                    let mask = Matrix::from_fn(n, h, |_, _| if r.gen::<f64>() < p { 0.0 } else { keep });
                    let m = tape.input(mask)?;
                    hd = tape.hadamard(hs, m)?;
                }
            }
            let y = tape.matmul(hd, wy)?;
            out.push(tape.add_row(y, by)?);
        }
        Ok(out)
    }

    fn check_example(&self, e: &Example) -> Result<(), PredictorError> {
        if e.input.len() != self.input_dim {
            return Err(PredictorError::InputWidth { expected: self.input_dim, found: e.input.len() });
        }
        if let Some(k) = e.target.iter().find(|k| k.index() >= self.n_kcs) {
            return Err(PredictorError::UnknownKc { kc: k.index(), vocab: self.n_kcs });
        }
        Ok(())
    }

    /// Mean categorical cross-entropy over every target step (KCs then stop)
    /// of a batch.
    pub fn loss<R: Rng>(&self, store: &ParamStore, tape: &mut Tape, batch: &[&Example], drop: Option<&mut R>) -> Result<Var, PredictorError> {
        for e in batch {
            self.check_example(e)?;
        }
        let steps = batch.iter().map(|e| e.target.len() + 1).max().ok_or(PredictorError::NoData)?;
        let inputs = Matrix::from_fn(batch.len(), self.input_dim, |r, c| batch[r].input[c]);
        let logits = self.unroll(store, tape, &inputs, steps, drop)?;
        let all = tape.concat_rows(&logits)?;
        let mut targets = Vec::with_capacity(steps * batch.len());
        for t in 0..steps {
            for e in batch {
                targets.push(match t.cmp(&e.target.len()) {
                    core::cmp::Ordering::Less => Some(e.target[t].index()),
                    core::cmp::Ordering::Equal => Some(self.stop_symbol()),
                    core::cmp::Ordering::Greater => None,
                });
            }
        }
        Ok(tape.cross_entropy(all, &targets)?)
    }

    pub fn gradient_check(&self, batch: &[&Example]) -> Result<f64, PredictorError> {
        let mut store = self.store.clone();
        let checks = gradcheck::check(&mut store, gradcheck::DEFAULT_STEP, |s, t| {
            self.loss::<rng::StreamRng>(s, t, batch, None).map_err(|e| match e {
                PredictorError::Tensor(t) => t,
                _ => TensorError::EmptyTape,
            })
        })?;
        Ok(gradcheck::max_relative_error(&checks))
    }

    /// Greedy decoding for a batch of inputs.
    pub fn predict_batch(&self, inputs: &[&[f64]]) -> Result<Vec<StrategyPrediction>, PredictorError> {
        if inputs.is_empty() {
            return Ok(Vec::new());
        }
        if let Some(x) = inputs.iter().find(|x| x.len() != self.input_dim) {
            return Err(PredictorError::InputWidth { expected: self.input_dim, found: x.len() });
        }
        let m = Matrix::from_fn(inputs.len(), self.input_dim, |r, c| inputs[r][c]);
        let mut tape = Tape::new();
        let logits = self.unroll::<rng::StreamRng>(&self.store, &mut tape, &m, self.max_len, None)?;
        let mut out = vec![StrategyPrediction { kcs: Vec::new(), probs: Vec::new() }; inputs.len()];
        let mut done = vec![false; inputs.len()];
        for step in logits {
            let v = tape.value(step);
            for (r, pred) in out.iter_mut().enumerate() {
                if done[r] {
                    continue;
                }
                let mut row = v.row(r).to_vec();
                softmax_in_place(&mut row);
                let best = row.iter().enumerate().fold(0, |b, (i, &x)| if x > row[b] { i } else { b });
                pred.probs.push(row);
                if best == self.stop_symbol() {
                    done[r] = true;
                } else {
                    pred.kcs.push(KcId(best as u32));
                }
            }
        }
        Ok(out)
    }

    pub fn predict(&self, input: &[f64]) -> Result<StrategyPrediction, PredictorError> {
        Ok(self.predict_batch(&[input])?.pop().expect("one input, one prediction"))
    }
}

pub fn train_predictor(examples: &[Example], n_kcs: usize, cfg: &PredictorConfig) -> Result<Predictor, PredictorError> {
    let first = examples.first().ok_or(PredictorError::NoData)?;
    let longest = examples.iter().map(|e| e.target.len()).max().unwrap_or(0);
    let max_len = match cfg.max_decode_len {
        Some(cap) if cap < longest + 1 => return Err(PredictorError::DecodeCap { cap, longest }),
        Some(cap) => cap,
        None => longest + 1,
    };
    let mut model = Predictor::new(first.input.len(), n_kcs, max_len, cfg)?;
    for e in examples {
        model.check_example(e)?;
    }
    let adam = AdamConfig::with_lr(cfg.learning_rate);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut shuffle = rng::stream(cfg.seed, "predictor-shuffle");
    let mut drop = rng::stream(cfg.seed, "predictor-dropout");
    let mut tape = Tape::new();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut shuffle);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
            tape.clear();
            model.store.zero_grads();
            let loss = model.loss(&model.store, &mut tape, &batch, Some(&mut drop))?;
            total += tape.value(loss).get(0, 0) * batch.len() as f64;
            tape.backward(loss, &mut model.store)?;
            model.store.adam_step(&adam);
        }
        model.loss_history.push(total / examples.len() as f64);
    }
    Ok(model)
}

/// Matches over the shared prefix length divided by the longer length; two
/// empty sequences agree fully.
pub fn step_accuracy(predicted: &[KcId], actual: &[KcId]) -> f64 {
    let longest = predicted.len().max(actual.len());
    if longest == 0 {
        return 1.0;
    }
    let hits = predicted.iter().zip(actual).filter(|(a, b)| a == b).count();
    hits as f64 / longest as f64
}

/// Predictions for a set of examples, decoded in batches.
pub fn predict_examples(model: &Predictor, examples: &[Example]) -> Result<Vec<StrategyPrediction>, PredictorError> {
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(256) {
        let inputs: Vec<&[f64]> = chunk.iter().map(|e| e.input.as_slice()).collect();
        out.extend(model.predict_batch(&inputs)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ks(v: &[u32]) -> Vec<KcId> {
        v.iter().map(|&k| KcId(k)).collect()
    }

    #[test]
    fn step_accuracy_conventions() {
        assert_eq!(step_accuracy(&[], &[]), 1.0);
        assert_eq!(step_accuracy(&ks(&[1, 2, 3]), &ks(&[1, 2, 3])), 1.0);
        assert_eq!(step_accuracy(&ks(&[1, 2]), &ks(&[1, 2, 3, 4])), 0.5);
        assert_eq!(step_accuracy(&ks(&[4, 2, 3]), &ks(&[1, 2, 3])), 2.0 / 3.0);
        assert_eq!(step_accuracy(&[], &ks(&[1])), 0.0);
    }

    #[test]
    fn learns_two_distinct_sequences() {
        let a = Example { trace: 0, input: vec![1.0, 0.0], target: ks(&[0, 1, 2]) };
        let b = Example { trace: 1, input: vec![0.0, 1.0], target: ks(&[2, 2]) };
        let cfg = PredictorConfig { latent_dim: 16, epochs: 150, batch_size: 2, dropout_rate: 0.0, ..Default::default() };
        let m = train_predictor(&[a.clone(), b.clone()], 3, &cfg).unwrap();
        assert_eq!(m.predict(&a.input).unwrap().kcs, a.target);
        let pb = m.predict(&b.input).unwrap();
        assert_eq!(pb.kcs, b.target);
        assert_eq!(pb.probs.len(), 3);
        for row in &pb.probs {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        assert!(m.loss_history.last() < m.loss_history.first());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let cfg = PredictorConfig { latent_dim: 5, ..Default::default() };
        let m = Predictor::new(4, 3, 4, &cfg).unwrap();
        let a = Example { trace: 0, input: vec![0.3, -0.2, 0.5, 0.1], target: ks(&[2, 0]) };
        let b = Example { trace: 1, input: vec![-0.1, 0.4, 0.0, 0.7], target: ks(&[1]) };
        let err = m.gradient_check(&[&a, &b]).unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn untrained_model_respects_decode_cap() {
        let cfg = PredictorConfig { latent_dim: 4, ..Default::default() };
        let m = Predictor::new(2, 3, 5, &cfg).unwrap();
        let p = m.predict(&[0.5, -0.5]).unwrap();
        assert!(p.kcs.len() <= 5 && p.probs.len() <= 5);
    }

    #[test]
    fn rejects_short_decode_cap() {
        let cfg = PredictorConfig { latent_dim: 4, epochs: 1, max_decode_len: Some(2), ..Default::default() };
        let a = Example { trace: 0, input: vec![1.0], target: ks(&[0, 1]) };
        assert!(matches!(train_predictor(&[a], 3, &cfg), Err(PredictorError::DecodeCap { .. })));
    }

    #[test]
    fn rejects_bad_examples() {
        let cfg = PredictorConfig { latent_dim: 4, epochs: 1, ..Default::default() };
        let bad = Example { trace: 0, input: vec![1.0], target: ks(&[5]) };
        assert!(matches!(train_predictor(&[bad], 3, &cfg), Err(PredictorError::UnknownKc { .. })));
        assert!(matches!(train_predictor(&[], 3, &cfg), Err(PredictorError::NoData)));
    }

    #[test]
    fn training_is_deterministic() {
        let a = Example { trace: 0, input: vec![1.0, 0.5], target: ks(&[0, 1]) };
        let cfg = PredictorConfig { latent_dim: 6, epochs: 3, ..Default::default() };
        let x = train_predictor(&[a.clone()], 2, &cfg).unwrap();
        let y = train_predictor(&[a], 2, &cfg).unwrap();
        assert_eq!(x.loss_history, y.loss_history);
    }
}
