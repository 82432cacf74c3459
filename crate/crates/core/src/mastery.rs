//! Mastery estimation from encoder-decoder attention.
//!
//! A small transformer reads a strategy's KC sequence and decodes its
//! correct-first-attempt bits one at a time. Mastery of a KC on a problem is
//! the share of attention aimed at that KC which comes from steps the model
//! predicts correct.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::corpus::{Corpus, KcId, ProblemId, StudentId, UnitId};
use crate::rng;
use crate::symmetry::PositionalEncoding;
use crate::tensor::gradcheck;
use crate::tensor::{AdamConfig, Matrix, ParamId, ParamStore, Tape, TensorError, Var};

const MASK: f64 = -1e9;
const BOS: usize = 0;
pub const CFA_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MasteryError {
    #[error("sequence of length {len} exceeds max_seq_len {max}; raise max_seq_len or truncate traces")]
    SequenceTooLong { len: usize, max: usize },
    #[error("empty KC sequence")]
    EmptySequence,
    #[error("KC index {kc} outside vocabulary of {vocab}")]
    UnknownKc { kc: usize, vocab: usize },
    #[error("KC and CFA sequences differ in length ({kcs} vs {cfas})")]
    LengthMismatch { kcs: usize, cfas: usize },
    #[error("no training pairs")]
    NoData,
    #[error("invalid config: {0}")]
    Config(&'static str),
    #[error("alpha {0} outside [0, 1]")]
    AlphaRange(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct MasteryModelConfig {
    pub model_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub ff_dim: usize,
    pub max_seq_len: usize,
    pub dropout_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for MasteryModelConfig {
    fn default() -> Self {
        MasteryModelConfig {
            model_dim: 64,
            n_layers: 2,
            n_heads: 4,
            head_dim: 16,
            ff_dim: 128,
            max_seq_len: 32,
            dropout_rate: 0.1,
            epochs: 4,
            batch_size: 30,
            learning_rate: 0.001,
        }
    }
}

impl MasteryModelConfig {
    pub fn paper_scale() -> Self {
        MasteryModelConfig {
            model_dim: 512,
            n_layers: 6,
            n_heads: 8,
            head_dim: 64,
            ff_dim: 2048,
            max_seq_len: 150,
            dropout_rate: 0.1,
            epochs: 60,
            batch_size: 30,
            learning_rate: 0.01,
        }
    }

    pub fn validate(&self) -> Result<(), MasteryError> {
        if self.model_dim != self.n_heads * self.head_dim {
            return Err(MasteryError::Config("model_dim must equal n_heads * head_dim"));
        }
        if self.model_dim == 0 || self.n_layers == 0 || self.ff_dim == 0 || self.max_seq_len == 0 {
            return Err(MasteryError::Config("sizes must be positive"));
        }
        if self.batch_size == 0 {
            return Err(MasteryError::Config("batch_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(MasteryError::Config("dropout_rate must be in [0, 1)"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(MasteryError::Config("learning_rate must be positive"));
        }
        Ok(())
    }
}

/// One KC sequence with its observed CFA bits.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingPair {
    pub trace: usize,
    pub kcs: Vec<KcId>,
    pub cfas: Vec<bool>,
}

/// Units in which the student worked every section.
fn completed_units(corpus: &Corpus, s: StudentId) -> Vec<UnitId> {
    let cur = corpus.curriculum();
    let mut seen = BTreeMap::new();
    for &t in corpus.traces_of_student(s) {
        seen.insert(corpus.traces()[t].section, ());
    }
    (0..cur.units.len() as u32)
        .map(UnitId)
        .filter(|&u| {
            let mut secs = cur.sections_of_unit(u).peekable();
            secs.peek().is_some() && secs.all(|sec| seen.contains_key(&sec))
        })
        .collect()
}

/// One pair per student, completed unit and worked section, taking the
/// lexicographically first problem of the section the student attempted.
pub fn build_training_set(corpus: &Corpus) -> Vec<TrainingPair> {
    let mut out = Vec::new();
    for s in 0..corpus.students().len() as u32 {
        let s = StudentId(s);
        let units = completed_units(corpus, s);
        let mut first: BTreeMap<_, usize> = BTreeMap::new();
        for &t in corpus.traces_of_student(s) {
            let tr = &corpus.traces()[t];
            if !units.contains(&corpus.curriculum().unit_of_section(tr.section)) {
                continue;
            }
            let name = corpus.problem_name(tr.problem);
            first
                .entry(tr.section)
                .and_modify(|cur: &mut usize| {
                    if name < corpus.problem_name(corpus.traces()[*cur].problem) {
                        *cur = t;
                    }
                })
                .or_insert(t);
        }
        for (_, t) in first {
            let tr = &corpus.traces()[t];
            out.push(TrainingPair { trace: t, kcs: tr.kcs.clone(), cfas: tr.cfas.clone() });
        }
    }
    out
}

#[derive(Clone, Debug)]
struct AttnParams {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
}

#[derive(Clone, Debug)]
struct FfnParams {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    attn: AttnParams,
    ffn: FfnParams,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    self_attn: AttnParams,
    cross_attn: AttnParams,
    ffn: FfnParams,
}

#[derive(Clone, Debug)]
struct Layout {
    kc_embed: ParamId,
    cfa_embed: ParamId,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    out_w: ParamId,
    out_b: ParamId,
}

fn init<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, rows: usize, cols: usize, scale: f64) -> Result<ParamId, TensorError> {
    store.add(name, Matrix::from_fn(rows, cols, |_, _| rng::normal(rng) * scale))
}

fn zeros(store: &mut ParamStore, name: &str, cols: usize) -> Result<ParamId, TensorError> {
    store.add(name, Matrix::zeros(1, cols))
}

fn attn_params<R: Rng>(store: &mut ParamStore, rng: &mut R, prefix: &str, d: usize) -> Result<AttnParams, TensorError> {
    let s = 1.0 / libm::sqrt(d as f64);
    Ok(AttnParams {
        wq: init(store, rng, &format!("{prefix}.wq"), d, d, s)?,
        wk: init(store, rng, &format!("{prefix}.wk"), d, d, s)?,
        wv: init(store, rng, &format!("{prefix}.wv"), d, d, s)?,
        wo: init(store, rng, &format!("{prefix}.wo"), d, d, s)?,
    })
}

fn ffn_params<R: Rng>(store: &mut ParamStore, rng: &mut R, prefix: &str, d: usize, ff: usize) -> Result<FfnParams, TensorError> {
    Ok(FfnParams {
        w1: init(store, rng, &format!("{prefix}.w1"), d, ff, 1.0 / libm::sqrt(d as f64))?,
        b1: zeros(store, &format!("{prefix}.b1"), ff)?,
        w2: init(store, rng, &format!("{prefix}.w2"), ff, d, 1.0 / libm::sqrt(ff as f64))?,
        b2: zeros(store, &format!("{prefix}.b2"), d)?,
    })
}

/// Per-step attention over encoder positions and the thresholded CFA guess.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionSnapshot {
    pub attention: Vec<Vec<f64>>,
    pub predicted: Vec<bool>,
    pub prob_correct: Vec<f64>,
}

struct Forward {
    logits: Var,
    cross: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct MasteryModel {
    config: MasteryModelConfig,
    vocab_size: usize,
    store: ParamStore,
    layout: Layout,
    pe: PositionalEncoding,
    pub loss_history: Vec<f64>,
}

impl MasteryModel {
    pub fn new(vocab_size: usize, config: &MasteryModelConfig, seed: u64) -> Result<Self, MasteryError> {
        config.validate()?;
        if vocab_size == 0 {
            return Err(MasteryError::Config("vocabulary is empty"));
        }
        let d = config.model_dim;
        let mut r = rng::stream(seed, "mastery-init");
        let mut store = ParamStore::new();
        let kc_embed = init(&mut store, &mut r, "kc_embed", vocab_size, d, 1.0)?;
        let cfa_embed = init(&mut store, &mut r, "cfa_embed", 3, d, 1.0)?;
        let mut encoder = Vec::new();
        for l in 0..config.n_layers {
            encoder.push(EncoderLayer {
                attn: attn_params(&mut store, &mut r, &format!("enc.{l}.attn"), d)?,
                ffn: ffn_params(&mut store, &mut r, &format!("enc.{l}.ffn"), d, config.ff_dim)?,
            });
        }
        let mut decoder = Vec::new();
        for l in 0..config.n_layers {
            decoder.push(DecoderLayer {
                self_attn: attn_params(&mut store, &mut r, &format!("dec.{l}.self"), d)?,
                cross_attn: attn_params(&mut store, &mut r, &format!("dec.{l}.cross"), d)?,
                ffn: ffn_params(&mut store, &mut r, &format!("dec.{l}.ffn"), d, config.ff_dim)?,
            });
        }
        let out_w = init(&mut store, &mut r, "out.w", d, 2, 1.0 / libm::sqrt(d as f64))?;
        let out_b = zeros(&mut store, "out.b", 2)?;
        Ok(MasteryModel {
            config: config.clone(),
            vocab_size,
            store,
            layout: Layout { kc_embed, cfa_embed, encoder, decoder, out_w, out_b },
            pe: PositionalEncoding::new(d, config.max_seq_len),
            loss_history: Vec::new(),
        })
    }

    pub fn config(&self) -> &MasteryModelConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn check_sequence(&self, kcs: &[KcId]) -> Result<(), MasteryError> {
        if kcs.is_empty() {
            return Err(MasteryError::EmptySequence);
        }
        if kcs.len() > self.config.max_seq_len {
            return Err(MasteryError::SequenceTooLong { len: kcs.len(), max: self.config.max_seq_len });
        }
        if let Some(k) = kcs.iter().find(|k| k.index() >= self.vocab_size) {
            return Err(MasteryError::UnknownKc { kc: k.index(), vocab: self.vocab_size });
        }
        Ok(())
    }

    fn positions(&self, lens: &[usize]) -> Matrix {
        let d = self.config.model_dim;
        let total = lens.iter().sum();
        let mut m = Matrix::zeros(total, d);
        let mut row = 0;
        for &len in lens {
            for t in 0..len {
                m.row_mut(row).copy_from_slice(&self.pe.at(t));
                row += 1;
            }
        }
        m
    }

    fn dropout<R: Rng>(&self, tape: &mut Tape, x: Var, rng: &mut Option<&mut R>) -> Result<Var, TensorError> {
        let p = self.config.dropout_rate;
        let Some(r) = rng.as_mut() else { return Ok(x) };
        if p == 0.0 {
            return Ok(x);
        }
        let (rows, cols) = tape.value(x).shape();
        let keep = 1.0 / (1.0 - p);
        let mask = Matrix::from_fn(rows, cols, |_, _| if r.gen::<f64>() < p { 0.0 } else { keep });
        let m = tape.input(mask)?;
        tape.hadamard(x, m)
    }

    fn attention(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        p: &AttnParams,
        q_in: Var,
        kv_in: Var,
        mask: Option<Var>,
    ) -> Result<(Var, Vec<Var>), TensorError> {
        let dk = self.config.head_dim;
        let wq = tape.param(store, p.wq)?;
        let wk = tape.param(store, p.wk)?;
        let wv = tape.param(store, p.wv)?;
        let wo = tape.param(store, p.wo)?;
        let q = tape.matmul(q_in, wq)?;
        let k = tape.matmul(kv_in, wk)?;
        let v = tape.matmul(kv_in, wv)?;
        let scale = 1.0 / libm::sqrt(dk as f64);
        let mut heads = Vec::with_capacity(self.config.n_heads);
        let mut weights = Vec::with_capacity(self.config.n_heads);
        for h in 0..self.config.n_heads {
            let qh = tape.slice_cols(q, h * dk, dk)?;
            let kh = tape.slice_cols(k, h * dk, dk)?;
            let vh = tape.slice_cols(v, h * dk, dk)?;
            let s = tape.matmul_t(qh, kh)?;
            let mut s = tape.layer_scale(s, scale)?;
            if let Some(m) = mask {
                s = tape.add(s, m)?;
            }
            let a = tape.row_softmax(s)?;
            heads.push(tape.matmul(a, vh)?);
            weights.push(a);
        }
        let cat = tape.concat_cols(&heads)?;
        Ok((tape.matmul(cat, wo)?, weights))
    }

    fn ffn(&self, store: &ParamStore, tape: &mut Tape, p: &FfnParams, x: Var) -> Result<Var, TensorError> {
        let w1 = tape.param(store, p.w1)?;
        let b1 = tape.param(store, p.b1)?;
        let w2 = tape.param(store, p.w2)?;
        let b2 = tape.param(store, p.b2)?;
        let h = tape.matmul(x, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.relu(h)?;
        let o = tape.matmul(h, w2)?;
        tape.add_row(o, b2)
    }

    fn sublayer<R: Rng>(&self, tape: &mut Tape, x: Var, y: Var, rng: &mut Option<&mut R>) -> Result<Var, TensorError> {
        let y = self.dropout(tape, y, rng)?;
        let s = tape.add(x, y)?;
        tape.layer_norm(s)
    }

    /// Forward pass over several sequences stacked row-wise. Attention is
    /// masked so that no sequence sees another; the decoder is also causal.
    /// `dec_tokens[i]` holds BOS followed by previous CFA tokens and has the
    /// same length as `kcs[i]`.
    fn forward<R: Rng>(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        kcs: &[&[KcId]],
        dec_tokens: &[Vec<usize>],
        mut rng: Option<&mut R>,
    ) -> Result<Forward, TensorError> {
        let l = &self.layout;
        let lens: Vec<usize> = kcs.iter().map(|k| k.len()).collect();
        let mut owner = Vec::new();
        let mut pos = Vec::new();
        for (i, &n) in lens.iter().enumerate() {
            owner.extend(core::iter::repeat_n(i, n));
            pos.extend(0..n);
        }
        let n = owner.len();
        let block = if kcs.len() > 1 {
            Some(tape.input(Matrix::from_fn(n, n, |i, j| if owner[i] == owner[j] { 0.0 } else { MASK }))?)
        } else {
            None
        };
        let causal = tape.input(Matrix::from_fn(n, n, |i, j| if owner[i] == owner[j] && pos[j] <= pos[i] { 0.0 } else { MASK }))?;
        let pe = tape.input(self.positions(&lens))?;

        let emb = tape.param(store, l.kc_embed)?;
        let idx: Vec<usize> = kcs.iter().flat_map(|k| k.iter().map(|k| k.index())).collect();
        let x = tape.gather_rows(emb, &idx)?;
        let x = tape.add(x, pe)?;
        let mut x = self.dropout(tape, x, &mut rng)?;
        for layer in &l.encoder {
            let (a, _) = self.attention(store, tape, &layer.attn, x, x, block)?;
            x = self.sublayer(tape, x, a, &mut rng)?;
            let f = self.ffn(store, tape, &layer.ffn, x)?;
            x = self.sublayer(tape, x, f, &mut rng)?;
        }

        let cemb = tape.param(store, l.cfa_embed)?;
        let tokens: Vec<usize> = dec_tokens.iter().flatten().copied().collect();
        let y = tape.gather_rows(cemb, &tokens)?;
        let y = tape.add(y, pe)?;
        let mut y = self.dropout(tape, y, &mut rng)?;
        let mut cross = Vec::new();
        for layer in &l.decoder {
            let (a, _) = self.attention(store, tape, &layer.self_attn, y, y, Some(causal))?;
            y = self.sublayer(tape, y, a, &mut rng)?;
            let (c, w) = self.attention(store, tape, &layer.cross_attn, y, x, block)?;
            y = self.sublayer(tape, y, c, &mut rng)?;
            cross = w;
            let f = self.ffn(store, tape, &layer.ffn, y)?;
            y = self.sublayer(tape, y, f, &mut rng)?;
        }
        let w = tape.param(store, l.out_w)?;
        let b = tape.param(store, l.out_b)?;
        let logits = tape.matmul(y, w)?;
        let logits = tape.add_row(logits, b)?;
        Ok(Forward { logits, cross })
    }

    fn teacher_tokens(cfas: &[bool]) -> Vec<usize> {
        let mut t = Vec::with_capacity(cfas.len());
        t.push(BOS);
        t.extend(cfas.iter().take(cfas.len().saturating_sub(1)).map(|&c| 1 + c as usize));
        t
    }

    fn check_pair(&self, kcs: &[KcId], cfas: &[bool]) -> Result<(), MasteryError> {
        self.check_sequence(kcs)?;
        if kcs.len() != cfas.len() {
            return Err(MasteryError::LengthMismatch { kcs: kcs.len(), cfas: cfas.len() });
        }
        Ok(())
    }

    /// Teacher-forced cross-entropy, averaged over every step of the given
    /// pairs, recorded on `tape`.
    pub fn loss<R: Rng>(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        pairs: &[(&[KcId], &[bool])],
        rng: Option<&mut R>,
    ) -> Result<Var, MasteryError> {
        for (k, c) in pairs {
            self.check_pair(k, c)?;
        }
        let kcs: Vec<&[KcId]> = pairs.iter().map(|p| p.0).collect();
        let tokens: Vec<Vec<usize>> = pairs.iter().map(|p| Self::teacher_tokens(p.1)).collect();
        let fwd = self.forward(store, tape, &kcs, &tokens, rng)?;
        let targets: Vec<Option<usize>> = pairs.iter().flat_map(|p| p.1.iter().map(|&c| Some(c as usize))).collect();
        Ok(tape.cross_entropy(fwd.logits, &targets)?)
    }

    /// Largest finite-difference relative error of the loss gradient on one
    /// pair, dropout disabled.
    pub fn gradient_check(&self, kcs: &[KcId], cfas: &[bool]) -> Result<f64, MasteryError> {
        self.check_pair(kcs, cfas)?;
        let mut store = self.store.clone();
        let checks = gradcheck::check(&mut store, gradcheck::DEFAULT_STEP, |s, t| {
            self.loss::<rng::StreamRng>(s, t, &[(kcs, cfas)], None).map_err(|e| match e {
                MasteryError::Tensor(t) => t,
                _ => TensorError::EmptyTape,
            })
        })?;
        Ok(gradcheck::max_relative_error(&checks))
    }

    fn snapshot(&self, tape: &Tape, fwd: &Forward, start: usize, len: usize) -> AttentionSnapshot {
        let logits = tape.value(fwd.logits);
        let mut attention = vec![vec![0.0; len]; len];
        for &h in &fwd.cross {
            let m = tape.value(h);
            for (i, row) in attention.iter_mut().enumerate() {
                for (o, v) in row.iter_mut().zip(&m.row(start + i)[start..start + len]) {
                    *o += v;
                }
            }
        }
        let k = fwd.cross.len() as f64;
        attention.iter_mut().flatten().for_each(|v| *v /= k);
        let prob_correct: Vec<f64> = (start..start + len)
            .map(|r| {
                let row = logits.row(r);
                crate::tensor::sigmoid(row[1] - row[0])
            })
            .collect();
        let predicted = prob_correct.iter().map(|&p| p >= CFA_THRESHOLD).collect();
        AttentionSnapshot { attention, predicted, prob_correct }
    }

    /// Greedy decoding: each step is fed the model's own previous guess.
    /// Attention rows come from the final decoder layer's cross-attention,
    /// averaged over heads.
    pub fn attend(&self, kcs: &[KcId]) -> Result<AttentionSnapshot, MasteryError> {
        self.check_sequence(kcs)?;
        let n = kcs.len();
        let mut tokens = vec![BOS; n];
        let mut tape = Tape::new();
        for t in 0..n {
            tape.clear();
            let fwd = self.forward::<rng::StreamRng>(&self.store, &mut tape, &[kcs], &[tokens.clone()], None)?;
            let row = tape.value(fwd.logits).row(t);
            let correct = crate::tensor::sigmoid(row[1] - row[0]) >= CFA_THRESHOLD;
            if t + 1 < n {
                tokens[t + 1] = 1 + correct as usize;
            } else {
                return Ok(self.snapshot(&tape, &fwd, 0, n));
            }
        }
        unreachable!("non-empty sequence returns inside the loop")
    }

    /// Decoding conditioned on the recorded outcomes of earlier steps: step
    /// `t` sees the logged CFA bits of steps `0..t` and predicts step `t`.
    /// Runs the sequences in one stacked pass.
    pub fn attend_observed(&self, pairs: &[(&[KcId], &[bool])]) -> Result<Vec<AttentionSnapshot>, MasteryError> {
        if pairs.is_empty() {
            return Ok(Vec::new());
        }
        for (k, c) in pairs {
            self.check_pair(k, c)?;
        }
        let kcs: Vec<&[KcId]> = pairs.iter().map(|p| p.0).collect();
        let tokens: Vec<Vec<usize>> = pairs.iter().map(|p| Self::teacher_tokens(p.1)).collect();
        let mut tape = Tape::new();
        let fwd = self.forward::<rng::StreamRng>(&self.store, &mut tape, &kcs, &tokens, None)?;
        let mut start = 0;
        Ok(kcs
            .iter()
            .map(|k| {
                let snap = self.snapshot(&tape, &fwd, start, k.len());
                start += k.len();
                snap
            })
            .collect())
    }
}

/// Sequences stacked into one forward pass.
pub const PACK: usize = 8;

/// Trains the CFA model with Adam on mini-batches of teacher-forced pairs.
/// The loss of a mini-batch is the mean cross-entropy over all its steps.
pub fn train_cfa_model(
    pairs: &[TrainingPair],
    vocab_size: usize,
    config: &MasteryModelConfig,
    seed: u64,
) -> Result<MasteryModel, MasteryError> {
    if pairs.is_empty() {
        return Err(MasteryError::NoData);
    }
    let mut model = MasteryModel::new(vocab_size, config, seed)?;
    for p in pairs {
        model.check_pair(&p.kcs, &p.cfas)?;
    }
    let adam = AdamConfig::with_lr(config.learning_rate);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut shuffle = rng::stream(seed, "mastery-shuffle");
    let mut drop = rng::stream(seed, "mastery-dropout");
    let mut tape = Tape::new();
    let total_steps: usize = pairs.iter().map(|p| p.kcs.len()).sum();
    for _ in 0..config.epochs {
        order.shuffle(&mut shuffle);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            model.store.zero_grads();
            let batch_steps: usize = batch.iter().map(|&i| pairs[i].kcs.len()).sum();
            for pack in batch.chunks(PACK) {
                tape.clear();
                let items: Vec<(&[KcId], &[bool])> = pack.iter().map(|&i| (pairs[i].kcs.as_slice(), pairs[i].cfas.as_slice())).collect();
                let pack_steps: usize = items.iter().map(|p| p.0.len()).sum();
                let loss = model.loss(&model.store, &mut tape, &items, Some(&mut drop))?;
                total += tape.value(loss).get(0, 0) * pack_steps as f64;
                let weighted = tape.layer_scale(loss, pack_steps as f64 / batch_steps as f64)?;
                tape.backward(weighted, &mut model.store)?;
            }
            model.store.adam_step(&adam);
        }
        model.loss_history.push(total / total_steps as f64);
    }
    Ok(model)
}

/// α per (student, problem, KC) plus per-(student, KC) means over problems.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MasteryTable {
    entries: BTreeMap<(StudentId, ProblemId, KcId), f64>,
}

impl MasteryTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, s: StudentId, p: ProblemId, k: KcId, alpha: f64) -> Result<(), MasteryError> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(MasteryError::AlphaRange(alpha));
        }
        self.entries.insert((s, p, k), alpha);
        Ok(())
    }

    pub fn get(&self, s: StudentId, p: ProblemId, k: KcId) -> Option<f64> {
        self.entries.get(&(s, p, k)).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (StudentId, ProblemId, KcId, f64)> + '_ {
        self.entries.iter().map(|(&(s, p, k), &a)| (s, p, k, a))
    }

    /// Entries of one student, in (problem, KC) order.
    pub fn of_student(&self, s: StudentId) -> impl Iterator<Item = (ProblemId, KcId, f64)> + '_ {
        self.entries
            .range((s, ProblemId(0), KcId(0))..=(s, ProblemId(u32::MAX), KcId(u32::MAX)))
            .map(|(&(_, p, k), &a)| (p, k, a))
    }

    /// Mean α over the problems on which the student used the KC.
    pub fn student_kc_mean(&self) -> BTreeMap<(StudentId, KcId), f64> {
        let mut acc: BTreeMap<(StudentId, KcId), (f64, usize)> = BTreeMap::new();
        for (&(s, _, k), &a) in &self.entries {
            let e = acc.entry((s, k)).or_insert((0.0, 0));
            e.0 += a;
            e.1 += 1;
        }
        acc.into_iter().map(|(key, (sum, n))| (key, sum / n as f64)).collect()
    }
}

/// α for each KC of one snapshot: attention aimed at the KC's positions on
/// steps predicted correct, over attention aimed at them on all steps.
pub fn alpha_from_snapshot(kcs: &[KcId], snap: &AttentionSnapshot) -> BTreeMap<KcId, f64> {
    let mut acc: BTreeMap<KcId, (f64, f64)> = BTreeMap::new();
    for (row, &correct) in snap.attention.iter().zip(&snap.predicted) {
        for (&k, &a) in kcs.iter().zip(row) {
            let e = acc.entry(k).or_insert((0.0, 0.0));
            if correct {
                e.0 += a;
            }
            e.1 += a;
        }
    }
    acc.into_iter()
        .map(|(k, (num, den))| (k, if den > 0.0 { (num / den).clamp(0.0, 1.0) } else { 0.0 }))
        .collect()
}

/// α for every (student, problem, KC) of the corpus, decoding each trace
/// against its recorded outcomes.
pub fn compute_alpha(model: &MasteryModel, corpus: &Corpus) -> Result<MasteryTable, MasteryError> {
    let mut table = MasteryTable::new();
    for chunk in corpus.traces().chunks(PACK) {
        let items: Vec<(&[KcId], &[bool])> = chunk.iter().map(|t| (t.kcs.as_slice(), t.cfas.as_slice())).collect();
        for (t, snap) in chunk.iter().zip(model.attend_observed(&items)?) {
            for (k, a) in alpha_from_snapshot(&t.kcs, &snap) {
                table.insert(t.student, t.problem, k, a)?;
            }
        }
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> MasteryModelConfig {
        MasteryModelConfig {
            model_dim: 8,
            n_layers: 1,
            n_heads: 2,
            head_dim: 4,
            ff_dim: 8,
            max_seq_len: 8,
            dropout_rate: 0.0,
            epochs: 60,
            batch_size: 4,
            learning_rate: 0.01,
        }
    }

    fn ks(v: &[u32]) -> Vec<KcId> {
        v.iter().map(|&k| KcId(k)).collect()
    }

    #[test]
    fn config_rejects_inconsistent_heads() {
        let c = MasteryModelConfig { model_dim: 10, ..tiny() };
        assert!(c.validate().is_err());
        assert!(MasteryModelConfig::default().validate().is_ok());
        assert!(MasteryModelConfig::paper_scale().validate().is_ok());
    }

    #[test]
    fn attention_rows_are_distributions() {
        let m = MasteryModel::new(5, &tiny(), 3).unwrap();
        let snap = m.attend(&ks(&[0, 3, 1, 4])).unwrap();
        assert_eq!(snap.attention.len(), 4);
        for row in &snap.attention {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&a| a >= 0.0));
        }
        let one = m.attend(&ks(&[2])).unwrap();
        assert!((one.attention[0][0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_queries_give_uniform_attention() {
        let mut m = MasteryModel::new(5, &tiny(), 3).unwrap();
        let id = m.params().id_of("dec.0.cross.wq").unwrap();
        m.params_mut().value_mut(id).fill(0.0);
        let snap = m.attend(&ks(&[0, 1, 2, 3])).unwrap();
        for row in &snap.attention {
            assert!(row.iter().all(|&a| (a - 0.25).abs() < 1e-12));
        }
    }

    #[test]
    fn errors_on_bad_sequences() {
        let m = MasteryModel::new(5, &tiny(), 3).unwrap();
        assert_eq!(m.attend(&[]).unwrap_err(), MasteryError::EmptySequence);
        assert!(matches!(m.attend(&ks(&[0; 9])), Err(MasteryError::SequenceTooLong { len: 9, max: 8 })));
        assert!(matches!(m.attend(&ks(&[7])), Err(MasteryError::UnknownKc { .. })));
    }

    #[test]
    fn alpha_matches_hand_evaluation() {
        let kcs = ks(&[4, 4]);
        let snap = AttentionSnapshot {
            attention: vec![vec![0.3, 0.3], vec![0.2, 0.2]],
            predicted: vec![true, false],
            prob_correct: vec![0.9, 0.1],
        };
        let a = alpha_from_snapshot(&kcs, &snap);
        assert!((a[&KcId(4)] - 0.6).abs() < 1e-12);
        let all = AttentionSnapshot { predicted: vec![true, true], ..snap.clone() };
        assert_eq!(alpha_from_snapshot(&kcs, &all)[&KcId(4)], 1.0);
        let none = AttentionSnapshot { predicted: vec![false, false], ..snap };
        assert_eq!(alpha_from_snapshot(&kcs, &none)[&KcId(4)], 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let m = MasteryModel::new(4, &tiny(), 9).unwrap();
        let err = m.gradient_check(&ks(&[1, 3]), &[true, false]).unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn memorizes_a_single_pair() {
        let pair = TrainingPair { trace: 0, kcs: ks(&[0, 1, 2, 1]), cfas: vec![true, false, false, true] };
        let m = train_cfa_model(&[pair.clone()], 3, &tiny(), 1).unwrap();
        assert_eq!(m.attend(&pair.kcs).unwrap().predicted, pair.cfas);
        assert!(m.loss_history.last() < m.loss_history.first());
    }

    #[test]
    fn training_is_deterministic() {
        let pair = TrainingPair { trace: 0, kcs: ks(&[0, 1]), cfas: vec![true, false] };
        let cfg = MasteryModelConfig { epochs: 3, dropout_rate: 0.1, ..tiny() };
        let a = train_cfa_model(&[pair.clone()], 2, &cfg, 5).unwrap();
        let b = train_cfa_model(&[pair], 2, &cfg, 5).unwrap();
        assert_eq!(a.loss_history, b.loss_history);
    }

    #[test]
    fn table_rejects_out_of_range_alpha() {
        let mut t = MasteryTable::new();
        assert!(t.insert(StudentId(0), ProblemId(0), KcId(0), 1.5).is_err());
        t.insert(StudentId(0), ProblemId(0), KcId(0), 0.5).unwrap();
        t.insert(StudentId(0), ProblemId(1), KcId(0), 1.0).unwrap();
        assert_eq!(t.get(StudentId(0), ProblemId(1), KcId(1)), None);
        assert_eq!(t.student_kc_mean()[&(StudentId(0), KcId(0))], 0.75);
    }
}
