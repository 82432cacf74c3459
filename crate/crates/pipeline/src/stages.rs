//! The pipeline stages. Each stage reads the artifacts of the stages before
//! it from the output directory and writes its own.

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use stratpred_core::corpus::Corpus;
use stratpred_core::harness::{self, Clock};
use stratpred_core::hdp::{self, ClusterModel};
use stratpred_core::mastery::{self, MasteryModel, MasteryTable};
use stratpred_core::mvec::{self, EmbeddingSet};
use stratpred_core::predictor::{self, Predictor};
use stratpred_core::{rng, synthetic};
use thiserror::Error;

use crate::artifacts::{self, PredictionRow};
use crate::checkpoint;
use crate::config::{DataSource, PipelineConfig};
use crate::format::{FormatError, Header, Provenance};
use crate::reports::{self, EvaluationDoc, FairnessDoc, SweepDoc};
use crate::transactions;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("missing {artifact} at {path}; run `{stage}` first")]
    Missing { artifact: &'static str, path: PathBuf, stage: &'static str },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Format { path: PathBuf, source: FormatError },
    #[error("{0}")]
    Stale(String),
    #[error("no transaction log configured; set `paths.transactions`")]
    NoTransactions,
    #[error(transparent)]
    Harness(#[from] harness::HarnessError),
    #[error(transparent)]
    Corpus(#[from] stratpred_core::CorpusError),
    #[error(transparent)]
    Mastery(#[from] mastery::MasteryError),
    #[error(transparent)]
    Walk(#[from] mvec::MvecError),
    #[error(transparent)]
    Cluster(#[from] hdp::HdpError),
    #[error(transparent)]
    Predictor(#[from] predictor::PredictorError),
}

/// Seconds since the clock was made.
pub struct WallClock(Instant);

impl WallClock {
    pub fn new() -> Self {
        WallClock(Instant::now())
    }
}

impl Default for WallClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for WallClock {
    fn now(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

/// File names inside the output directory.
pub struct Layout {
    pub out: PathBuf,
    pub reports: PathBuf,
}

impl Layout {
    pub fn new(cfg: &PipelineConfig) -> Self {
        Layout { out: cfg.paths.out_dir.clone(), reports: cfg.reports_dir() }
    }

    pub fn corpus(&self) -> PathBuf {
        self.out.join("corpus.tsv")
    }
    pub fn mastery(&self) -> PathBuf {
        self.out.join("mastery.tsv")
    }
    pub fn mastery_model(&self) -> PathBuf {
        self.out.join("mastery.ckpt")
    }
    pub fn embeddings(&self) -> PathBuf {
        self.out.join("embeddings.tsv")
    }
    pub fn clusters(&self) -> PathBuf {
        self.out.join("clusters.tsv")
    }
    pub fn predictor(&self) -> PathBuf {
        self.out.join("predictor.ckpt")
    }
    pub fn predictions(&self) -> PathBuf {
        self.out.join("predictions.tsv")
    }
    pub fn manifest(&self) -> PathBuf {
        self.out.join("manifest.tsv")
    }
}

fn read(path: &Path, artifact: &'static str, stage: &'static str) -> Result<Vec<u8>, PipelineError> {
    std::fs::read(path).map_err(|source| match source.kind() {
        std::io::ErrorKind::NotFound => PipelineError::Missing { artifact, path: path.into(), stage },
        _ => PipelineError::Io { path: path.into(), source },
    })
}

fn read_text(path: &Path, artifact: &'static str, stage: &'static str) -> Result<String, PipelineError> {
    let bytes = read(path, artifact, stage)?;
    String::from_utf8(bytes).map_err(|_| PipelineError::Format { path: path.into(), source: FormatError::Invalid("not UTF-8".into()) })
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), PipelineError> {
    let io = |source| PipelineError::Io { path: path.into(), source };
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    std::fs::write(path, bytes).map_err(io)
}

fn format_err(path: &Path) -> impl FnOnce(FormatError) -> PipelineError + '_ {
    move |source| PipelineError::Format { path: path.into(), source }
}

/// A stage invocation: resolved config, file layout and the command name
/// recorded in every artifact it writes.
pub struct Stage<'a> {
    pub cfg: &'a PipelineConfig,
    pub layout: Layout,
    pub command: &'static str,
}

/// The data every downstream stage starts from: the corpus and this seed's
/// train/test split.
struct Split {
    corpus: Corpus,
    train: Vec<usize>,
    test: Vec<usize>,
    train_corpus: Corpus,
}

impl<'a> Stage<'a> {
    pub fn new(cfg: &'a PipelineConfig, command: &'static str) -> Self {
        Stage { cfg, layout: Layout::new(cfg), command }
    }

    fn prov(&self) -> Provenance {
        Provenance::new(self.command, &self.cfg.hash, self.cfg.seed)
    }

    fn corpus(&self) -> Result<Corpus, PipelineError> {
        let path = self.layout.corpus();
        let data_stage = match self.cfg.source {
            DataSource::Synthetic => "gen-data",
            DataSource::Transactions => "ingest",
        };
        let text = read_text(&path, "corpus", data_stage)?;
        let (corpus, header) = artifacts::read_corpus(&text).map_err(format_err(&path))?;
        // an ingested log does not depend on the seed or model settings
        if self.cfg.source == DataSource::Synthetic {
            self.check_fresh(&path, &header)?;
        }
        Ok(corpus)
    }

    fn split(&self) -> Result<Split, PipelineError> {
        let corpus = self.corpus()?;
        let (train, test) = harness::split_corpus(&corpus, self.cfg.experiment.test_fraction, self.cfg.seed)?;
        let train_corpus = corpus.subset(&train);
        Ok(Split { corpus, train, test, train_corpus })
    }

    fn embeddings(&self, corpus: &Corpus) -> Result<(EmbeddingSet, Header), PipelineError> {
        let path = self.layout.embeddings();
        let text = read_text(&path, "embeddings", "embed")?;
        let (emb, header) = artifacts::read_embeddings(&text, corpus).map_err(format_err(&path))?;
        self.check_fresh(&path, &header)?;
        self.check_ablation(&path, &header)?;
        Ok((emb, header))
    }

    /// Refuses artifacts written under another config or seed.
    fn check_fresh(&self, path: &Path, header: &Header) -> Result<(), PipelineError> {
        let p = &header.provenance;
        if p.config_hash != self.cfg.hash || p.seed != self.cfg.seed {
            return Err(PipelineError::Stale(format!(
                "{} was written by `{}` under config {} seed {}, current is config {} seed {}; rerun `{}`",
                path.display(),
                p.command,
                p.config_hash,
                p.seed,
                self.cfg.hash,
                self.cfg.seed,
                p.command
            )));
        }
        Ok(())
    }

    /// Embeddings and clusters depend on the ablation, which the config hash
    /// leaves out so that switching it does not invalidate the corpus.
    fn check_ablation(&self, path: &Path, header: &Header) -> Result<(), PipelineError> {
        let written = header.field("artifact", "ablation").map_err(format_err(path))?;
        if written != self.cfg.ablation.name() {
            return Err(PipelineError::Stale(format!(
                "{} was written under ablation {written}, current is {}; rerun `{}`",
                path.display(),
                self.cfg.ablation.name(),
                header.provenance.command
            )));
        }
        Ok(())
    }

    fn record(&self, seconds: f64) -> Result<(), PipelineError> {
        let path = self.layout.manifest();
        let io = |source| PipelineError::Io { path: path.clone(), source };
        std::fs::create_dir_all(&self.layout.out).map_err(io)?;
        let mut f = OpenOptions::new().create(true).append(true).open(&path).map_err(io)?;
        writeln!(f, "{}\t{}\t{}\t{seconds:.3}", self.command, self.cfg.hash, self.cfg.seed).map_err(io)
    }

    fn timed<T>(&self, body: impl FnOnce() -> Result<T, PipelineError>) -> Result<T, PipelineError> {
        let t0 = Instant::now();
        let out = body()?;
        self.record(t0.elapsed().as_secs_f64())?;
        Ok(out)
    }

    /// Generates the synthetic world into `corpus.tsv`.
    pub fn gen_data(&self) -> Result<PathBuf, PipelineError> {
        self.timed(|| {
            let (corpus, _) = synthetic::generate_synthetic(&self.cfg.world)?;
            let path = self.layout.corpus();
            write(&path, artifacts::write_corpus(&corpus, &self.prov()))?;
            Ok(path)
        })
    }

    /// Parses the configured transaction log into `corpus.tsv` and writes
    /// the `ingest` report of skipped and rejected rows.
    pub fn ingest(&self) -> Result<PathBuf, PipelineError> {
        self.timed(|| {
            let src = self.cfg.paths.transactions.as_ref().ok_or(PipelineError::NoTransactions)?;
            let file = std::fs::File::open(src).map_err(|source| PipelineError::Io { path: src.clone(), source })?;
            let (records, report) = transactions::parse_transactions(std::io::BufReader::new(file), &self.cfg.columns).map_err(format_err(src))?;
            let corpus = Corpus::consolidate(&records)?;
            let path = self.layout.corpus();
            write(&path, artifacts::write_corpus(&corpus, &self.prov()))?;
            reports::write_report(&self.layout.reports, "ingest", &report, &report.rejections)
                .map_err(|source| PipelineError::Io { path: self.layout.reports.clone(), source })?;
            Ok(path)
        })
    }

    /// Trains the CFA model on the training split and writes per-step
    /// mastery and the model checkpoint.
    pub fn train_mastery(&self) -> Result<PathBuf, PipelineError> {
        self.timed(|| {
            let s = self.split()?;
            let pairs = mastery::build_training_set(&s.train_corpus);
            let model = mastery::train_cfa_model(&pairs, s.corpus.kc_vocab().len(), &self.cfg.experiment.mastery, rng::derive(self.cfg.seed, "mastery"))?;
            let table = mastery::compute_alpha(&model, &s.train_corpus)?;
            write(&self.layout.mastery_model(), checkpoint::encode("mastery-model", &self.prov(), &[], model.params()))?;
            let path = self.layout.mastery();
            write(&path, artifacts::write_mastery(&table, &s.corpus, &self.prov()))?;
            Ok(path)
        })
    }

    fn mastery_table(&self, corpus: &Corpus) -> Result<MasteryTable, PipelineError> {
        let path = self.layout.mastery();
        let text = read_text(&path, "mastery table", "train-mastery")?;
        let (table, header) = artifacts::read_mastery(&text, corpus).map_err(format_err(&path))?;
        self.check_fresh(&path, &header)?;
        Ok(table)
    }

    /// Reloads the trained CFA model.
    pub fn mastery_model(&self, vocab_size: usize) -> Result<MasteryModel, PipelineError> {
        let path = self.layout.mastery_model();
        let ck = checkpoint::decode(&read(&path, "mastery model", "train-mastery")?, "mastery-model").map_err(format_err(&path))?;
        self.check_fresh(&path, &ck.header)?;
        let mut model = MasteryModel::new(vocab_size, &self.cfg.experiment.mastery, 0)?;
        ck.load_into(model.params_mut()).map_err(format_err(&path))?;
        Ok(model)
    }

    /// Walk embeddings over the training split; mastery-weighted unless the
    /// ablation is SS.
    pub fn embed(&self) -> Result<PathBuf, PipelineError> {
        self.timed(|| {
            let s = self.split()?;
            let table = if self.cfg.ablation.uses_mastery() { Some(self.mastery_table(&s.corpus)?) } else { None };
            let scfg = harness::seed_config(&self.cfg.experiment, self.cfg.seed);
            let emb = mvec::generate_mvec(&s.train_corpus, table.as_ref(), &scfg.walk)?;
            let path = self.layout.embeddings();
            write(&path, artifacts::write_embeddings(&emb, &s.corpus, &self.prov(), &[("ablation", self.cfg.ablation.name().into())]))?;
            Ok(path)
        })
    }

    /// Coarse-to-fine HDP clustering of the embedded students and problems.
    pub fn cluster(&self) -> Result<PathBuf, PipelineError> {
        self.timed(|| {
            let s = self.split()?;
            let (emb, _) = self.embeddings(&s.corpus)?;
            let scfg = harness::seed_config(&self.cfg.experiment, self.cfg.seed);
            let model = hdp::coarse_to_fine(&s.train_corpus, &emb, &scfg.refine)?;
            let path = self.layout.clusters();
            write(&path, artifacts::write_clusters(&model, &s.corpus, &self.prov(), &[("ablation", self.cfg.ablation.name().into())]))?;
            Ok(path)
        })
    }

    fn clusters(&self, corpus: &Corpus, emb: &EmbeddingSet) -> Result<ClusterModel, PipelineError> {
        let path = self.layout.clusters();
        let text = read_text(&path, "clusters", "cluster")?;
        let (model, header) = artifacts::read_clusters(&text, corpus, emb).map_err(format_err(&path))?;
        self.check_fresh(&path, &header)?;
        self.check_ablation(&path, &header)?;
        Ok(model)
    }

    /// Samples the training budget with the configured method and trains
    /// the strategy decoder on it.
    pub fn train_predictor(&self) -> Result<PathBuf, PipelineError> {
        self.timed(|| {
            let s = self.split()?;
            let (emb, _) = self.embeddings(&s.corpus)?;
            let method = self.cfg.method;
            let refined = if method.needs_clusters() { Some(self.clusters(&s.corpus, &emb)?) } else { None };
            let clusters = harness::cell_clusters(method, self.cfg.ablation, refined.as_ref(), &s.train_corpus, self.cfg.seed);
            let local_train: Vec<usize> = (0..s.train.len()).filter(|&i| harness::has_embeddings(&s.train_corpus, i, &emb)).collect();
            let budget = PipelineConfig::budget_count(self.cfg.budget, s.train.len()).min(local_train.len());
            let sampled = harness::sample_training_set(
                &local_train,
                method,
                budget,
                clusters.as_deref(),
                &s.train_corpus,
                rng::derive(self.cfg.seed, method.name()),
            )?;
            let scfg = harness::seed_config(&self.cfg.experiment, self.cfg.seed);
            let examples = predictor::examples(&s.train_corpus, &sampled, &emb)?;
            let model = predictor::train_predictor(&examples, s.corpus.kc_vocab().len(), &scfg.predictor)?;
            let extra = [
                ("input_dim", model.input_dim().to_string()),
                ("n_kcs", model.n_kcs().to_string()),
                ("max_len", model.max_len().to_string()),
                ("method", method.name().to_string()),
                ("ablation", self.cfg.ablation.name().to_string()),
                ("budget", budget.to_string()),
            ];
            let path = self.layout.predictor();
            write(&path, checkpoint::encode("predictor", &self.prov(), &extra, model.params()))?;
            Ok(path)
        })
    }

    fn predictor(&self) -> Result<(Predictor, Header), PipelineError> {
        const WHAT: &str = "checkpoint";
        let path = self.layout.predictor();
        let ck = checkpoint::decode(&read(&path, "predictor checkpoint", "train-predictor")?, "predictor").map_err(format_err(&path))?;
        self.check_fresh(&path, &ck.header)?;
        let h = &ck.header;
        let dims: Result<(usize, usize, usize), FormatError> = (|| Ok((h.parsed(WHAT, "input_dim")?, h.parsed(WHAT, "n_kcs")?, h.parsed(WHAT, "max_len")?)))();
        let (input_dim, n_kcs, max_len) = dims.map_err(format_err(&path))?;
        let scfg = harness::seed_config(&self.cfg.experiment, self.cfg.seed);
        let mut model = Predictor::new(input_dim, n_kcs, max_len, &scfg.predictor)?;
        ck.load_into(model.params_mut()).map_err(format_err(&path))?;
        Ok((model, ck.header))
    }

    /// Decodes a strategy for every test trace whose student and problem
    /// were embedded.
    pub fn predict(&self) -> Result<PathBuf, PipelineError> {
        self.timed(|| {
            let s = self.split()?;
            let (emb, _) = self.embeddings(&s.corpus)?;
            let (model, header) = self.predictor()?;
            let test: Vec<usize> = s.test.iter().copied().filter(|&t| harness::has_embeddings(&s.corpus, t, &emb)).collect();
            if test.is_empty() {
                return Err(harness::HarnessError::EmptyTest.into());
            }
            let examples = predictor::examples(&s.corpus, &test, &emb)?;
            let preds = predictor::predict_examples(&model, &examples)?;
            let names = |ks: &[stratpred_core::KcId]| ks.iter().map(|&k| s.corpus.kc_name(k).to_string()).collect::<Vec<_>>();
            let rows: Vec<PredictionRow> = examples
                .iter()
                .zip(&preds)
                .map(|(e, p)| {
                    let t = &s.corpus.traces()[e.trace];
                    PredictionRow {
                        student: s.corpus.student_name(t.student).into(),
                        problem: s.corpus.problem_name(t.problem).into(),
                        predicted: names(&p.kcs),
                        actual: names(&e.target),
                    }
                })
                .collect();
            let mut extra: Vec<(&str, String)> = Vec::new();
            for key in ["method", "ablation", "budget"] {
                extra.push((key, header.field("checkpoint", key).map_err(format_err(&self.layout.predictor()))?.to_string()));
            }
            extra.push(("skipped_test", (s.test.len() - test.len()).to_string()));
            let path = self.layout.predictions();
            write(&path, artifacts::write_predictions(&rows, &self.prov(), &extra))?;
            Ok(path)
        })
    }

    /// Predictions with their test-trace index and step accuracy.
    fn scored(&self, corpus: &Corpus) -> Result<(Vec<(usize, f64, bool)>, Header), PipelineError> {
        let path = self.layout.predictions();
        let text = read_text(&path, "predictions", "predict")?;
        let (rows, header) = artifacts::read_predictions(&text).map_err(format_err(&path))?;
        self.check_fresh(&path, &header)?;
        let bad = |m: String| PipelineError::Format { path: path.clone(), source: FormatError::Invalid(m) };
        let mut out = Vec::with_capacity(rows.len());
        for r in &rows {
            let trace = corpus
                .find_student(&r.student)
                .zip(corpus.find_problem(&r.problem))
                .and_then(|(st, p)| corpus.trace_index(st, p))
                .ok_or_else(|| bad(format!("no trace for student `{}` on problem `{}`", r.student, r.problem)))?;
            let kcs = |names: &[String]| names.iter().map(|n| corpus.find_kc(n).ok_or_else(|| bad(format!("unknown KC `{n}`")))).collect::<Result<Vec<_>, _>>();
            let (pred, actual) = (kcs(&r.predicted)?, kcs(&r.actual)?);
            out.push((trace, predictor::step_accuracy(&pred, &actual), pred == actual));
        }
        Ok((out, header))
    }

    /// Mean step accuracy and exact-match rate of the predictions.
    pub fn evaluate(&self) -> Result<EvaluationDoc, PipelineError> {
        self.timed(|| {
            let corpus = self.corpus()?;
            let (scored, header) = self.scored(&corpus)?;
            let path = self.layout.predictions();
            let field = |k: &'static str| header.field("predictions", k).map(str::to_string).map_err(format_err(&path));
            let n = scored.len().max(1) as f64;
            let doc = EvaluationDoc {
                command: self.command.into(),
                config: self.cfg.hash.clone(),
                seed: self.cfg.seed,
                method: field("method")?,
                ablation: field("ablation")?,
                budget: field("budget")?.parse().map_err(|_| format_err(&path)(FormatError::Invalid("bad budget".into())))?,
                test_traces: scored.len(),
                skipped_test: field("skipped_test")?.parse().map_err(|_| format_err(&path)(FormatError::Invalid("bad skipped_test".into())))?,
                step_accuracy: scored.iter().map(|s| s.1).sum::<f64>() / n,
                exact_match: scored.iter().filter(|s| s.2).count() as f64 / n,
            };
            reports::write_report(&self.layout.reports, "evaluation", &doc, std::slice::from_ref(&doc))
                .map_err(|source| PipelineError::Io { path: self.layout.reports.clone(), source })?;
            Ok(doc)
        })
    }

    /// Accuracy by performance group and by strategy-variance group.
    pub fn fairness(&self) -> Result<FairnessDoc, PipelineError> {
        self.timed(|| {
            let corpus = self.corpus()?;
            let (scored, header) = self.scored(&corpus)?;
            let test: Vec<usize> = scored.iter().map(|s| s.0).collect();
            let acc: Vec<f64> = scored.iter().map(|s| s.1).collect();
            let report = harness::fairness_report(&corpus, &test, &acc);
            let path = self.layout.predictions();
            let field = |k: &'static str| header.field("predictions", k).map(str::to_string).map_err(format_err(&path));
            let doc = FairnessDoc::new(&report, self.command, &self.cfg.hash, self.cfg.seed, &field("method")?, &field("ablation")?);
            reports::write_report(&self.layout.reports, "fairness", &doc, &doc.groups)
                .map_err(|source| PipelineError::Io { path: self.layout.reports.clone(), source })?;
            Ok(doc)
        })
    }

    /// Runs the configured sweep of (method, ablation) cells, budgets and
    /// seeds from scratch and writes the `sweep` report.
    pub fn ablate(&self) -> Result<SweepDoc, PipelineError> {
        self.timed(|| {
            let corpus = self.corpus()?;
            let seeds = &self.cfg.sweep_seeds;
            let first = *seeds.first().ok_or(harness::HarnessError::NoSeeds)?;
            let (train, _) = harness::split_corpus(&corpus, self.cfg.experiment.test_fraction, first)?;
            let mut budgets: Vec<usize> = self.cfg.sweep_budgets.iter().map(|&b| PipelineConfig::budget_count(b, train.len())).collect();
            budgets.dedup();
            let result = harness::run_experiment(&corpus, &self.cfg.sweep_cells, &budgets, &self.cfg.experiment, seeds, &WallClock::new())?;
            let doc = SweepDoc::new(&result, self.command, &self.cfg.hash);
            reports::write_report(&self.layout.reports, "sweep", &doc, &doc.csv_rows())
                .map_err(|source| PipelineError::Io { path: self.layout.reports.clone(), source })?;
            Ok(doc)
        })
    }

    /// Every stage from data to fairness, in order.
    /// Each stage records itself under its own command name.
    pub fn pipeline(&self) -> Result<(EvaluationDoc, FairnessDoc), PipelineError> {
        let stage = |command| Stage::new(self.cfg, command);
        match self.cfg.source {
            DataSource::Synthetic => stage("gen-data").gen_data()?,
            DataSource::Transactions => stage("ingest").ingest()?,
        };
        if self.cfg.ablation.uses_mastery() {
            stage("train-mastery").train_mastery()?;
        }
        stage("embed").embed()?;
        if self.cfg.method.needs_clusters() {
            stage("cluster").cluster()?;
        }
        stage("train-predictor").train_predictor()?;
        stage("predict").predict()?;
        Ok((stage("evaluate").evaluate()?, stage("fairness").fairness()?))
    }
}

