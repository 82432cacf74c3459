//! Synthetic tutoring worlds with known latent structure.
//!
//! Students belong to archetypes. An archetype fixes a per-KC mastery
//! probability and, in every section, which strategy template its students
//! follow. Logged outcomes are Bernoulli draws from the archetype's mastery,
//! flipped with probability `mastery_noise`. [`OracleLabels`] keeps the ground
//! truth so tests can check what the pipeline recovers.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::corpus::{Corpus, CorpusError, TransactionRecord};
use crate::rng;

pub const MIN_TEMPLATE_LEN: usize = 3;
pub const MAX_TEMPLATE_LEN: usize = 12;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticWorldConfig {
    pub n_students: usize,
    pub n_problems: usize,
    pub n_kcs: usize,
    pub n_archetypes: usize,
    pub strategies_per_section: usize,
    pub mastery_noise: f64,
    pub seed: u64,
    pub problems_per_section: usize,
    pub sections_per_unit: usize,
    /// Problems each student attempts in every section they work in.
    pub attempts_per_section: usize,
    /// KCs available to the templates of one section.
    pub section_pool: usize,
    /// Share of the KC vocabulary in each template's preferred style.
    pub style_share: f64,
    /// How strongly section templates draw from their preferred style: 0
    /// ignores it, 1 uses it exclusively when the section pool allows.
    pub style_focus: f64,
    /// Spread of curriculum progress: each student completes between
    /// `(1 - progress_spread)` of the units (at least one) and all of them.
    pub progress_spread: f64,
    /// Archetype `a` receives population weight `1 / (a + 1)^skew`.
    pub archetype_skew: f64,
    /// Forces every per-KC mastery probability to this value.
    pub fixed_mastery: Option<f64>,
}

impl SyntheticWorldConfig {
    pub fn new(n_students: usize, n_problems: usize, n_kcs: usize, n_archetypes: usize) -> Self {
        SyntheticWorldConfig {
            n_students,
            n_problems,
            n_kcs,
            n_archetypes,
            strategies_per_section: n_archetypes,
            mastery_noise: 0.1,
            seed: 0,
            problems_per_section: 10,
            sections_per_unit: 3,
            attempts_per_section: 2,
            section_pool: 8,
            style_share: 0.4,
            style_focus: 0.9,
            progress_spread: 1.0,
            archetype_skew: 1.0,
            fixed_mastery: None,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let counts = [
            ("n_students", self.n_students),
            ("n_problems", self.n_problems),
            ("n_kcs", self.n_kcs),
            ("n_archetypes", self.n_archetypes),
            ("strategies_per_section", self.strategies_per_section),
            ("problems_per_section", self.problems_per_section),
            ("sections_per_unit", self.sections_per_unit),
            ("attempts_per_section", self.attempts_per_section),
            ("section_pool", self.section_pool),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(CorpusError::InvalidConfig(format!("{name} must be at least 1")));
            }
        }
        if self.n_archetypes > self.n_students {
            return Err(CorpusError::InvalidConfig(format!(
                "n_archetypes ({}) exceeds n_students ({})",
                self.n_archetypes, self.n_students
            )));
        }
        if !(0.0..=1.0).contains(&self.mastery_noise) {
            return Err(CorpusError::InvalidConfig(format!("mastery_noise {} outside [0, 1]", self.mastery_noise)));
        }
        if let Some(m) = self.fixed_mastery {
            if !(0.0..=1.0).contains(&m) {
                return Err(CorpusError::InvalidConfig(format!("fixed_mastery {m} outside [0, 1]")));
            }
        }
        if !(self.style_share > 0.0 && self.style_share <= 1.0) {
            return Err(CorpusError::InvalidConfig(format!("style_share {} must be in (0, 1]", self.style_share)));
        }
        if !(0.0..=1.0).contains(&self.style_focus) {
            return Err(CorpusError::InvalidConfig(format!("style_focus {} must be in [0, 1]", self.style_focus)));
        }
        if !(0.0..=1.0).contains(&self.progress_spread) {
            return Err(CorpusError::InvalidConfig(format!("progress_spread {} must be in [0, 1]", self.progress_spread)));
        }
        if !(self.archetype_skew.is_finite() && self.archetype_skew >= 0.0) {
            return Err(CorpusError::InvalidConfig(format!("archetype_skew {} must be finite and >= 0", self.archetype_skew)));
        }
        Ok(())
    }
}

/// Ground truth behind a synthetic corpus, indexed by corpus ids.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleLabels {
    /// Archetype of each student, by `StudentId`.
    pub student_archetype: Vec<usize>,
    /// Archetype and template of each trace, by trace index.
    pub trace_archetype: Vec<usize>,
    pub trace_template: Vec<usize>,
    /// Mastery probability per archetype, by `KcId`.
    pub mastery: Vec<Vec<f64>>,
    /// Overall skill level of each archetype.
    pub skill: Vec<f64>,
    /// Template KC sequences per section (by `SectionId`) as KC names.
    pub templates: Vec<Vec<Vec<String>>>,
}

impl OracleLabels {
    pub fn template_of_archetype(&self, archetype: usize, strategies_per_section: usize) -> usize {
        archetype % strategies_per_section
    }
}

fn width(n: usize) -> usize {
    let mut w = 1;
    let mut x = n.saturating_sub(1);
    while x >= 10 {
        x /= 10;
        w += 1;
    }
    w.max(3)
}

/// Splits `n` into counts proportional to `weights`, every count at least 1.
fn apportion(n: usize, weights: &[f64]) -> Vec<usize> {
    let k = weights.len();
    let total: f64 = weights.iter().sum();
    let spare = n - k;
    let exact: Vec<f64> = weights.iter().map(|w| w / total * spare as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|&e| 1 + e as usize).collect();
    let mut rest = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - libm::floor(exact[a]);
        let fb = exact[b] - libm::floor(exact[b]);
        fb.partial_cmp(&fa).unwrap_or(core::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        counts[i] += 1;
        rest -= 1;
    }
    counts
}

/// Skill order that gives the most populous archetype a middling skill and
/// pushes rarer archetypes toward the extremes.
fn skill_levels(n: usize) -> Vec<f64> {
    let levels: Vec<f64> = if n == 1 {
        vec![0.5]
    } else {
        (0..n).map(|i| 0.15 + 0.75 * i as f64 / (n - 1) as f64).collect()
    };
    let mid = (n - 1) / 2;
    let mut order = vec![mid];
    let mut step = 1;
    while order.len() < n {
        if mid >= step {
            order.push(mid - step);
        }
        if order.len() < n && mid + step < n {
            order.push(mid + step);
        }
        step += 1;
    }
    order.into_iter().map(|i| levels[i]).collect()
}

/// Generates a corpus and its ground truth. Fully determined by the config.
pub fn generate_synthetic(cfg: &SyntheticWorldConfig) -> Result<(Corpus, OracleLabels), CorpusError> {
    cfg.validate()?;
    let mut rng = rng::stream(cfg.seed, "synthetic-world");

    let n_sections = cfg.n_problems.div_ceil(cfg.problems_per_section);
    let (ws, wp, wk, wsec) = (width(cfg.n_students), width(cfg.n_problems), width(cfg.n_kcs), width(n_sections));
    let student_name = |i: usize| format!("stu{i:0ws$}");
    let problem_name = |i: usize| format!("prob{i:0wp$}");
    let kc_name = |i: usize| format!("kc{i:0wk$}");
    let section_name = |i: usize| format!("sec{i:0wsec$}");
    let unit_name = |i: usize| format!("unit{i:0wsec$}");
    let n_units = n_sections.div_ceil(cfg.sections_per_unit);

    // Archetype skill and per-KC mastery.
    let skill = skill_levels(cfg.n_archetypes);
    let mastery_gen: Vec<Vec<f64>> = skill
        .iter()
        .map(|&s| {
            let mut row: Vec<f64> = (0..cfg.n_kcs)
                .map(|_| {
                    let u: f64 = rng.gen();
                    if u < s {
                        rng.gen_range(0.92..0.99)
                    } else if u < s + (1.0 - s) * 0.85 {
                        rng.gen_range(0.01..0.08)
                    } else {
                        rng.gen_range(0.3..0.7)
                    }
                })
                .collect();
            if let Some(m) = cfg.fixed_mastery {
                row.iter_mut().for_each(|x| *x = m);
            }
            row
        })
        .collect();

    // Section KC pools, per-archetype style subsets and strategy templates.
    let pool_size = cfg.section_pool.min(cfg.n_kcs);
    let style_size = (libm::ceil(cfg.n_kcs as f64 * cfg.style_share) as usize).clamp(1, cfg.n_kcs);
    let preferred: Vec<Vec<bool>> = (0..cfg.strategies_per_section)
        .map(|_| {
            let mut all: Vec<usize> = (0..cfg.n_kcs).collect();
            all.shuffle(&mut rng);
            let mut mark = vec![false; cfg.n_kcs];
            all[..style_size].iter().for_each(|&k| mark[k] = true);
            mark
        })
        .collect();
    let mut templates: Vec<Vec<Vec<usize>>> = Vec::with_capacity(n_sections);
    for _ in 0..n_sections {
        let mut all: Vec<usize> = (0..cfg.n_kcs).collect();
        all.shuffle(&mut rng);
        let pool = &all[..pool_size];
        let mut section_templates: Vec<Vec<usize>> = Vec::with_capacity(cfg.strategies_per_section);
        for t in 0..cfg.strategies_per_section {
            let sophistication = if t < cfg.n_archetypes { skill[t] } else { rng.gen_range(0.15..0.9) };
            let mut attempts = 0;
            loop {
                let mut rest = pool.to_vec();
                let mut style = Vec::new();
                while style.len() < (pool_size / 2).max(2).min(pool_size) {
                    let w: Vec<f64> = rest.iter().map(|&k| if preferred[t][k] { 1.0 } else { 1.0 - cfg.style_focus + 1e-3 }).collect();
                    let i = rng::weighted_index(&mut rng, &w).expect("positive weights");
                    style.push(rest.swap_remove(i));
                }
                let base = MIN_TEMPLATE_LEN + ((1.0 - sophistication) * 6.0) as usize;
                let len = (base + rng.gen_range(0..=3)).clamp(MIN_TEMPLATE_LEN, MAX_TEMPLATE_LEN);
                let seq: Vec<usize> = (0..len).map(|_| *style.choose(&mut rng).expect("non-empty style")).collect();
                attempts += 1;
                if !section_templates.contains(&seq) || attempts > 64 {
                    section_templates.push(seq);
                    break;
                }
            }
        }
        templates.push(section_templates);
    }

    // Archetype assignment: skewed population, every archetype non-empty.
    let weights: Vec<f64> = (0..cfg.n_archetypes).map(|a| 1.0 / libm::pow((a + 1) as f64, cfg.archetype_skew)).collect();
    let mut student_arch: Vec<usize> =
        apportion(cfg.n_students, &weights).iter().enumerate().flat_map(|(a, &c)| core::iter::repeat_n(a, c)).collect();
    student_arch.shuffle(&mut rng);

    // Attempts.
    let mut records = Vec::new();
    let mut truth: Vec<((usize, usize), (usize, usize))> = Vec::new();
    for (s, &arch) in student_arch.iter().enumerate() {
        let fewest = (libm::ceil(n_units as f64 * (1.0 - cfg.progress_spread)) as usize).clamp(1, n_units);
        let units_done = rng.gen_range(fewest..=n_units);
        let template = arch % cfg.strategies_per_section;
        for sec in 0..(units_done * cfg.sections_per_unit).min(n_sections) {
            let first = sec * cfg.problems_per_section;
            let last = ((sec + 1) * cfg.problems_per_section).min(cfg.n_problems);
            let mut problems: Vec<usize> = (first..last).collect();
            problems.shuffle(&mut rng);
            problems.truncate(cfg.attempts_per_section);
            problems.sort_unstable();
            for p in problems {
                for (step, &k) in templates[sec][template].iter().enumerate() {
                    let mut cfa = rng.gen::<f64>() < mastery_gen[arch][k];
                    if rng.gen::<f64>() < cfg.mastery_noise {
                        cfa = !cfa;
                    }
                    records.push(TransactionRecord {
                        student_id: student_name(s),
                        problem_id: problem_name(p),
                        unit_id: unit_name(sec / cfg.sections_per_unit),
                        section_id: section_name(sec),
                        step_index: step as u32,
                        kc_id: kc_name(k),
                        cfa,
                    });
                }
                truth.push(((s, p), (arch, template)));
            }
        }
    }

    let corpus = Corpus::consolidate(&records)?;

    let mut student_archetype = vec![0; corpus.students().len()];
    for (s, &a) in student_arch.iter().enumerate() {
        if let Some(id) = corpus.find_student(&student_name(s)) {
            student_archetype[id.index()] = a;
        }
    }
    let mut trace_archetype = vec![0; corpus.len()];
    let mut trace_template = vec![0; corpus.len()];
    for ((s, p), (a, t)) in truth {
        let sid = corpus.find_student(&student_name(s)).expect("student present");
        let pid = corpus.find_problem(&problem_name(p)).expect("problem present");
        let idx = corpus.trace_index(sid, pid).expect("trace present");
        trace_archetype[idx] = a;
        trace_template[idx] = t;
    }
    let mastery: Vec<Vec<f64>> = mastery_gen
        .iter()
        .map(|row| corpus.kc_vocab().iter().map(|name| row[name[2..].parse::<usize>().expect("kc index")]).collect())
        .collect();
    let templates_named = corpus
        .curriculum()
        .sections
        .iter()
        .map(|sec| {
            let gen_idx: usize = sec.name[3..].parse().expect("section index");
            templates[gen_idx].iter().map(|t| t.iter().map(|&k| kc_name(k)).collect()).collect()
        })
        .collect();

    Ok((
        corpus,
        OracleLabels { student_archetype, trace_archetype, trace_template, mastery, skill, templates: templates_named },
    ))
}
