//! Interaction-log domain model.
//!
//! A [`TransactionRecord`] is one logged step. [`Corpus::consolidate`] folds
//! records into one [`StrategyTrace`] per (student, problem) pair, interns every
//! identifier into a lexicographically ordered vocabulary and rebuilds the
//! unit / section / problem curriculum.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use thiserror::Error;

/// Separator DataShop uses between skills attached to one step.
pub const MULTI_KC_SEPARATOR: &str = "~~";

macro_rules! index_newtype {
    ($(#[$m:meta])* $name:ident) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub struct $name(pub u32);

        impl $name {
            pub fn index(self) -> usize {
                self.0 as usize
            }
        }
    };
}

index_newtype!(StudentId);
index_newtype!(ProblemId);
index_newtype!(KcId);
index_newtype!(SectionId);
index_newtype!(UnitId);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CorpusError {
    #[error("duplicate step {step} for student {student:?} on problem {problem:?}")]
    DuplicateStep { student: String, problem: String, step: u32 },
    #[error("problem {problem:?} appears in sections {first:?} and {second:?}")]
    ProblemInTwoSections { problem: String, first: String, second: String },
    #[error("section {section:?} appears in units {first:?} and {second:?}")]
    SectionInTwoUnits { section: String, first: String, second: String },
    #[error("invalid synthetic world config: {0}")]
    InvalidConfig(String),
}

/// One logged student step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TransactionRecord {
    pub student_id: String,
    pub problem_id: String,
    pub unit_id: String,
    pub section_id: String,
    pub step_index: u32,
    /// A single KC label, or several joined by [`MULTI_KC_SEPARATOR`].
    pub kc_id: String,
    pub cfa: bool,
}

/// The ordered KC sequence one student used on one problem, with the
/// correct-first-attempt outcome of each step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StrategyTrace {
    pub student: StudentId,
    pub problem: ProblemId,
    pub section: SectionId,
    pub kcs: Vec<KcId>,
    pub cfas: Vec<bool>,
}

impl StrategyTrace {
    pub fn len(&self) -> usize {
        self.kcs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kcs.is_empty()
    }

    pub fn correct_steps(&self) -> usize {
        self.cfas.iter().filter(|&&c| c).count()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Section {
    pub name: String,
    pub unit: UnitId,
    pub problems: Vec<ProblemId>,
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Curriculum {
    pub units: Vec<String>,
    pub sections: Vec<Section>,
    /// Section of each problem, indexed by [`ProblemId`].
    pub problem_section: Vec<SectionId>,
}

impl Curriculum {
    pub fn sections_of_unit(&self, unit: UnitId) -> impl Iterator<Item = SectionId> + '_ {
        self.sections
            .iter()
            .enumerate()
            .filter(move |(_, s)| s.unit == unit)
            .map(|(i, _)| SectionId(i as u32))
    }

    pub fn unit_of_section(&self, section: SectionId) -> UnitId {
        self.sections[section.index()].unit
    }
}

/// Consolidated, interned interaction log. Immutable once built.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    traces: Vec<StrategyTrace>,
    kc_vocab: Vec<String>,
    students: Vec<String>,
    problems: Vec<String>,
    curriculum: Curriculum,
    by_student: Vec<Vec<usize>>,
    by_pair: BTreeMap<(StudentId, ProblemId), usize>,
}

fn intern(sorted: &[String], name: &str) -> u32 {
    sorted.binary_search_by(|s| s.as_str().cmp(name)).expect("interned name") as u32
}

impl Corpus {
    /// Builds a corpus from raw records. Multi-KC steps are unrolled into
    /// consecutive single-KC steps; records without any KC label are skipped.
    pub fn consolidate(records: &[TransactionRecord]) -> Result<Corpus, CorpusError> {
        let mut problem_section: BTreeMap<&str, &str> = BTreeMap::new();
        let mut section_unit: BTreeMap<&str, &str> = BTreeMap::new();
        let mut steps: BTreeMap<(&str, &str), BTreeMap<u32, (&str, bool)>> = BTreeMap::new();

        for r in records {
            match problem_section.get(r.problem_id.as_str()) {
                Some(&sec) if sec != r.section_id => {
                    return Err(CorpusError::ProblemInTwoSections {
                        problem: r.problem_id.clone(),
                        first: sec.to_string(),
                        second: r.section_id.clone(),
                    })
                }
                Some(_) => {}
                None => {
                    problem_section.insert(&r.problem_id, &r.section_id);
                }
            }
            match section_unit.get(r.section_id.as_str()) {
                Some(&unit) if unit != r.unit_id => {
                    return Err(CorpusError::SectionInTwoUnits {
                        section: r.section_id.clone(),
                        first: unit.to_string(),
                        second: r.unit_id.clone(),
                    })
                }
                Some(_) => {}
                None => {
                    section_unit.insert(&r.section_id, &r.unit_id);
                }
            }
            let pair = steps.entry((r.student_id.as_str(), r.problem_id.as_str())).or_default();
            if pair.insert(r.step_index, (r.kc_id.as_str(), r.cfa)).is_some() {
                return Err(CorpusError::DuplicateStep {
                    student: r.student_id.clone(),
                    problem: r.problem_id.clone(),
                    step: r.step_index,
                });
            }
        }

        // Unroll and drop pairs left without any labelled step.
        let mut unrolled: BTreeMap<(&str, &str), Vec<(&str, bool)>> = BTreeMap::new();
        for (pair, by_step) in &steps {
            let seq: Vec<(&str, bool)> = by_step
                .values()
                .flat_map(|&(label, cfa)| {
                    label.split(MULTI_KC_SEPARATOR).map(str::trim).filter(|k| !k.is_empty()).map(move |k| (k, cfa))
                })
                .collect();
            if !seq.is_empty() {
                unrolled.insert(*pair, seq);
            }
        }

        let mut students: Vec<String> = unrolled.keys().map(|(s, _)| s.to_string()).collect();
        students.dedup();
        let mut problems: Vec<String> = unrolled.keys().map(|(_, p)| p.to_string()).collect();
        problems.sort();
        problems.dedup();
        let mut kc_vocab: Vec<String> = unrolled.values().flatten().map(|(k, _)| k.to_string()).collect();
        kc_vocab.sort();
        kc_vocab.dedup();

        let mut section_names: Vec<String> = problems.iter().map(|p| problem_section[p.as_str()].to_string()).collect();
        section_names.sort();
        section_names.dedup();
        let mut units: Vec<String> = section_names.iter().map(|s| section_unit[s.as_str()].to_string()).collect();
        units.sort();
        units.dedup();

        let mut sections: Vec<Section> = section_names
            .iter()
            .map(|name| Section {
                name: name.clone(),
                unit: UnitId(intern(&units, section_unit[name.as_str()])),
                problems: Vec::new(),
            })
            .collect();
        let mut problem_section_ids = Vec::with_capacity(problems.len());
        for (pi, p) in problems.iter().enumerate() {
            let sid = intern(&section_names, problem_section[p.as_str()]);
            sections[sid as usize].problems.push(ProblemId(pi as u32));
            problem_section_ids.push(SectionId(sid));
        }

        let traces: Vec<StrategyTrace> = unrolled
            .iter()
            .map(|((s, p), seq)| {
                let problem = ProblemId(intern(&problems, p));
                StrategyTrace {
                    student: StudentId(intern(&students, s)),
                    problem,
                    section: problem_section_ids[problem.index()],
                    kcs: seq.iter().map(|(k, _)| KcId(intern(&kc_vocab, k))).collect(),
                    cfas: seq.iter().map(|&(_, c)| c).collect(),
                }
            })
            .collect();

        Ok(Self::assemble(
            traces,
            kc_vocab,
            students,
            problems,
            Curriculum { units, sections, problem_section: problem_section_ids },
        ))
    }

    fn assemble(
        traces: Vec<StrategyTrace>,
        kc_vocab: Vec<String>,
        students: Vec<String>,
        problems: Vec<String>,
        curriculum: Curriculum,
    ) -> Corpus {
        let mut by_student = alloc::vec![Vec::new(); students.len()];
        let mut by_pair = BTreeMap::new();
        for (i, t) in traces.iter().enumerate() {
            by_student[t.student.index()].push(i);
            by_pair.insert((t.student, t.problem), i);
        }
        Corpus { traces, kc_vocab, students, problems, curriculum, by_student, by_pair }
    }

    /// A corpus over the same vocabularies and curriculum holding only the
    /// traces at `indices` (kept in corpus order).
    pub fn subset(&self, indices: &[usize]) -> Corpus {
        let mut idx = indices.to_vec();
        idx.sort_unstable();
        idx.dedup();
        let traces = idx.iter().map(|&i| self.traces[i].clone()).collect();
        Self::assemble(traces, self.kc_vocab.clone(), self.students.clone(), self.problems.clone(), self.curriculum.clone())
    }

    /// Flattens the corpus back into one record per step.
    pub fn to_records(&self) -> Vec<TransactionRecord> {
        let mut out = Vec::new();
        for t in &self.traces {
            let section = &self.curriculum.sections[t.section.index()];
            for (step, (&k, &c)) in t.kcs.iter().zip(&t.cfas).enumerate() {
                out.push(TransactionRecord {
                    student_id: self.students[t.student.index()].clone(),
                    problem_id: self.problems[t.problem.index()].clone(),
                    unit_id: self.curriculum.units[section.unit.index()].clone(),
                    section_id: section.name.clone(),
                    step_index: step as u32,
                    kc_id: self.kc_vocab[k.index()].clone(),
                    cfa: c,
                });
            }
        }
        out
    }

    pub fn traces(&self) -> &[StrategyTrace] {
        &self.traces
    }

    pub fn len(&self) -> usize {
        self.traces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }

    pub fn kc_vocab(&self) -> &[String] {
        &self.kc_vocab
    }

    pub fn students(&self) -> &[String] {
        &self.students
    }

    pub fn problems(&self) -> &[String] {
        &self.problems
    }

    pub fn curriculum(&self) -> &Curriculum {
        &self.curriculum
    }

    pub fn student_name(&self, s: StudentId) -> &str {
        &self.students[s.index()]
    }

    pub fn problem_name(&self, p: ProblemId) -> &str {
        &self.problems[p.index()]
    }

    pub fn kc_name(&self, k: KcId) -> &str {
        &self.kc_vocab[k.index()]
    }

    pub fn find_student(&self, name: &str) -> Option<StudentId> {
        self.students.binary_search_by(|s| s.as_str().cmp(name)).ok().map(|i| StudentId(i as u32))
    }

    pub fn find_problem(&self, name: &str) -> Option<ProblemId> {
        self.problems.binary_search_by(|s| s.as_str().cmp(name)).ok().map(|i| ProblemId(i as u32))
    }

    pub fn find_kc(&self, name: &str) -> Option<KcId> {
        self.kc_vocab.binary_search_by(|s| s.as_str().cmp(name)).ok().map(|i| KcId(i as u32))
    }

    pub fn section_of(&self, p: ProblemId) -> SectionId {
        self.curriculum.problem_section[p.index()]
    }

    /// Indices (into [`Corpus::traces`]) of a student's traces, by problem id.
    pub fn traces_of_student(&self, s: StudentId) -> &[usize] {
        &self.by_student[s.index()]
    }

    pub fn trace_index(&self, s: StudentId, p: ProblemId) -> Option<usize> {
        self.by_pair.get(&(s, p)).copied()
    }

    pub fn trace(&self, s: StudentId, p: ProblemId) -> Option<&StrategyTrace> {
        self.trace_index(s, p).map(|i| &self.traces[i])
    }

    pub fn max_trace_len(&self) -> usize {
        self.traces.iter().map(StrategyTrace::len).max().unwrap_or(0)
    }

    /// Stable 64-bit fingerprint of the full corpus content.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv::new();
        for name in self.students.iter().chain(&self.problems).chain(&self.kc_vocab).chain(&self.curriculum.units) {
            h.write(name.as_bytes());
            h.write(&[0]);
        }
        for s in &self.curriculum.sections {
            h.write(s.name.as_bytes());
            h.write(&s.unit.0.to_le_bytes());
        }
        for t in &self.traces {
            h.write(&t.student.0.to_le_bytes());
            h.write(&t.problem.0.to_le_bytes());
            for (k, c) in t.kcs.iter().zip(&t.cfas) {
                h.write(&k.0.to_le_bytes());
                h.write(&[u8::from(*c)]);
            }
        }
        h.finish()
    }
}

/// FNV-1a, 64 bit.
pub struct Fnv(u64);

impl Fnv {
    pub fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }

    pub fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

impl Default for Fnv {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn rec(s: &str, p: &str, step: u32, kc: &str, cfa: bool) -> TransactionRecord {
        TransactionRecord {
            student_id: s.into(),
            problem_id: p.into(),
            unit_id: "u1".into(),
            section_id: "sec1".into(),
            step_index: step,
            kc_id: kc.into(),
            cfa,
        }
    }

    #[test]
    fn one_pair_three_steps_is_one_trace() {
        let c = Corpus::consolidate(&[rec("a", "p", 2, "z", true), rec("a", "p", 0, "x", false), rec("a", "p", 1, "y", true)]).unwrap();
        assert_eq!(c.len(), 1);
        let t = &c.traces()[0];
        let names: Vec<&str> = t.kcs.iter().map(|&k| c.kc_name(k)).collect();
        assert_eq!(names, ["x", "y", "z"]);
        assert_eq!(t.cfas, [false, true, true]);
    }

    #[test]
    fn two_students_one_problem_is_two_traces() {
        let c = Corpus::consolidate(&[rec("b", "p", 0, "x", true), rec("a", "p", 0, "x", true)]).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.students(), ["a", "b"]);
        assert_eq!(c.traces()[0].student, StudentId(0));
    }

    #[test]
    fn duplicate_step_is_an_error() {
        let err = Corpus::consolidate(&[rec("a", "p", 0, "x", true), rec("a", "p", 0, "y", true)]).unwrap_err();
        assert!(matches!(err, CorpusError::DuplicateStep { step: 0, .. }));
    }

    #[test]
    fn multi_kc_steps_unroll_in_place() {
        let c = Corpus::consolidate(&[rec("a", "p", 0, "x~~y", false), rec("a", "p", 1, "z", true)]).unwrap();
        let t = &c.traces()[0];
        assert_eq!(t.len(), 3);
        assert_eq!(t.cfas, [false, false, true]);
        assert_eq!(c.kc_name(t.kcs[1]), "y");
    }

    #[test]
    fn problem_in_two_sections_rejected() {
        let mut r = rec("b", "p", 0, "x", true);
        r.section_id = "sec2".into();
        assert!(matches!(
            Corpus::consolidate(&[rec("a", "p", 0, "x", true), r]),
            Err(CorpusError::ProblemInTwoSections { .. })
        ));
    }

    #[test]
    fn records_round_trip() {
        let mut recs = vec![rec("a", "p", 0, "x", true), rec("a", "q", 0, "y", false), rec("b", "q", 0, "x", true)];
        recs[1].section_id = "sec0".into();
        recs[2].section_id = "sec0".into();
        let c = Corpus::consolidate(&recs).unwrap();
        let again = Corpus::consolidate(&c.to_records()).unwrap();
        assert_eq!(c, again);
        assert_eq!(c.fingerprint(), again.fingerprint());
        assert_eq!(c.curriculum().sections.len(), 2);
        let sub = c.subset(&[2]);
        assert_eq!(sub.len(), 1);
        assert_eq!(sub.students(), c.students());
    }
}
