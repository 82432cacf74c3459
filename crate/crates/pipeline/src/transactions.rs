//! Tab-separated transaction logs in the style of DataShop exports.

use std::collections::BTreeMap;
use std::io::Read;

use serde::{Deserialize, Serialize};
use stratpred_core::corpus::TransactionRecord;

use crate::format::FormatError;

/// Header names of the columns the parser reads.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColumnMap {
    pub student: String,
    pub problem: String,
    pub kc: String,
    pub cfa: String,
    pub unit: String,
    pub section: String,
    pub step: String,
    /// Separator between KCs of a multi-skill step.
    pub kc_separator: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        ColumnMap {
            student: "Anon Student Id".into(),
            problem: "Problem Name".into(),
            kc: "KC (Default)".into(),
            cfa: "First Attempt".into(),
            unit: "Level (Unit)".into(),
            section: "Level (Section)".into(),
            step: "Step Index".into(),
            kc_separator: "~~".into(),
        }
    }
}

/// A data row refused by the parser.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Rejection {
    /// 1-based line number in the file, header included.
    pub line: usize,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ParseReport {
    pub rows: usize,
    pub skipped_missing_kc: usize,
    pub skipped_missing_cfa: usize,
    pub rejections: Vec<Rejection>,
}

/// First-attempt outcome. DataShop logs `hint` when the first action was a
/// hint request, which is not a correct first attempt.
fn parse_cfa(raw: &str) -> Option<bool> {
    match raw.trim().to_ascii_lowercase().as_str() {
        "1" | "correct" | "true" => Some(true),
        "0" | "incorrect" | "false" | "hint" => Some(false),
        _ => None,
    }
}

/// Reads transactions in file order. Multi-KC steps are unrolled into
/// consecutive single-KC steps and step indices are renumbered per
/// (student, problem) so they run 0, 1, 2, ...
pub fn parse_transactions<R: Read>(input: R, columns: &ColumnMap) -> Result<(Vec<TransactionRecord>, ParseReport), FormatError> {
    let mut reader = csv::ReaderBuilder::new().delimiter(b'\t').quoting(false).flexible(true).from_reader(input);
    let headers = reader.headers().map_err(|e| FormatError::parse("transactions", 1, e.to_string()))?.clone();
    let wanted = [&columns.student, &columns.problem, &columns.kc, &columns.cfa, &columns.unit, &columns.section, &columns.step];
    let mut idx = [0usize; 7];
    let mut missing = Vec::new();
    for (slot, name) in idx.iter_mut().zip(wanted) {
        match headers.iter().position(|h| h.trim() == name) {
            Some(i) => *slot = i,
            None => missing.push(name.as_str()),
        }
    }
    if !missing.is_empty() {
        return Err(FormatError::parse("transactions", 1, format!("missing columns: {}", missing.join(", "))));
    }
    let [c_student, c_problem, c_kc, c_cfa, c_unit, c_section, c_step] = idx;

    let mut report = ParseReport::default();
    struct Row {
        student: String,
        problem: String,
        unit: String,
        section: String,
        step: u64,
        kcs: Vec<String>,
        cfa: bool,
    }
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        report.rows += 1;
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                report.rejections.push(Rejection { line, reason: e.to_string() });
                continue;
            }
        };
        let get = |c: usize| rec.get(c).unwrap_or("").trim();
        let kc_raw = get(c_kc);
        if kc_raw.is_empty() {
            report.skipped_missing_kc += 1;
            continue;
        }
        let cfa_raw = get(c_cfa);
        if cfa_raw.is_empty() {
            report.skipped_missing_cfa += 1;
            continue;
        }
        let Some(cfa) = parse_cfa(cfa_raw) else {
            report.rejections.push(Rejection { line, reason: format!("non-binary first attempt `{cfa_raw}`") });
            continue;
        };
        let Ok(step) = get(c_step).parse::<u64>() else {
            report.rejections.push(Rejection { line, reason: format!("bad step index `{}`", get(c_step)) });
            continue;
        };
        let (student, problem) = (get(c_student), get(c_problem));
        if student.is_empty() || problem.is_empty() {
            report.rejections.push(Rejection { line, reason: "empty student or problem".into() });
            continue;
        }
        let kcs: Vec<String> = kc_raw.split(columns.kc_separator.as_str()).map(str::trim).filter(|k| !k.is_empty()).map(String::from).collect();
        if kcs.is_empty() {
            report.skipped_missing_kc += 1;
            continue;
        }
        rows.push(Row {
            student: student.into(),
            problem: problem.into(),
            unit: get(c_unit).into(),
            section: get(c_section).into(),
            step,
            kcs,
            cfa,
        });
    }

    // New step index of each (row, kc): rank within the pair by raw step.
    let mut by_pair: BTreeMap<(&str, &str), Vec<usize>> = BTreeMap::new();
    for (i, r) in rows.iter().enumerate() {
        by_pair.entry((&r.student, &r.problem)).or_default().push(i);
    }
    let mut first_step = vec![0u32; rows.len()];
    for members in by_pair.values_mut() {
        members.sort_by_key(|&i| rows[i].step);
        let mut next = 0u32;
        for w in members.windows(2) {
            if rows[w[0]].step == rows[w[1]].step {
                let r = &rows[w[1]];
                return Err(FormatError::Invalid(format!(
                    "transactions: duplicate step {} for student `{}` on problem `{}`",
                    r.step, r.student, r.problem
                )));
            }
        }
        for &i in members.iter() {
            first_step[i] = next;
            next += rows[i].kcs.len() as u32;
        }
    }

    let mut out = Vec::new();
    for (r, &base) in rows.iter().zip(&first_step) {
        for (j, kc) in r.kcs.iter().enumerate() {
            out.push(TransactionRecord {
                student_id: r.student.clone(),
                problem_id: r.problem.clone(),
                unit_id: r.unit.clone(),
                section_id: r.section.clone(),
                step_index: base + j as u32,
                kc_id: kc.clone(),
                cfa: r.cfa,
            });
        }
    }
    Ok((out, report))
}
