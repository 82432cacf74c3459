//! Text artifacts: corpus snapshots, mastery tables, embeddings, cluster
//! assignments and prediction dumps. Every file starts with a provenance
//! header (see [`crate::format`]).

use std::fmt::Write as _;

use stratpred_core::corpus::{Corpus, KcId, ProblemId, StudentId, TransactionRecord};
use stratpred_core::hdp::{self, ClusterModel};
use stratpred_core::mastery::MasteryTable;
use stratpred_core::mvec::EmbeddingSet;

use crate::format::{escape, float, join_list, parse_float, read_header, split_list, unescape, write_header, FormatError, Header, Provenance};

const CORPUS_COLUMNS: &str = "student\tproblem\tunit\tsection\tkcs\tcfas";

/// Data lines after the header, numbered from 1 at the top of the file.
fn body<'a>(text: &'a str, header: &Header) -> impl Iterator<Item = (usize, &'a str)> {
    text.lines().enumerate().skip(header.lines).map(|(i, l)| (i + 1, l)).filter(|(_, l)| !l.is_empty())
}

fn fields<'a>(what: &'static str, line: usize, l: &'a str, n: usize) -> Result<Vec<&'a str>, FormatError> {
    let f: Vec<&str> = l.split('\t').collect();
    if f.len() != n {
        return Err(FormatError::parse(what, line, format!("expected {n} fields, found {}", f.len())));
    }
    Ok(f)
}

fn unesc(what: &'static str, line: usize, s: &str) -> Result<String, FormatError> {
    unescape(s).map_err(|m| FormatError::parse(what, line, m))
}

pub fn write_corpus(corpus: &Corpus, prov: &Provenance) -> String {
    let mut out = String::new();
    write_header(&mut out, "corpus", prov, &[("traces", corpus.len().to_string())]);
    out.push_str(CORPUS_COLUMNS);
    out.push('\n');
    let cur = corpus.curriculum();
    for t in corpus.traces() {
        let sec = &cur.sections[t.section.index()];
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}",
            escape(corpus.student_name(t.student)),
            escape(corpus.problem_name(t.problem)),
            escape(&cur.units[sec.unit.index()]),
            escape(&sec.name),
            join_list(t.kcs.iter().map(|&k| corpus.kc_name(k))),
            t.cfas.iter().map(|&c| if c { "1" } else { "0" }).collect::<Vec<_>>().join(","),
        );
    }
    out
}

pub fn read_corpus(text: &str) -> Result<(Corpus, Header), FormatError> {
    const WHAT: &str = "corpus";
    let header = read_header(text, WHAT, "corpus")?;
    let mut lines = body(text, &header);
    match lines.next() {
        Some((_, l)) if l == CORPUS_COLUMNS => {}
        Some((n, _)) => return Err(FormatError::parse(WHAT, n, "expected column header")),
        None => return Err(FormatError::parse(WHAT, header.lines + 1, "missing column header")),
    }
    let mut records = Vec::new();
    for (n, l) in lines {
        let f = fields(WHAT, n, l, 6)?;
        let kcs = split_list(f[4]).map_err(|m| FormatError::parse(WHAT, n, m))?;
        let cfas: Vec<bool> = f[5]
            .split(',')
            .map(|c| match c {
                "1" => Ok(true),
                "0" => Ok(false),
                _ => Err(FormatError::parse(WHAT, n, format!("bad cfa `{c}`"))),
            })
            .collect::<Result<_, _>>()?;
        if kcs.len() != cfas.len() || kcs.is_empty() {
            return Err(FormatError::parse(WHAT, n, "KC and CFA lists differ in length or are empty"));
        }
        let (student, problem, unit, section) = (unesc(WHAT, n, f[0])?, unesc(WHAT, n, f[1])?, unesc(WHAT, n, f[2])?, unesc(WHAT, n, f[3])?);
        for (i, (kc, cfa)) in kcs.into_iter().zip(cfas).enumerate() {
            records.push(TransactionRecord {
                student_id: student.clone(),
                problem_id: problem.clone(),
                unit_id: unit.clone(),
                section_id: section.clone(),
                step_index: i as u32,
                kc_id: kc,
                cfa,
            });
        }
    }
    let corpus = Corpus::consolidate(&records).map_err(|e| FormatError::Invalid(format!("corpus: {e}")))?;
    Ok((corpus, header))
}

pub fn write_mastery(table: &MasteryTable, corpus: &Corpus, prov: &Provenance) -> String {
    let mut out = String::new();
    write_header(&mut out, "mastery", prov, &[("entries", table.len().to_string())]);
    out.push_str("student\tproblem\tkc\talpha\n");
    for (s, p, k, a) in table.iter() {
        let _ = writeln!(out, "{}\t{}\t{}\t{}", escape(corpus.student_name(s)), escape(corpus.problem_name(p)), escape(corpus.kc_name(k)), float(a));
    }
    out
}

fn lookup<T>(what: &'static str, line: usize, kind: &str, name: &str, found: Option<T>) -> Result<T, FormatError> {
    found.ok_or_else(|| FormatError::parse(what, line, format!("unknown {kind} `{name}`")))
}

pub fn read_mastery(text: &str, corpus: &Corpus) -> Result<(MasteryTable, Header), FormatError> {
    const WHAT: &str = "mastery table";
    let header = read_header(text, WHAT, "mastery")?;
    let mut table = MasteryTable::new();
    for (n, l) in body(text, &header).skip(1) {
        let f = fields(WHAT, n, l, 4)?;
        let (s, p, k) = (unesc(WHAT, n, f[0])?, unesc(WHAT, n, f[1])?, unesc(WHAT, n, f[2])?);
        let s = lookup(WHAT, n, "student", &s, corpus.find_student(&s))?;
        let p = lookup(WHAT, n, "problem", &p, corpus.find_problem(&p))?;
        let k = lookup(WHAT, n, "KC", &k, corpus.find_kc(&k))?;
        let a = parse_float(f[3]).map_err(|m| FormatError::parse(WHAT, n, m))?;
        table.insert(s, p, k, a).map_err(|e| FormatError::parse(WHAT, n, e.to_string()))?;
    }
    Ok((table, header))
}

pub fn write_embeddings(emb: &EmbeddingSet, corpus: &Corpus, prov: &Provenance, extra: &[(&str, String)]) -> String {
    let mut out = String::new();
    write_header(&mut out, "embeddings", prov, extra);
    let _ = writeln!(out, "d={}", emb.dim());
    let mut line = |kind: &str, name: &str, v: &[f64]| {
        let _ = write!(out, "{kind}\t{}", escape(name));
        for x in v {
            let _ = write!(out, "\t{}", float(*x));
        }
        out.push('\n');
    };
    for s in 0..corpus.students().len() as u32 {
        if let Some(v) = emb.student(StudentId(s)) {
            line("student", corpus.student_name(StudentId(s)), v);
        }
    }
    for p in 0..corpus.problems().len() as u32 {
        if let Some(v) = emb.problem(ProblemId(p)) {
            line("problem", corpus.problem_name(ProblemId(p)), v);
        }
    }
    for k in 0..corpus.kc_vocab().len() as u32 {
        if let Some(v) = emb.kc(KcId(k)) {
            line("kc", corpus.kc_name(KcId(k)), v);
        }
    }
    out
}

pub fn read_embeddings(text: &str, corpus: &Corpus) -> Result<(EmbeddingSet, Header), FormatError> {
    const WHAT: &str = "embeddings";
    let header = read_header(text, WHAT, "embeddings")?;
    let mut lines = body(text, &header);
    let (n, first) = lines.next().ok_or_else(|| FormatError::parse(WHAT, header.lines + 1, "missing `d=<dim>` line"))?;
    let dim: usize = first
        .strip_prefix("d=")
        .and_then(|d| d.parse().ok())
        .ok_or_else(|| FormatError::parse(WHAT, n, "expected `d=<dim>`"))?;
    let mut emb = EmbeddingSet::for_corpus(dim, corpus);
    for (n, l) in lines {
        let f = fields(WHAT, n, l, dim + 2)?;
        let name = unesc(WHAT, n, f[1])?;
        let v: Vec<f64> = f[2..].iter().map(|x| parse_float(x)).collect::<Result<_, _>>().map_err(|m| FormatError::parse(WHAT, n, m))?;
        use stratpred_core::mvec::Node;
        let node = match f[0] {
            "student" => Node::Student(lookup(WHAT, n, "student", &name, corpus.find_student(&name))?),
            "problem" => Node::Problem(lookup(WHAT, n, "problem", &name, corpus.find_problem(&name))?),
            "kc" => Node::Kc(lookup(WHAT, n, "KC", &name, corpus.find_kc(&name))?),
            other => return Err(FormatError::parse(WHAT, n, format!("unknown node kind `{other}`"))),
        };
        emb.insert(node, v).map_err(|e| FormatError::parse(WHAT, n, e.to_string()))?;
    }
    Ok((emb, header))
}

fn list_floats(xs: &[f64]) -> String {
    xs.iter().map(|&x| float(x)).collect::<Vec<_>>().join(",")
}

fn parse_floats(what: &'static str, s: &str) -> Result<Vec<f64>, FormatError> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',').map(parse_float).collect::<Result<_, _>>().map_err(|m| FormatError::Invalid(format!("{what}: {m}")))
}

pub fn write_clusters(model: &ClusterModel, corpus: &Corpus, prov: &Provenance, extra: &[(&str, String)]) -> String {
    let mut out = String::new();
    let mut fields = vec![
        ("lambda_local", float(model.lambda_local)),
        ("lambda_global", float(model.lambda_global)),
        ("objective", float(model.objective)),
        ("coherence_history", list_floats(&model.coherence_history)),
        ("global_clusters", model.n_global().to_string()),
    ];
    fields.extend_from_slice(extra);
    write_header(&mut out, "clusters", prov, &fields);
    out.push_str("kind\tnode_id\tlocal_cluster\tglobal_cluster\n");
    for (dataset, kind) in [(hdp::STUDENTS, "student"), (hdp::PROBLEMS, "problem")] {
        for (i, &id) in model.node_ids[dataset].iter().enumerate() {
            let name = if dataset == hdp::STUDENTS { corpus.student_name(StudentId(id)) } else { corpus.problem_name(ProblemId(id)) };
            let local = model.assignments[dataset][i];
            let _ = writeln!(out, "{kind}\t{}\t{local}\t{}", escape(name), model.local_global[dataset][local]);
        }
    }
    out
}

/// Rebuilds a cluster model from its file. Centers are recomputed from
/// `embeddings` as the means of their members.
pub fn read_clusters(text: &str, corpus: &Corpus, embeddings: &EmbeddingSet) -> Result<(ClusterModel, Header), FormatError> {
    const WHAT: &str = "clusters";
    let header = read_header(text, WHAT, "clusters")?;
    let n_global: usize = header.parsed(WHAT, "global_clusters")?;
    // (node id, local, global) per dataset
    let mut rows: [Vec<(u32, usize, usize)>; 2] = [Vec::new(), Vec::new()];
    for (n, l) in body(text, &header).skip(1) {
        let f = fields(WHAT, n, l, 4)?;
        let name = unesc(WHAT, n, f[1])?;
        let (dataset, id) = match f[0] {
            "student" => (hdp::STUDENTS, lookup(WHAT, n, "student", &name, corpus.find_student(&name))?.0),
            "problem" => (hdp::PROBLEMS, lookup(WHAT, n, "problem", &name, corpus.find_problem(&name))?.0),
            other => return Err(FormatError::parse(WHAT, n, format!("unknown node kind `{other}`"))),
        };
        let local: usize = f[2].parse().map_err(|_| FormatError::parse(WHAT, n, "bad local cluster"))?;
        let global: usize = f[3].parse().map_err(|_| FormatError::parse(WHAT, n, "bad global cluster"))?;
        if global >= n_global {
            return Err(FormatError::parse(WHAT, n, format!("global cluster {global} out of range")));
        }
        rows[dataset].push((id, local, global));
    }
    let dim = embeddings.dim();
    let mut node_ids = vec![Vec::new(), Vec::new()];
    let mut assignments = vec![Vec::new(), Vec::new()];
    let mut local_global = vec![Vec::new(), Vec::new()];
    let mut local_sums: Vec<Vec<(Vec<f64>, usize)>> = vec![Vec::new(), Vec::new()];
    let mut global_sums = vec![(vec![0.0; dim], 0usize); n_global];
    for (dataset, rows) in rows.iter_mut().enumerate() {
        rows.sort_by_key(|r| r.0);
        for &(id, local, global) in rows.iter() {
            let v = if dataset == hdp::STUDENTS { embeddings.student(StudentId(id)) } else { embeddings.problem(ProblemId(id)) };
            let v = v.ok_or_else(|| FormatError::Invalid(format!("{WHAT}: node {id} has no embedding")))?;
            if local_global[dataset].len() <= local {
                local_global[dataset].resize(local + 1, usize::MAX);
                local_sums[dataset].resize(local + 1, (vec![0.0; dim], 0));
            }
            if local_global[dataset][local] != usize::MAX && local_global[dataset][local] != global {
                return Err(FormatError::Invalid(format!("{WHAT}: local cluster {local} maps to two global clusters")));
            }
            local_global[dataset][local] = global;
            for (acc, x) in local_sums[dataset][local].0.iter_mut().zip(v) {
                *acc += x;
            }
            local_sums[dataset][local].1 += 1;
            for (acc, x) in global_sums[global].0.iter_mut().zip(v) {
                *acc += x;
            }
            global_sums[global].1 += 1;
            node_ids[dataset].push(id);
            assignments[dataset].push(local);
        }
        if local_global[dataset].contains(&usize::MAX) {
            return Err(FormatError::Invalid(format!("{WHAT}: local cluster numbering has gaps")));
        }
    }
    let mean = |(s, n): (Vec<f64>, usize)| s.into_iter().map(|x| x / n.max(1) as f64).collect::<Vec<f64>>();
    let model = ClusterModel {
        node_ids,
        assignments,
        local_global,
        local_centers: local_sums.into_iter().map(|d| d.into_iter().map(mean).collect()).collect(),
        global_centers: global_sums.into_iter().map(mean).collect(),
        lambda_local: header.parsed(WHAT, "lambda_local")?,
        lambda_global: header.parsed(WHAT, "lambda_global")?,
        objective: header.parsed(WHAT, "objective")?,
        objective_history: Vec::new(),
        coherence_history: parse_floats(WHAT, header.field(WHAT, "coherence_history")?)?,
        passes: 0,
    };
    Ok((model, header))
}

/// One decoded strategy next to the logged one.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PredictionRow {
    pub student: String,
    pub problem: String,
    pub predicted: Vec<String>,
    pub actual: Vec<String>,
}

pub fn write_predictions(rows: &[PredictionRow], prov: &Provenance, extra: &[(&str, String)]) -> String {
    let mut out = String::new();
    write_header(&mut out, "predictions", prov, extra);
    out.push_str("student\tproblem\tpredicted\tactual\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}",
            escape(&r.student),
            escape(&r.problem),
            join_list(r.predicted.iter().map(String::as_str)),
            join_list(r.actual.iter().map(String::as_str))
        );
    }
    out
}

pub fn read_predictions(text: &str) -> Result<(Vec<PredictionRow>, Header), FormatError> {
    const WHAT: &str = "predictions";
    let header = read_header(text, WHAT, "predictions")?;
    let mut rows = Vec::new();
    for (n, l) in body(text, &header).skip(1) {
        let f = fields(WHAT, n, l, 4)?;
        let list = |s: &str| split_list(s).map_err(|m| FormatError::parse(WHAT, n, m));
        rows.push(PredictionRow { student: unesc(WHAT, n, f[0])?, problem: unesc(WHAT, n, f[1])?, predicted: list(f[2])?, actual: list(f[3])? });
    }
    Ok((rows, header))
}

#[cfg(test)]
mod tests {
    use super::*;
    use stratpred_core::synthetic::{generate_synthetic, SyntheticWorldConfig};

    fn prov() -> Provenance {
        Provenance::new("test", "0000", 3)
    }

    fn small() -> Corpus {
        generate_synthetic(&SyntheticWorldConfig::new(12, 20, 8, 2).with_seed(4)).unwrap().0
    }

    #[test]
    fn corpus_round_trips() {
        let c = small();
        let text = write_corpus(&c, &prov());
        let (back, h) = read_corpus(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(h.provenance, prov());
    }

    #[test]
    fn awkward_names_survive() {
        let recs = vec![TransactionRecord {
            student_id: "a,b\tc".into(),
            problem_id: "p\\1".into(),
            unit_id: "u 1".into(),
            section_id: "s,1".into(),
            step_index: 0,
            kc_id: "k,1".into(),
            cfa: true,
        }];
        let c = Corpus::consolidate(&recs).unwrap();
        assert_eq!(read_corpus(&write_corpus(&c, &prov())).unwrap().0, c);
    }

    #[test]
    fn corpus_errors_carry_line_numbers() {
        let mut text = write_corpus(&small(), &prov());
        text.push_str("x\ty\n");
        let err = read_corpus(&text).unwrap_err().to_string();
        assert!(err.contains("line"), "{err}");
    }

    #[test]
    fn mastery_round_trips() {
        let c = small();
        let mut t = MasteryTable::new();
        let tr = &c.traces()[0];
        t.insert(tr.student, tr.problem, tr.kcs[0], 1.0 / 3.0).unwrap();
        let (back, _) = read_mastery(&write_mastery(&t, &c, &prov()), &c).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn embeddings_round_trip() {
        let c = small();
        let mut e = EmbeddingSet::for_corpus(2, &c);
        use stratpred_core::mvec::Node;
        e.insert(Node::Student(StudentId(1)), vec![0.1, -2.0]).unwrap();
        e.insert(Node::Kc(KcId(0)), vec![1e-300, 3.0]).unwrap();
        let text = write_embeddings(&e, &c, &prov(), &[]);
        assert!(text.lines().nth(4).unwrap() == "d=2");
        assert_eq!(read_embeddings(&text, &c).unwrap().0, e);
    }

    #[test]
    fn clusters_round_trip_membership() {
        let c = small();
        let mut e = EmbeddingSet::for_corpus(2, &c);
        use stratpred_core::mvec::Node;
        for s in 0..c.students().len() as u32 {
            e.insert(Node::Student(StudentId(s)), vec![s as f64, 0.0]).unwrap();
        }
        for p in 0..c.problems().len() as u32 {
            e.insert(Node::Problem(ProblemId(p)), vec![0.0, p as f64]).unwrap();
        }
        let pts = hdp::corpus_points(&c, &e);
        let mut m = hdp::dp_means_hdp(&pts.students, &pts.problems, 20.0, 40.0).unwrap();
        m.node_ids = vec![pts.student_ids.clone(), pts.problem_ids.clone()];
        m.coherence_history = vec![0.5, 0.75];
        let (back, _) = read_clusters(&write_clusters(&m, &c, &prov(), &[]), &c, &e).unwrap();
        assert_eq!(back.node_ids, m.node_ids);
        assert_eq!(back.assignments, m.assignments);
        assert_eq!(back.local_global, m.local_global);
        assert_eq!(back.coherence_history, m.coherence_history);
        assert_eq!(hdp::cluster_traces(&back, &c), hdp::cluster_traces(&m, &c));
    }

    #[test]
    fn predictions_round_trip() {
        let rows = vec![PredictionRow { student: "s".into(), problem: "p".into(), predicted: vec![], actual: vec!["a".into(), "b,c".into()] }];
        assert_eq!(read_predictions(&write_predictions(&rows, &prov(), &[])).unwrap().0, rows);
    }
}
