//! Shared pieces of the text artifact formats: the provenance header and
//! field escaping.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{what}: line {line}: {msg}")]
    Parse { what: &'static str, line: usize, msg: String },
    #[error("{what}: expected a `{expected}` artifact, found `{found}`")]
    WrongKind { what: &'static str, expected: &'static str, found: String },
    #[error("{what}: missing header field `{field}`")]
    MissingField { what: &'static str, field: &'static str },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl FormatError {
    pub fn parse(what: &'static str, line: usize, msg: impl Into<String>) -> Self {
        FormatError::Parse { what, line, msg: msg.into() }
    }
}

/// Who produced an artifact. Written as `# key=value` lines at the top of
/// every file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Provenance {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
}

impl Provenance {
    pub fn new(command: &str, config_hash: &str, seed: u64) -> Self {
        Provenance { command: command.into(), config_hash: config_hash.into(), seed }
    }
}

/// Writes the header block. `extra` pairs follow the fixed fields in order.
pub fn write_header(out: &mut String, kind: &str, prov: &Provenance, extra: &[(&str, String)]) {
    let _ = writeln!(out, "# stratpred {kind}");
    let _ = writeln!(out, "# command={}", prov.command);
    let _ = writeln!(out, "# config={}", prov.config_hash);
    let _ = writeln!(out, "# seed={}", prov.seed);
    for (k, v) in extra {
        let _ = writeln!(out, "# {k}={v}");
    }
}

/// Parsed header block plus the number of lines it spans.
#[derive(Clone, Debug)]
pub struct Header {
    pub kind: String,
    pub provenance: Provenance,
    pub fields: BTreeMap<String, String>,
    pub lines: usize,
}

impl Header {
    pub fn field(&self, what: &'static str, name: &'static str) -> Result<&str, FormatError> {
        self.fields.get(name).map(String::as_str).ok_or(FormatError::MissingField { what, field: name })
    }

    pub fn parsed<T: std::str::FromStr>(&self, what: &'static str, name: &'static str) -> Result<T, FormatError> {
        let raw = self.field(what, name)?;
        raw.parse().map_err(|_| FormatError::Invalid(format!("{what}: header field `{name}` has bad value `{raw}`")))
    }
}

pub fn read_header(text: &str, what: &'static str, expected: &'static str) -> Result<Header, FormatError> {
    let mut lines = text.lines();
    let first = lines.next().ok_or_else(|| FormatError::parse(what, 1, "empty file"))?;
    let kind = first
        .strip_prefix("# stratpred ")
        .ok_or_else(|| FormatError::parse(what, 1, "missing `# stratpred <kind>` header"))?
        .to_string();
    if kind != expected {
        return Err(FormatError::WrongKind { what, expected, found: kind });
    }
    let mut fields = BTreeMap::new();
    let mut n = 1;
    for line in lines {
        let Some(rest) = line.strip_prefix("# ") else { break };
        let (k, v) = rest.split_once('=').ok_or_else(|| FormatError::parse(what, n + 1, "header line without `=`"))?;
        fields.insert(k.to_string(), v.to_string());
        n += 1;
    }
    let get = |f: &'static str| fields.get(f).cloned().ok_or(FormatError::MissingField { what, field: f });
    let seed = get("seed")?.parse().map_err(|_| FormatError::Invalid(format!("{what}: bad seed")))?;
    let provenance = Provenance { command: get("command")?, config_hash: get("config")?, seed };
    Ok(Header { kind, provenance, fields, lines: n })
}

/// Escapes tabs, newlines, commas and backslashes so that a value fits in
/// one tab-separated field or one comma-separated list item.
pub fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            ',' => out.push_str("\\,"),
            c => out.push(c),
        }
    }
    out
}

pub fn unescape(s: &str) -> Result<String, String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            Some(',') => out.push(','),
            other => return Err(format!("bad escape `\\{}`", other.map(String::from).unwrap_or_default())),
        }
    }
    Ok(out)
}

/// Splits an escaped comma-separated list. An empty field is an empty list.
pub fn split_list(s: &str) -> Result<Vec<String>, String> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    let mut items = Vec::new();
    let mut cur = String::new();
    let mut escaped = false;
    for c in s.chars() {
        if escaped {
            cur.push('\\');
            cur.push(c);
            escaped = false;
        } else if c == '\\' {
            escaped = true;
        } else if c == ',' {
            items.push(unescape(&std::mem::take(&mut cur))?);
        } else {
            cur.push(c);
        }
    }
    if escaped {
        return Err("dangling escape".into());
    }
    items.push(unescape(&cur)?);
    Ok(items)
}

pub fn join_list<'a>(items: impl IntoIterator<Item = &'a str>) -> String {
    items.into_iter().map(escape).collect::<Vec<_>>().join(",")
}

/// Shortest decimal form that parses back to the same `f64`.
pub fn float(x: f64) -> String {
    format!("{x:?}")
}

pub fn parse_float(s: &str) -> Result<f64, String> {
    s.parse::<f64>().map_err(|_| format!("bad number `{s}`"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn escape_round_trips() {
        for s in ["plain", "a,b", "tab\there", "back\\slash", "nl\nx", ""] {
            assert_eq!(unescape(&escape(s)).unwrap(), s);
        }
    }

    #[test]
    fn lists_keep_embedded_commas() {
        let items = ["x,y", "z", "\\"];
        let joined = join_list(items);
        assert_eq!(split_list(&joined).unwrap(), items);
        assert!(split_list("").unwrap().is_empty());
        assert!(split_list("a\\").is_err());
    }

    #[test]
    fn header_round_trips() {
        let mut s = String::new();
        let prov = Provenance::new("embed", "abc123", 7);
        write_header(&mut s, "embeddings", &prov, &[("ablation", "ssms".into())]);
        s.push_str("d=2\n");
        let h = read_header(&s, "embeddings", "embeddings").unwrap();
        assert_eq!(h.provenance, prov);
        assert_eq!(h.field("embeddings", "ablation").unwrap(), "ssms");
        assert_eq!(h.lines, 5);
        assert!(matches!(read_header(&s, "clusters", "clusters"), Err(FormatError::WrongKind { .. })));
    }

    #[test]
    fn floats_round_trip() {
        for x in [0.1, 1.0 / 3.0, -2.5e-300, 0.0] {
            assert_eq!(parse_float(&float(x)).unwrap(), x);
        }
    }
}
