//! Parameter checkpoints: a text header naming every parameter and its
//! shape, a magic line, then all values as little-endian `f64` in header
//! order.

use std::fmt::Write as _;

use stratpred_core::tensor::{Matrix, ParamStore};

use crate::format::{read_header, write_header, FormatError, Header, Provenance};

const MAGIC: &[u8] = b"STRATPRED-F64LE\n";
const WHAT: &str = "checkpoint";

pub fn encode(kind: &'static str, prov: &Provenance, extra: &[(&str, String)], store: &ParamStore) -> Vec<u8> {
    let mut head = String::new();
    write_header(&mut head, kind, prov, extra);
    let _ = writeln!(head, "sections={}", store.len());
    for id in store.ids() {
        let (r, c) = store.value(id).shape();
        let _ = writeln!(head, "{}\t{r}\t{c}", store.name(id));
    }
    let mut out = head.into_bytes();
    out.extend_from_slice(MAGIC);
    for id in store.ids() {
        for x in store.value(id).data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

/// A decoded checkpoint: header plus named matrices in file order.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: Header,
    pub params: Vec<(String, Matrix)>,
}

pub fn decode(bytes: &[u8], kind: &'static str) -> Result<Checkpoint, FormatError> {
    let split = bytes
        .windows(MAGIC.len())
        .position(|w| w == MAGIC)
        .ok_or_else(|| FormatError::Invalid(format!("{WHAT}: missing payload marker")))?;
    let text = std::str::from_utf8(&bytes[..split]).map_err(|_| FormatError::Invalid(format!("{WHAT}: header is not UTF-8")))?;
    let header = read_header(text, WHAT, kind)?;
    let mut lines = text.lines().enumerate().skip(header.lines);
    let (n, first) = lines.next().ok_or_else(|| FormatError::parse(WHAT, header.lines + 1, "missing `sections=` line"))?;
    let count: usize = first
        .strip_prefix("sections=")
        .and_then(|c| c.parse().ok())
        .ok_or_else(|| FormatError::parse(WHAT, n + 1, "expected `sections=<n>`"))?;
    let mut shapes = Vec::with_capacity(count);
    for (n, l) in lines {
        let f: Vec<&str> = l.split('\t').collect();
        let (Some(name), Some(r), Some(c), 3) = (f.first(), f.get(1).and_then(|r| r.parse::<usize>().ok()), f.get(2).and_then(|c| c.parse::<usize>().ok()), f.len())
        else {
            return Err(FormatError::parse(WHAT, n + 1, "expected `<name>\\t<rows>\\t<cols>`"));
        };
        shapes.push((name.to_string(), r, c));
    }
    if shapes.len() != count {
        return Err(FormatError::Invalid(format!("{WHAT}: header lists {} sections, expected {count}", shapes.len())));
    }
    let payload = &bytes[split + MAGIC.len()..];
    let needed: usize = shapes.iter().map(|(_, r, c)| r * c * 8).sum();
    if payload.len() != needed {
        return Err(FormatError::Invalid(format!("{WHAT}: payload has {} bytes, shapes need {needed}", payload.len())));
    }
    let mut at = 0;
    let mut params = Vec::with_capacity(count);
    for (name, r, c) in shapes {
        let data: Vec<f64> = payload[at..at + r * c * 8].chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
        at += r * c * 8;
        let m = Matrix::new(r, c, data).map_err(|e| FormatError::Invalid(format!("{WHAT}: {e}")))?;
        params.push((name, m));
    }
    Ok(Checkpoint { header, params })
}

impl Checkpoint {
    /// Copies values into `store`. Both must hold the same names and shapes.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<(), FormatError> {
        if self.params.len() != store.len() {
            return Err(FormatError::Invalid(format!("{WHAT}: holds {} parameters, model has {}", self.params.len(), store.len())));
        }
        for (name, m) in &self.params {
            let id = store.id_of(name).ok_or_else(|| FormatError::Invalid(format!("{WHAT}: model has no parameter `{name}`")))?;
            store.set_value(id, m.clone()).map_err(|e| FormatError::Invalid(format!("{WHAT}: `{name}`: {e}")))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Matrix::from_fn(2, 3, |r, c| r as f64 - c as f64 / 7.0)).unwrap();
        s.add("b", Matrix::row_vector(&[1e-300, -0.0])).unwrap();
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let prov = Provenance::new("train-predictor", "ff", 9);
        let bytes = encode("predictor", &prov, &[("input_dim", "4".into())], &store());
        let ck = decode(&bytes, "predictor").unwrap();
        assert_eq!(ck.header.provenance, prov);
        assert_eq!(ck.header.field("x", "input_dim").unwrap(), "4");
        let mut fresh = ParamStore::new();
        fresh.add("w", Matrix::zeros(2, 3)).unwrap();
        fresh.add("b", Matrix::zeros(1, 2)).unwrap();
        ck.load_into(&mut fresh).unwrap();
        let orig = store();
        for id in orig.ids() {
            let a: Vec<u64> = orig.value(id).data().iter().map(|x| x.to_bits()).collect();
            let b: Vec<u64> = fresh.value(id).data().iter().map(|x| x.to_bits()).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let bytes = encode("predictor", &Provenance::new("c", "h", 0), &[], &store());
        assert!(decode(&bytes[..bytes.len() - 1], "predictor").is_err());
        assert!(decode(&bytes, "mastery-model").is_err());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let ck = decode(&encode("predictor", &Provenance::new("c", "h", 0), &[], &store()), "predictor").unwrap();
        let mut other = ParamStore::new();
        other.add("w", Matrix::zeros(3, 2)).unwrap();
        other.add("b", Matrix::zeros(1, 2)).unwrap();
        assert!(ck.load_into(&mut other).is_err());
    }
}
