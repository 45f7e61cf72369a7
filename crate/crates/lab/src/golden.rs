//! Hex test vectors for the crypto primitives: `primitive input key output`.

use ens_core::cryptokit::{self, Key128, MacKey, Prp64Key};
use thiserror::Error;

pub const VECTORS: &str = include_str!("../data/golden_vectors.txt");

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vector {
    pub primitive: String,
    pub input: Vec<u8>,
    pub key: Vec<u8>,
    pub output: Vec<u8>,
}

#[derive(Debug, Error)]
pub enum GoldenError {
    #[error("line {0}: expected four fields")]
    Fields(usize),
    #[error("line {line}: {source}")]
    Hex {
        line: usize,
        source: hex::FromHexError,
    },
    #[error("line {line}: unknown primitive `{name}`")]
    Primitive { line: usize, name: String },
    #[error("line {line}: wrong key width")]
    KeyWidth { line: usize },
}

pub fn parse(text: &str) -> Result<Vec<Vector>, GoldenError> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 4 {
            return Err(GoldenError::Fields(n + 1));
        }
        let field = |s: &str| -> Result<Vec<u8>, GoldenError> {
            if s == "-" {
                return Ok(Vec::new());
            }
            hex::decode(s).map_err(|source| GoldenError::Hex { line: n + 1, source })
        };
        out.push(Vector {
            primitive: f[0].to_string(),
            input: field(f[1])?,
            key: field(f[2])?,
            output: field(f[3])?,
        });
    }
    Ok(out)
}

fn key<const N: usize>(v: &[u8], line: usize) -> Result<[u8; N], GoldenError> {
    v.try_into().map_err(|_| GoldenError::KeyWidth { line })
}

/// Recomputes a vector with this crate's primitives.
pub fn compute(v: &Vector, line: usize) -> Result<Vec<u8>, GoldenError> {
    Ok(match v.primitive.as_str() {
        "kdf" => cryptokit::kdf(&v.key, &v.input).0.to_vec(),
        "block128" => cryptokit::block128_encrypt(&Key128(key(&v.key, line)?), &v.input)
            .map_err(|_| GoldenError::KeyWidth { line })?
            .to_vec(),
        "prp64" => cryptokit::prp64_encrypt(&Prp64Key(key(&v.key, line)?), &v.input)
            .map_err(|_| GoldenError::KeyWidth { line })?
            .to_vec(),
        "mac40" => cryptokit::mac40(&MacKey(key(&v.key, line)?), &v.input).0.to_vec(),
        "hash" => cryptokit::hash(&v.input).to_vec(),
        "derive_enc" => cryptokit::derive(&key(&v.key, line)?).0 .0.to_vec(),
        "derive_auth" => cryptokit::derive(&key(&v.key, line)?).1 .0.to_vec(),
        other => {
            return Err(GoldenError::Primitive {
                line,
                name: other.to_string(),
            })
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_parses() {
        let v = parse(VECTORS).unwrap();
        assert!(v.len() >= 10);
        assert!(v.iter().any(|x| x.primitive == "prp64"));
    }

    #[test]
    fn bad_lines() {
        assert!(matches!(parse("kdf 00 00"), Err(GoldenError::Fields(1))));
        assert!(matches!(parse("kdf zz 00 00"), Err(GoldenError::Hex { .. })));
    }
}
