//! JSON Lines feature manifests.
//!
//! Line 1 is `{"type":"header","version":1,"feature_dim":D}`; every other line is
//! `{"id":..,"sl":..,"lang":..,"text":..,"feat":[[..D floats..],..]}`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Sample, Tokenizer};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    #[serde(rename = "type")]
    kind: String,
    version: u32,
    feature_dim: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    sl: String,
    lang: String,
    text: String,
    feat: Vec<Vec<f32>>,
}

#[derive(Serialize)]
struct RecordOut<'a> {
    id: &'a str,
    sl: &'a str,
    lang: &'a str,
    text: String,
    feat: Vec<Vec<f32>>,
}

/// Parses a manifest from any reader; `name` labels errors.
pub fn parse_manifest<R: BufRead>(reader: R, name: &str, tokenizer: Tokenizer) -> Result<Vec<Sample>> {
    let err = |line: usize, message: String| Error::Parse {
        path: name.to_string(),
        line,
        message,
    };
    let mut lines = reader.lines().enumerate();
    let feature_dim = match lines.next() {
        None => return Err(err(1, "missing header line".into())),
        Some((_, line)) => {
            let line = line.map_err(|e| err(1, e.to_string()))?;
            let h: Header = serde_json::from_str(&line)
                .map_err(|e| err(1, format!("bad header: {e}")))?;
            if h.kind != "header" {
                return Err(err(1, format!("expected header, found type {:?}", h.kind)));
            }
            if h.version != MANIFEST_VERSION {
                return Err(err(1, format!("unsupported manifest version {}", h.version)));
            }
            if h.feature_dim == 0 {
                return Err(err(1, "feature_dim must be positive".into()));
            }
            h.feature_dim
        }
    };
    let mut samples = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        let line = line.map_err(|e| err(lineno, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: Record = serde_json::from_str(&line).map_err(|e| err(lineno, e.to_string()))?;
        if r.feat.is_empty() {
            return Err(err(lineno, format!("sample {} has no frames", r.id)));
        }
        if let Some(bad) = r.feat.iter().position(|row| row.len() != feature_dim) {
            return Err(err(
                lineno,
                format!(
                    "frame {bad} of sample {} has width {}, header says {feature_dim}",
                    r.id,
                    r.feat[bad].len()
                ),
            ));
        }
        let text = tokenizer.tokenize(&r.text);
        if text.is_empty() {
            return Err(err(lineno, format!("sample {} has empty text", r.id)));
        }
        let frames = r.feat.len();
        let data: Vec<f64> = r.feat.into_iter().flatten().map(f64::from).collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(err(lineno, format!("sample {} has non-finite features", r.id)));
        }
        samples.push(Sample {
            id: r.id,
            sl: r.sl,
            lang: r.lang,
            features: Tensor::new(vec![frames, feature_dim], data)
                .map_err(|e| err(lineno, e.to_string()))?,
            text,
        });
    }
    Ok(samples)
}

pub fn read_manifest(path: &Path, tokenizer: Tokenizer) -> Result<Vec<Sample>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(BufReader::new(f), &path.display().to_string(), tokenizer)
}

/// Serializes samples; features are stored at 32-bit precision.
pub fn write_manifest_to<W: Write>(mut w: W, samples: &[Sample], tokenizer: Tokenizer) -> std::io::Result<()> {
    let feature_dim = samples.first().map_or(1, Sample::feature_dim);
    let header = Header {
        kind: "header".into(),
        version: MANIFEST_VERSION,
        feature_dim,
    };
    serde_json::to_writer(&mut w, &header)?;
    writeln!(w)?;
    for s in samples {
        if s.feature_dim() != feature_dim {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidInput,
                format!("sample {} has feature width {}", s.id, s.feature_dim()),
            ));
        }
        let rec = RecordOut {
            id: &s.id,
            sl: &s.sl,
            lang: &s.lang,
            text: tokenizer.detokenize(&s.text),
            feat: (0..s.frames())
                .map(|t| s.features.row(t).iter().map(|&v| v as f32).collect())
                .collect(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        writeln!(w)?;
    }
    w.flush()
}

pub fn write_manifest(path: &Path, samples: &[Sample], tokenizer: Tokenizer) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_manifest_to(BufWriter::new(f), samples, tokenizer).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn parse(text: &str) -> Result<Vec<Sample>> {
        parse_manifest(text.as_bytes(), "mem", Tokenizer::Whitespace)
    }

    #[test]
    fn header_accepted() {
        let s = parse("{\"type\":\"header\",\"version\":1,\"feature_dim\":64}\n").unwrap();
        assert!(s.is_empty());
    }

    #[test]
    fn missing_header_rejected() {
        let e = parse("").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 1, .. }));
        let e = parse("{\"id\":\"a\",\"sl\":\"x\",\"lang\":\"y\",\"text\":\"t\",\"feat\":[[1]]}\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn width_mismatch_names_line() {
        let text = concat!(
            "{\"type\":\"header\",\"version\":1,\"feature_dim\":4}\n",
            "{\"id\":\"a\",\"sl\":\"bfi\",\"lang\":\"en\",\"text\":\"hi\",\"feat\":[[1,2,3,4]]}\n",
            "{\"id\":\"b\",\"sl\":\"bfi\",\"lang\":\"en\",\"text\":\"hi\",\"feat\":[[1,2,3]]}\n",
        );
        match parse(text).unwrap_err() {
            Error::Parse { line, message, .. } => {
                assert_eq!(line, 3);
                assert!(message.contains("width 3"));
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn malformed_record_names_line() {
        let text = "{\"type\":\"header\",\"version\":1,\"feature_dim\":1}\n{\"id\":3}\n";
        assert!(matches!(parse(text).unwrap_err(), Error::Parse { line: 2, .. }));
    }

    fn arb_samples() -> impl Strategy<Value = Vec<Sample>> {
        let sample = (
            "[a-z0-9]{1,8}",
            "[a-z]{3}",
            "[a-z]{2}",
            prop::collection::vec("[a-z]{1,5}", 1..5),
            1usize..5,
            prop::collection::vec(-1e3f32..1e3, 12),
        )
            .prop_map(|(id, sl, lang, text, frames, vals)| {
                let data: Vec<f64> = (0..frames * 3).map(|i| vals[i % 12] as f64).collect();
                Sample {
                    id,
                    sl,
                    lang,
                    features: Tensor::new(vec![frames, 3], data).unwrap(),
                    text,
                }
            });
        prop::collection::vec(sample, 0..6)
    }

    proptest! {
        #[test]
        fn write_then_read_roundtrips(samples in arb_samples()) {
            let mut buf = Vec::new();
            write_manifest_to(&mut buf, &samples, Tokenizer::Whitespace).unwrap();
            let back = parse_manifest(buf.as_slice(), "mem", Tokenizer::Whitespace).unwrap();
            prop_assert_eq!(back, samples);
        }
    }
}
