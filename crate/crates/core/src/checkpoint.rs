//! Self-describing checkpoint files: a text manifest followed by a blob of
//! little-endian `f32` tensor data.
//!
//! ```text
//! mcbeit-checkpoint v1
//! step 1600
//! config seed = 0
//! ...
//! tensor patch_embed.weight f32 192,128 0 98304
//! ...
//! blob_bytes 3456789
//! blob_crc32 9f3c21a0
//! end
//! <blob>
//! ```
//!
//! Tensor offsets are relative to the first blob byte. Model tensors come in
//! [`ModelParams::names`] order, followed by `codebook.codes`.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;

use crate::config::TrainConfig;
use crate::encoder::ModelParams;
use crate::tokenizer::Codebook;
use crate::{Error, Result};

pub const MAGIC: &str = "mcbeit-checkpoint";
pub const FORMAT_VERSION: u32 = 1;
pub const CODEBOOK_TENSOR: &str = "codebook.codes";

/// Everything a checkpoint file holds. Either part may be absent: a
/// tokenizer export carries only the codebook.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: u64,
    pub params: Option<ModelParams<f32>>,
    pub codebook: Option<Codebook>,
}

impl Checkpoint {
    pub fn require_params(&self) -> Result<&ModelParams<f32>> {
        self.params
            .as_ref()
            .ok_or_else(|| Error::Malformed("checkpoint holds no model parameters".into()))
    }

    pub fn require_codebook(&self) -> Result<&Codebook> {
        self.codebook
            .as_ref()
            .ok_or_else(|| Error::Malformed("checkpoint holds no codebook".into()))
    }
}

#[derive(Debug, Clone, PartialEq)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    nbytes: u64,
}

/// Serializes a checkpoint to bytes.
pub fn encode(ck: &Checkpoint) -> Result<Vec<u8>> {
    if ck.params.is_none() && ck.codebook.is_none() {
        return Err(Error::InvalidArgument("nothing to save".into()));
    }
    let mut entries = Vec::new();
    let mut blob = Vec::new();
    let mut push = |name: &str, shape: Vec<usize>, data: &[f32]| {
        let offset = blob.len() as u64;
        for v in data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(TensorEntry {
            name: name.to_string(),
            shape,
            offset,
            nbytes: data.len() as u64 * 4,
        });
    };
    if let Some(p) = &ck.params {
        if p.config != ck.config.model_config() {
            return Err(Error::Shape(format!(
                "parameters {:?} do not match the configuration {:?}",
                p.config,
                ck.config.model_config()
            )));
        }
        p.for_each(|name, shape, data| push(name, shape.to_vec(), data));
    }
    if let Some(cb) = &ck.codebook {
        let codes = cb.codes().as_standard_layout();
        push(
            CODEBOOK_TENSOR,
            vec![cb.vocab(), cb.token_dim()],
            codes.as_slice().expect("standard layout"),
        );
    }

    let mut head = String::new();
    writeln!(head, "{MAGIC} v{FORMAT_VERSION}").unwrap();
    writeln!(head, "step {}", ck.step).unwrap();
    for (k, v) in ck.config.to_pairs() {
        writeln!(head, "config {k} = {v}").unwrap();
    }
    for e in &entries {
        let dims: Vec<String> = e.shape.iter().map(|d| d.to_string()).collect();
        writeln!(
            head,
            "tensor {} f32 {} {} {}",
            e.name,
            dims.join(","),
            e.offset,
            e.nbytes
        )
        .unwrap();
    }
    writeln!(head, "blob_bytes {}", blob.len()).unwrap();
    writeln!(head, "blob_crc32 {:08x}", crc32fast::hash(&blob)).unwrap();
    writeln!(head, "end").unwrap();
    let mut out = head.into_bytes();
    out.extend_from_slice(&blob);
    Ok(out)
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    std::fs::write(path, encode(ck)?)?;
    Ok(())
}

fn malformed(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Malformed(format!("manifest line {line}: {msg}"))
}

/// Parses checkpoint bytes.
pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    // the manifest is ASCII text terminated by the `end` line
    let marker = b"\nend\n";
    let end = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| Error::Malformed("manifest end marker not found".into()))?;
    let blob_start = end + marker.len();
    let head = std::str::from_utf8(&bytes[..end])
        .map_err(|_| Error::Malformed("manifest is not UTF-8".into()))?;
    let blob = &bytes[blob_start..];

    let mut lines = head.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, first) = lines
        .next()
        .ok_or_else(|| Error::Malformed("empty manifest".into()))?;
    let version = first
        .strip_prefix(MAGIC)
        .map(str::trim)
        .ok_or_else(|| Error::Malformed(format!("not a checkpoint (header {first:?})")))?;
    if version != format!("v{FORMAT_VERSION}") {
        return Err(Error::VersionMismatch {
            found: version.to_string(),
            expected: FORMAT_VERSION,
        });
    }

    let mut step = None;
    let mut pairs: Vec<(String, String)> = Vec::new();
    let mut entries: Vec<TensorEntry> = Vec::new();
    let mut declared = None;
    let mut crc = None;
    for (no, line) in lines {
        let (kind, rest) = line.split_once(' ').unwrap_or((line, ""));
        match kind {
            "step" => {
                step = Some(rest.parse::<u64>().map_err(|_| malformed(no, "bad step"))?);
            }
            "config" => {
                let (k, v) = rest
                    .split_once(" = ")
                    .ok_or_else(|| malformed(no, "expected `config key = value`"))?;
                pairs.push((k.to_string(), v.to_string()));
            }
            "tensor" => {
                let f: Vec<&str> = rest.split(' ').collect();
                if f.len() != 5 {
                    return Err(malformed(
                        no,
                        "expected `tensor name dtype dims offset nbytes`",
                    ));
                }
                if f[1] != "f32" {
                    return Err(malformed(no, format!("unsupported dtype {}", f[1])));
                }
                let shape = f[2]
                    .split(',')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| malformed(no, "bad shape"))?;
                let offset = f[3].parse().map_err(|_| malformed(no, "bad offset"))?;
                let nbytes: u64 = f[4].parse().map_err(|_| malformed(no, "bad byte count"))?;
                if nbytes != shape.iter().product::<usize>() as u64 * 4 {
                    return Err(malformed(
                        no,
                        format!("{} bytes do not match shape {shape:?}", nbytes),
                    ));
                }
                entries.push(TensorEntry {
                    name: f[0].to_string(),
                    shape,
                    offset,
                    nbytes,
                });
            }
            "blob_bytes" => {
                declared = Some(
                    rest.parse::<u64>()
                        .map_err(|_| malformed(no, "bad blob size"))?,
                );
            }
            "blob_crc32" => {
                crc =
                    Some(u32::from_str_radix(rest, 16).map_err(|_| malformed(no, "bad checksum"))?);
            }
            _ => return Err(malformed(no, format!("unknown record {kind:?}"))),
        }
    }
    let step = step.ok_or_else(|| Error::Malformed("missing step record".into()))?;
    let declared = declared.ok_or_else(|| Error::Malformed("missing blob_bytes record".into()))?;
    let crc = crc.ok_or_else(|| Error::Malformed("missing blob_crc32 record".into()))?;
    let actual = blob.len() as u64;
    if actual < declared {
        return Err(Error::TruncatedBlob {
            expected: declared,
            actual,
            blob_start: blob_start as u64,
        });
    }
    if actual > declared {
        return Err(Error::Malformed(format!(
            "{} trailing bytes after the declared blob",
            actual - declared
        )));
    }
    for e in &entries {
        let end = e.offset.saturating_add(e.nbytes);
        if end > declared {
            return Err(Error::OffsetOverrun {
                name: e.name.clone(),
                offset: e.offset,
                end,
                blob_len: declared,
            });
        }
    }
    let found = crc32fast::hash(blob);
    if found != crc {
        return Err(Error::ChecksumMismatch {
            expected: crc,
            found,
        });
    }
    let read = |e: &TensorEntry| -> Vec<f32> {
        blob[e.offset as usize..(e.offset + e.nbytes) as usize]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect()
    };

    let config = TrainConfig::from_pairs(&pairs)?;
    let mut seen = std::collections::HashSet::new();
    for e in &entries {
        if !seen.insert(e.name.as_str()) {
            return Err(Error::Malformed(format!(
                "tensor `{}` listed twice",
                e.name
            )));
        }
    }

    let codebook = match entries.iter().find(|e| e.name == CODEBOOK_TENSOR) {
        Some(e) => {
            if e.shape.len() != 2 {
                return Err(Error::Malformed("codebook must be 2-D".into()));
            }
            let codes = Array2::from_shape_vec((e.shape[0], e.shape[1]), read(e))
                .map_err(|err| Error::Malformed(err.to_string()))?;
            Some(Codebook::with_gain(
                codes,
                config.model_config().patch_dim(),
                config.tokenizer.gain,
            )?)
        }
        None => None,
    };

    let model_entries: Vec<&TensorEntry> = entries
        .iter()
        .filter(|e| e.name != CODEBOOK_TENSOR)
        .collect();
    let params = if model_entries.is_empty() {
        None
    } else {
        let mut p = ModelParams::<f32>::zeros(&config.model_config())?;
        if model_entries.len() != p.num_tensors() {
            return Err(Error::Malformed(format!(
                "manifest lists {} model tensors, the configured model has {}",
                model_entries.len(),
                p.num_tensors()
            )));
        }
        let mut failure = None;
        p.for_each_mut(|name, shape, data| {
            if failure.is_some() {
                return;
            }
            match model_entries.iter().find(|e| e.name == name) {
                None => failure = Some(Error::Malformed(format!("tensor `{name}` missing"))),
                Some(e) if e.shape != shape => {
                    failure = Some(Error::Shape(format!(
                        "tensor `{name}` has shape {:?} in the file, model expects {shape:?}",
                        e.shape
                    )))
                }
                Some(e) => data.copy_from_slice(&read(e)),
            }
        });
        if let Some(err) = failure {
            return Err(err);
        }
        Some(p)
    };

    Ok(Checkpoint {
        config,
        step,
        params,
        codebook,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::init_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> Checkpoint {
        let mut cfg = TrainConfig::desk();
        cfg.model.layers = 2;
        cfg.model.dim = 16;
        cfg.model.heads = 2;
        cfg.model.vocab = 8;
        cfg.data.image_size = 16;
        let params = init_params(&cfg.model_config(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let codes = Array2::from_shape_fn((8, 48), |(i, j)| (i * 48 + j) as f32 * 0.01);
        let codebook = Codebook::with_gain(codes, 192, cfg.tokenizer.gain).unwrap();
        Checkpoint {
            config: cfg,
            step: 42,
            params: Some(params),
            codebook: Some(codebook),
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let ck = tiny();
        let bytes = encode(&ck).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(encode(&back).unwrap(), bytes);
    }

    #[test]
    fn tensor_count_matches_model() {
        let ck = tiny();
        let bytes = encode(&ck).unwrap();
        let text = String::from_utf8_lossy(&bytes);
        let n = text.lines().filter(|l| l.starts_with("tensor ")).count();
        // patch weight/bias, pos_embed, mask_token; 16 per block; final
        // norm pair and four head tensors; plus the codebook
        let layers = ck.config.model.layers;
        assert_eq!(n, 4 + 16 * layers + 6 + 1);
        assert_eq!(n, ck.params.as_ref().unwrap().num_tensors() + 1);
    }

    #[test]
    fn truncation_and_version_detected() {
        let bytes = encode(&tiny()).unwrap();
        match decode(&bytes[..bytes.len() - 1]) {
            Err(Error::TruncatedBlob {
                expected, actual, ..
            }) => assert_eq!(expected, actual + 1),
            other => panic!("{other:?}"),
        }
        let text = String::from_utf8_lossy(&bytes).replacen("v1", "v2", 1);
        let mut forged = text.as_bytes()[..].to_vec();
        forged.truncate(bytes.len());
        assert!(matches!(
            decode(&forged),
            Err(Error::VersionMismatch { .. })
        ));
    }

    #[test]
    fn offset_overrun_detected() {
        let bytes = encode(&tiny()).unwrap();
        let text = String::from_utf8_lossy(&bytes).into_owned();
        let line = text
            .lines()
            .find(|l| l.starts_with("tensor norm.bias"))
            .unwrap();
        let f: Vec<&str> = line.split(' ').collect();
        let bumped = format!("{} {} {} {} 999999999 {}", f[0], f[1], f[2], f[3], f[5]);
        let start = text.find(line).unwrap();
        let mut forged = bytes[..start].to_vec();
        forged.extend_from_slice(bumped.as_bytes());
        forged.extend_from_slice(&bytes[start + line.len()..]);
        assert!(
            matches!(decode(&forged), Err(Error::OffsetOverrun { ref name, .. }) if name == "norm.bias")
        );
    }

    #[test]
    fn flipped_blob_bit_detected() {
        let mut bytes = encode(&tiny()).unwrap();
        let i = bytes.len() - 10;
        bytes[i] ^= 0x04;
        assert!(matches!(
            decode(&bytes),
            Err(Error::ChecksumMismatch { .. })
        ));
    }

    #[test]
    fn codebook_only_export() {
        let mut ck = tiny();
        ck.params = None;
        let back = decode(&encode(&ck).unwrap()).unwrap();
        assert!(back.params.is_none());
        assert_eq!(back.codebook, ck.codebook);
    }
}
