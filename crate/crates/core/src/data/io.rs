use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::pose::PoseSample;
use super::template::MeshTemplate;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"P2M1";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_template(path: &Path, template: &MeshTemplate) -> Result<()> {
    let text = serde_json::to_string(template)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_template(path: &Path) -> Result<MeshTemplate> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let t: MeshTemplate = serde_json::from_str(&text).map_err(|e| Error::Format {
        what: "template",
        msg: format!("{}: {e}", path.display()),
    })?;
    t.validate()?;
    Ok(t)
}

pub fn save_dataset(path: &Path, samples: &[PoseSample]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads JSON Lines; blank lines are skipped, errors carry the 1-based line number.
pub fn load_dataset(path: &Path) -> Result<Vec<PoseSample>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let s: PoseSample = serde_json::from_str(&line).map_err(|e| Error::Line {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        if s.pose2d.len() != s.pose3d_gt.len() {
            return Err(Error::Line {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("pose2d has {} joints, pose3d has {}", s.pose2d.len(), s.pose3d_gt.len()),
            });
        }
        out.push(s);
    }
    Ok(out)
}

/// Formats like C's `%.6g`.
pub fn format_g6(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return if v == 0.0 { "0".into() } else { v.to_string() };
    }
    let sci = format!("{v:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("exponent digits");
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        let s = format!("{v:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        let m = if mantissa.contains('.') {
            mantissa.trim_end_matches('0').trim_end_matches('.')
        } else {
            mantissa
        };
        format!("{m}e{}{:02}", if exp < 0 { '-' } else { '+' }, exp.abs())
    }
}

pub fn obj_string(vertices: &[[f64; 3]], faces: &[[usize; 3]]) -> String {
    let mut s = String::new();
    for v in vertices {
        let _ = writeln!(s, "v {} {} {}", format_g6(v[0]), format_g6(v[1]), format_g6(v[2]));
    }
    for f in faces {
        let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    s
}

pub fn write_obj(path: &Path, vertices: &[[f64; 3]], faces: &[[usize; 3]]) -> Result<()> {
    fs::write(path, obj_string(vertices, faces)).map_err(|e| Error::io(path, e))
}

/// Parses `v` and triangular `f` records; `f` tokens may carry `/vt/vn` suffixes.
pub fn parse_obj(text: &str) -> Result<(Vec<[f64; 3]>, Vec<[usize; 3]>)> {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let bad = |msg: &str| Error::Format {
            what: "obj",
            msg: format!("line {}: {msg}", i + 1),
        };
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("v") => {
                let mut p = [0.0; 3];
                for c in p.iter_mut() {
                    *c = tok
                        .next()
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(|| bad("bad vertex"))?;
                }
                vertices.push(p);
            }
            Some("f") => {
                let idx: Vec<usize> = tok
                    .map(|t| t.split('/').next().and_then(|s| s.parse::<usize>().ok()))
                    .collect::<Option<_>>()
                    .ok_or_else(|| bad("bad face index"))?;
                if idx.len() != 3 || idx.contains(&0) {
                    return Err(bad("expected three 1-based indices"));
                }
                faces.push([idx[0] - 1, idx[1] - 1, idx[2] - 1]);
            }
            _ => {}
        }
    }
    Ok((vertices, faces))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// Named `f32` tensors plus a free-form JSON configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut payload = Vec::new();
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
                byte_offset: payload.len() as u64,
            });
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = CheckpointManifest {
            format_version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&manifest)?;
        let len = u32::try_from(json.len()).map_err(|_| Error::Format {
            what: "checkpoint",
            msg: "manifest too large".into(),
        })?;
        let mut out = Vec::with_capacity(8 + json.len() + payload.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: String| Error::Format {
            what: "checkpoint",
            msg,
        };
        if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(bad("bad magic".into()));
        }
        let len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let body = &bytes[8..];
        if body.len() < len {
            return Err(bad(format!("manifest length {len} exceeds file")));
        }
        let manifest: CheckpointManifest =
            serde_json::from_slice(&body[..len]).map_err(|e| bad(format!("manifest: {e}")))?;
        if manifest.format_version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported format_version {}", manifest.format_version)));
        }
        let payload = &body[len..];
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in manifest.tensors {
            if e.dtype != "f32" {
                return Err(bad(format!("{}: unsupported dtype {}", e.name, e.dtype)));
            }
            let n: usize = e.shape.iter().product();
            let start = e.byte_offset as usize;
            let end = start + 4 * n;
            if end > payload.len() {
                return Err(bad(format!("{}: truncated payload", e.name)));
            }
            let data = payload[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push((e.name, Tensor::new(e.shape, data)?));
        }
        Ok(Self {
            config: manifest.config,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
