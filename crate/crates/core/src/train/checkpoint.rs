use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use sha2::{Digest, Sha256};

use super::optim::{AdamW, AdamWConfig};
use super::TrainError;
use crate::codec::{ColumnEntry, ColumnStats, HashingEmbedder, NormStats, TextEmbedder};
use crate::model::{ModelConfig, ModelParams, ModelState};
use crate::store::{ColumnRef, FeatureType};
use crate::tensor::Real;

const MAGIC: &[u8; 8] = b"RELTRCK\0";
pub const FORMAT_VERSION: u32 = 1;

/// Model, statistics, optimizer moments and step counter.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub state: ModelState<f32>,
    pub optimizer: Option<AdamW<f32>>,
    pub step: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("not a checkpoint file (bad magic)")]
    Magic,
    #[error("unsupported checkpoint format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("checkpoint checksum mismatch")]
    Checksum,
    #[error("malformed checkpoint manifest: {0}")]
    Manifest(String),
    #[error("embedder mismatch: checkpoint was written with `{found}`, expected `{expected}`")]
    Embedder { found: String, expected: String },
    #[error("tensor `{tensor}` has shape {found:?} in the checkpoint but the config expects {expected:?}")]
    Shape {
        tensor: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("config hash mismatch: checkpoint {found}, expected {expected}")]
    ConfigHash { found: String, expected: String },
    #[error("unsupported dtype `{0}`")]
    Dtype(String),
}

pub fn sha256_hex(data: &[u8]) -> String {
    let digest = Sha256::digest(data);
    let mut s = String::with_capacity(64);
    for b in digest.iter() {
        let _ = write!(s, "{b:02x}");
    }
    s
}

pub fn config_hash(cfg: &ModelConfig) -> String {
    sha256_hex(serde_json::to_string(cfg).expect("config serializes").as_bytes())
}

/// `<dir>/run-<seed>/step-<n>.ckpt`.
pub fn checkpoint_path(dir: &Path, seed: u64, step: u64) -> PathBuf {
    dir.join(format!("run-{seed}")).join(format!("step-{step}.ckpt"))
}

fn kind_code(k: FeatureType) -> u8 {
    match k {
        FeatureType::Numeric => 0,
        FeatureType::Boolean => 1,
        FeatureType::Datetime => 2,
        FeatureType::Text => 3,
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_stats(out: &mut Vec<u8>, stats: &NormStats) {
    out.extend_from_slice(&(stats.columns.len() as u32).to_le_bytes());
    for (col, e) in &stats.columns {
        out.extend_from_slice(&col.table.to_le_bytes());
        out.extend_from_slice(&col.column.to_le_bytes());
        out.push(kind_code(e.kind));
        put_str(out, &e.table);
        put_str(out, &e.column);
        out.extend_from_slice(&e.stats.mean.to_bits().to_le_bytes());
        out.extend_from_slice(&e.stats.std.to_bits().to_le_bytes());
    }
    out.extend_from_slice(&stats.datetime.mean.to_bits().to_le_bytes());
    out.extend_from_slice(&stats.datetime.std.to_bits().to_le_bytes());
}

fn put_params<F: Real>(out: &mut Vec<u8>, p: &ModelParams<F>) {
    for t in p.tensors() {
        for &v in t.data {
            v.write_le(out);
        }
    }
}

/// Serializes a checkpoint. The byte stream is a pure function of its contents.
pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let cfg_json = serde_json::to_string(&ck.state.config).expect("config serializes");
    let mut manifest = String::new();
    let _ = writeln!(manifest, "embedder {}", ck.state.embedder.id());
    let _ = writeln!(manifest, "dtype {}", f32::DTYPE);
    let _ = writeln!(manifest, "config {cfg_json}");
    let _ = writeln!(manifest, "config_hash {}", sha256_hex(cfg_json.as_bytes()));
    let _ = writeln!(manifest, "step {}", ck.step);
    match &ck.optimizer {
        Some(o) => {
            let oc = serde_json::to_string(&o.config).expect("optimizer config serializes");
            let _ = writeln!(manifest, "optimizer {} {oc}", o.t);
        }
        None => manifest.push_str("optimizer none\n"),
    }
    for t in ck.state.params.tensors() {
        let shape: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
        let _ = writeln!(manifest, "tensor {} {} {}", t.name, t.kind.name(), shape.join("x"));
    }
    let mut payload = Vec::new();
    put_params(&mut payload, &ck.state.params);
    if let Some(o) = &ck.optimizer {
        put_params(&mut payload, &o.m);
        put_params(&mut payload, &o.v);
    }
    put_stats(&mut payload, &ck.state.stats);
    let _ = writeln!(manifest, "payload {}", payload.len());

    let mut out = Vec::with_capacity(MAGIC.len() + 12 + manifest.len() + payload.len() + 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(manifest.as_bytes());
    out.extend_from_slice(&payload);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<(), CheckpointError> {
    let io = |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io)?;
    }
    std::fs::write(path, encode_checkpoint(ck)).map_err(io)
}

/// What a loader requires of a checkpoint.
#[derive(Clone, Default)]
pub struct LoadExpectations {
    /// Required embedder; defaults to the built-in hashing embedder.
    pub embedder: Option<Arc<dyn TextEmbedder>>,
    /// Required model config; when unset the stored config is accepted.
    pub config: Option<ModelConfig>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_bits(self.u64()?))
    }
    fn string(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CheckpointError::Manifest("invalid utf-8".into()))
    }
    fn params(&mut self, p: &mut ModelParams<f32>) -> Result<(), CheckpointError> {
        for t in p.tensors_mut() {
            let bytes = self.take(t.data.len() * 4)?;
            for (v, c) in t.data.iter_mut().zip(bytes.chunks_exact(4)) {
                *v = f32::read_le(c);
            }
        }
        Ok(())
    }
}

fn read_stats(r: &mut Reader<'_>) -> Result<NormStats, CheckpointError> {
    let n = r.u32()?;
    let mut columns = BTreeMap::new();
    for _ in 0..n {
        let col = ColumnRef::new(r.u32()?, r.u32()?);
        let kind = match r.take(1)?[0] {
            0 => FeatureType::Numeric,
            1 => FeatureType::Boolean,
            2 => FeatureType::Datetime,
            3 => FeatureType::Text,
            k => return Err(CheckpointError::Manifest(format!("bad feature code {k}"))),
        };
        let table = r.string()?;
        let column = r.string()?;
        let stats = ColumnStats {
            mean: r.f64()?,
            std: r.f64()?,
        };
        columns.insert(
            col,
            ColumnEntry {
                table,
                column,
                kind,
                stats,
            },
        );
    }
    let datetime = ColumnStats {
        mean: r.f64()?,
        std: r.f64()?,
    };
    Ok(NormStats { columns, datetime })
}

pub fn decode_checkpoint(bytes: &[u8], expect: &LoadExpectations) -> Result<Checkpoint, CheckpointError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len()).map_err(|_| CheckpointError::Magic)? != MAGIC {
        return Err(CheckpointError::Magic);
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let mlen = usize::try_from(r.u64()?).map_err(|_| CheckpointError::Truncated)?;
    let manifest = std::str::from_utf8(r.take(mlen)?)
        .map_err(|_| CheckpointError::Manifest("invalid utf-8".into()))?
        .to_string();
    let payload_len: usize = manifest
        .lines()
        .find_map(|l| l.strip_prefix("payload "))
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| CheckpointError::Manifest("missing `payload`".into()))?;
    let total = r.pos + payload_len + 32;
    if bytes.len() < total {
        return Err(CheckpointError::Truncated);
    }
    if bytes.len() > total {
        return Err(CheckpointError::Manifest("trailing bytes after checksum".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(CheckpointError::Checksum);
    }

    let mut fields: BTreeMap<&str, &str> = BTreeMap::new();
    let mut tensors = Vec::new();
    for line in manifest.lines() {
        let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
        if key == "tensor" {
            let parts: Vec<&str> = rest.split(' ').collect();
            if parts.len() != 3 {
                return Err(CheckpointError::Manifest(format!("bad tensor line `{line}`")));
            }
            let shape = parts[2]
                .split('x')
                .map(|d| d.parse::<usize>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| CheckpointError::Manifest(format!("bad shape in `{line}`")))?;
            tensors.push((parts[0].to_string(), shape));
        } else {
            fields.insert(key, rest);
        }
    }
    let field = |k: &str| {
        fields
            .get(k)
            .copied()
            .ok_or_else(|| CheckpointError::Manifest(format!("missing `{k}`")))
    };

    let embedder_id = field("embedder")?.to_string();
    let dtype = field("dtype")?;
    if dtype != f32::DTYPE {
        return Err(CheckpointError::Dtype(dtype.to_string()));
    }
    let stored_cfg: ModelConfig =
        serde_json::from_str(field("config")?).map_err(|e| CheckpointError::Manifest(format!("config: {e}")))?;
    let stored_hash = field("config_hash")?.to_string();
    let embedder: Arc<dyn TextEmbedder> = expect
        .embedder
        .clone()
        .unwrap_or_else(|| Arc::new(HashingEmbedder::new(stored_cfg.d_text)));
    if embedder_id != embedder.id() {
        return Err(CheckpointError::Embedder {
            found: embedder_id,
            expected: embedder.id(),
        });
    }
    let cfg = expect.config.clone().unwrap_or_else(|| stored_cfg.clone());
    let mut params = ModelParams::<f32>::zeros(&cfg);
    {
        let want = params.tensors();
        for (i, w) in want.iter().enumerate() {
            match tensors.get(i) {
                Some((name, shape)) if *name == w.name && *shape == w.shape => {}
                Some((name, shape)) if *name == w.name => {
                    return Err(CheckpointError::Shape {
                        tensor: name.clone(),
                        expected: w.shape.clone(),
                        found: shape.clone(),
                    })
                }
                _ => {
                    return Err(CheckpointError::Shape {
                        tensor: w.name.clone(),
                        expected: w.shape.clone(),
                        found: Vec::new(),
                    })
                }
            }
        }
        if tensors.len() > want.len() {
            let (name, shape) = &tensors[want.len()];
            return Err(CheckpointError::Shape {
                tensor: name.clone(),
                expected: Vec::new(),
                found: shape.clone(),
            });
        }
    }
    let expected_hash = config_hash(&cfg);
    if stored_hash != expected_hash {
        return Err(CheckpointError::ConfigHash {
            found: stored_hash,
            expected: expected_hash,
        });
    }
    let step: u64 = field("step")?
        .parse()
        .map_err(|_| CheckpointError::Manifest("bad step".into()))?;
    let opt_field = field("optimizer")?;

    r.params(&mut params)?;
    let optimizer = if opt_field == "none" {
        None
    } else {
        let (t, oc) = opt_field
            .split_once(' ')
            .ok_or_else(|| CheckpointError::Manifest("bad optimizer line".into()))?;
        let config: AdamWConfig =
            serde_json::from_str(oc).map_err(|e| CheckpointError::Manifest(format!("optimizer: {e}")))?;
        let mut o = AdamW::new(config, &params);
        o.t = t
            .parse()
            .map_err(|_| CheckpointError::Manifest("bad optimizer step".into()))?;
        r.params(&mut o.m)?;
        r.params(&mut o.v)?;
        Some(o)
    };
    let stats = read_stats(&mut r)?;
    if r.pos != body.len() {
        return Err(CheckpointError::Manifest("trailing bytes after payload".into()));
    }
    Ok(Checkpoint {
        state: ModelState {
            config: cfg,
            params,
            stats: Arc::new(stats),
            embedder,
        },
        optimizer,
        step,
    })
}

pub fn load_checkpoint(path: &Path, expect: &LoadExpectations) -> Result<Checkpoint, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_checkpoint(&bytes, expect)
}

impl From<CheckpointError> for TrainError {
    fn from(e: CheckpointError) -> Self {
        TrainError::Checkpoint(e)
    }
}
