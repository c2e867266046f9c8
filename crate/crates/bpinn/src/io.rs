//! On-disk formats: the native field format ("BPIF"), PGM visualization
//! export, checksummed network checkpoints ("BPNN"), the CSV training log,
//! and dataset directories with a JSON manifest.
//!
//! All multi-byte integers and floats are little-endian; pixel and
//! parameter payloads are 32-bit floats. Writes go to a temporary sibling
//! file first and are renamed into place, so readers never see a partial
//! file.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::{Dataset, SceneSpec};
use crate::error::{Error, Result};
use crate::field::{Field, ForwardOperator};
use crate::neural::{ArchSpec, NetParams};
use crate::rng::RNG_ALGORITHM;
use crate::training::TrainLogRow;

const FIELD_MAGIC: &[u8; 4] = b"BPIF";
const CHECKPOINT_MAGIC: &[u8; 4] = b"BPNN";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Writes `bytes` to `path` atomically (temp file in the same directory,
/// then rename).
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        fs::create_dir_all(dir)?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Io(std::io::Error::other("path has no file name")))?;
    let mut tmp = path.to_path_buf();
    tmp.set_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Serializes a field: magic, u32 width, u32 height, row-major f32 pixels.
pub fn field_to_bytes(f: &Field) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * f.len());
    out.extend_from_slice(FIELD_MAGIC);
    out.extend_from_slice(&(f.width() as u32).to_le_bytes());
    out.extend_from_slice(&(f.height() as u32).to_le_bytes());
    for &v in f.values() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn field_from_bytes(bytes: &[u8]) -> Result<Field> {
    if bytes.len() < 12 {
        return Err(Error::Format("field file truncated before header".into()));
    }
    if &bytes[0..4] != FIELD_MAGIC {
        return Err(Error::Format("bad field magic (expected BPIF)".into()));
    }
    let w = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let n = w
        .checked_mul(h)
        .ok_or_else(|| Error::Format("field dimensions overflow".into()))?;
    let expected = 12 + 4 * n;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "field file length {} does not match {w}x{h} header (expected {expected})",
            bytes.len()
        )));
    }
    let values = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Field::new(w, h, values)
}

pub fn field_write(path: &Path, f: &Field) -> Result<()> {
    if !f.is_finite() {
        return Err(Error::Contract("refusing to write non-finite field".into()));
    }
    atomic_write(path, &field_to_bytes(f))
}

pub fn field_read(path: &Path) -> Result<Field> {
    field_from_bytes(&fs::read(path)?)
}

/// Exports a field as binary 8-bit PGM with min-max scaling; a constant
/// field (degenerate range) maps to all-zero pixels.
pub fn pgm_write(path: &Path, f: &Field) -> Result<()> {
    let (w, h) = f.shape();
    let (lo, hi) = (f.min(), f.max());
    let range = hi - lo;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    for &v in f.values() {
        let p = if range > 0.0 {
            ((v - lo) / range * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        };
        out.push(p);
    }
    atomic_write(path, &out)
}

/// Serializes a checkpoint: magic, u16 version, u32-length-prefixed
/// canonical architecture JSON, u64 parameter count, f32 parameters, and a
/// trailing CRC-32 of everything before it.
pub fn checkpoint_to_bytes(params: &NetParams) -> Result<Vec<u8>> {
    let arch_json = serde_json::to_string(&params.arch)
        .map_err(|e| Error::Format(format!("architecture serialization failed: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(arch_json.len() as u32).to_le_bytes());
    out.extend_from_slice(arch_json.as_bytes());
    out.extend_from_slice(&(params.values.len() as u64).to_le_bytes());
    for &v in &params.values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<NetParams> {
    let fail = |msg: &str| Error::Format(format!("checkpoint: {msg}"));
    if bytes.len() < 10 {
        return Err(fail("truncated before header"));
    }
    if &bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(fail("bad magic (expected BPNN)"));
    }
    let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(fail(&format!(
            "unsupported version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let arch_len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let arch_end = 10 + arch_len;
    if bytes.len() < arch_end + 8 + 4 {
        return Err(fail("truncated inside architecture block"));
    }
    let arch: ArchSpec = serde_json::from_slice(&bytes[10..arch_end])
        .map_err(|e| fail(&format!("invalid architecture JSON: {e}")))?;
    let count =
        u64::from_le_bytes(bytes[arch_end..arch_end + 8].try_into().unwrap()) as usize;
    let params_end = arch_end + 8 + 4 * count;
    if bytes.len() != params_end + 4 {
        return Err(fail(&format!(
            "parameter count mismatch: header says {count} values but file length is {}",
            bytes.len()
        )));
    }
    let stored_crc = u32::from_le_bytes(bytes[params_end..].try_into().unwrap());
    let actual = crc32fast::hash(&bytes[..params_end]);
    if stored_crc != actual {
        return Err(fail(&format!(
            "integrity check failed (stored CRC {stored_crc:#010x}, computed {actual:#010x})"
        )));
    }
    let values = bytes[arch_end + 8..params_end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    NetParams::from_values(arch, values)
}

pub fn checkpoint_write(path: &Path, params: &NetParams) -> Result<()> {
    atomic_write(path, &checkpoint_to_bytes(params)?)
}

pub fn checkpoint_read(path: &Path) -> Result<NetParams> {
    checkpoint_from_bytes(&fs::read(path)?)
}

/// Writes the per-epoch training log as CSV with a fixed header.
pub fn train_log_write(path: &Path, log: &[TrainLogRow]) -> Result<()> {
    let mut out =
        String::from("epoch,j_nn,j_pi,j_pr,total,val_total,val_psnr,val_ssim,wall_ms\n");
    for r in log {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.epoch,
            r.train.j_nn,
            r.train.j_pi,
            r.train.j_pr,
            r.train.total,
            r.val.total,
            r.val_psnr,
            r.val_ssim,
            r.wall_ms
        ));
    }
    atomic_write(path, out.as_bytes())
}

/// Dataset directory manifest: records how the data was produced so a
/// loaded split carries the same operator, variances, and provenance seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub rng_algorithm: String,
    pub scene: SceneSpec,
    pub operator: ForwardOperator,
    pub v_eps: f64,
    pub v_f: Option<f64>,
    pub seed: u64,
    pub splits: SplitSizes,
    pub supervised: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

pub const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];

fn split_dir(dir: &Path, split: &str) -> PathBuf {
    dir.join(split)
}

fn split_size(m: &DatasetManifest, split: &str) -> Result<usize> {
    match split {
        "train" => Ok(m.splits.train),
        "val" => Ok(m.splits.val),
        "test" => Ok(m.splits.test),
        other => Err(Error::Contract(format!("unknown split name '{other}'"))),
    }
}

/// Writes one split's fields under `dir/<split>/`: `obs_NNNN.bpif`,
/// `truth_NNNN.bpif`, and `ref_NNNN.bpif` when labeled.
fn dataset_split_write(dir: &Path, split: &str, set: &Dataset) -> Result<()> {
    let d = split_dir(dir, split);
    fs::create_dir_all(&d)?;
    for (i, (g, f_ref)) in set.pairs.iter().enumerate() {
        field_write(&d.join(format!("obs_{i:04}.bpif")), g)?;
        field_write(&d.join(format!("truth_{i:04}.bpif")), &set.truths[i])?;
        if let Some(f_ref) = f_ref {
            field_write(&d.join(format!("ref_{i:04}.bpif")), f_ref)?;
        }
    }
    Ok(())
}

/// Writes the three splits plus `manifest.json` under `dir`.
pub fn dataset_write(
    dir: &Path,
    scene: &SceneSpec,
    splits: (&Dataset, &Dataset, &Dataset),
) -> Result<()> {
    let (train, val, test) = splits;
    let manifest = DatasetManifest {
        rng_algorithm: RNG_ALGORITHM.to_string(),
        scene: scene.clone(),
        operator: train.operator.clone(),
        v_eps: train.v_eps,
        v_f: train.v_f,
        seed: train.seed,
        splits: SplitSizes { train: train.len(), val: val.len(), test: test.len() },
        supervised: train.v_f.is_some(),
    };
    fs::create_dir_all(dir)?;
    dataset_split_write(dir, "train", train)?;
    dataset_split_write(dir, "val", val)?;
    dataset_split_write(dir, "test", test)?;
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Format(format!("manifest serialization failed: {e}")))?;
    atomic_write(&dir.join("manifest.json"), json.as_bytes())
}

pub fn manifest_read(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Format(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("invalid manifest.json: {e}")))
}

/// Loads one split back into a [`Dataset`] using the directory's manifest.
pub fn dataset_split_read(dir: &Path, split: &str) -> Result<Dataset> {
    let manifest = manifest_read(dir)?;
    let n = split_size(&manifest, split)?;
    let d = split_dir(dir, split);
    let mut pairs = Vec::with_capacity(n);
    let mut truths = Vec::with_capacity(n);
    for i in 0..n {
        let g = field_read(&d.join(format!("obs_{i:04}.bpif")))?;
        let truth = field_read(&d.join(format!("truth_{i:04}.bpif")))?;
        let ref_path = d.join(format!("ref_{i:04}.bpif"));
        let f_ref = if manifest.supervised {
            Some(field_read(&ref_path)?)
        } else {
            None
        };
        pairs.push((g, f_ref));
        truths.push(truth);
    }
    Ok(Dataset {
        pairs,
        truths,
        v_eps: manifest.v_eps,
        v_f: manifest.v_f,
        operator: manifest.operator,
        seed: manifest.seed,
    })
}
