//! Checkpoints: `manifest.json` plus `params.bin` (and optionally
//! `optim.bin`), raw little-endian f32 in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{Adam, AdamConfig, Moments, Tensor};
use crate::error::{Error, Result};
use crate::model::{HeadGateVector, ModelConfig, ModelState, TaskHead};
use crate::tasks::TaskSpec;
use crate::train::{Phase, TrainSchedule, TrainerState};

pub const MANIFEST: &str = "manifest.json";
pub const PARAMS: &str = "params.bin";
pub const OPTIM: &str = "optim.bin";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentEntry {
    pub t: u64,
    /// Byte offset of `m`; `v` follows immediately.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerEntry {
    pub config: AdamConfig,
    pub step: usize,
    pub total_bytes: usize,
    pub tensors: Vec<MomentEntry>,
}

/// Everything besides the parameters that a checkpoint carries.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CheckpointMeta {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tasks: Vec<TaskSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<TrainSchedule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase: Option<Phase>,
    /// Trainer position, including the IAT mask set once that phase began.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trainer: Option<TrainerState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub model: ModelConfig,
    pub heads: Vec<TaskHead>,
    pub gates: HeadGateVector,
    pub total_bytes: usize,
    pub tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerEntry>,
    #[serde(flatten)]
    pub meta: CheckpointMeta,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ModelState<f32>,
    pub optim: Option<Adam<f32>>,
    pub meta: CheckpointMeta,
}

fn push_f32(out: &mut Vec<u8>, xs: &[f32]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn read_f32(blob: &[u8], offset: usize, n: usize) -> Vec<f32> {
    blob[offset..offset + 4 * n].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()
}

/// Serialized parameter blob and its tensor table.
pub fn params_blob(model: &ModelState<f32>) -> (Vec<u8>, Vec<TensorEntry>) {
    let mut blob = Vec::with_capacity(4 * model.parameter_count());
    let mut entries = Vec::with_capacity(model.params().len());
    for (name, p) in model.names().iter().zip(model.params()) {
        entries.push(TensorEntry { name: name.clone(), shape: p.shape().to_vec(), offset: blob.len() });
        push_f32(&mut blob, p.data());
    }
    (blob, entries)
}

fn optim_blob(optim: &Adam<f32>) -> (Vec<u8>, OptimizerEntry) {
    let mut blob = Vec::new();
    let mut tensors = Vec::with_capacity(optim.moments().len());
    for m in optim.moments() {
        tensors.push(MomentEntry { t: m.t, offset: blob.len() });
        push_f32(&mut blob, &m.m);
        push_f32(&mut blob, &m.v);
    }
    let entry = OptimizerEntry { config: optim.config.clone(), step: optim.step_count(), total_bytes: blob.len(), tensors };
    (blob, entry)
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes the checkpoint into `dir`, creating it if needed. An existing
/// `optim.bin` is removed when `optim` is `None`.
pub fn save_checkpoint(dir: &Path, model: &ModelState<f32>, optim: Option<&Adam<f32>>, meta: &CheckpointMeta) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (blob, tensors) = params_blob(model);
    let optimizer = match optim {
        Some(o) => {
            if o.moments().len() != model.params().len() {
                return Err(Error::Checkpoint("optimizer state does not match the model".into()));
            }
            let (ob, entry) = optim_blob(o);
            write(&dir.join(OPTIM), &ob)?;
            Some(entry)
        }
        None => {
            let p = dir.join(OPTIM);
            if p.exists() {
                fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
            }
            None
        }
    };
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        model: model.config.clone(),
        heads: model.heads().to_vec(),
        gates: model.gates.clone(),
        total_bytes: blob.len(),
        tensors,
        optimizer,
        meta: meta.clone(),
    };
    write(&dir.join(PARAMS), &blob)?;
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    write(&dir.join(MANIFEST), json.as_bytes())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let m: Manifest = serde_json::from_slice(&read(&path)?)?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {}", m.format_version)));
    }
    Ok(m)
}

fn check_size(file: &str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::Checkpoint(format!("{file}: expected {expected} bytes, found {actual}")));
    }
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let m = read_manifest(dir)?;
    let blob = read(&dir.join(PARAMS))?;
    let mut expected = 0;
    for t in &m.tensors {
        if t.offset != expected {
            return Err(Error::Checkpoint(format!("tensor `{}` at offset {} but expected {expected}", t.name, t.offset)));
        }
        expected += 4 * t.shape.iter().product::<usize>();
    }
    check_size(PARAMS, m.total_bytes, blob.len())?;
    check_size(PARAMS, expected, blob.len())?;
    let params = m
        .tensors
        .iter()
        .map(|t| Tensor::new(t.shape.clone(), read_f32(&blob, t.offset, t.shape.iter().product())))
        .collect::<Result<Vec<_>>>()?;
    let names = m.tensors.iter().map(|t| t.name.clone()).collect();
    let model = ModelState::from_parts(m.model, names, params, m.heads, m.gates)?;
    let optim = match m.optimizer {
        None => None,
        Some(o) => {
            let ob = read(&dir.join(OPTIM))?;
            if o.tensors.len() != model.params().len() {
                return Err(Error::Checkpoint("optimizer state does not match the model".into()));
            }
            check_size(OPTIM, o.total_bytes, ob.len())?;
            let want: usize = model.params().iter().map(|p| 8 * p.numel()).sum();
            check_size(OPTIM, want, ob.len())?;
            let mut moments = Vec::with_capacity(o.tensors.len());
            let mut off = 0;
            for (e, p) in o.tensors.iter().zip(model.params()) {
                if e.offset != off {
                    return Err(Error::Checkpoint(format!("{OPTIM}: moment offset {} but expected {off}", e.offset)));
                }
                let n = p.numel();
                moments.push(Moments { m: read_f32(&ob, off, n), v: read_f32(&ob, off + 4 * n, n), t: e.t });
                off += 8 * n;
            }
            Some(Adam::from_parts(o.config, o.step, moments))
        }
    };
    Ok(Checkpoint { model, optim, meta: m.meta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::HeadId;
    use crate::tasks::TaskKind;

    fn model() -> ModelState<f32> {
        let cfg = ModelConfig::small(2, 2, 8, 20, 12);
        let tasks = vec![("a".to_string(), TaskKind::Classification { n_class: 3 }), ("b".to_string(), TaskKind::Regression)];
        let mut m = ModelState::new(cfg, &tasks, 3).unwrap();
        m.gates = HeadGateVector::pruned(2, 2, &[HeadId::new(1, 0)]).unwrap();
        m
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let d = tempfile::tempdir().unwrap();
        let m = model();
        let mut optim = Adam::new(AdamConfig::new(1e-3, 10), m.params());
        let grads: Vec<Option<Tensor<f32>>> = m.params().iter().map(|p| Some(p.map(|x| x * 0.5 + 0.1))).collect();
        let mut m2 = m.clone();
        optim.step(m2.params_mut(), m.names(), &grads, &vec![None; grads.len()]).unwrap();
        let meta = CheckpointMeta { vocab: Some(vec!["x".into()]), ..Default::default() };
        save_checkpoint(d.path(), &m2, Some(&optim), &meta).unwrap();
        let c = load_checkpoint(d.path()).unwrap();
        assert_eq!(c.model, m2);
        assert_eq!(c.optim.as_ref(), Some(&optim));
        assert_eq!(c.meta, meta);
        let d2 = tempfile::tempdir().unwrap();
        save_checkpoint(d2.path(), &c.model, c.optim.as_ref(), &c.meta).unwrap();
        for f in [MANIFEST, PARAMS, OPTIM] {
            assert_eq!(fs::read(d.path().join(f)).unwrap(), fs::read(d2.path().join(f)).unwrap(), "{f}");
        }
    }

    #[test]
    fn truncated_blob_reports_sizes() {
        let d = tempfile::tempdir().unwrap();
        let m = model();
        save_checkpoint(d.path(), &m, None, &CheckpointMeta::default()).unwrap();
        let p = d.path().join(PARAMS);
        let mut b = fs::read(&p).unwrap();
        let full = b.len();
        b.truncate(full - 4);
        fs::write(&p, &b).unwrap();
        let err = load_checkpoint(d.path()).unwrap_err().to_string();
        assert!(err.contains(&format!("expected {full} bytes, found {}", full - 4)), "{err}");
    }

    #[test]
    fn shape_tampering_rejected() {
        let d = tempfile::tempdir().unwrap();
        save_checkpoint(d.path(), &model(), None, &CheckpointMeta::default()).unwrap();
        let p = d.path().join(MANIFEST);
        let mut man: Manifest = serde_json::from_slice(&fs::read(&p).unwrap()).unwrap();
        man.tensors[0].shape = vec![19, 8];
        fs::write(&p, serde_json::to_vec(&man).unwrap()).unwrap();
        assert!(load_checkpoint(d.path()).is_err());
    }

    #[test]
    fn blob_layout_is_little_endian_row_major() {
        let m = model();
        let (blob, entries) = params_blob(&m);
        let e = &entries[3];
        let p = &m.params()[3];
        let last = p.numel() - 1;
        let at = e.offset + 4 * last;
        assert_eq!(f32::from_le_bytes(blob[at..at + 4].try_into().unwrap()).to_bits(), p.data()[last].to_bits());
    }
}
