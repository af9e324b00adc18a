//! Single-file tensor archive.
//!
//! Layout: 8-byte magic, little-endian `u32` manifest length, JSON manifest,
//! raw little-endian tensor data, then a SHA-256 of everything before it.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::objectives::CenterState;
use crate::params::{ParamGroup, Parameterized};
use crate::training::{AdamSlot, AdamW, TrainConfig, TrainerState};
use crate::vit::{VisionTransformer, VitConfig};
use crate::{GlareError, Result, Scalar};

const MAGIC: &[u8; 8] = b"GLARECKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerMeta {
    pub step: u64,
    pub seed: u64,
    pub config: TrainConfig,
    /// Per-tensor AdamW step counts.
    pub optim_steps: BTreeMap<String, u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub dtype: String,
    pub model: VitConfig,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub adapter_rank: usize,
    pub n_registers: usize,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub trainer: Option<TrainerMeta>,
}

impl Manifest {
    pub fn new(model: &VitConfig, dtype: &str) -> Self {
        Self {
            version: FORMAT_VERSION,
            dtype: dtype.into(),
            model: model.clone(),
            patch_size: model.patch_size,
            embed_dim: model.embed_dim,
            depth: model.depth,
            adapter_rank: model.adapter_rank,
            n_registers: model.n_registers,
            tensors: Vec::new(),
            trainer: None,
        }
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.tensors.iter().any(|t| t.name.starts_with(prefix))
    }
}

/// Decoded archive.
#[derive(Clone, Debug)]
pub struct Archive<S> {
    pub manifest: Manifest,
    pub tensors: BTreeMap<String, Array2<S>>,
}

pub fn write_archive<S: Scalar>(path: &Path, mut manifest: Manifest, tensors: &[(String, &Array2<S>)]) -> Result<()> {
    manifest.dtype = S::DTYPE.into();
    manifest.tensors.clear();
    let mut data = Vec::new();
    for (name, t) in tensors {
        manifest.tensors.push(TensorEntry {
            name: name.clone(),
            shape: [t.nrows(), t.ncols()],
            offset: data.len(),
        });
        for v in t.iter() {
            v.write_le(&mut data);
        }
    }
    let header = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(12 + header.len() + data.len() + 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&data);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    // Write-then-rename so an interrupted save never leaves a truncated file behind.
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &out)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn corrupt(msg: impl Into<String>) -> GlareError {
    GlareError::Checkpoint(msg.into())
}

/// Verifies framing and checksum and parses the manifest.
fn split(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..8] != MAGIC {
        return Err(corrupt("not a checkpoint file (bad magic or truncated)"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("checksum mismatch (file truncated or modified)"));
    }
    let len = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes")) as usize;
    if 12 + len > body.len() {
        return Err(corrupt("manifest length exceeds file size"));
    }
    let manifest: Manifest = serde_json::from_slice(&body[12..12 + len]).map_err(|e| corrupt(format!("manifest: {e}")))?;
    if manifest.version != FORMAT_VERSION {
        return Err(GlareError::Version {
            found: manifest.version.to_string(),
            expected: FORMAT_VERSION.to_string(),
        });
    }
    Ok((manifest, &body[12 + len..]))
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let bytes = std::fs::read(path)?;
    Ok(split(&bytes)?.0)
}

/// Reads every tensor, converting from the stored dtype to `S` if needed.
pub fn read_archive<S: Scalar>(path: &Path) -> Result<Archive<S>> {
    let bytes = std::fs::read(path)?;
    let (manifest, data) = split(&bytes)?;
    let width = match manifest.dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        other => return Err(corrupt(format!("unsupported dtype `{other}`"))),
    };
    let mut tensors = BTreeMap::new();
    for e in &manifest.tensors {
        let n = e.shape[0] * e.shape[1];
        let end = e.offset + n * width;
        if end > data.len() {
            return Err(corrupt(format!("tensor `{}` extends past the data section", e.name)));
        }
        let raw = &data[e.offset..end];
        let vals: Vec<S> = if width == S::BYTES {
            raw.chunks_exact(width).map(S::read_le).collect()
        } else if width == 4 {
            raw.chunks_exact(4).map(|c| S::of(f32::read_le(c) as f64)).collect()
        } else {
            raw.chunks_exact(8).map(|c| S::of(f64::read_le(c))).collect()
        };
        let arr = Array2::from_shape_vec((e.shape[0], e.shape[1]), vals).map_err(|e| corrupt(e.to_string()))?;
        if tensors.insert(e.name.clone(), arr).is_some() {
            return Err(corrupt(format!("duplicate tensor `{}`", e.name)));
        }
    }
    Ok(Archive { manifest, tensors })
}

/// Overwrites every tensor of `target` whose `prefix + name` exists in `tensors`;
/// returns how many were assigned.
fn assign<S: Scalar>(
    target: &mut dyn Parameterized<S>,
    tensors: &BTreeMap<String, Array2<S>>,
    prefix: &str,
    required: impl Fn(ParamGroup) -> bool,
) -> Result<usize> {
    let mut err = None;
    let mut n = 0;
    target.visit_mut(&mut |p| {
        let key = format!("{prefix}{}", p.name);
        match tensors.get(&key) {
            Some(t) if t.dim() == p.value.dim() => {
                p.value.assign(t);
                n += 1;
            }
            Some(t) => {
                err.get_or_insert_with(|| corrupt(format!("`{key}` has shape {:?}, expected {:?}", t.dim(), p.value.dim())));
            }
            None if required(p.group) => {
                err.get_or_insert_with(|| corrupt(format!("missing tensor `{key}`")));
            }
            None => {}
        }
    });
    err.map_or(Ok(n), Err)
}

/// Saves an encoder. With `include_adapters = false` this is a source-model
/// checkpoint holding only backbone tensors.
pub fn save_encoder<S: Scalar>(path: &Path, enc: &VisionTransformer<S>, include_adapters: bool) -> Result<()> {
    let mut tensors = Vec::new();
    enc.visit(&mut |p| {
        if include_adapters || p.group == ParamGroup::Backbone {
            tensors.push((p.name.clone(), &p.value));
        }
    });
    write_archive(path, Manifest::new(&enc.config, S::DTYPE), &tensors)
}

/// Where the adapters of a loaded encoder came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdapterOrigin {
    Teacher,
    Student,
    /// Absent from the file; identity-initialized.
    Initialized,
}

/// Loads the encoder of any checkpoint. Training checkpoints yield the
/// teacher's (EMA) weights; source-only checkpoints get identity adapters.
pub fn load_encoder<S: Scalar>(path: &Path) -> Result<(VisionTransformer<S>, AdapterOrigin)> {
    let archive = read_archive::<S>(path)?;
    encoder_from_archive(&archive)
}

pub fn encoder_from_archive<S: Scalar>(archive: &Archive<S>) -> Result<(VisionTransformer<S>, AdapterOrigin)> {
    let cfg = archive.manifest.model.clone();
    let mut rng = crate::training::stream(0, 0, 0, 0);
    let mut enc = VisionTransformer::init(cfg, &mut rng)?;
    assign(&mut enc, &archive.tensors, "", |g| g == ParamGroup::Backbone)?;
    let teacher_backbone = archive.manifest.has_prefix("teacher.backbone.");
    let origin = if archive.manifest.has_prefix("teacher.adapters.") {
        assign(&mut enc, &archive.tensors, "teacher.", |g| g == ParamGroup::Adapter)?;
        if teacher_backbone {
            assign(&mut enc, &archive.tensors, "teacher.", |g| g == ParamGroup::Backbone)?;
        }
        AdapterOrigin::Teacher
    } else if archive.manifest.has_prefix("adapters.") {
        assign(&mut enc, &archive.tensors, "", |g| g == ParamGroup::Adapter)?;
        AdapterOrigin::Student
    } else {
        AdapterOrigin::Initialized
    };
    Ok((enc, origin))
}

/// Full trainer state: student, teacher counterparts of trainable tensors,
/// AdamW moments, center, step and seed.
pub fn save_checkpoint<S: Scalar>(path: &Path, state: &TrainerState<S>, cfg: &TrainConfig) -> Result<()> {
    let mut tensors: Vec<(String, &Array2<S>)> = Vec::new();
    state.student.visit(&mut |p| tensors.push((p.name.clone(), &p.value)));
    state.teacher.visit(&mut |p| {
        if state.trainable.contains(p.group) {
            tensors.push((format!("teacher.{}", p.name), &p.value));
        }
    });
    let mut optim_steps = BTreeMap::new();
    for (name, slot) in &state.optimizer.slots {
        tensors.push((format!("optim.m.{name}"), &slot.m));
        tensors.push((format!("optim.v.{name}"), &slot.v));
        optim_steps.insert(name.clone(), slot.t);
    }
    let center = state.center.center.clone().insert_axis(ndarray::Axis(0));
    let patch_center = state.patch_center.center.clone().insert_axis(ndarray::Axis(0));
    tensors.push(("center".into(), &center));
    tensors.push(("patch_center".into(), &patch_center));
    let mut manifest = Manifest::new(&cfg.model, S::DTYPE);
    manifest.trainer = Some(TrainerMeta {
        step: state.step,
        seed: state.seed,
        config: cfg.clone(),
        optim_steps,
    });
    write_archive(path, manifest, &tensors)
}

/// Restores a state written by [`save_checkpoint`] together with its run config.
pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<(TrainerState<S>, TrainConfig)> {
    let archive = read_archive::<S>(path)?;
    let meta = archive
        .manifest
        .trainer
        .clone()
        .ok_or_else(|| corrupt("not a training checkpoint (no trainer section)"))?;
    let cfg = meta.config;
    let mut state = TrainerState::<S>::init(&cfg)?;
    assign(&mut state.student, &archive.tensors, "", |_| true)?;
    state.teacher.encoder = state.student.encoder.clone();
    state.teacher.head = state.student.head.clone();
    let trainable = state.trainable;
    assign(&mut state.teacher, &archive.tensors, "teacher.", |g| trainable.contains(g))?;
    let mut slots = BTreeMap::new();
    for (name, t) in meta.optim_steps {
        let get = |k: String| archive.tensors.get(&k).cloned().ok_or_else(|| corrupt(format!("missing tensor `{k}`")));
        let m = get(format!("optim.m.{name}"))?;
        let v = get(format!("optim.v.{name}"))?;
        slots.insert(name, AdamSlot { m, v, t });
    }
    state.optimizer = AdamW { slots };
    let load_center = |key: &str| {
        let c = archive.tensors.get(key).ok_or_else(|| corrupt(format!("missing tensor `{key}`")))?;
        if c.nrows() != 1 || c.ncols() != cfg.head.out_dim {
            return Err(corrupt(format!("`{key}` has the wrong shape")));
        }
        Ok(CenterState {
            center: c.row(0).to_owned(),
            momentum: S::of(cfg.loss.center_momentum),
        })
    };
    state.center = load_center("center")?;
    state.patch_center = load_center("patch_center")?;
    state.step = meta.step;
    state.seed = meta.seed;
    Ok((state, cfg))
}
