//! Landmark detector: a stack of conv blocks ending in one heatmap per
//! landmark, reduced to world coordinates by a soft center-of-mass head.

use std::fs;
use std::path::{Path, PathBuf};
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::volume::{Grid, LandmarkSet, Volume3D};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockConfig {
    pub channels: usize,
    pub pool: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    /// Expected input volume shape `[nx, ny, nz]`.
    pub input_shape: [usize; 3],
    /// Block-average factor applied to the input before the first conv.
    pub downsample: usize,
    pub blocks: Vec<BlockConfig>,
    pub landmarks: usize,
    pub kernel: usize,
}

impl DetectorConfig {
    /// Four 3x3x3 blocks of widths 8, 16, 16, 32 on a 2x averaged input, one pool.
    pub fn small(input_shape: [usize; 3], landmarks: usize) -> Self {
        let b = |channels, pool| BlockConfig { channels, pool };
        DetectorConfig {
            input_shape,
            downsample: 2,
            blocks: vec![b(8, true), b(16, false), b(16, false), b(32, false)],
            landmarks,
            kernel: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.landmarks == 0 {
            return Err(Error::Invalid("detector needs at least one landmark".into()));
        }
        if self.blocks.is_empty() || self.blocks.iter().any(|b| b.channels == 0) {
            return Err(Error::Invalid("detector blocks must have nonzero width".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Invalid(format!("kernel size {} must be odd", self.kernel)));
        }
        if self.downsample == 0 {
            return Err(Error::Invalid("downsample factor must be >= 1".into()));
        }
        if self.input_shape.iter().any(|&n| n % self.downsample != 0) {
            return Err(Error::Invalid(format!(
                "input shape {:?} not divisible by downsample factor {}",
                self.input_shape, self.downsample
            )));
        }
        let w = self.working_shape();
        if w.iter().any(|&n| n == 0) {
            return Err(Error::Invalid(format!(
                "input {:?} pooled to nothing by {} pools",
                self.input_shape,
                self.pool_count()
            )));
        }
        Ok(())
    }

    pub fn pool_count(&self) -> usize {
        self.blocks.iter().filter(|b| b.pool).count()
    }

    /// Heatmap resolution `[nx, ny, nz]`.
    pub fn working_shape(&self) -> [usize; 3] {
        let mut s = self.input_shape.map(|n| n / self.downsample.max(1));
        for _ in 0..self.pool_count() {
            s = s.map(|n| n / 2);
        }
        s
    }

    /// Grid of heatmap cell centers for an input on `input`.
    pub fn working_grid(&self, input: &Grid) -> Grid {
        let mut g = input.downsampled(self.downsample);
        for _ in 0..self.pool_count() {
            g = g.downsampled(2);
        }
        g
    }

    /// Names and shapes of all parameter tensors, in storage order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let k = self.kernel;
        let mut out = Vec::new();
        let mut cin = 1;
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.weight"), vec![b.channels, cin, k, k, k]));
            out.push((format!("block{i}.scale"), vec![b.channels]));
            out.push((format!("block{i}.shift"), vec![b.channels]));
            cin = b.channels;
        }
        out.push(("head.weight".into(), vec![self.landmarks, cin, 1, 1, 1]));
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorParams {
    pub tensors: Vec<Tensor>,
}

impl DetectorParams {
    pub fn check(&self, cfg: &DetectorConfig) -> Result<()> {
        let specs = cfg.param_specs();
        if specs.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "config has {} parameter tensors, found {}",
                specs.len(),
                self.tensors.len()
            )));
        }
        for ((name, shape), t) in specs.iter().zip(&self.tensors) {
            if t.shape() != &shape[..] {
                return Err(Error::Checkpoint(format!(
                    "{name}: expected shape {shape:?}, found {:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::NonFinite(format!("parameter {name}")));
            }
        }
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

/// Kaiming-normal conv kernels (std `sqrt(2 / fan_in)`), unit scale, zero shift.
pub fn init_params(cfg: &DetectorConfig, seed: u64) -> DetectorParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = cfg
        .param_specs()
        .into_iter()
        .map(|(name, shape)| {
            if name.ends_with("weight") {
                let fan_in: usize = shape[1..].iter().product();
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                let n: usize = shape.iter().product();
                let data = (0..n).map(|_| normal.sample(&mut rng)).collect();
                Tensor::new(shape, data).expect("shape matches data")
            } else if name.ends_with("scale") {
                Tensor::full(shape, 1.0)
            } else {
                Tensor::zeros(shape)
            }
        })
        .collect();
    DetectorParams { tensors }
}

/// Block-averages `v` by `factor` along every axis.
pub fn block_average(v: &Volume3D, factor: usize) -> Result<Volume3D> {
    if factor == 1 {
        return Ok(v.clone());
    }
    let [nx, ny, nz] = v.shape();
    if nx % factor != 0 || ny % factor != 0 || nz % factor != 0 {
        return Err(Error::Shape(format!(
            "volume {:?} not divisible by {factor}",
            v.shape()
        )));
    }
    let grid = v.grid.downsampled(factor);
    let [ox, oy, oz] = grid.shape;
    let mut acc = vec![0.0f64; ox * oy * oz];
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                acc[i / factor + ox * (j / factor + oy * (k / factor))] += v.get(i, j, k) as f64;
            }
        }
    }
    let norm = 1.0 / (factor * factor * factor) as f64;
    Volume3D::new(grid, acc.into_iter().map(|s| (s * norm) as f32).collect())
}

/// Detector input tensor `[1, nz, ny, nx]` (x fastest, matching volume storage)
/// together with the grid it lives on.
pub fn prepare_input(cfg: &DetectorConfig, v: &Volume3D) -> Result<(Tensor, Grid)> {
    if v.shape() != cfg.input_shape {
        return Err(Error::Shape(format!(
            "detector expects input {:?}, got {:?}",
            cfg.input_shape,
            v.shape()
        )));
    }
    let small = block_average(v, cfg.downsample)?;
    let [nx, ny, nz] = small.shape();
    let t = Tensor::new(vec![1, nz, ny, nx], small.to_f64())?;
    Ok((t, small.grid))
}

/// Registers all parameters as graph leaves.
pub fn param_vars(g: &mut Graph, params: &DetectorParams) -> Vec<Var> {
    params.tensors.iter().map(|t| g.param(t.clone())).collect()
}

/// Heatmaps `[L, nz', ny', nx']` for a prepared input.
pub fn detector_forward(g: &mut Graph, cfg: &DetectorConfig, params: &[Var], input: Var) -> Result<Var> {
    let pad = cfg.kernel / 2;
    let mut x = input;
    for (i, b) in cfg.blocks.iter().enumerate() {
        let w = params[3 * i];
        x = g.conv3d(x, w, pad)?;
        x = g.instance_norm(x, params[3 * i + 1], params[3 * i + 2])?;
        x = g.relu(x)?;
        if b.pool {
            x = g.max_pool3d(x)?;
        }
    }
    g.conv3d(x, params[3 * cfg.blocks.len()], 0)
}

/// Soft center of mass of each heatmap channel, in world coordinates of `grid`.
pub fn com_head(g: &mut Graph, h: Var, grid: &Grid) -> Result<Var> {
    let probs = g.spatial_softmax(h)?;
    g.coord_expect(probs, Rc::new(grid.coordinates()))
}

/// Detector plus head on a raw volume: `[L, 3]` coordinates.
pub fn predict(g: &mut Graph, cfg: &DetectorConfig, params: &[Var], v: &Volume3D) -> Result<Var> {
    let (input, _) = prepare_input(cfg, v)?;
    let x = g.constant(input);
    let h = detector_forward(g, cfg, params, x)?;
    com_head(g, h, &cfg.working_grid(&v.grid))
}

/// Landmark coordinates for `v` with the given parameters.
pub fn infer(cfg: &DetectorConfig, params: &DetectorParams, v: &Volume3D) -> Result<LandmarkSet> {
    let mut g = Graph::new();
    let vars: Vec<Var> = params.tensors.iter().map(|t| g.constant(t.clone())).collect();
    let y = predict(&mut g, cfg, &vars, v)?;
    LandmarkSet::from_flat(g.value(y).data())
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    blob: String,
    checksum: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("f64raw")
}

/// Writes named tensors as a JSON manifest at `path` plus a little-endian f64 blob beside it.
pub fn write_checkpoint(path: &Path, meta: serde_json::Value, tensors: &[(String, &Tensor)]) -> Result<()> {
    let blob = blob_path(path);
    let mut bytes = Vec::new();
    let mut entries = Vec::new();
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: bytes.len() / 8,
            len: t.len(),
        });
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        blob: blob
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        checksum: format!("{:016x}", fnv1a(&bytes)),
        meta,
        tensors: entries,
    };
    fs::write(&blob, &bytes).map_err(|e| Error::io(&blob, e))?;
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(path, e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint written by [`write_checkpoint`].
pub fn read_checkpoint(path: &Path) -> Result<(serde_json::Value, Vec<(String, Tensor)>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
            manifest.version
        )));
    }
    let blob = path.with_file_name(&manifest.blob);
    let bytes = fs::read(&blob).map_err(|e| Error::io(&blob, e))?;
    if format!("{:016x}", fnv1a(&bytes)) != manifest.checksum {
        return Err(Error::Checkpoint(format!("blob {} is corrupt (checksum mismatch)", blob.display())));
    }
    if bytes.len() % 8 != 0 {
        return Err(Error::Checkpoint(format!("blob {} has a partial value", blob.display())));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let mut out = Vec::new();
    for e in manifest.tensors {
        let end = e.offset.checked_add(e.len).filter(|&end| end <= values.len());
        let Some(end) = end else {
            return Err(Error::Checkpoint(format!("tensor {} runs past the blob", e.name)));
        };
        let t = Tensor::new(e.shape, values[e.offset..end].to_vec())
            .map_err(|err| Error::Checkpoint(format!("tensor {}: {err}", e.name)))?;
        out.push((e.name, t));
    }
    Ok((manifest.meta, out))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelMeta {
    config: DetectorConfig,
    step: u64,
    seed: u64,
}

/// Saves detector parameters with their config.
pub fn save_model(path: &Path, cfg: &DetectorConfig, params: &DetectorParams, step: u64, seed: u64) -> Result<()> {
    let meta = serde_json::to_value(ModelMeta {
        config: cfg.clone(),
        step,
        seed,
    })
    .map_err(|e| Error::json(path, e))?;
    let named: Vec<(String, &Tensor)> = cfg
        .param_specs()
        .into_iter()
        .map(|(n, _)| n)
        .zip(&params.tensors)
        .collect();
    write_checkpoint(path, meta, &named)
}

/// Splits checkpoint tensors into detector parameters (the `block*`/`head*` entries) and the rest.
pub fn params_from_tensors(
    cfg: &DetectorConfig,
    tensors: Vec<(String, Tensor)>,
) -> Result<(DetectorParams, Vec<(String, Tensor)>)> {
    let specs = cfg.param_specs();
    let mut params = Vec::with_capacity(specs.len());
    let mut rest = Vec::new();
    let mut it = tensors.into_iter();
    for (name, _) in &specs {
        match it.next() {
            Some((n, t)) if &n == name => params.push(t),
            Some((n, _)) => {
                return Err(Error::Checkpoint(format!("expected tensor {name}, found {n}")));
            }
            None => return Err(Error::Checkpoint(format!("missing tensor {name}"))),
        }
    }
    rest.extend(it);
    let params = DetectorParams { tensors: params };
    params.check(cfg)?;
    Ok((params, rest))
}

/// Loads a model checkpoint; the embedded config must equal `expect` when given.
pub fn load_model(path: &Path, expect: Option<&DetectorConfig>) -> Result<(DetectorConfig, DetectorParams)> {
    let (meta, tensors) = read_checkpoint(path)?;
    let cfg: DetectorConfig = serde_json::from_value(
        meta.get("config")
            .cloned()
            .ok_or_else(|| Error::Checkpoint("manifest has no detector config".into()))?,
    )
    .map_err(|e| Error::Checkpoint(format!("bad detector config: {e}")))?;
    if let Some(want) = expect {
        if want != &cfg {
            return Err(Error::Checkpoint(
                "checkpoint was written for a different detector config".into(),
            ));
        }
    }
    let (params, _) = params_from_tensors(&cfg, tensors)?;
    Ok((cfg, params))
}
