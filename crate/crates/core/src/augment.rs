//! Contrast augmentation by cascaded random convolutions and geometric
//! augmentation by random affine maps about the volume center.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::linalg::invert4;
use crate::volume::{sample_trilinear, LandmarkSet, Point3, Volume3D};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RcConfig {
    pub layers: usize,
    /// Bounds of the uniform weight distribution before zero-centering.
    pub weight_range: [f64; 2],
    pub slope: f64,
    /// Hidden channel count between the single-channel input and output.
    pub channels: usize,
    /// Spatial kernel extent; 1 in training, larger only to demonstrate blurring.
    pub kernel: usize,
}

impl Default for RcConfig {
    fn default() -> Self {
        RcConfig {
            layers: 5,
            weight_range: [0.0, 2.0],
            slope: 0.2,
            channels: 4,
            kernel: 1,
        }
    }
}

impl RcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Invalid("random convolution needs at least one layer".into()));
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(Error::Invalid(format!("kernel extent {} must be odd", self.kernel)));
        }
        if self.channels == 0 {
            return Err(Error::Invalid("random convolution needs at least one channel".into()));
        }
        if !(self.weight_range[0] < self.weight_range[1]) {
            return Err(Error::Invalid(format!("empty weight range {:?}", self.weight_range)));
        }
        Ok(())
    }
}

/// Zero-centered uniform weights `[cout, cin, k, k, k]` for every layer.
fn rc_weights(cfg: &RcConfig, rng: &mut ChaCha8Rng) -> Vec<(usize, usize, Vec<f64>)> {
    let k3 = cfg.kernel.pow(3);
    (0..cfg.layers)
        .map(|l| {
            let cin = if l == 0 { 1 } else { cfg.channels };
            let cout = if l + 1 == cfg.layers { 1 } else { cfg.channels };
            let mut w: Vec<f64> = (0..cout * cin * k3)
                .map(|_| rng.random_range(cfg.weight_range[0]..cfg.weight_range[1]))
                .collect();
            let mean = w.iter().sum::<f64>() / w.len() as f64;
            w.iter_mut().for_each(|x| *x -= mean);
            (cout, cin, w)
        })
        .collect()
}

fn rescale_unit(values: &[f64]) -> Vec<f32> {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(hi > lo) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|&v| ((v - lo) / (hi - lo)) as f32).collect()
}

/// Random-convolution contrast augmentation, min-max rescaled to `[0, 1]`.
///
/// The input is mapped from `[0, 1]` to `[-1, 1]` first. Without biases a
/// cascade fed only nonnegative values stays linear, which after rescaling
/// leaves just the identity and the inverted contrast.
pub fn rc_augment(v: &Volume3D, cfg: &RcConfig, seed: u64) -> Result<Volume3D> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = rc_weights(cfg, &mut rng);
    let out = if cfg.kernel == 1 {
        v.data
            .iter()
            .map(|&x| {
                let mut h = vec![2.0 * x as f64 - 1.0];
                for (cout, cin, w) in &weights {
                    let next: Vec<f64> = (0..*cout)
                        .map(|o| {
                            let s: f64 = (0..*cin).map(|c| w[o * cin + c] * h[c]).sum();
                            crate::autodiff::leaky_relu(s, cfg.slope)
                        })
                        .collect();
                    h = next;
                }
                h[0]
            })
            .collect()
    } else {
        let [nx, ny, nz] = v.shape();
        let mut g = Graph::new();
        let centered = v.data.iter().map(|&x| 2.0 * x as f64 - 1.0).collect();
        let mut x = g.constant(Tensor::new(vec![1, nz, ny, nx], centered)?);
        let k = cfg.kernel;
        for (cout, cin, w) in weights {
            let wv = g.constant(Tensor::new(vec![cout, cin, k, k, k], w)?);
            x = g.conv3d(x, wv, k / 2)?;
            x = g.leaky_relu(x, cfg.slope)?;
        }
        g.value(x).data().to_vec()
    };
    Volume3D::new(v.grid, rescale_unit(&out))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineRanges {
    /// Each Euler angle uniform in `[-rotation_deg, rotation_deg]`.
    pub rotation_deg: f64,
    /// Each translation component uniform in `[-translation, translation]` voxels.
    pub translation: f64,
    pub scale: [f64; 2],
    pub shear: f64,
}

impl AffineRanges {
    pub fn identity() -> Self {
        AffineRanges {
            rotation_deg: 0.0,
            translation: 0.0,
            scale: [1.0, 1.0],
            shear: 0.0,
        }
    }

    /// Full rotations, +-15 voxel shifts, 0.8 to 1.2 scaling, +-0.1 shear.
    pub fn wide() -> Self {
        AffineRanges {
            rotation_deg: 180.0,
            translation: 15.0,
            scale: [0.8, 1.2],
            shear: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.rotation_deg >= 0.0
            && self.translation >= 0.0
            && self.shear >= 0.0
            && self.scale[0] > 0.0
            && self.scale[0] <= self.scale[1];
        if !ok {
            return Err(Error::Invalid(format!("bad affine ranges {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineAug {
    pub rotation_deg: [f64; 3],
    pub translation: [f64; 3],
    pub scale: [f64; 3],
    pub shear: [f64; 3],
    /// Forward world map, row major 4x4.
    pub matrix: [f64; 16],
    pub inverse: [f64; 16],
}

fn mat3_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

fn rotation(deg: [f64; 3]) -> [[f64; 3]; 3] {
    let [a, b, c] = deg.map(f64::to_radians);
    let rx = [[1.0, 0.0, 0.0], [0.0, a.cos(), -a.sin()], [0.0, a.sin(), a.cos()]];
    let ry = [[b.cos(), 0.0, b.sin()], [0.0, 1.0, 0.0], [-b.sin(), 0.0, b.cos()]];
    let rz = [[c.cos(), -c.sin(), 0.0], [c.sin(), c.cos(), 0.0], [0.0, 0.0, 1.0]];
    mat3_mul(&rz, &mat3_mul(&ry, &rx))
}

impl AffineAug {
    /// Builds `x -> S H R (x - center) + center + translation * spacing`.
    pub fn from_params(
        rotation_deg: [f64; 3],
        translation: [f64; 3],
        scale: [f64; 3],
        shear: [f64; 3],
        center: Point3,
        spacing: [f64; 3],
    ) -> Result<Self> {
        let s = [[scale[0], 0.0, 0.0], [0.0, scale[1], 0.0], [0.0, 0.0, scale[2]]];
        let h = [[1.0, shear[0], shear[1]], [0.0, 1.0, shear[2]], [0.0, 0.0, 1.0]];
        let a = mat3_mul(&s, &mat3_mul(&h, &rotation(rotation_deg)));
        let mut m = [0.0; 16];
        for i in 0..3 {
            let ac: f64 = (0..3).map(|k| a[i][k] * center[k]).sum();
            for j in 0..3 {
                m[i * 4 + j] = a[i][j];
            }
            m[i * 4 + 3] = center[i] - ac + translation[i] * spacing[i];
        }
        m[15] = 1.0;
        let inverse = invert4(&m)?;
        Ok(AffineAug {
            rotation_deg,
            translation,
            scale,
            shear,
            matrix: m,
            inverse,
        })
    }

    pub fn identity() -> Self {
        Self::from_params([0.0; 3], [0.0; 3], [1.0; 3], [0.0; 3], [0.0; 3], [1.0; 3])
            .expect("identity is invertible")
    }

    pub fn forward(&self, p: Point3) -> Point3 {
        apply4(&self.matrix, p)
    }

    pub fn backward(&self, p: Point3) -> Point3 {
        apply4(&self.inverse, p)
    }
}

fn apply4(m: &[f64; 16], p: Point3) -> Point3 {
    let mut out = [0.0; 3];
    for (i, o) in out.iter_mut().enumerate() {
        *o = m[i * 4] * p[0] + m[i * 4 + 1] * p[1] + m[i * 4 + 2] * p[2] + m[i * 4 + 3];
    }
    out
}

fn sym(rng: &mut ChaCha8Rng, half: f64) -> f64 {
    if half > 0.0 {
        rng.random_range(-half..=half)
    } else {
        0.0
    }
}

/// Draws an affine augmentation for volumes on `v`'s grid.
pub fn sample_affine_with(ranges: &AffineRanges, v: &Volume3D, rng: &mut ChaCha8Rng) -> Result<AffineAug> {
    ranges.validate()?;
    let rot = [0; 3].map(|_| sym(rng, ranges.rotation_deg));
    let tr = [0; 3].map(|_| sym(rng, ranges.translation));
    let sc = [0; 3].map(|_| {
        if ranges.scale[1] > ranges.scale[0] {
            rng.random_range(ranges.scale[0]..=ranges.scale[1])
        } else {
            ranges.scale[0]
        }
    });
    let sh = [0; 3].map(|_| sym(rng, ranges.shear));
    AffineAug::from_params(rot, tr, sc, sh, v.grid.center(), v.grid.spacing)
}

pub fn sample_affine(ranges: &AffineRanges, v: &Volume3D, seed: u64) -> Result<AffineAug> {
    sample_affine_with(ranges, v, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Backward-warps `v`: output voxel at `x` takes the value at `inverse(x)`.
pub fn apply_affine(v: &Volume3D, aug: &AffineAug) -> Volume3D {
    let data = v
        .grid
        .coordinates()
        .into_iter()
        .map(|p| sample_trilinear(v, aug.backward(p)) as f32)
        .collect();
    Volume3D {
        grid: v.grid,
        data,
    }
}

pub fn apply_affine_points(lm: &LandmarkSet, aug: &AffineAug) -> LandmarkSet {
    lm.map(|p| aug.forward(p))
}
