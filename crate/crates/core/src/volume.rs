//! Volumetric images and landmark sets in world (mm) coordinates.
//!
//! Voxel `(i, j, k)` sits at `origin + (i, j, k) * spacing`. Storage is
//! x-fastest, matching the on-disk raw layout: the flat index of `(i, j, k)`
//! is `i + nx * (j + ny * k)`.
//!
//! On disk a volume is a pair of files: `<name>.f32raw` with little-endian
//! 32-bit floats and `<name>.json` with `shape`, `spacing`, `origin`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub type Point3 = [f64; 3];

/// Geometry of a regular voxel grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Grid {
    pub fn new(shape: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        let grid = Grid {
            shape,
            spacing,
            origin,
        };
        grid.validate()?;
        Ok(grid)
    }

    /// Unit-spacing grid at the origin.
    pub fn unit(shape: [usize; 3]) -> Self {
        Grid {
            shape,
            spacing: [1.0; 3],
            origin: [0.0; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.shape.iter().any(|&n| n < 2) {
            return Err(Error::Invalid(format!(
                "grid dimensions must be at least 2, got {:?}",
                self.shape
            )));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Invalid(format!(
                "spacing must be positive, got {:?}",
                self.spacing
            )));
        }
        if self.origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::Invalid(format!("non-finite origin {:?}", self.origin)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.shape[0] * (j + self.shape[1] * k)
    }

    #[inline]
    pub fn unravel(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.shape[0];
        let rest = idx / self.shape[0];
        [i, rest % self.shape[1], rest / self.shape[1]]
    }

    #[inline]
    pub fn world(&self, i: usize, j: usize, k: usize) -> Point3 {
        [
            self.origin[0] + i as f64 * self.spacing[0],
            self.origin[1] + j as f64 * self.spacing[1],
            self.origin[2] + k as f64 * self.spacing[2],
        ]
    }

    /// Continuous voxel index of a world point.
    #[inline]
    pub fn to_index(&self, p: Point3) -> Point3 {
        [
            (p[0] - self.origin[0]) / self.spacing[0],
            (p[1] - self.origin[1]) / self.spacing[1],
            (p[2] - self.origin[2]) / self.spacing[2],
        ]
    }

    /// World coordinates of every voxel, in storage order.
    pub fn coordinates(&self) -> Vec<Point3> {
        let [nx, ny, nz] = self.shape;
        let mut out = Vec::with_capacity(self.len());
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    out.push(self.world(i, j, k));
                }
            }
        }
        out
    }

    /// Geometric center of the voxel lattice.
    pub fn center(&self) -> Point3 {
        let mut c = [0.0; 3];
        for a in 0..3 {
            c[a] = self.origin[a] + 0.5 * (self.shape[a] - 1) as f64 * self.spacing[a];
        }
        c
    }

    /// World-space bounding box `(min, max)` of voxel centers.
    pub fn bounds(&self) -> (Point3, Point3) {
        let lo = self.origin;
        let hi = self.world(self.shape[0] - 1, self.shape[1] - 1, self.shape[2] - 1);
        (lo, hi)
    }

    /// Grid after `factor`-fold block reduction (pooling or averaging).
    ///
    /// Cell `c` covers source voxels `factor*c .. factor*(c+1)`, so its center
    /// lies at `origin + (factor*c + (factor-1)/2) * spacing`.
    pub fn downsampled(&self, factor: usize) -> Grid {
        let mut g = *self;
        for a in 0..3 {
            g.shape[a] = self.shape[a] / factor;
            g.spacing[a] = self.spacing[a] * factor as f64;
            g.origin[a] = self.origin[a] + 0.5 * (factor as f64 - 1.0) * self.spacing[a];
        }
        g
    }
}

/// Dense scalar volume with f32 storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    pub grid: Grid,
    pub data: Vec<f32>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    shape: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
}

impl Volume3D {
    pub fn new(grid: Grid, data: Vec<f32>) -> Result<Self> {
        grid.validate()?;
        if data.len() != grid.len() {
            return Err(Error::SizeMismatch {
                expected: grid.len(),
                found: data.len(),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("voxel {pos}")));
        }
        Ok(Volume3D { grid, data })
    }

    pub fn zeros(grid: Grid) -> Self {
        Volume3D {
            data: vec![0.0; grid.len()],
            grid,
        }
    }

    pub fn from_fn(grid: Grid, mut f: impl FnMut(Point3) -> f64) -> Self {
        let data = grid.coordinates().into_iter().map(|p| f(p) as f32).collect();
        Volume3D { grid, data }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.grid.shape
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.grid.index(i, j, k)]
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Min-max rescale to `[0, 1]`; a constant volume maps to zeros.
    pub fn rescaled(&self) -> Volume3D {
        let (lo, hi) = self.min_max();
        let range = (hi - lo) as f64;
        let data = if range > 0.0 {
            self.data
                .iter()
                .map(|&v| (((v - lo) as f64) / range).clamp(0.0, 1.0) as f32)
                .collect()
        } else {
            vec![0.0; self.data.len()]
        };
        Volume3D {
            grid: self.grid,
            data,
        }
    }

    /// Voxel values widened to f64.
    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    pub fn map(&self, mut f: impl FnMut(f32) -> f32) -> Volume3D {
        Volume3D {
            grid: self.grid,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Trilinear interpolation at a world point; voxels outside the grid read as zero.
pub fn sample_trilinear(v: &Volume3D, p: Point3) -> f64 {
    trilinear_with_grad(v, p).0
}

/// Trilinear value and its gradient with respect to the world-space query point.
pub fn trilinear_with_grad(v: &Volume3D, p: Point3) -> (f64, Point3) {
    let g = &v.grid;
    let c = g.to_index(p);
    if c.iter().any(|x| !x.is_finite()) {
        return (0.0, [0.0; 3]);
    }
    let [nx, ny, nz] = g.shape;
    let fl = [c[0].floor(), c[1].floor(), c[2].floor()];
    // Entirely outside the one-voxel zero-padding shell.
    if fl[0] < -1.0
        || fl[1] < -1.0
        || fl[2] < -1.0
        || fl[0] > nx as f64
        || fl[1] > ny as f64
        || fl[2] > nz as f64
    {
        return (0.0, [0.0; 3]);
    }
    let t = [c[0] - fl[0], c[1] - fl[1], c[2] - fl[2]];
    let base = [fl[0] as i64, fl[1] as i64, fl[2] as i64];
    let fetch = |di: i64, dj: i64, dk: i64| -> f64 {
        let (i, j, k) = (base[0] + di, base[1] + dj, base[2] + dk);
        if i < 0 || j < 0 || k < 0 || i >= nx as i64 || j >= ny as i64 || k >= nz as i64 {
            0.0
        } else {
            v.data[g.index(i as usize, j as usize, k as usize)] as f64
        }
    };
    let c000 = fetch(0, 0, 0);
    let c100 = fetch(1, 0, 0);
    let c010 = fetch(0, 1, 0);
    let c110 = fetch(1, 1, 0);
    let c001 = fetch(0, 0, 1);
    let c101 = fetch(1, 0, 1);
    let c011 = fetch(0, 1, 1);
    let c111 = fetch(1, 1, 1);

    let [tx, ty, tz] = t;
    let c00 = c000 + (c100 - c000) * tx;
    let c10 = c010 + (c110 - c010) * tx;
    let c01 = c001 + (c101 - c001) * tx;
    let c11 = c011 + (c111 - c011) * tx;
    let c0 = c00 + (c10 - c00) * ty;
    let c1 = c01 + (c11 - c01) * ty;
    let value = c0 + (c1 - c0) * tz;

    let dx0 = (c100 - c000) * (1.0 - ty) + (c110 - c010) * ty;
    let dx1 = (c101 - c001) * (1.0 - ty) + (c111 - c011) * ty;
    let dx = dx0 * (1.0 - tz) + dx1 * tz;
    let dy = (c10 - c00) * (1.0 - tz) + (c11 - c01) * tz;
    let dz = c1 - c0;
    (
        value,
        [dx / g.spacing[0], dy / g.spacing[1], dz / g.spacing[2]],
    )
}

/// Per-voxel sampling coordinates for a backward warp.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordField {
    /// Output grid the field is defined on.
    pub grid: Grid,
    /// Source-space world point for each output voxel, in storage order.
    pub points: Vec<Point3>,
}

impl CoordField {
    pub fn identity(grid: Grid) -> Self {
        CoordField {
            points: grid.coordinates(),
            grid,
        }
    }
}

/// `out(u) = v(field(u))`: pull-back resampling onto the field's grid.
pub fn resample_by_field(v: &Volume3D, field: &CoordField) -> Result<Volume3D> {
    if field.points.len() != field.grid.len() {
        return Err(Error::Shape(format!(
            "field has {} points for a grid of {} voxels",
            field.points.len(),
            field.grid.len()
        )));
    }
    let data = field
        .points
        .iter()
        .map(|&p| sample_trilinear(v, p) as f32)
        .collect();
    Ok(Volume3D {
        grid: field.grid,
        data,
    })
}

fn sidecar_path(raw: &Path) -> PathBuf {
    raw.with_extension("json")
}

/// Normalizes `name`, `name.f32raw` or `name.json` to the raw-data path.
pub fn raw_path(path: &Path) -> PathBuf {
    match path.extension().and_then(|e| e.to_str()) {
        Some("f32raw") => path.to_path_buf(),
        Some("json") => path.with_extension("f32raw"),
        _ => {
            let mut s = path.as_os_str().to_owned();
            s.push(".f32raw");
            PathBuf::from(s)
        }
    }
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume3D> {
    let raw = raw_path(path.as_ref());
    let side = sidecar_path(&raw);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let meta: Sidecar = serde_json::from_str(&text).map_err(|e| Error::json(&side, e))?;
    let grid = Grid::new(meta.shape, meta.spacing, meta.origin)?;
    let bytes = fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::SizeMismatch {
            expected: grid.len() * 4,
            found: bytes.len(),
        });
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Volume3D::new(grid, data)
}

pub fn save_volume(v: &Volume3D, path: impl AsRef<Path>) -> Result<()> {
    let raw = raw_path(path.as_ref());
    let side = sidecar_path(&raw);
    if let Some(dir) = raw.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut bytes = Vec::with_capacity(v.data.len() * 4);
    for x in &v.data {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(&raw, bytes).map_err(|e| Error::io(&raw, e))?;
    let meta = Sidecar {
        shape: v.grid.shape,
        spacing: v.grid.spacing,
        origin: v.grid.origin,
    };
    let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::json(&side, e))?;
    fs::write(&side, text).map_err(|e| Error::io(&side, e))
}

/// Ordered landmark coordinates in mm; index `i` always names the same landmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LandmarkSet {
    pub points: Vec<Point3>,
}

impl LandmarkSet {
    pub fn new(points: Vec<Point3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Invalid("landmark set is empty".into()));
        }
        if points.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("landmark coordinate".into()));
        }
        Ok(LandmarkSet { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Row-major `L x 3` coordinates.
    pub fn flat(&self) -> Vec<f64> {
        self.points.iter().flatten().copied().collect()
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.len() % 3 != 0 {
            return Err(Error::Shape(format!(
                "{} values do not form 3-vectors",
                flat.len()
            )));
        }
        LandmarkSet::new(flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    pub fn map(&self, mut f: impl FnMut(Point3) -> Point3) -> LandmarkSet {
        LandmarkSet {
            points: self.points.iter().map(|&p| f(p)).collect(),
        }
    }
}

pub fn load_landmarks(path: impl AsRef<Path>) -> Result<LandmarkSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let points: Vec<Point3> = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    LandmarkSet::new(points)
}

pub fn save_landmarks(lm: &LandmarkSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string(&lm.points).map_err(|e| Error::json(path, e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn sub3(a: Point3, b: Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn norm3(a: Point3) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

pub fn distance(a: Point3, b: Point3) -> f64 {
    norm3(sub3(a, b))
}
