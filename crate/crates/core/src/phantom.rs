//! Synthetic phantoms with analytically known landmarks.
//!
//! A template is a faint ellipsoidal head plus one Gaussian blob per
//! landmark site. Subjects are backward warps of the template under a TPS
//! fitted to a jittered control lattice composed with a global affine; the
//! subject landmarks are the exact images of the template sites.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::augment::{rc_augment, sample_affine_with, AffineRanges, RcConfig};
use crate::error::{Error, Result};
use crate::tps::{fit_tps, TpsTransform};
use crate::volume::{
    distance, load_landmarks, load_volume, sample_trilinear, save_landmarks, save_volume, Grid,
    LandmarkSet, Point3, Volume3D,
};

/// Kernel scale of the ground-truth deformation, independent of the model's.
pub const DEFORMATION_KERNEL_SCALE: f64 = 32.0;

pub const MANIFEST_VERSION: u32 = 1;
/// Minimum distance in voxels between any landmark and the grid faces.
pub const SITE_MARGIN: f64 = 3.0;
const MAX_ATTEMPTS: usize = 10_000;
const SUBJECT_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase", deny_unknown_fields)]
pub enum Contrast {
    Identity,
    Gamma { gamma: f64 },
    Rc { seed: u64 },
}

/// Intensity-only transform; never moves anything.
pub fn apply_contrast(v: &Volume3D, contrast: &Contrast) -> Result<Volume3D> {
    match *contrast {
        Contrast::Identity => Ok(v.clone()),
        Contrast::Gamma { gamma } => {
            if !(gamma > 0.0) {
                return Err(Error::Invalid(format!("gamma must be positive, got {gamma}")));
            }
            Ok(v.map(|x| (x.clamp(0.0, 1.0) as f64).powf(gamma) as f32))
        }
        Contrast::Rc { seed } => rc_augment(v, &RcConfig::default(), seed),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub shape: [usize; 3],
    /// Isotropic voxel size in mm.
    pub spacing: f64,
    pub landmarks: usize,
    /// Sites are drawn uniformly in a cube of this half-width (mm) about the center.
    pub site_radius: f64,
    pub min_separation: f64,
    /// Peak intensity of the ellipsoidal head before normalization.
    pub background: f64,
    /// Blob `i` has standard deviation `blob_sigma[0] + i * blob_sigma[1]` mm.
    pub blob_sigma: [f64; 2],
    /// Blob `i` has amplitude `blob_amplitude[0] + i * blob_amplitude[1]`.
    pub blob_amplitude: [f64; 2],
    /// Control lattice points per axis.
    pub control_points: usize,
    /// Standard deviation of the control point displacement, mm.
    pub jitter: f64,
    /// Global affine composed after the jitter.
    pub affine: AffineRanges,
    pub contrast: Contrast,
    pub noise: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            shape: [48; 3],
            spacing: 1.0,
            landmarks: 6,
            site_radius: 13.0,
            min_separation: 11.0,
            background: 0.15,
            blob_sigma: [5.0, 0.4],
            blob_amplitude: [0.35, 0.13],
            control_points: 3,
            jitter: 1.0,
            affine: AffineRanges {
                rotation_deg: 15.0,
                translation: 3.0,
                scale: [0.9, 1.1],
                shear: 0.0,
            },
            contrast: Contrast::Identity,
            noise: 0.0,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.shape, [self.spacing; 3], [0.0; 3])
    }

    pub fn validate(&self) -> Result<()> {
        self.grid()?;
        let ok = self.spacing > 0.0
            && self.landmarks > 0
            && self.site_radius >= 0.0
            && self.min_separation >= 0.0
            && self.background >= 0.0
            && self.blob_sigma[0] > 0.0
            && self.blob_sigma[1] >= 0.0
            && self.blob_amplitude[0] > 0.0
            && self.blob_amplitude[1] >= 0.0
            && self.control_points >= 2
            && self.jitter >= 0.0
            && self.noise >= 0.0;
        if !ok {
            return Err(Error::Invalid(format!("bad phantom spec {self:?}")));
        }
        self.affine.validate()?;
        let half = self.shape.iter().map(|&n| (n - 1) as f64).fold(f64::INFINITY, f64::min) * 0.5;
        if self.site_radius > (half - SITE_MARGIN) * self.spacing {
            return Err(Error::Invalid(format!(
                "site radius {} mm leaves less than {SITE_MARGIN} voxels of margin",
                self.site_radius
            )));
        }
        Ok(())
    }
}

fn inside_margin(grid: &Grid, p: Point3) -> bool {
    let c = grid.to_index(p);
    (0..3).all(|a| c[a] >= SITE_MARGIN && c[a] <= (grid.shape[a] - 1) as f64 - SITE_MARGIN)
}

fn place_sites(spec: &PhantomSpec, grid: &Grid, rng: &mut ChaCha8Rng) -> Result<Vec<Point3>> {
    let center = grid.center();
    let mut sites: Vec<Point3> = Vec::with_capacity(spec.landmarks);
    for _ in 0..MAX_ATTEMPTS {
        if sites.len() == spec.landmarks {
            break;
        }
        let r = spec.site_radius;
        let cand = [0; 3].map(|_| if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 });
        let cand = [center[0] + cand[0], center[1] + cand[1], center[2] + cand[2]];
        if sites.iter().all(|&q| distance(q, cand) > spec.min_separation) {
            sites.push(cand);
        }
    }
    if sites.len() < spec.landmarks {
        return Err(Error::Invalid(format!(
            "could not place {} sites {} mm apart within {} mm",
            spec.landmarks, spec.min_separation, spec.site_radius
        )));
    }
    Ok(sites)
}

/// Template volume in `[0, 1]` and its landmark sites (blob centers).
pub fn make_template(spec: &PhantomSpec) -> Result<(Volume3D, LandmarkSet)> {
    spec.validate()?;
    let grid = spec.grid()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let sites = place_sites(spec, &grid, &mut rng)?;
    let center = grid.center();
    let unit = spec.spacing * (spec.shape.iter().min().copied().unwrap_or(2) - 1) as f64 / 47.0;
    let head_center = [center[0] + unit, center[1] - unit, center[2]];
    let head_axes = [20.0 * unit, 17.0 * unit, 15.0 * unit];
    let raw = Volume3D::from_fn(grid, |p| {
        let e = (0..3)
            .map(|a| ((p[a] - head_center[a]) / head_axes[a]).powi(2))
            .sum::<f64>()
            .sqrt();
        let mut v = spec.background / (1.0 + (-(1.0 - e) * 12.0).exp());
        for (i, s) in sites.iter().enumerate() {
            let sigma = spec.blob_sigma[0] + i as f64 * spec.blob_sigma[1];
            let amp = spec.blob_amplitude[0] + i as f64 * spec.blob_amplitude[1];
            let r2 = (0..3).map(|a| (p[a] - s[a]).powi(2)).sum::<f64>();
            v += amp * (-r2 / (2.0 * sigma * sigma)).exp();
        }
        v
    });
    Ok((raw.rescaled(), LandmarkSet::new(sites)?))
}

fn control_lattice(grid: &Grid, per_axis: usize) -> Vec<Point3> {
    let (lo, hi) = grid.bounds();
    let t = |a: usize, i: usize| lo[a] + (hi[a] - lo[a]) * i as f64 / (per_axis - 1) as f64;
    let mut pts = Vec::with_capacity(per_axis.pow(3));
    for k in 0..per_axis {
        for j in 0..per_axis {
            for i in 0..per_axis {
                pts.push([t(0, i), t(1, j), t(2, k)]);
            }
        }
    }
    pts
}

/// Forward template-to-subject map: jittered lattice TPS followed by a global affine.
pub fn sample_deformation(spec: &PhantomSpec, grid: &Grid, rng: &mut ChaCha8Rng) -> Result<TpsTransform> {
    let ctrl = control_lattice(grid, spec.control_points);
    let normal = Normal::new(0.0, spec.jitter.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Invalid(e.to_string()))?;
    let jittered: Vec<Point3> = ctrl
        .iter()
        .map(|p| {
            if spec.jitter > 0.0 {
                [0, 1, 2].map(|a| p[a] + normal.sample(rng))
            } else {
                *p
            }
        })
        .collect();
    let probe = Volume3D::zeros(*grid);
    let aff = sample_affine_with(&spec.affine, &probe, rng)?;
    let target: Vec<Point3> = jittered.iter().map(|&p| aff.forward(p)).collect();
    fit_tps(
        &LandmarkSet::new(ctrl)?,
        &LandmarkSet::new(target)?,
        0.0,
        DEFORMATION_KERNEL_SCALE,
    )
}

fn solve3(m: &[[f64; 3]; 3], b: Point3) -> Option<Point3> {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    if det.abs() < 1e-12 {
        return None;
    }
    let col = |c: usize| {
        let mut a = *m;
        for r in 0..3 {
            a[r][c] = b[r];
        }
        a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
            - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
            + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
    };
    Some([col(0) / det, col(1) / det, col(2) / det])
}

/// Damped Newton inversion of `f` at `u`, started from `u`.
pub fn invert_point(f: &TpsTransform, u: Point3) -> Result<Point3> {
    let resid = |v: Point3| {
        let fv = f.eval(v);
        [fv[0] - u[0], fv[1] - u[1], fv[2] - u[2]]
    };
    let norm2 = |r: Point3| r.iter().map(|x| x * x).sum::<f64>();
    let mut v = u;
    let mut r = resid(v);
    for _ in 0..100 {
        if norm2(r) < 1e-18 {
            return Ok(v);
        }
        let step = solve3(&f.jacobian(v), r).ok_or(Error::Singular { condition: f64::INFINITY })?;
        let mut t = 1.0;
        loop {
            let cand = [v[0] - t * step[0], v[1] - t * step[1], v[2] - t * step[2]];
            let rc = resid(cand);
            if norm2(rc) < norm2(r) || t < 1e-6 {
                v = cand;
                r = rc;
                break;
            }
            t *= 0.5;
        }
    }
    Err(Error::NonFinite(format!("deformation inverse did not converge at {u:?}")))
}

/// Backward-warps `template` so that template point `x` appears at `f(x)`.
pub fn warp_forward(template: &Volume3D, f: &TpsTransform) -> Result<Volume3D> {
    let data = template
        .grid
        .coordinates()
        .into_iter()
        .map(|u| Ok(sample_trilinear(template, invert_point(f, u)?) as f32))
        .collect::<Result<Vec<_>>>()?;
    Volume3D::new(template.grid, data)
}

#[derive(Debug, Clone)]
pub struct Subject {
    pub volume: Volume3D,
    pub landmarks: LandmarkSet,
    pub deformation: TpsTransform,
}

/// Renders a subject for a given deformation, contrast and noise seed.
pub fn render_subject(
    template: &Volume3D,
    gt: &LandmarkSet,
    deformation: TpsTransform,
    contrast: &Contrast,
    noise: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Subject> {
    let landmarks = deformation.apply(gt);
    let warped = warp_forward(template, &deformation)?;
    let mut volume = apply_contrast(&warped, contrast)?;
    if noise > 0.0 {
        let n = Normal::new(0.0, noise).map_err(|e| Error::Invalid(e.to_string()))?;
        for x in volume.data.iter_mut() {
            *x += n.sample(rng) as f32;
        }
    }
    Ok(Subject {
        volume,
        landmarks,
        deformation,
    })
}

/// Samples a deformation keeping every landmark inside the margin, then renders.
pub fn make_subject(template: &Volume3D, gt: &LandmarkSet, spec: &PhantomSpec, seed: u64) -> Result<Subject> {
    spec.validate()?;
    let grid = template.grid;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..SUBJECT_ATTEMPTS {
        let f = sample_deformation(spec, &grid, &mut rng)?;
        if !gt.points.iter().all(|&p| inside_margin(&grid, f.eval(p))) {
            continue;
        }
        match render_subject(template, gt, f, &spec.contrast, spec.noise, &mut rng) {
            Err(e) if e.is_numerical() => continue,
            other => return other,
        }
    }
    Err(Error::Invalid(format!(
        "no invertible deformation kept the landmarks in bounds after {SUBJECT_ATTEMPTS} draws"
    )))
}

/// Seed of subject `index` in a cohort rooted at `base`.
pub fn subject_seed(base: u64, index: usize) -> u64 {
    let mut z = base ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileEntry {
    pub volume: PathBuf,
    pub landmarks: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectEntry {
    pub id: String,
    pub seed: u64,
    pub split: Split,
    #[serde(flatten)]
    pub files: FileEntry,
}

/// Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortManifest {
    pub version: u32,
    pub spec: PhantomSpec,
    pub template: FileEntry,
    pub subjects: Vec<SubjectEntry>,
}

#[derive(Debug, Clone)]
pub struct Cohort {
    pub spec: PhantomSpec,
    pub template: Volume3D,
    pub landmarks: LandmarkSet,
    pub train: Vec<(Volume3D, LandmarkSet)>,
    pub test: Vec<(Volume3D, LandmarkSet)>,
}

/// Generates a template and `n_train + n_test` subjects in memory.
pub fn generate_cohort(spec: &PhantomSpec, n_train: usize, n_test: usize) -> Result<Cohort> {
    let (template, landmarks) = make_template(spec)?;
    let mut subjects = (0..n_train + n_test).map(|i| {
        make_subject(&template, &landmarks, spec, subject_seed(spec.seed, i))
            .map(|s| (s.volume, s.landmarks))
    });
    let train = subjects.by_ref().take(n_train).collect::<Result<_>>()?;
    let test = subjects.collect::<Result<_>>()?;
    Ok(Cohort {
        spec: spec.clone(),
        template,
        landmarks,
        train,
        test,
    })
}

fn subject_id(i: usize) -> String {
    format!("subject_{i:04}")
}

/// Writes a cohort under `dir` and returns its manifest (also saved as `manifest.json`).
pub fn make_cohort(spec: &PhantomSpec, n_train: usize, n_test: usize, dir: &Path) -> Result<CohortManifest> {
    let cohort = generate_cohort(spec, n_train, n_test)?;
    write_cohort(&cohort, dir)
}

pub fn write_cohort(cohort: &Cohort, dir: &Path) -> Result<CohortManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let template = FileEntry {
        volume: "template.json".into(),
        landmarks: "template_landmarks.json".into(),
    };
    save_volume(&cohort.template, dir.join(&template.volume))?;
    save_landmarks(&cohort.landmarks, dir.join(&template.landmarks))?;
    let mut subjects = Vec::new();
    let entries = cohort
        .train
        .iter()
        .map(|s| (Split::Train, s))
        .chain(cohort.test.iter().map(|s| (Split::Test, s)));
    for (i, (split, (vol, lm))) in entries.enumerate() {
        let id = subject_id(i);
        let files = FileEntry {
            volume: format!("subjects/{id}.json").into(),
            landmarks: format!("subjects/{id}_landmarks.json").into(),
        };
        save_volume(vol, dir.join(&files.volume))?;
        save_landmarks(lm, dir.join(&files.landmarks))?;
        subjects.push(SubjectEntry {
            id,
            seed: subject_seed(cohort.spec.seed, i),
            split,
            files,
        });
    }
    let manifest = CohortManifest {
        version: MANIFEST_VERSION,
        spec: cohort.spec.clone(),
        template,
        subjects,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<CohortManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m: CohortManifest = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    if m.version != MANIFEST_VERSION {
        return Err(Error::Invalid(format!(
            "manifest version {} is not {MANIFEST_VERSION}",
            m.version
        )));
    }
    Ok(m)
}

/// Loads the volumes and landmarks a manifest points at.
pub fn load_cohort(path: &Path) -> Result<Cohort> {
    let m = read_manifest(path)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let load = |f: &FileEntry| -> Result<(Volume3D, LandmarkSet)> {
        Ok((load_volume(dir.join(&f.volume))?, load_landmarks(dir.join(&f.landmarks))?))
    };
    let (template, landmarks) = load(&m.template)?;
    let mut cohort = Cohort {
        spec: m.spec.clone(),
        template,
        landmarks,
        train: Vec::new(),
        test: Vec::new(),
    };
    for s in &m.subjects {
        let pair = load(&s.files)?;
        match s.split {
            Split::Train => cohort.train.push(pair),
            Split::Test => cohort.test.push(pair),
        }
    }
    Ok(cohort)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::AffineAug;
    use proptest::prelude::*;

    fn small_spec() -> PhantomSpec {
        PhantomSpec {
            shape: [24; 3],
            site_radius: 6.0,
            min_separation: 5.0,
            blob_sigma: [2.0, 0.2],
            landmarks: 3,
            affine: AffineRanges {
                rotation_deg: 10.0,
                translation: 1.0,
                scale: [0.95, 1.05],
                shear: 0.0,
            },
            ..PhantomSpec::default()
        }
    }

    fn rigid_off(spec: &PhantomSpec) -> PhantomSpec {
        PhantomSpec {
            jitter: 0.0,
            affine: AffineRanges::identity(),
            ..spec.clone()
        }
    }

    #[test]
    fn single_blob_center_is_landmark() {
        let spec = PhantomSpec {
            landmarks: 1,
            background: 0.0,
            ..small_spec()
        };
        let (v, lm) = make_template(&spec).unwrap();
        let (idx, _) = v
            .data
            .iter()
            .enumerate()
            .fold((0, f32::MIN), |b, (i, &x)| if x > b.1 { (i, x) } else { b });
        let [i, j, k] = v.grid.unravel(idx);
        assert!(distance(v.grid.world(i, j, k), lm.points[0]) <= 0.5 * 3f64.sqrt());
        // The landmark is the analytic center; symmetric samples agree.
        let p = lm.points[0];
        for a in 0..3 {
            let mut lo = p;
            let mut hi = p;
            lo[a] -= 1.5;
            hi[a] += 1.5;
            let d = sample_trilinear(&v, lo) - sample_trilinear(&v, hi);
            assert!(d.abs() < 0.05, "axis {a}: {d}");
        }
    }

    #[test]
    fn template_is_deterministic_and_unit_range() {
        let spec = small_spec();
        let (a, la) = make_template(&spec).unwrap();
        let (b, lb) = make_template(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        let (lo, hi) = a.min_max();
        assert!(lo >= 0.0 && hi <= 1.0);
        assert_eq!((lo, hi), (0.0, 1.0));
        for p in &la.points {
            assert!(inside_margin(&a.grid, *p));
        }
    }

    #[test]
    fn infeasible_sites_rejected() {
        let spec = PhantomSpec {
            landmarks: 50,
            min_separation: 10.0,
            ..small_spec()
        };
        assert!(make_template(&spec).is_err());
        let spec = PhantomSpec {
            site_radius: 20.0,
            ..small_spec()
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn zero_deformation_gives_template() {
        let spec = rigid_off(&small_spec());
        let (t, lm) = make_template(&spec).unwrap();
        let s = make_subject(&t, &lm, &spec, 7).unwrap();
        for (a, b) in s.volume.data.iter().zip(&t.data) {
            assert!((a - b).abs() < 1e-5);
        }
        for (p, q) in s.landmarks.points.iter().zip(&lm.points) {
            assert!(distance(*p, *q) < 1e-9);
        }
    }

    #[test]
    fn translation_shifts_landmarks_exactly() {
        let spec = small_spec();
        let (t, lm) = make_template(&spec).unwrap();
        let grid = t.grid;
        let ctrl = control_lattice(&grid, 3);
        let target: Vec<_> = ctrl.iter().map(|p| [p[0] + 2.0, p[1], p[2]]).collect();
        let f = fit_tps(
            &LandmarkSet::new(ctrl).unwrap(),
            &LandmarkSet::new(target).unwrap(),
            0.0,
            DEFORMATION_KERNEL_SCALE,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = render_subject(&t, &lm, f, &Contrast::Identity, 0.0, &mut rng).unwrap();
        for (p, q) in s.landmarks.points.iter().zip(&lm.points) {
            for a in 0..3 {
                let want = q[a] + if a == 0 { 2.0 } else { 0.0 };
                assert!((p[a] - want).abs() < 1e-9);
            }
        }
        // Voxel data moved by two voxels along x.
        let [nx, ny, nz] = grid.shape;
        for k in 0..nz {
            for j in 0..ny {
                for i in 2..nx {
                    let a = s.volume.get(i, j, k);
                    let b = t.get(i - 2, j, k);
                    assert!((a - b).abs() < 1e-4);
                }
            }
        }
    }

    #[test]
    fn warped_blob_centroid_matches_landmark() {
        let spec = PhantomSpec {
            landmarks: 1,
            background: 0.0,
            jitter: 1.0,
            ..small_spec()
        };
        let (t, lm) = make_template(&spec).unwrap();
        for seed in 0..4 {
            let s = make_subject(&t, &lm, &spec, seed).unwrap();
            let mut acc = [0.0; 3];
            let mut w = 0.0;
            for (idx, &x) in s.volume.data.iter().enumerate() {
                let [i, j, k] = s.volume.grid.unravel(idx);
                let p = s.volume.grid.world(i, j, k);
                let x = (x as f64).powi(4);
                for a in 0..3 {
                    acc[a] += x * p[a];
                }
                w += x;
            }
            let c = acc.map(|a| a / w);
            assert!(distance(c, s.landmarks.points[0]) < 0.5, "seed {seed}");
        }
    }

    #[test]
    fn contrast_and_noise_keep_landmarks() {
        let base = small_spec();
        let (t, lm) = make_template(&base).unwrap();
        let plain = make_subject(&t, &lm, &base, 3).unwrap();
        for contrast in [Contrast::Gamma { gamma: 2.0 }, Contrast::Rc { seed: 5 }] {
            let spec = PhantomSpec {
                contrast,
                noise: 0.02,
                ..base.clone()
            };
            let s = make_subject(&t, &lm, &spec, 3).unwrap();
            assert_eq!(s.landmarks, plain.landmarks);
            assert_ne!(s.volume, plain.volume);
        }
    }

    #[test]
    fn gamma_contrast_values() {
        let grid = Grid::unit([2, 2, 2]);
        let v = Volume3D::new(grid, vec![0.0, 0.25, 0.5, 1.0, 0.0, 0.25, 0.5, 1.0]).unwrap();
        let g = apply_contrast(&v, &Contrast::Gamma { gamma: 2.0 }).unwrap();
        assert_eq!(g.data[1], 0.0625);
        assert!(apply_contrast(&v, &Contrast::Gamma { gamma: 0.0 }).is_err());
    }

    #[test]
    fn cohort_roundtrip_and_regeneration() {
        let spec = small_spec();
        let dir = tempfile::tempdir().unwrap();
        let m = make_cohort(&spec, 7, 3, dir.path()).unwrap();
        assert_eq!(m.subjects.len(), 10);
        let train: Vec<_> = m.subjects.iter().filter(|s| s.split == Split::Train).map(|s| &s.id).collect();
        let test: Vec<_> = m.subjects.iter().filter(|s| s.split == Split::Test).map(|s| &s.id).collect();
        assert_eq!((train.len(), test.len()), (7, 3));
        assert!(train.iter().all(|id| !test.contains(id)));

        let read = read_manifest(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(read, m);
        let loaded = load_cohort(&dir.path().join("manifest.json")).unwrap();
        let (t, lm) = make_template(&read.spec).unwrap();
        assert_eq!(loaded.template, t);
        for (entry, (vol, gt)) in read.subjects.iter().zip(loaded.train.iter().chain(&loaded.test)) {
            let s = make_subject(&t, &lm, &read.spec, entry.seed).unwrap();
            assert_eq!(&s.volume, vol);
            assert_eq!(&s.landmarks, gt);
        }

        let again = tempfile::tempdir().unwrap();
        make_cohort(&read.spec, 7, 3, again.path()).unwrap();
        for e in &read.subjects {
            let a = fs::read(dir.path().join(&e.files.volume)).unwrap();
            let b = fs::read(again.path().join(&e.files.volume)).unwrap();
            assert_eq!(a, b);
            let raw = crate::volume::raw_path(&dir.path().join(&e.files.volume));
            let raw2 = crate::volume::raw_path(&again.path().join(&e.files.volume));
            assert_eq!(fs::read(raw).unwrap(), fs::read(raw2).unwrap());
        }
    }

    #[test]
    fn spec_rejects_unknown_keys() {
        assert!(serde_json::from_str::<PhantomSpec>(r#"{"grid": 4}"#).is_err());
        let s: PhantomSpec = serde_json::from_str(r#"{"landmarks": 4}"#).unwrap();
        assert_eq!(s.landmarks, 4);
        assert_eq!(s.shape, [48; 3]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn deformation_inverse_roundtrip(seed in 0u64..1000, x in 4.0f64..20.0, y in 4.0f64..20.0, z in 4.0f64..20.0) {
            let spec = small_spec();
            let grid = spec.grid().unwrap();
            let f = sample_deformation(&spec, &grid, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let v = invert_point(&f, [x, y, z]).unwrap();
            let back = f.eval(v);
            prop_assert!(distance(back, [x, y, z]) < 1e-8);
        }

        #[test]
        fn affine_only_deformation_is_exact(seed in 0u64..1000) {
            let spec = PhantomSpec { jitter: 0.0, ..small_spec() };
            let grid = spec.grid().unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = sample_deformation(&spec, &grid, &mut rng).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let aff: AffineAug = sample_affine_with(&spec.affine, &Volume3D::zeros(grid), &mut rng).unwrap();
            for p in control_lattice(&grid, 4) {
                prop_assert!(distance(f.eval(p), aff.forward(p)) < 1e-8);
            }
        }

        #[test]
        fn subject_landmarks_are_exact_images(seed in 0u64..200) {
            let spec = PhantomSpec { shape: [16; 3], site_radius: 3.0, min_separation: 2.0, blob_sigma: [1.5, 0.1], ..small_spec() };
            let (t, lm) = make_template(&spec).unwrap();
            let s = make_subject(&t, &lm, &spec, seed).unwrap();
            for (p, q) in s.landmarks.points.iter().zip(&lm.points) {
                prop_assert_eq!(*p, s.deformation.eval(*q));
                prop_assert!(inside_margin(&t.grid, *p));
            }
        }
    }
}
