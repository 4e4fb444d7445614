//! Adam training loop with cosine learning-rate annealing and the curriculum
//! blend of registration and consistency losses.
//!
//! Every random draw of a step comes from a generator keyed by
//! `(seed, step, attempt)`, so a run is a pure function of its config, its
//! data and the step counter. Resuming from a checkpoint needs only the
//! parameters, the Adam moments and the step.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_affine, apply_affine_points, rc_augment, sample_affine_with, AffineRanges, RcConfig};
use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::losses::{alpha, step_losses, SplineSettings, SubjectTerm, TemplateRef};
use crate::model::{
    param_vars, params_from_tensors, predict, read_checkpoint, write_checkpoint, DetectorConfig,
    DetectorParams,
};
use crate::tps::{points_tensor, DEFAULT_KERNEL_SCALE};
use crate::volume::{LandmarkSet, Volume3D};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    /// Subjects per step (`M`).
    pub batch: usize,
    pub lr_init: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// `lambda` is drawn log-uniformly from this range once per step.
    pub lambda_range: [f64; 2],
    pub kernel_scale: f64,
    pub use_rc: bool,
    pub rc: RcConfig,
    pub affine: AffineRanges,
    pub use_consistency: bool,
    /// Leading steps trained on augmented copies of the annotated template.
    pub warmup_steps: usize,
    pub warmup_lr: f64,
    /// Redraws allowed when a spline system is singular.
    pub max_resample: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 3000,
            batch: 2,
            lr_init: 1e-4,
            lr_min: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            lambda_range: [1e-3, 10.0],
            kernel_scale: DEFAULT_KERNEL_SCALE,
            use_rc: true,
            rc: RcConfig::default(),
            affine: AffineRanges {
                rotation_deg: 10.0,
                translation: 3.0,
                scale: [0.9, 1.1],
                shear: 0.0,
            },
            use_consistency: true,
            warmup_steps: 0,
            warmup_lr: 1e-3,
            max_resample: 8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.steps > 0
            && self.batch >= 2
            && self.lr_init > 0.0
            && self.lr_min > 0.0
            && self.lr_min <= self.lr_init
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.lambda_range[0] > 0.0
            && self.lambda_range[0] <= self.lambda_range[1]
            && self.kernel_scale > 0.0
            && self.warmup_steps < self.steps
            && self.warmup_lr > 0.0;
        if !ok {
            return Err(Error::Invalid(format!("bad training config {self:?}")));
        }
        self.affine.validate()?;
        if self.use_rc {
            self.rc.validate()?;
        }
        Ok(())
    }

    /// Steps of the curriculum phase.
    pub fn main_steps(&self) -> usize {
        self.steps - self.warmup_steps
    }

    /// Curriculum progress of `step`; zero throughout the warm-up.
    pub fn eta(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return 0.0;
        }
        (step - self.warmup_steps) as f64 / self.main_steps() as f64
    }

    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.warmup_lr;
        }
        let eta = self.eta(step);
        self.lr_min + 0.5 * (self.lr_init - self.lr_min) * (1.0 + (std::f64::consts::PI * eta).cos())
    }
}

/// Adam first and second moments, one tensor per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &DetectorParams) -> Self {
        let zeros = || params.tensors.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        AdamState {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn update(&mut self, params: &mut DetectorParams, grads: &[Tensor], cfg: &TrainConfig, lr: f64) {
        self.t += 1;
        let b1 = cfg.beta1;
        let b2 = cfg.beta2;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (((p, g), m), v) in params
            .tensors
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= lr * mh / (vh.sqrt() + cfg.epsilon);
            }
        }
    }
}

/// Everything random about one step.
#[derive(Debug, Clone)]
pub struct Batch {
    pub step: usize,
    pub attempt: usize,
    pub lambda: f64,
    pub subjects: Vec<usize>,
    /// Affine-augmented volumes before contrast augmentation.
    pub pre: Vec<Rc<Volume3D>>,
    /// Detector inputs.
    pub inputs: Vec<Volume3D>,
    /// Warm-up targets: template landmarks under each augmentation.
    pub targets: Option<Vec<LandmarkSet>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub eta: f64,
    pub alpha: f64,
    pub reg: f64,
    pub cons1: f64,
    pub cons2: f64,
    pub total: f64,
    pub lr: f64,
    pub lambda: f64,
    pub resampled: usize,
}

pub const LOG_HEADER: &str = "step,eta,alpha,reg,cons1,cons2,total,lr,lambda,resampled";

impl LogRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.eta,
            self.alpha,
            self.reg,
            self.cons1,
            self.cons2,
            self.total,
            self.lr,
            self.lambda,
            self.resampled
        )
    }
}

pub fn write_log(rows: &[LogRow], path: &Path) -> Result<()> {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{}", r.csv());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Generator for one attempt of one step.
pub fn step_rng(seed: u64, step: usize, attempt: usize) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(step as u64).to_le_bytes());
    key[16..24].copy_from_slice(&(attempt as u64).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

pub struct Trainer {
    pub config: TrainConfig,
    pub detector: DetectorConfig,
    pub params: DetectorParams,
    pub adam: AdamState,
    pub step: usize,
    pub log: Vec<LogRow>,
    template: TemplateRef,
    train: Vec<Rc<Volume3D>>,
}

struct Evaluated {
    grads: Vec<Tensor>,
    reg: f64,
    cons1: f64,
    cons2: f64,
    total: f64,
    alpha: f64,
}

impl Trainer {
    pub fn new(
        config: TrainConfig,
        detector: DetectorConfig,
        params: DetectorParams,
        template: Volume3D,
        landmarks: LandmarkSet,
        train: Vec<Volume3D>,
    ) -> Result<Self> {
        config.validate()?;
        detector.validate()?;
        params.check(&detector)?;
        if landmarks.len() != detector.landmarks {
            return Err(Error::Shape(format!(
                "template has {} landmarks, detector predicts {}",
                landmarks.len(),
                detector.landmarks
            )));
        }
        if train.len() < config.batch {
            return Err(Error::Invalid(format!(
                "{} training volumes cannot fill batches of {}",
                train.len(),
                config.batch
            )));
        }
        for v in train.iter().chain([&template]) {
            if v.grid != template.grid || v.shape() != detector.input_shape {
                return Err(Error::Shape("training volumes must share the template grid".into()));
            }
        }
        let adam = AdamState::new(&params);
        Ok(Trainer {
            config,
            detector,
            params,
            adam,
            step: 0,
            log: Vec::new(),
            template: TemplateRef::new(template, landmarks),
            train: train.into_iter().map(Rc::new).collect(),
        })
    }

    pub fn template(&self) -> &TemplateRef {
        &self.template
    }

    pub fn done(&self) -> bool {
        self.step >= self.config.steps
    }

    /// Draws the batch of `step`, attempt `attempt`.
    pub fn sample_batch(&self, step: usize, attempt: usize) -> Result<Batch> {
        let cfg = &self.config;
        let mut rng = step_rng(cfg.seed, step, attempt);
        let [lo, hi] = cfg.lambda_range;
        let lambda = if hi > lo {
            (rng.random_range(lo.ln()..=hi.ln())).exp()
        } else {
            lo
        };
        let warmup = step < cfg.warmup_steps;
        let subjects = if warmup {
            Vec::new()
        } else {
            rand::seq::index::sample(&mut rng, self.train.len(), cfg.batch).into_vec()
        };
        let mut pre = Vec::with_capacity(cfg.batch);
        let mut inputs = Vec::with_capacity(cfg.batch);
        let mut targets = Vec::new();
        for k in 0..cfg.batch {
            let source = if warmup {
                &self.template.volume
            } else {
                &self.train[subjects[k]]
            };
            let aug = sample_affine_with(&cfg.affine, source, &mut rng)?;
            let moved = apply_affine(source, &aug);
            if warmup {
                targets.push(apply_affine_points(&self.template.landmarks, &aug));
            }
            let input = if cfg.use_rc {
                rc_augment(&moved, &cfg.rc, rng.random())?
            } else {
                moved.clone()
            };
            pre.push(Rc::new(moved));
            inputs.push(input);
        }
        Ok(Batch {
            step,
            attempt,
            lambda,
            subjects,
            pre,
            inputs,
            targets: warmup.then_some(targets),
        })
    }

    fn evaluate(&self, batch: &Batch) -> Result<Evaluated> {
        let mut g = Graph::new();
        let vars = param_vars(&mut g, &self.params);
        let preds = batch
            .inputs
            .iter()
            .map(|v| predict(&mut g, &self.detector, &vars, v))
            .collect::<Result<Vec<_>>>()?;
        let (total, reg, cons1, cons2, alpha_v) = if let Some(targets) = &batch.targets {
            let mut acc = None;
            for (p, t) in preds.iter().zip(targets) {
                let t = g.constant(points_tensor(t));
                let d = g.sub(*p, t)?;
                let n = g.row_norm(d)?;
                let m = g.mean(n)?;
                acc = Some(match acc {
                    None => m,
                    Some(a) => g.add(a, m)?,
                });
            }
            let total = g.scale(acc.expect("batch >= 2"), 1.0 / preds.len() as f64)?;
            (total, None, None, None, 0.0)
        } else {
            let subjects: Vec<SubjectTerm> = batch
                .pre
                .iter()
                .zip(&preds)
                .map(|(v, &pred)| SubjectTerm {
                    volume: Rc::clone(v),
                    pred,
                })
                .collect();
            let spline = SplineSettings {
                lambda: batch.lambda,
                kernel_scale: self.config.kernel_scale,
            };
            let eta = self.config.eta(batch.step);
            let terms = step_losses(&mut g, &self.template, &subjects, spline, eta, self.config.use_consistency)?;
            (
                terms.total,
                Some(terms.registration),
                Some(terms.cons1),
                Some(terms.cons2),
                terms.alpha,
            )
        };
        let value = |v: Option<_>| v.map_or(f64::NAN, |v| g.value(v).item());
        let total_v = g.value(total).item();
        if !total_v.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {}", batch.step)));
        }
        let grads = g.backward(total)?;
        let grads: Vec<Tensor> = vars.iter().map(|&v| grads.get_or_zeros(&g, v)).collect();
        if grads.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite(format!("gradient at step {}", batch.step)));
        }
        Ok(Evaluated {
            grads,
            reg: value(reg),
            cons1: value(cons1),
            cons2: value(cons2),
            total: total_v,
            alpha: alpha_v,
        })
    }

    /// Applies one Adam update computed from `batch`.
    pub fn apply_batch(&mut self, batch: &Batch) -> Result<LogRow> {
        let ev = self.evaluate(batch)?;
        let lr = self.config.lr(batch.step);
        self.adam.update(&mut self.params, &ev.grads, &self.config, lr);
        Ok(LogRow {
            step: batch.step,
            eta: self.config.eta(batch.step),
            alpha: ev.alpha,
            reg: ev.reg,
            cons1: ev.cons1,
            cons2: ev.cons2,
            total: ev.total,
            lr,
            lambda: batch.lambda,
            resampled: batch.attempt,
        })
    }

    /// Runs the next step, redrawing the batch when a spline system is singular.
    pub fn train_step(&mut self) -> Result<LogRow> {
        if self.done() {
            return Err(Error::Invalid("training already finished".into()));
        }
        let step = self.step;
        let mut attempt = 0;
        let row = loop {
            let batch = self.sample_batch(step, attempt)?;
            match self.apply_batch(&batch) {
                Ok(row) => break row,
                Err(Error::Singular { condition }) if attempt < self.config.max_resample => {
                    log::warn!("step {step}: singular spline system (cond {condition:.3e}), resampling");
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        };
        self.step += 1;
        self.log.push(row);
        Ok(row)
    }

    /// Trains until `step` (exclusive) or the end of the schedule.
    pub fn run_until(&mut self, step: usize, mut on_step: impl FnMut(&LogRow)) -> Result<()> {
        while self.step < step.min(self.config.steps) {
            let row = self.train_step()?;
            on_step(&row);
        }
        Ok(())
    }

    pub fn run(&mut self, on_step: impl FnMut(&LogRow)) -> Result<()> {
        self.run_until(self.config.steps, on_step)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "trainer",
            "config": self.detector,
            "train": self.config,
            "step": self.step,
            "adam_t": self.adam.t,
            "seed": self.config.seed,
        });
        let names: Vec<String> = self.detector.param_specs().into_iter().map(|(n, _)| n).collect();
        let mut named: Vec<(String, &Tensor)> = names.iter().cloned().zip(&self.params.tensors).collect();
        named.extend(names.iter().map(|n| format!("adam.m.{n}")).zip(&self.adam.m));
        named.extend(names.iter().map(|n| format!("adam.v.{n}")).zip(&self.adam.v));
        write_checkpoint(path, meta, &named)
    }

    /// Restores a trainer from a checkpoint; configs come from the checkpoint.
    pub fn resume(path: &Path, template: Volume3D, landmarks: LandmarkSet, train: Vec<Volume3D>) -> Result<Self> {
        let (meta, tensors) = read_checkpoint(path)?;
        let field = |k: &str| {
            meta.get(k)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("trainer checkpoint lacks `{k}`")))
        };
        let bad = |e: serde_json::Error| Error::Checkpoint(e.to_string());
        let detector: DetectorConfig = serde_json::from_value(field("config")?).map_err(bad)?;
        let config: TrainConfig = serde_json::from_value(field("train")?).map_err(bad)?;
        let step: usize = serde_json::from_value(field("step")?).map_err(bad)?;
        let t: u64 = serde_json::from_value(field("adam_t")?).map_err(bad)?;
        let (params, rest) = params_from_tensors(&detector, tensors)?;
        let n = params.tensors.len();
        if rest.len() != 2 * n {
            return Err(Error::Checkpoint(format!(
                "expected {} optimizer tensors, found {}",
                2 * n,
                rest.len()
            )));
        }
        let mut it = rest.into_iter();
        let m: Vec<Tensor> = it.by_ref().take(n).map(|(_, t)| t).collect();
        let v: Vec<Tensor> = it.map(|(_, t)| t).collect();
        for (i, p) in params.tensors.iter().enumerate() {
            if m[i].shape() != p.shape() || v[i].shape() != p.shape() {
                return Err(Error::Checkpoint(format!("optimizer tensor {i} has the wrong shape")));
            }
        }
        let mut trainer = Trainer::new(config, detector, params, template, landmarks, train)?;
        trainer.adam = AdamState { m, v, t };
        trainer.step = step;
        Ok(trainer)
    }
}

/// Curriculum weight of `step`.
pub fn curriculum_alpha(cfg: &TrainConfig, step: usize) -> Result<f64> {
    alpha(cfg.eta(step))
}
