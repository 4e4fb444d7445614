use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use lmreg::augment::{apply_affine, rc_augment, sample_affine, AffineRanges, RcConfig};
use lmreg::metrics::report;
use lmreg::model::{infer as predict_landmarks, init_params, load_model, save_model, DetectorConfig};
use lmreg::phantom::{load_cohort, make_cohort, PhantomSpec};
use lmreg::selfcheck::run_all;
use lmreg::tps::{dense_field, fit_tps};
use lmreg::trainer::{write_log, TrainConfig, Trainer};
use lmreg::volume::{
    distance, load_landmarks, load_volume, raw_path, resample_by_field, save_landmarks, save_volume,
};
use serde::{Deserialize, Serialize};

use crate::config::{self, snapshot, write_json};
use crate::error::{in_config, CliError, CliResult};
use crate::{AugmentArgs, AugmentMode, EvalArgs, InferArgs, PhantomArgs, SelfcheckArgs, TrainArgs, WarpArgs};

const LANDMARK_SUFFIX: &str = "_landmarks.json";

pub fn phantom(a: &PhantomArgs) -> CliResult<()> {
    let mut spec: PhantomSpec = config::load_or_default(a.spec.as_deref())?;
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    spec.validate().map_err(in_config)?;
    #[derive(Serialize)]
    struct Snapshot<'a> {
        spec: &'a PhantomSpec,
        train: usize,
        test: usize,
    }
    snapshot(&a.out, &Snapshot { spec: &spec, train: a.train, test: a.test })?;
    let manifest = make_cohort(&spec, a.train, a.test, &a.out)?;
    println!(
        "wrote {} subjects to {}",
        manifest.subjects.len(),
        a.out.join("manifest.json").display()
    );
    Ok(())
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainFile {
    pub train: TrainConfig,
    /// Defaults to the small detector sized for the cohort.
    pub detector: Option<DetectorConfig>,
    /// Seed of the parameter initialization; defaults to `train.seed`.
    pub init_seed: Option<u64>,
    /// Checkpoint interval in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
}

#[derive(Serialize)]
struct TrainSnapshot<'a> {
    data: &'a Path,
    resumed_from: Option<&'a Path>,
    train: &'a TrainConfig,
    detector: &'a DetectorConfig,
    init_seed: Option<u64>,
    checkpoint_every: usize,
}

pub fn train(a: &TrainArgs) -> CliResult<()> {
    let manifest = if a.data.is_dir() { a.data.join("manifest.json") } else { a.data.clone() };
    let cohort = load_cohort(&manifest)?;
    let volumes: Vec<_> = cohort.train.iter().map(|(v, _)| v.clone()).collect();
    let mut file: TrainFile = config::load_or_default(a.config.as_deref())?;
    let (mut trainer, init_seed) = match &a.resume {
        Some(path) => (Trainer::resume(path, cohort.template, cohort.landmarks, volumes)?, None),
        None => {
            if let Some(seed) = a.seed {
                file.train.seed = seed;
                file.init_seed = Some(seed);
            }
            if let Some(steps) = a.steps {
                file.train.steps = steps;
            }
            let detector = file
                .detector
                .clone()
                .unwrap_or_else(|| DetectorConfig::small(cohort.template.shape(), cohort.landmarks.len()));
            let init_seed = file.init_seed.unwrap_or(file.train.seed);
            let params = init_params(&detector, init_seed);
            let trainer = Trainer::new(
                file.train.clone(),
                detector,
                params,
                cohort.template,
                cohort.landmarks,
                volumes,
            )
            .map_err(in_config)?;
            (trainer, Some(init_seed))
        }
    };
    let every = a.checkpoint_every.unwrap_or(file.checkpoint_every);
    snapshot(
        &a.out,
        &TrainSnapshot {
            data: &a.data,
            resumed_from: a.resume.as_deref(),
            train: &trainer.config,
            detector: &trainer.detector,
            init_seed,
            checkpoint_every: every,
        },
    )?;
    let checkpoint = a.out.join("checkpoint.json");
    let total = trainer.config.steps;
    let start = Instant::now();
    while !trainer.done() {
        let stop = if every == 0 { total } else { (trainer.step / every + 1) * every };
        trainer.run_until(stop, |row| {
            if (row.step + 1) % 50 == 0 {
                log::info!(
                    "step {}/{total} total {:.5} reg {:.5} cons {:.5} alpha {:.3} lr {:.2e}",
                    row.step + 1,
                    row.total,
                    row.reg,
                    row.cons1 + row.cons2,
                    row.alpha,
                    row.lr
                );
            }
        })?;
        trainer.save_checkpoint(&checkpoint)?;
    }
    write_log(&trainer.log, &a.out.join("loss.csv"))?;
    save_model(
        &a.out.join("model.json"),
        &trainer.detector,
        &trainer.params,
        trainer.step as u64,
        trainer.config.seed,
    )?;
    let last = trainer.log.last().map_or(f64::NAN, |r| r.total);
    println!(
        "trained to step {} in {:.1}s, final loss {last:.6}",
        trainer.step,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

fn volume_stem(path: &Path) -> CliResult<String> {
    raw_path(path)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .ok_or_else(|| CliError::data(format!("no file name in {}", path.display())))
}

pub fn infer(a: &InferArgs) -> CliResult<()> {
    let (detector, params) = load_model(&a.model, None)?;
    config::ensure_dir(&a.out)?;
    let mut outputs = Vec::new();
    for path in &a.volumes {
        let v = load_volume(path)?;
        let lm = predict_landmarks(&detector, &params, &v)?;
        let out = a.out.join(format!("{}{LANDMARK_SUFFIX}", volume_stem(path)?));
        save_landmarks(&lm, &out)?;
        outputs.push(out);
    }
    #[derive(Serialize)]
    struct Snapshot<'a> {
        model: &'a Path,
        detector: &'a DetectorConfig,
        volumes: &'a [PathBuf],
        outputs: &'a [PathBuf],
    }
    snapshot(
        &a.out,
        &Snapshot {
            model: &a.model,
            detector: &detector,
            volumes: &a.volumes,
            outputs: &outputs,
        },
    )?;
    println!("wrote {} landmark files to {}", outputs.len(), a.out.display());
    Ok(())
}

fn landmark_files(dir: &Path) -> CliResult<Vec<String>> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::data(format!("cannot list {}: {e}", dir.display())))?;
    let mut names = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| CliError::data(format!("cannot list {}: {e}", dir.display())))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.ends_with(LANDMARK_SUFFIX) {
            names.push(name);
        }
    }
    names.sort();
    if names.is_empty() {
        return Err(CliError::data(format!("no *{LANDMARK_SUFFIX} files in {}", dir.display())));
    }
    Ok(names)
}

pub fn eval(a: &EvalArgs) -> CliResult<()> {
    let names = landmark_files(&a.pred)?;
    let mut pred = Vec::new();
    let mut gt = Vec::new();
    for name in &names {
        pred.push(load_landmarks(a.pred.join(name))?);
        gt.push(load_landmarks(a.gt.join(name))?);
    }
    let r = report(&pred, &gt, &a.thresholds)?;
    snapshot(&a.out, &serde_json::json!({ "pred": a.pred, "gt": a.gt, "thresholds": a.thresholds, "files": names }))?;
    r.write_json(a.out.join("report.json"))?;
    r.write_csv(a.out.join("errors.csv"))?;
    let sdr: Vec<String> = r.sdr.iter().map(|s| format!("SDR@{} {:.2}%", s.tau, s.percent)).collect();
    println!("MRE {:.4} +- {:.4} mm over {} scans; {}", r.mre.mean, r.mre.std, names.len(), sdr.join(", "));
    Ok(())
}

pub fn warp(a: &WarpArgs) -> CliResult<()> {
    let source = load_landmarks(&a.source)?;
    let target = load_landmarks(&a.target)?;
    let t = fit_tps(&source, &target, a.lambda, a.kernel_scale)?;
    let residual = source
        .points
        .iter()
        .zip(&target.points)
        .map(|(&x, &y)| distance(t.eval(x), y))
        .fold(0.0, f64::max);
    snapshot(
        &a.out,
        &serde_json::json!({
            "source": a.source,
            "target": a.target,
            "lambda": a.lambda,
            "kernel_scale": a.kernel_scale,
            "volume": a.volume,
        }),
    )?;
    write_json(&a.out.join("tps.json"), &t)?;
    if let Some(path) = &a.volume {
        let v = load_volume(path)?;
        let warped = resample_by_field(&v, &dense_field(&t, &v.grid))?;
        save_volume(&warped, a.out.join("warped"))?;
    }
    println!("max control-point residual {residual:.3e} mm");
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreviewConfig {
    pub rc: RcConfig,
    pub affine: AffineRanges,
}

impl Default for PreviewConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        PreviewConfig { rc: t.rc, affine: t.affine }
    }
}

pub fn augment_preview(a: &AugmentArgs) -> CliResult<()> {
    let cfg: PreviewConfig = config::load_or_default(a.config.as_deref())?;
    let v = load_volume(&a.volume)?;
    let out = match a.mode {
        AugmentMode::Rc => rc_augment(&v, &cfg.rc, a.seed).map_err(in_config)?,
        AugmentMode::Affine => apply_affine(&v, &sample_affine(&cfg.affine, &v, a.seed).map_err(in_config)?),
    };
    snapshot(
        &a.out,
        &serde_json::json!({ "volume": a.volume, "mode": a.mode, "seed": a.seed, "config": cfg }),
    )?;
    save_volume(&out, a.out.join("augmented"))?;
    println!("wrote {}", raw_path(&a.out.join("augmented")).display());
    Ok(())
}

pub fn selfcheck(a: &SelfcheckArgs) -> CliResult<()> {
    let suites = run_all(a.seed, a.kernel_scale)?;
    let mut failed = 0;
    let mut count = 0;
    for s in &suites {
        for c in &s.checks {
            count += 1;
            failed += usize::from(!c.passed);
            println!(
                "{} {}: {:.3e} (tolerance {:e}) {}",
                s.suite,
                c.name,
                c.value,
                c.tolerance,
                if c.passed { "PASS" } else { "FAIL" }
            );
        }
        log::info!("{} suite took {:.2}s", s.suite, s.seconds);
    }
    if let Some(out) = &a.out {
        snapshot(out, &serde_json::json!({ "seed": a.seed, "kernel_scale": a.kernel_scale }))?;
        let checks: Vec<_> = suites
            .iter()
            .map(|s| serde_json::json!({ "suite": s.suite, "checks": s.checks }))
            .collect();
        write_json(&out.join("selfcheck.json"), &checks)?;
    }
    println!("selfcheck: {}/{count} checks passed", count - failed);
    if failed > 0 {
        return Err(CliError::numerical(format!("{failed} of {count} oracle checks failed")));
    }
    Ok(())
}
