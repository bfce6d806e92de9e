//! Experiment orchestration: dataset materialization, pretraining, the
//! finetune method dispatch, and report generation. The CLI subcommands are
//! thin wrappers over these functions so tests can drive the exact same
//! paths.

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::ExperimentConfig;
use crate::curriculum::{
    lscl_finetune, mixup_finetune, random_style_finetune, scl_finetune, CurriculumParams,
    FinetuneOptions, TrainLog,
};
use crate::error::{LsclError, Result};
use crate::losses::combined_loss;
use crate::metrics::{minmax_score, MethodScore, MetricTable};
use crate::optim::OptState;
use crate::stylegen::{make_dataset, read_split, write_split, Dataset};
use crate::tape::Tape;
use crate::tensor::{Rng, Tensor};
use crate::tta::{compare_report, evaluate, EvalReport};
use crate::unet::{forward, init_unet, Model};
use std::fmt;
use std::path::PathBuf;
use std::time::Instant;

pub const TEST_VENDORS: [&str; 4] = ["A", "B", "C", "D"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FinetuneMethod {
    Lscl,
    Scl,
    RandomStyle,
    Mixup,
    None,
}

impl FinetuneMethod {
    pub const VALID: &'static str = "lscl, scl, random-style, mixup, none";

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "lscl" => Ok(FinetuneMethod::Lscl),
            "scl" => Ok(FinetuneMethod::Scl),
            "random-style" => Ok(FinetuneMethod::RandomStyle),
            "mixup" => Ok(FinetuneMethod::Mixup),
            "none" => Ok(FinetuneMethod::None),
            other => Err(LsclError::UnknownMethod {
                got: other.to_string(),
                valid: Self::VALID.to_string(),
            }),
        }
    }
}

impl fmt::Display for FinetuneMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FinetuneMethod::Lscl => "lscl",
            FinetuneMethod::Scl => "scl",
            FinetuneMethod::RandomStyle => "random-style",
            FinetuneMethod::Mixup => "mixup",
            FinetuneMethod::None => "none",
        };
        write!(f, "{s}")
    }
}

fn data_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join("data")
}

pub fn baseline_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join("baseline.lscl")
}

pub fn method_path(cfg: &ExperimentConfig, method: &str) -> PathBuf {
    cfg.out_dir.join(format!("{method}.lscl"))
}

/// Materialize all splits under `<out>/data/`. Re-running overwrites with
/// byte-identical content.
pub fn cmd_gen_data(cfg: &ExperimentConfig) -> Result<()> {
    let ds = make_dataset(&cfg.dataset)?;
    let dir = data_dir(cfg);
    std::fs::create_dir_all(&dir).map_err(|e| LsclError::io(dir.display().to_string(), e))?;
    write_split(&ds.train, &dir)?;
    write_split(&ds.style_pool, &dir)?;
    for t in &ds.tests {
        write_split(t, &dir)?;
    }
    Ok(())
}

pub struct Splits {
    pub train: Dataset,
    pub style_pool: Dataset,
    pub tests: Vec<Dataset>,
}

pub fn load_splits(cfg: &ExperimentConfig) -> Result<Splits> {
    let dir = data_dir(cfg);
    if !dir.join("train").join("index.csv").exists() {
        return Err(LsclError::MissingInput(format!(
            "dataset not found under {} (run gen-data first)",
            dir.display()
        )));
    }
    Ok(Splits {
        train: read_split(&dir, "train")?,
        style_pool: read_split(&dir, "style-pool")?,
        tests: TEST_VENDORS
            .iter()
            .map(|v| read_split(&dir, &format!("test-{v}")))
            .collect::<Result<_>>()?,
    })
}

/// One plain training step on a content image; returns the loss.
fn train_step(model: &mut Model, sample: &crate::stylegen::Sample, opt: &mut OptState) -> Result<f64> {
    let mut tape = Tape::new();
    let img = &sample.image;
    let batch = tape.input(Tensor::new(
        vec![1, img.shape[0], img.shape[1], img.shape[2]],
        img.data.clone(),
    ))?;
    let nodes = forward(model, batch, &mut tape)?;
    let loss = combined_loss(nodes.logits, std::slice::from_ref(&sample.label), &mut tape)?;
    let loss_value = tape.value(loss).item();
    let mut grads = tape.backward(loss)?;
    let param_grads = nodes
        .param_nodes
        .iter()
        .map(|(name, id)| {
            grads[*id]
                .take()
                .map(|t| (name.clone(), t))
                .ok_or_else(|| LsclError::MissingGradient(name.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    opt.apply(model, &param_grads)?;
    Ok(loss_value)
}

/// Adam pretraining on the train split. Returns the model and the mean loss
/// per epoch.
pub fn pretrain(cfg: &ExperimentConfig, train: &Dataset) -> Result<(Model, Vec<f64>)> {
    let mut model = init_unet(cfg.model, cfg.pretrain.seed)?;
    let mut opt = OptState::adam(&model, cfg.pretrain.lr);
    let mut epoch_losses = Vec::with_capacity(cfg.pretrain.epochs);
    for _ in 0..cfg.pretrain.epochs {
        let mut acc = 0.0;
        for sample in &train.samples {
            acc += train_step(&mut model, sample, &mut opt)?;
        }
        epoch_losses.push(acc / train.samples.len() as f64);
    }
    Ok((model, epoch_losses))
}

pub fn cmd_pretrain(cfg: &ExperimentConfig) -> Result<()> {
    let splits = load_splits(cfg)?;
    let (model, losses) = pretrain(cfg, &splits.train)?;
    save_checkpoint(&model, None, &baseline_path(cfg))?;
    let mut csv = format!("# fingerprint {}\nepoch,mean_loss\n", cfg.fingerprint());
    for (i, l) in losses.iter().enumerate() {
        csv.push_str(&format!("{i},{l:.9}\n"));
    }
    let path = cfg.out_dir.join("pretrain_loss.csv");
    std::fs::write(&path, csv).map_err(|e| LsclError::io(path.display().to_string(), e))?;
    Ok(())
}

/// Dispatch one finetuning method starting from `model`.
pub fn run_finetune(
    cfg: &ExperimentConfig,
    method: FinetuneMethod,
    model: &mut Model,
    train: &Dataset,
    style_pool: &Dataset,
) -> Result<TrainLog> {
    let mut rng = Rng::new(cfg.finetune.seed);
    let epochs = cfg.finetune.epochs;
    let params: &CurriculumParams = &cfg.curriculum;
    match method {
        FinetuneMethod::None => Ok(TrainLog::default()),
        FinetuneMethod::Lscl => {
            let mut opt = OptState::sgd_momentum(model, cfg.finetune.lr);
            lscl_finetune(
                model,
                train,
                style_pool,
                params,
                &mut opt,
                epochs,
                &mut rng,
                &FinetuneOptions::default(),
            )
        }
        FinetuneMethod::Scl => {
            let mut opt = OptState::sgd_momentum(model, cfg.finetune.lr);
            scl_finetune(model, train, style_pool, params, &mut opt, epochs, &mut rng)
        }
        FinetuneMethod::RandomStyle => {
            let mut opt = OptState::sgd_momentum(model, cfg.finetune.lr);
            random_style_finetune(model, train, style_pool, &mut opt, epochs, &mut rng)
        }
        FinetuneMethod::Mixup => {
            let mut opt = OptState::sgd_momentum(model, cfg.finetune.lr);
            mixup_finetune(model, train, &mut opt, epochs, &mut rng)
        }
    }
}

pub fn cmd_finetune(cfg: &ExperimentConfig, method: FinetuneMethod) -> Result<()> {
    let base = baseline_path(cfg);
    if !base.exists() {
        return Err(LsclError::MissingInput(format!(
            "baseline checkpoint {} (run pretrain first)",
            base.display()
        )));
    }
    if method == FinetuneMethod::None {
        // Bit-equal copy of the input checkpoint.
        let out = method_path(cfg, "none");
        std::fs::copy(&base, &out).map_err(|e| LsclError::io(out.display().to_string(), e))?;
        return Ok(());
    }
    let splits = load_splits(cfg)?;
    let (mut model, _) = load_checkpoint(&base)?;
    let log = run_finetune(cfg, method, &mut model, &splits.train, &splits.style_pool)?;
    let name = method.to_string();
    save_checkpoint(&model, None, &method_path(cfg, &name))?;
    let log_path = cfg.out_dir.join(format!("{name}_trainlog.csv"));
    std::fs::write(&log_path, log.to_csv())
        .map_err(|e| LsclError::io(log_path.display().to_string(), e))?;
    Ok(())
}

/// Evaluate one model over all four vendor test splits into a single table.
pub fn evaluate_all_vendors(
    model: &Model,
    tests: &[Dataset],
    use_tta: bool,
    method: &str,
) -> Result<MetricTable> {
    let mut table = MetricTable::default();
    for t in tests {
        table.merge(&evaluate(model, t, use_tta, method)?);
    }
    Ok(table)
}

/// Mean of the structure-averaged DSC over (A, B) and over (C, D).
pub fn seen_unseen_dsc(table: &MetricTable, method: &str) -> (f64, f64) {
    let get = |v: &str| table.get(method, v, "avg", "DSC").map(|r| r.mean).unwrap();
    (
        (get("A") + get("B")) / 2.0,
        (get("C") + get("D")) / 2.0,
    )
}

/// Evaluate checkpoints (method name = file stem) and, when the TTA flag is
/// set, a `<stem>-tta` variant of each. Emits metrics.csv and, with two or
/// more methods, summary.csv with the min-max ranking.
pub fn cmd_evaluate(cfg: &ExperimentConfig, checkpoints: &[PathBuf]) -> Result<MetricTable> {
    let splits = load_splits(cfg)?;
    let started = Instant::now();
    let mut tables = Vec::new();
    for path in checkpoints {
        if !path.exists() {
            return Err(LsclError::MissingInput(path.display().to_string()));
        }
        let (model, _) = load_checkpoint(path)?;
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "model".into());
        tables.push(evaluate_all_vendors(&model, &splits.tests, false, &stem)?);
        if cfg.tta {
            tables.push(evaluate_all_vendors(
                &model,
                &splits.tests,
                true,
                &format!("{stem}-tta"),
            )?);
        }
    }
    let mut merged = MetricTable::default();
    for t in &tables {
        merged.merge(t);
    }
    write_report(cfg, &tables, &merged, "metrics.csv", "summary.csv", started)?;
    Ok(merged)
}

fn write_report(
    cfg: &ExperimentConfig,
    tables: &[MetricTable],
    merged: &MetricTable,
    metrics_name: &str,
    summary_name: &str,
    started: Instant,
) -> Result<Option<EvalReport>> {
    let metrics_path = cfg.out_dir.join(metrics_name);
    let header = format!("# fingerprint {}\n", cfg.fingerprint());
    std::fs::write(&metrics_path, format!("{header}{}", merged.to_csv()))
        .map_err(|e| LsclError::io(metrics_path.display().to_string(), e))?;
    if tables.len() >= 2 {
        let report = compare_report(
            tables,
            &cfg.fingerprint(),
            started.elapsed().as_secs_f64(),
        )?;
        // Wall-clock time is reported on stdout, never in the CSV: output
        // files must be byte-identical across reruns of the same config.
        let summary_path = cfg.out_dir.join(summary_name);
        let body = format!("{header}{}", report.to_summary_csv());
        std::fs::write(&summary_path, body)
            .map_err(|e| LsclError::io(summary_path.display().to_string(), e))?;
        Ok(Some(report))
    } else {
        Ok(None)
    }
}

/// Result of the full ablation: per-method tables plus ranking.
pub struct AblationOutcome {
    pub table: MetricTable,
    pub scores: Vec<MethodScore>,
    pub wall_clock_secs: f64,
}

/// Run finetunes for random-style, scl and lscl from the existing baseline,
/// then evaluate baseline + the three + lscl with TTA into one report.
pub fn cmd_ablate(cfg: &ExperimentConfig) -> Result<AblationOutcome> {
    let base = baseline_path(cfg);
    if !base.exists() {
        return Err(LsclError::MissingInput(format!(
            "baseline checkpoint {} (run pretrain first)",
            base.display()
        )));
    }
    let splits = load_splits(cfg)?;
    let started = Instant::now();
    let (baseline, _) = load_checkpoint(&base)?;

    let mut tables = Vec::new();
    tables.push(evaluate_all_vendors(&baseline, &splits.tests, false, "baseline")?);
    let mut lscl_model = None;
    for method in [
        FinetuneMethod::RandomStyle,
        FinetuneMethod::Scl,
        FinetuneMethod::Lscl,
    ] {
        let mut model = baseline.clone();
        let log = run_finetune(cfg, method, &mut model, &splits.train, &splits.style_pool)?;
        let name = method.to_string();
        save_checkpoint(&model, None, &method_path(cfg, &name))?;
        let log_path = cfg.out_dir.join(format!("{name}_trainlog.csv"));
        std::fs::write(&log_path, log.to_csv())
            .map_err(|e| LsclError::io(log_path.display().to_string(), e))?;
        tables.push(evaluate_all_vendors(&model, &splits.tests, false, &name)?);
        if method == FinetuneMethod::Lscl {
            lscl_model = Some(model);
        }
    }
    tables.push(evaluate_all_vendors(
        &lscl_model.unwrap(),
        &splits.tests,
        true,
        "lscl-tta",
    )?);

    let mut merged = MetricTable::default();
    for t in &tables {
        merged.merge(t);
    }
    let report = write_report(
        cfg,
        &tables,
        &merged,
        "ablation_metrics.csv",
        "ablation_summary.csv",
        started,
    )?
    .expect("ablation always has multiple methods");
    let scores = minmax_score(&merged)?;
    Ok(AblationOutcome {
        table: merged,
        scores,
        wall_clock_secs: report.wall_clock_secs,
    })
}

/// Compute the train-split mean DSC of a model (used as a pretrain sanity
/// gate).
pub fn train_split_dsc(model: &Model, train: &Dataset) -> Result<f64> {
    let table = evaluate(model, train, false, "train-check")?;
    let vendors = table.vendors_of("train-check");
    let mut acc = 0.0;
    for v in &vendors {
        acc += table.get("train-check", v, "avg", "DSC").unwrap().mean;
    }
    Ok(acc / vendors.len() as f64)
}

pub fn ensure_out_dir(cfg: &ExperimentConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| LsclError::io(cfg.out_dir.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::Path;

    fn tiny_cfg(dir: &Path) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.dataset.train_per_vendor = 2;
        cfg.dataset.style_pool_per_vendor = 2;
        cfg.dataset.test_per_vendor = 1;
        cfg.pretrain.epochs = 1;
        cfg.finetune.epochs = 1;
        cfg.out_dir = dir.to_path_buf();
        cfg
    }

    #[test]
    fn gen_data_is_idempotent_and_indexed() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path());
        ensure_out_dir(&cfg).unwrap();
        cmd_gen_data(&cfg).unwrap();
        let train_dir = dir.path().join("data").join("train");
        let index = std::fs::read_to_string(train_dir.join("index.csv")).unwrap();
        let row_count = index.lines().count() - 1;
        assert_eq!(row_count, 4);
        // Index row count matches the number of image files on disk.
        let img_files = std::fs::read_dir(&train_dir)
            .unwrap()
            .filter(|e| {
                e.as_ref()
                    .unwrap()
                    .file_name()
                    .to_string_lossy()
                    .ends_with("_img.pgm")
            })
            .count();
        assert_eq!(img_files, row_count);
        // Re-run produces byte-identical files.
        let before = std::fs::read(train_dir.join("0000_img.pgm")).unwrap();
        cmd_gen_data(&cfg).unwrap();
        let after = std::fs::read(train_dir.join("0000_img.pgm")).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn pretrain_then_finetune_none_copies_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path());
        ensure_out_dir(&cfg).unwrap();
        cmd_gen_data(&cfg).unwrap();
        cmd_pretrain(&cfg).unwrap();
        cmd_finetune(&cfg, FinetuneMethod::None).unwrap();
        let a = std::fs::read(baseline_path(&cfg)).unwrap();
        let b = std::fs::read(method_path(&cfg, "none")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn finetune_without_baseline_is_missing_input() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path());
        ensure_out_dir(&cfg).unwrap();
        assert!(matches!(
            cmd_finetune(&cfg, FinetuneMethod::Lscl),
            Err(LsclError::MissingInput(_))
        ));
    }

    #[test]
    fn unknown_method_lists_valid_methods() {
        let err = FinetuneMethod::parse("bogus").unwrap_err().to_string();
        assert!(err.contains("lscl") && err.contains("mixup") && err.contains("none"));
    }

    #[test]
    fn evaluate_covers_all_vendors_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path());
        ensure_out_dir(&cfg).unwrap();
        cmd_gen_data(&cfg).unwrap();
        cmd_pretrain(&cfg).unwrap();
        let table = cmd_evaluate(&cfg, &[baseline_path(&cfg)]).unwrap();
        for v in TEST_VENDORS {
            assert!(table.get("baseline", v, "avg", "DSC").is_some(), "vendor {v}");
        }
        let bytes1 = std::fs::read(dir.path().join("metrics.csv")).unwrap();
        cmd_evaluate(&cfg, &[baseline_path(&cfg)]).unwrap();
        let bytes2 = std::fs::read(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(bytes1, bytes2);
    }

    #[test]
    fn lscl_trainlog_stages_stay_in_bounds() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path());
        ensure_out_dir(&cfg).unwrap();
        cmd_gen_data(&cfg).unwrap();
        cmd_pretrain(&cfg).unwrap();
        cmd_finetune(&cfg, FinetuneMethod::Lscl).unwrap();
        let log = std::fs::read_to_string(dir.path().join("lscl_trainlog.csv")).unwrap();
        for line in log.lines().skip(1) {
            let stage: usize = line.split(',').nth(2).unwrap().parse().unwrap();
            assert!(stage <= cfg.curriculum.n);
        }
    }
}
