use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use xvol::analyze::{count_flops, count_params};
use xvol::data::{partition, phantom_generate, read_volume, resize_affine, split_dataset, write_dataset, Manifest};
use xvol::fed::{harmonize_volume, run_fedavg, write_round_log, ClientState, FedConfig};
use xvol::net::{build_model, load_model, peek_precision, save_model, ModelState, ModelVariant, PLACEMENT_SWEEP};
use xvol::saliency::{explain, export_heatmap, ExportOptions, SaliencySource};
use xvol::train::{
    evaluate, finetune_stage2, train_stage1, DataSplits, EpochLog, MetricsReport, Sampler, TrainConfig, TrialMetrics,
    UnsupLoss,
};
use xvol::{Error, Precision, Real, Result, Tensor};

use crate::config::{Method, RunConfig};

pub const MODEL_FILE: &str = "model.xvm";
pub const STAGE2_MODEL_FILE: &str = "model_stage2.xvm";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum AblateKind {
    Placement,
    Lambda,
    #[value(name = "unsup_loss")]
    UnsupLoss,
    Sampling,
}

pub const LAMBDA_GRID: [f64; 5] = [0.25, 0.5, 0.75, 0.9, 1.0];

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn trial_dir(cfg: &RunConfig, trial: usize) -> PathBuf {
    cfg.out.join(format!("trial_{trial}"))
}

/// Loads the manifest, assigns patients to splits and resizes if asked.
pub fn load_splits(cfg: &RunConfig) -> Result<DataSplits> {
    let path = cfg
        .data
        .manifest
        .as_ref()
        .ok_or_else(|| Error::Config("data.manifest is required".into()))?;
    splits_from_manifest(&Manifest::read(path)?, cfg)
}

fn splits_from_manifest(manifest: &Manifest, cfg: &RunConfig) -> Result<DataSplits> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.data.split_seed);
    let m = split_dataset(manifest, cfg.data.split, &mut rng)?;
    let mut records = m.load()?;
    if let Some(dims) = cfg.data.resize {
        records = records.iter().map(|r| resize_affine(r, dims)).collect::<Result<_>>()?;
    }
    Ok(DataSplits::from_parts(partition(&records, &m.splits)))
}

/// Runs `f` for every trial index, on threads when `parallel` is set.
/// Results are returned in trial order either way.
fn for_trials<R: Send>(trials: usize, parallel: bool, f: impl Fn(usize) -> Result<R> + Sync) -> Result<Vec<R>> {
    if !parallel {
        return (0..trials).map(&f).collect();
    }
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..trials).map(|k| {
            let f = &f;
            s.spawn(move || f(k))
        }).collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("trial thread panicked"))
            .collect()
    })
}

fn write_history(history: &[EpochLog], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    w.write_record([
        "epoch",
        "train_supervised",
        "train_unsupervised",
        "train_combined",
        "val_supervised",
        "val_unsupervised",
        "val_combined",
    ])?;
    for h in history {
        w.write_record([
            h.epoch.to_string(),
            h.train.supervised.to_string(),
            h.train.unsupervised.to_string(),
            h.train.combined.to_string(),
            h.val.supervised.to_string(),
            h.val.unsupervised.to_string(),
            h.val.combined.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// JSON records plus a text table; the table is also returned.
fn emit_report(report: &MetricsReport, dir: &Path) -> Result<String> {
    report.write_json(dir)?;
    let table = report.to_table()?;
    write_text(&dir.join("table.txt"), &table)?;
    Ok(table)
}

pub fn phantom(cfg: &RunConfig) -> Result<String> {
    let records = phantom_generate(&cfg.phantom)?;
    let m = write_dataset(&records, &cfg.out)?;
    let [neg, pos] = m.label_counts();
    Ok(format!(
        "wrote {} volumes ({pos} glaucomatous, {neg} healthy) to {}\n",
        records.len(),
        cfg.out.join("manifest.csv").display()
    ))
}

pub fn train<T: Real>(cfg: &RunConfig) -> Result<String> {
    let data = load_splits(cfg)?;
    let trials = for_trials(cfg.train.trials, cfg.parallel, |k| {
        let mut model = build_model::<T>(&cfg.model, cfg.train.trial_seed(k))?;
        let out = train_stage1(&mut model, &data, &cfg.train, k)?;
        let dir = trial_dir(cfg, k);
        create_dir(&dir)?;
        save_model(&model, &dir.join(MODEL_FILE))?;
        write_history(&out.history, &dir.join("history.csv"))?;
        Ok(out.test)
    })?;
    emit_report(&MetricsReport::new(trials), &cfg.out.join("metrics"))
}

fn stage1_model<T: Real>(cfg: &RunConfig, trial: usize) -> Result<ModelState<T>> {
    let path = match &cfg.finetune.init {
        Some(p) => PathBuf::from(p.replace("{trial}", &trial.to_string())),
        None => trial_dir(cfg, trial).join(MODEL_FILE),
    };
    if path.exists() {
        load_model(&path)
    } else if cfg.finetune.force {
        log::warn!("no stage-1 model at {}; fine-tuning a fresh model", path.display());
        build_model(&cfg.model, cfg.train.trial_seed(trial))
    } else {
        log::error!("no stage-1 model at {}", path.display());
        Err(Error::UntrainedModel)
    }
}

pub fn finetune<T: Real>(cfg: &RunConfig) -> Result<String> {
    let data = load_splits(cfg)?;
    let trials = for_trials(cfg.train.trials, cfg.parallel, |k| {
        let mut model = stage1_model::<T>(cfg, k)?;
        let out = finetune_stage2(&mut model, &data, &cfg.train, k, cfg.finetune.force)?;
        let dir = trial_dir(cfg, k);
        create_dir(&dir)?;
        save_model(&model, &dir.join(STAGE2_MODEL_FILE))?;
        write_history(&out.history, &dir.join("history_stage2.csv"))?;
        Ok(out.test)
    })?;
    emit_report(&MetricsReport::new(trials), &cfg.out.join("metrics_stage2"))
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a PathBuf> {
    p.as_ref().ok_or_else(|| Error::Config(format!("{key} is required")))
}

pub fn eval<T: Real>(cfg: &RunConfig) -> Result<String> {
    let mut model = load_model::<T>(required(&cfg.eval.model, "eval.model")?)?;
    let data = load_splits(cfg)?;
    let seed = model.seed;
    let m = evaluate(&mut model, &data.test, cfg.train.threshold, cfg.train.batch_size, 0, seed)?;
    emit_report(&MetricsReport::new(vec![m]), &cfg.out.join("eval"))
}

pub fn saliency<T: Real>(cfg: &RunConfig) -> Result<String> {
    let sc = &cfg.saliency;
    let mut model = load_model::<T>(required(&sc.model, "saliency.model")?)?;
    let vpath = required(&sc.volume, "saliency.volume")?;
    let volume = read_volume(vpath)?;
    let s = volume.shape().to_vec();
    if s[0] != 1 {
        return Err(Error::format(vpath, format!("expected one channel, got {s:?}")));
    }
    let batch: Tensor<T> = volume.cast::<T>().reshape(&[1, 1, s[1], s[2], s[3]])?;
    let grey = volume.reshape(&[s[1], s[2], s[3]])?;
    let sources = match sc.method {
        Method::Care => vec![SaliencySource::Care],
        Method::Gradcam => vec![SaliencySource::GradCam],
        Method::Both => vec![SaliencySource::Care, SaliencySource::GradCam],
    };
    let opts = ExportOptions {
        axial: sc.axial,
        coronal: sc.coronal,
        morphology: sc.morphology,
    };
    let dir = cfg.out.join("saliency");
    create_dir(&dir)?;
    let name = vpath.file_stem().map_or("volume".into(), |s| s.to_string_lossy().into_owned());
    let mut report = String::new();
    for source in sources {
        let maps = explain(&mut model, &batch, source, sc.layer.as_deref(), sc.class)?;
        let h = &maps[0];
        let stem = dir.join(format!("{name}.{}", source.name()));
        for p in export_heatmap(h, sc.overlay.then_some(&grey), &stem, &opts)? {
            let _ = writeln!(report, "{} ({}): {}", source.name(), h.source_layer, p.display());
        }
    }
    Ok(report)
}

pub fn profile(cfg: &RunConfig) -> Result<String> {
    count_params(&cfg.model)?;
    let dims = cfg.profile.dims.unwrap_or(cfg.model.input_dims);
    let report = count_flops(&cfg.model, dims)?;
    create_dir(&cfg.out)?;
    report.write_csv(&cfg.out.join("profile.csv"))?;
    Ok(format!("{} at placement {:?}\n{}", cfg.model.variant, cfg.model.placement, report.to_table()))
}

/// One row of a sweep: label plus the per-trial metrics of that setting.
#[derive(Debug, Clone)]
pub struct SweepCell {
    pub setting: String,
    pub report: MetricsReport,
}

fn sweep_settings(kind: AblateKind) -> Vec<String> {
    match kind {
        AblateKind::Placement => PLACEMENT_SWEEP.iter().map(|p| format!("{}-{}", p[0], p[1])).collect(),
        AblateKind::Lambda => LAMBDA_GRID.iter().map(|l| l.to_string()).collect(),
        AblateKind::UnsupLoss => UnsupLoss::ALL.iter().map(|u| u.name().to_string()).collect(),
        AblateKind::Sampling => Sampler::ALL.iter().map(|s| s.name().to_string()).collect(),
    }
}

/// All settings of one trial. Stage-2 sweeps share the trial's stage-1 model.
fn ablate_trial<T: Real>(cfg: &RunConfig, data: &DataSplits, kind: AblateKind, k: usize) -> Result<Vec<TrialMetrics>> {
    let seed = cfg.train.trial_seed(k);
    match kind {
        AblateKind::Placement => PLACEMENT_SWEEP
            .iter()
            .map(|p| {
                let mut model = build_model::<T>(&cfg.model.clone().with_placement(p), seed)?;
                Ok(train_stage1(&mut model, data, &cfg.train, k)?.test)
            })
            .collect(),
        AblateKind::Sampling => Sampler::ALL
            .iter()
            .map(|&sampler| {
                let tc = TrainConfig { sampler, ..cfg.train.clone() };
                let mut model = build_model::<T>(&cfg.model, seed)?;
                Ok(train_stage1(&mut model, data, &tc, k)?.test)
            })
            .collect(),
        AblateKind::Lambda | AblateKind::UnsupLoss => {
            let mut base = build_model::<T>(&cfg.model, seed)?;
            train_stage1(&mut base, data, &cfg.train, k)?;
            let configs: Vec<TrainConfig> = if kind == AblateKind::Lambda {
                LAMBDA_GRID
                    .iter()
                    .map(|&lambda| TrainConfig { lambda, ..cfg.train.clone() })
                    .collect()
            } else {
                UnsupLoss::ALL
                    .iter()
                    .map(|&unsup_loss| TrainConfig { unsup_loss, ..cfg.train.clone() })
                    .collect()
            };
            configs
                .iter()
                .map(|tc| {
                    let mut model = base.clone();
                    Ok(finetune_stage2(&mut model, data, tc, k, true)?.test)
                })
                .collect()
        }
    }
}

pub fn ablate_cells<T: Real>(cfg: &RunConfig, kind: AblateKind) -> Result<Vec<SweepCell>> {
    if kind == AblateKind::Placement && cfg.model.variant == ModelVariant::Base {
        return Err(Error::Config("placement sweep needs an attention variant, not Base".into()));
    }
    let data = load_splits(cfg)?;
    let per_trial = for_trials(cfg.train.trials, cfg.parallel, |k| ablate_trial::<T>(cfg, &data, kind, k))?;
    Ok(sweep_settings(kind)
        .into_iter()
        .enumerate()
        .map(|(i, setting)| SweepCell {
            setting,
            report: MetricsReport::new(per_trial.iter().map(|t| t[i].clone()).collect()),
        })
        .collect())
}

pub fn ablate<T: Real>(cfg: &RunConfig, kind: AblateKind) -> Result<String> {
    let cells = ablate_cells::<T>(cfg, kind)?;
    let kind_name = serde_json::to_value(kind)?.as_str().unwrap_or_default().to_string();
    let root = cfg.out.join(format!("ablate_{kind_name}"));
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "setting",
        "trials",
        "accuracy_mean",
        "accuracy_std",
        "specificity_mean",
        "specificity_std",
        "sensitivity_mean",
        "sensitivity_std",
        "auroc_mean",
        "auroc_std",
        "f1_mean",
        "f1_std",
    ])?;
    let mut table = format!("{:<12} {:>15} {:>15} {:>15} {:>15} {:>15}\n", kind_name, "accuracy", "specificity", "sensitivity", "auroc", "f1");
    let pm = |m: xvol::train::MeanStd| format!("{:.4}±{:.4}", m.mean, m.std);
    for cell in &cells {
        cell.report.write_json(&root.join(&cell.setting))?;
        let s = cell.report.summary()?;
        let (am, asd) = s.auroc.map_or((String::new(), String::new()), |a| (a.mean.to_string(), a.std.to_string()));
        w.write_record([
            cell.setting.clone(),
            s.trials.to_string(),
            s.accuracy.mean.to_string(),
            s.accuracy.std.to_string(),
            s.specificity.mean.to_string(),
            s.specificity.std.to_string(),
            s.sensitivity.mean.to_string(),
            s.sensitivity.std.to_string(),
            am,
            asd,
            s.f1.mean.to_string(),
            s.f1.std.to_string(),
        ])?;
        let _ = writeln!(
            table,
            "{:<12} {:>15} {:>15} {:>15} {:>15} {:>15}",
            cell.setting,
            pm(s.accuracy),
            pm(s.specificity),
            pm(s.sensitivity),
            s.auroc.map_or("undefined".into(), pm),
            pm(s.f1)
        );
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    write_text(&cfg.out.join(format!("ablate_{kind_name}.csv")), &String::from_utf8_lossy(&bytes))?;
    Ok(table)
}

pub fn fedavg<T: Real>(cfg: &RunConfig) -> Result<String> {
    let fc = &cfg.fed;
    if fc.clients.is_empty() {
        return Err(Error::Config("fed.clients needs at least one manifest".into()));
    }
    let mut splits = Vec::with_capacity(fc.clients.len());
    for path in &fc.clients {
        splits.push(splits_from_manifest(&Manifest::read(path)?, cfg)?);
    }
    let mut dims: Vec<[usize; 3]> = splits
        .iter()
        .flat_map(|s| s.train.iter().chain(&s.val).chain(&s.test).map(|r| r.dims()))
        .collect();
    dims.sort_unstable();
    dims.dedup();
    let mut spec = cfg.model.clone();
    if dims.len() > 1 {
        for s in &mut splits {
            for part in [&mut s.train, &mut s.val, &mut s.test] {
                *part = part
                    .iter()
                    .map(|r| harmonize_volume(r, fc.onh_fraction, fc.harmonize))
                    .collect::<Result<_>>()?;
            }
        }
        spec.input_dims = fc.harmonize;
    } else if let Some(&d) = dims.first() {
        spec.input_dims = d;
    }
    let global = build_model::<T>(&spec, cfg.train.seed)?;
    let mut clients: Vec<ClientState<T>> = splits
        .into_iter()
        .enumerate()
        .map(|(i, data)| ClientState {
            client_id: format!("client{i:02}"),
            model: global.clone(),
            data,
        })
        .collect();
    let fed = FedConfig {
        rounds: fc.rounds,
        local_epochs: fc.local_epochs,
    };
    let (mut model, log) = run_fedavg(global, &mut clients, &fed, &cfg.train)?;
    create_dir(&cfg.out)?;
    write_round_log(&log, &cfg.out.join("fed_rounds.csv"))?;
    save_model(&model, &cfg.out.join(MODEL_FILE))?;
    let test: Vec<_> = clients.iter().flat_map(|c| c.data.test.iter().cloned()).collect();
    let seed = cfg.train.seed;
    let m = evaluate(&mut model, &test, cfg.train.threshold, cfg.train.batch_size, 0, seed)?;
    emit_report(&MetricsReport::new(vec![m]), &cfg.out.join("metrics"))
}

/// Precision of a command: the stored precision for commands that load a
/// model, the configured one otherwise.
pub fn precision_for(cfg: &RunConfig, model: Option<&Path>) -> Result<Precision> {
    match model {
        Some(p) => peek_precision(p),
        None => Ok(cfg.precision),
    }
}
