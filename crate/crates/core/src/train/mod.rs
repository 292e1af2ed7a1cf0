//! Losses, NAdam, augmentation, the two training stages and evaluation.

mod augment;
mod loss;
mod metrics;
mod optim;

pub use augment::{
    augment, flip, undersample, undersample_split, zoom, AugmentConfig, GAIN_RANGE, MAX_SCALE, OFFSET_FRACTION,
};
pub use loss::{
    bce_loss, check_lambda, class_weights, consistency_loss, multitask_loss, weighted_bce_loss, LossTerms, UnsupLoss,
    SSIM_WINDOW,
};
pub use metrics::{auroc, Confusion, MeanStd, MetricsReport, MetricsSummary, TrialMetrics, DEFAULT_THRESHOLD};
pub use optim::{momentum_at, nadam_step, BETA1, BETA2, EPSILON, MOMENTUM_DECAY};

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::VolumeRecord;
use crate::net::{ForwardTrace, ModelState};
use crate::saliency::{cam_map, care_map, gradcam_weights, TargetClass, SALIENCY_EPS};
use crate::{Error, Graph, Mode, Real, Result, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampler {
    #[default]
    None,
    Weighted,
    Undersample,
}

impl Sampler {
    pub const ALL: [Sampler; 3] = [Sampler::None, Sampler::Weighted, Sampler::Undersample];

    pub fn name(self) -> &'static str {
        match self {
            Sampler::None => "none",
            Sampler::Weighted => "weighted",
            Sampler::Undersample => "undersample",
        }
    }
}

impl fmt::Display for Sampler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Sampler {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Sampler::ALL
            .into_iter()
            .find(|x| x.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown sampler `{s}` (none, weighted, undersample)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Weight of the consistency term in stage 2.
    pub lambda: f64,
    pub unsup_loss: UnsupLoss,
    pub sampler: Sampler,
    pub augment: AugmentConfig,
    pub seed: u64,
    pub trials: usize,
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 250,
            batch_size: 4,
            learning_rate: 1e-4,
            patience: 25,
            lambda: 0.75,
            unsup_loss: UnsupLoss::Mse,
            sampler: Sampler::None,
            augment: AugmentConfig::default(),
            seed: 0,
            trials: 5,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_lambda(self.lambda)?;
        if self.batch_size == 0 || self.patience == 0 || self.trials == 0 {
            return Err(Error::Config("batch_size, patience and trials must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("invalid learning rate {}", self.learning_rate)));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("threshold must lie in [0, 1], got {}", self.threshold)));
        }
        Ok(())
    }

    /// Seed of trial `k`: trials differ in init, sampling and augmentation.
    pub fn trial_seed(&self, trial: usize) -> u64 {
        self.seed.wrapping_add(trial as u64)
    }
}

/// Disjoint train / validation / test records.
#[derive(Debug, Clone, Default)]
pub struct DataSplits {
    pub train: Vec<VolumeRecord>,
    pub val: Vec<VolumeRecord>,
    pub test: Vec<VolumeRecord>,
}

impl DataSplits {
    pub fn from_parts([train, val, test]: [Vec<VolumeRecord>; 3]) -> Self {
        DataSplits { train, val, test }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train: LossTerms,
    pub val: LossTerms,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub history: Vec<EpochLog>,
    /// 0 when no epoch beat the starting parameters.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub epochs_run: usize,
    pub test: TrialMetrics,
}

/// Independent random streams of one trial.
#[derive(Debug, Clone, Copy)]
enum Stream {
    Stage1 = 1,
    Stage2 = 2,
    Sampling = 3,
}

fn stream(seed: u64, s: Stream) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(s as u64);
    r
}

/// Stacks `[1, D, H, W]` records into a `[B, 1, D, H, W]` batch.
pub fn stack_batch<T: Real>(records: &[&VolumeRecord]) -> Result<Tensor<T>> {
    let first = records
        .first()
        .ok_or_else(|| Error::Data("empty batch".into()))?
        .dims();
    let mut data = Vec::with_capacity(records.len() * first.iter().product::<usize>());
    for r in records {
        if r.dims() != first || r.values.shape()[0] != 1 {
            return Err(Error::Data(format!(
                "batch mixes volume shapes {:?} and {:?}",
                first,
                r.values.shape()
            )));
        }
        data.extend(r.values.data().iter().map(|&v| T::lit(f64::from(v))));
    }
    Tensor::new(&[records.len(), 1, first[0], first[1], first[2]], data)
}

fn to_f64<T: Real>(x: T) -> f64 {
    x.to_f64().unwrap()
}

#[derive(Debug, Clone, Copy)]
enum Objective {
    Supervised,
    Multitask,
}

/// Supervised loss choice resolved against the training class counts.
#[derive(Debug, Clone, Copy)]
struct Supervision {
    weights: Option<[usize; 2]>,
}

impl Supervision {
    fn loss<T: Real>(&self, g: &mut Graph<T>, p: Var, labels: &[u8]) -> Result<Var> {
        match self.weights {
            Some(c) => weighted_bce_loss(g, p, labels, c),
            None => bce_loss(g, p, labels),
        }
    }
}

/// CARE of the deepest attention block and Grad-CAM of the deepest conv
/// block, both on the Grad-CAM grid, for the predicted classes.
pub fn consistency_maps<T: Real>(g: &mut Graph<T>, trace: &ForwardTrace) -> Result<(Var, Var)> {
    let attn = trace
        .last_attention_tap()
        .ok_or_else(|| Error::Architecture("consistency needs an attention block".into()))?;
    let conv = trace.last_conv_tap().expect("model has conv layers");
    let (attn_tap, conv_tap) = (trace.tap(&attn)?, trace.tap(&conv)?);
    let classes = TargetClass::Predicted.resolve(g.value(trace.logits));
    let weights = gradcam_weights(g, trace.logits, conv_tap, &conv, &classes)?;
    let eps = T::lit(SALIENCY_EPS);
    let cam = cam_map(g, conv_tap, weights, eps)?;
    let mut care = care_map(g, attn_tap, eps)?;
    let (cs, gs) = (g.shape(care).to_vec(), g.shape(cam).to_vec());
    if cs != gs {
        care = g.upsample(care, [gs[1], gs[2], gs[3]])?;
    }
    Ok((care, cam))
}

struct BatchResult<T> {
    terms: LossTerms,
    grads: Option<Vec<Tensor<T>>>,
}

#[allow(clippy::too_many_arguments)]
fn run_batch<T: Real, R: Rng + ?Sized>(
    model: &mut ModelState<T>,
    batch: &[&VolumeRecord],
    objective: Objective,
    sup: Supervision,
    cfg: &TrainConfig,
    mode: Mode,
    want_grads: bool,
    rng: &mut R,
) -> Result<BatchResult<T>> {
    let labels: Vec<u8> = batch.iter().map(|r| r.label).collect();
    let mut g = Graph::new();
    let trainable = want_grads || matches!(objective, Objective::Multitask);
    let vars = model.bind(&mut g, trainable);
    let x = g.constant(stack_batch::<T>(batch)?);
    let trace = model.forward(&mut g, &vars, x, mode, rng)?;
    let supervised = sup.loss(&mut g, trace.p_glaucoma, &labels)?;
    let (loss, terms) = match objective {
        Objective::Supervised => {
            let v = to_f64(g.value(supervised).item());
            (supervised, LossTerms::new(v, 0.0, 0.0))
        }
        Objective::Multitask => {
            let (care, cam) = consistency_maps(&mut g, &trace)?;
            let unsup = consistency_loss(&mut g, care, cam, cfg.unsup_loss)?;
            multitask_loss(&mut g, supervised, unsup, cfg.lambda)?
        }
    };
    if !terms.combined.is_finite() {
        return Err(Error::NonFiniteLoss(format!(
            "supervised {}, unsupervised {}",
            terms.supervised, terms.unsupervised
        )));
    }
    let grads = if want_grads {
        g.backward(loss)?;
        Some(
            vars.iter()
                .zip(&model.params)
                .map(|(v, (_, p))| g.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
                .collect(),
        )
    } else {
        None
    };
    Ok(BatchResult { terms, grads })
}

/// Sample-weighted mean of batch loss terms.
fn accumulate(acc: &mut (LossTerms, usize), t: LossTerms, n: usize) {
    let w = n as f64;
    acc.0.supervised += w * t.supervised;
    acc.0.unsupervised += w * t.unsupervised;
    acc.0.combined += w * t.combined;
    acc.1 += n;
}

fn finish(acc: (LossTerms, usize)) -> LossTerms {
    let n = acc.1.max(1) as f64;
    LossTerms {
        supervised: acc.0.supervised / n,
        unsupervised: acc.0.unsupervised / n,
        combined: acc.0.combined / n,
    }
}

const ZERO_TERMS: LossTerms = LossTerms {
    supervised: 0.0,
    unsupervised: 0.0,
    combined: 0.0,
};

fn validation_terms<T: Real>(
    model: &mut ModelState<T>,
    records: &[VolumeRecord],
    objective: Objective,
    sup: Supervision,
    cfg: &TrainConfig,
) -> Result<LossTerms> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut acc = (ZERO_TERMS, 0);
    for chunk in records.chunks(cfg.batch_size) {
        let batch: Vec<&VolumeRecord> = chunk.iter().collect();
        let r = run_batch(model, &batch, objective, sup, cfg, Mode::Eval, false, &mut rng)?;
        accumulate(&mut acc, r.terms, batch.len());
    }
    Ok(finish(acc))
}

fn train_loop<T: Real>(
    model: &mut ModelState<T>,
    data: &DataSplits,
    cfg: &TrainConfig,
    trial: usize,
    objective: Objective,
    stage: Stream,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() || data.val.is_empty() || data.test.is_empty() {
        return Err(Error::Data(format!(
            "train/val/test splits must be nonempty, got {}/{}/{}",
            data.train.len(),
            data.val.len(),
            data.test.len()
        )));
    }
    let seed = cfg.trial_seed(trial);
    let mut rng = stream(seed, stage);

    let mut train: Vec<&VolumeRecord> = data.train.iter().collect();
    let counts = {
        let pos = train.iter().filter(|r| r.label == 1).count();
        [train.len() - pos, pos]
    };
    let sup = match cfg.sampler {
        Sampler::None => Supervision { weights: None },
        Sampler::Weighted => Supervision { weights: Some(counts) },
        Sampler::Undersample => {
            let labels: Vec<u8> = train.iter().map(|r| r.label).collect();
            let keep = undersample(&labels, &mut stream(seed, Stream::Sampling))?;
            train = keep.iter().map(|&i| train[i]).collect();
            Supervision { weights: None }
        }
    };
    // validation tracks the unweighted objective of the stage
    let val_sup = Supervision { weights: None };

    let mut best = validation_terms(model, &data.val, objective, val_sup, cfg)?.combined;
    let mut best_epoch = 0;
    let mut snapshot = (model.params.clone(), model.bn_stats.clone());
    let mut history = Vec::new();
    let mut epochs_run = 0;

    for epoch in 1..=cfg.epochs {
        train.shuffle(&mut rng);
        let mut acc = (ZERO_TERMS, 0);
        for chunk in train.chunks(cfg.batch_size) {
            let batch: Vec<VolumeRecord> = chunk
                .iter()
                .map(|r| augment(r, &mut rng, &cfg.augment))
                .collect::<Result<_>>()?;
            let refs: Vec<&VolumeRecord> = batch.iter().collect();
            let r = run_batch(model, &refs, objective, sup, cfg, Mode::Train, true, &mut rng)?;
            nadam_step(model, r.grads.as_deref().expect("requested"), cfg.learning_rate)?;
            accumulate(&mut acc, r.terms, refs.len());
        }
        let val = validation_terms(model, &data.val, objective, val_sup, cfg)?;
        history.push(EpochLog {
            epoch,
            train: finish(acc),
            val,
        });
        epochs_run = epoch;
        log::debug!("trial {trial} epoch {epoch}: val {:.5}", val.combined);
        if val.combined < best {
            best = val.combined;
            best_epoch = epoch;
            snapshot = (model.params.clone(), model.bn_stats.clone());
        } else if epoch - best_epoch >= cfg.patience {
            break;
        }
    }
    model.params = snapshot.0;
    model.bn_stats = snapshot.1;
    model.epoch += best_epoch as u64;
    let test = evaluate(model, &data.test, cfg.threshold, cfg.batch_size, trial, seed)?;
    Ok(TrainOutcome {
        history,
        best_epoch,
        best_val_loss: best,
        epochs_run,
        test,
    })
}

/// Supervised pretraining with early stopping on validation BCE; the best
/// parameters are restored before test evaluation.
pub fn train_stage1<T: Real>(
    model: &mut ModelState<T>,
    data: &DataSplits,
    cfg: &TrainConfig,
    trial: usize,
) -> Result<TrainOutcome> {
    train_loop(model, data, cfg, trial, Objective::Supervised, Stream::Stage1)
}

/// Multi-task fine-tuning of a pretrained model; refuses a fresh model
/// unless `force` is set. Early stopping uses the combined loss.
pub fn finetune_stage2<T: Real>(
    model: &mut ModelState<T>,
    data: &DataSplits,
    cfg: &TrainConfig,
    trial: usize,
    force: bool,
) -> Result<TrainOutcome> {
    if model.epoch == 0 && !force {
        return Err(Error::UntrainedModel);
    }
    train_loop(model, data, cfg, trial, Objective::Multitask, Stream::Stage2)
}

/// Eval-mode glaucoma probabilities.
pub fn predict_scores<T: Real>(model: &mut ModelState<T>, records: &[VolumeRecord], batch_size: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(batch_size.max(1)) {
        let batch: Vec<&VolumeRecord> = chunk.iter().collect();
        let p = model.predict(&stack_batch::<T>(&batch)?)?;
        out.extend(p.p_glaucoma.iter().map(|&v| to_f64(v)));
    }
    Ok(out)
}

pub fn evaluate<T: Real>(
    model: &mut ModelState<T>,
    records: &[VolumeRecord],
    threshold: f64,
    batch_size: usize,
    trial: usize,
    seed: u64,
) -> Result<TrialMetrics> {
    if records.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let scores = predict_scores(model, records, batch_size)?;
    let labels: Vec<u8> = records.iter().map(|r| r.label).collect();
    TrialMetrics::from_scores(&scores, &labels, threshold, trial, seed)
}

/// Mean eval-mode CARE / Grad-CAM squared difference per volume.
pub fn mean_consistency<T: Real>(model: &mut ModelState<T>, records: &[VolumeRecord], batch_size: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut total = 0.0;
    for chunk in records.chunks(batch_size.max(1)) {
        let batch: Vec<&VolumeRecord> = chunk.iter().collect();
        let mut g = Graph::new();
        let vars = model.bind(&mut g, true);
        let x = g.constant(stack_batch::<T>(&batch)?);
        let trace = model.forward(&mut g, &vars, x, Mode::Eval, &mut rng)?;
        let (care, cam) = consistency_maps(&mut g, &trace)?;
        let l = consistency_loss(&mut g, care, cam, UnsupLoss::Mse)?;
        total += to_f64(g.value(l).item()) * batch.len() as f64;
    }
    Ok(total / records.len().max(1) as f64)
}
