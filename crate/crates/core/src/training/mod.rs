//! Base-model training, head adaptation and probability generation.

mod callbacks;

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{PredictionRecord, Stage};
use crate::nn::{
    backward_and_step, focal_loss, sigmoid, FocalLossParams, Group, Mode, Network, Optimizer, OptimizerConfig,
    Tensor,
};
use crate::recurrence::FeaturizedWindow;
use crate::scalar::Scalar;

pub use callbacks::{custom_restore, EarlyStopping, ToleranceMode};

/// Images with labels and provenance, stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSet<T> {
    pub sample_shape: [usize; 3],
    pub images: Vec<T>,
    pub labels: Vec<u8>,
    pub participants: Vec<String>,
    pub timestamps: Vec<f64>,
}

impl<T: Scalar> ImageSet<T> {
    /// Replicates each single-plane plot over `channels` input channels.
    pub fn from_windows<'a>(windows: impl IntoIterator<Item = &'a FeaturizedWindow>, channels: usize) -> Result<Self> {
        let mut set: Option<ImageSet<T>> = None;
        for w in windows {
            let side = w.plot.side;
            let s = set.get_or_insert_with(|| ImageSet::empty([channels, side, side]));
            if s.sample_shape != [channels, side, side] {
                return Err(Error::ShapeMismatch {
                    expected: s.sample_shape.to_vec(),
                    actual: vec![channels, side, side],
                });
            }
            for _ in 0..channels {
                s.images.extend(w.plot.pixels.iter().map(|&p| T::lit(p)));
            }
            s.labels.push(w.label);
            s.participants.push(w.participant_id.clone());
            s.timestamps.push(w.ema_timestamp);
        }
        Ok(set.unwrap_or_else(|| ImageSet::empty([channels, 0, 0])))
    }

    pub fn empty(sample_shape: [usize; 3]) -> Self {
        ImageSet {
            sample_shape,
            images: Vec::new(),
            labels: Vec::new(),
            participants: Vec::new(),
            timestamps: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn sample(&self, i: usize) -> &[T] {
        let s = self.sample_len();
        &self.images[i * s..(i + 1) * s]
    }

    pub fn batch(&self, idx: &[usize]) -> Tensor<T> {
        let samples: Vec<&[T]> = idx.iter().map(|&i| self.sample(i)).collect();
        Tensor::stack(&self.sample_shape, &samples).expect("samples share a shape")
    }

    pub fn participant_set(&self) -> BTreeSet<&str> {
        self.participants.iter().map(String::as_str).collect()
    }
}

/// Fails if any participant appears in both sets.
pub fn assert_disjoint<T: Scalar>(train: &ImageSet<T>, val: &ImageSet<T>) -> Result<()> {
    let a = train.participant_set();
    let shared: Vec<&str> = val.participant_set().intersection(&a).copied().collect();
    if shared.is_empty() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!(
            "participants {} appear in both training and validation data",
            shared.join(", ")
        )))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClassWeights {
    /// `w_c = N / (2 N_c)` from the training labels.
    InverseFrequency,
    Fixed { w0: f64, w1: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FocalSpec {
    pub gamma: f64,
    pub weights: ClassWeights,
}

impl Default for FocalSpec {
    fn default() -> Self {
        FocalSpec {
            gamma: 2.0,
            weights: ClassWeights::InverseFrequency,
        }
    }
}

impl FocalSpec {
    pub fn resolve<T: Scalar>(&self, labels: &[u8]) -> FocalLossParams<T> {
        match self.weights {
            ClassWeights::InverseFrequency => FocalLossParams::inverse_frequency(T::lit(self.gamma), labels),
            ClassWeights::Fixed { w0, w1 } => FocalLossParams {
                gamma: T::lit(self.gamma),
                w0: T::lit(w0),
                w1: T::lit(w1),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSchedule {
    pub optimizer: OptimizerConfig,
    pub max_epochs: usize,
    /// Early-stopping patience on validation loss; `None` runs all epochs.
    pub patience: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaseTrainSchedule {
    /// New layers only (backbone frozen).
    pub phase1: PhaseSchedule,
    /// All layers, starting from the phase-1 selection.
    pub phase2: PhaseSchedule,
    pub batch_size: usize,
    pub focal: FocalSpec,
    pub seed: u64,
}

impl Default for BaseTrainSchedule {
    fn default() -> Self {
        BaseTrainSchedule {
            phase1: PhaseSchedule {
                optimizer: OptimizerConfig::sgd(1e-4),
                max_epochs: 20,
                patience: None,
            },
            phase2: PhaseSchedule {
                optimizer: OptimizerConfig::sgd(1e-8),
                max_epochs: 20,
                patience: Some(3),
            },
            batch_size: 32,
            focal: FocalSpec::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadTuneSchedule {
    pub optimizer: OptimizerConfig,
    pub max_epochs: usize,
    pub tolerance: f64,
    pub tolerance_mode: ToleranceMode,
    pub batch_size: usize,
    pub focal: FocalSpec,
    pub seed: u64,
}

impl Default for HeadTuneSchedule {
    fn default() -> Self {
        HeadTuneSchedule {
            optimizer: OptimizerConfig::nadam(1e-5),
            max_epochs: 50,
            tolerance: 0.03,
            tolerance_mode: ToleranceMode::Relative,
            batch_size: 32,
            focal: FocalSpec::default(),
            seed: 0,
        }
    }
}

impl BaseTrainSchedule {
    pub fn validate(&self) -> Result<()> {
        self.phase1.optimizer.validate()?;
        self.phase2.optimizer.validate()?;
        check_batch(self.batch_size)
    }
}

impl HeadTuneSchedule {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if !(self.tolerance >= 0.0) {
            return Err(Error::InvalidConfig("head tolerance must be non-negative".into()));
        }
        check_batch(self.batch_size)
    }
}

fn check_batch(b: usize) -> Result<()> {
    if b == 0 {
        Err(Error::InvalidConfig("batch size must be positive".into()))
    } else {
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Phase1,
    Phase2,
    Head,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Phase1 => "phase1",
            Phase::Phase2 => "phase2",
            Phase::Head => "head",
        }
    }
}

/// One completed epoch. `epoch` counts from 1 within its phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochTrace {
    pub phase: Phase,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Whether this epoch's weights were the ones kept for its phase.
    pub selected: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub model: Network<T>,
    pub trace: Vec<EpochTrace>,
}

/// Writes `epoch,phase,train_loss,val_loss,selected`.
pub fn write_trace_csv(trace: &[EpochTrace], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "phase", "train_loss", "val_loss", "selected"])?;
    for t in trace {
        w.write_record([
            t.epoch.to_string(),
            t.phase.as_str().to_string(),
            t.train_loss.to_string(),
            t.val_loss.to_string(),
            (t.selected as u8).to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Re-estimates batch-norm running statistics from `set`, in order, in batches.
pub fn calibrate_batchnorm<T: Scalar>(net: &mut Network<T>, set: &ImageSet<T>, batch_size: usize) -> Result<()> {
    let idx: Vec<usize> = (0..set.len()).collect();
    let batches: Vec<Tensor<T>> = idx.chunks(batch_size.max(1)).map(|c| set.batch(c)).collect();
    net.calibrate_batchnorm(&batches)
}

/// Activations entering node `start`, one flat vector per sample.
struct Cached<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    labels: Vec<u8>,
}

impl<T: Scalar> Cached<T> {
    fn len(&self) -> usize {
        self.labels.len()
    }

    fn batch(&self, idx: &[usize]) -> Tensor<T> {
        let per: usize = self.shape.iter().product();
        let samples: Vec<&[T]> = idx.iter().map(|&i| &self.data[i * per..(i + 1) * per]).collect();
        Tensor::stack(&self.shape, &samples).expect("cached samples share a shape")
    }
}

fn cache_prefix<T: Scalar>(net: &mut Network<T>, set: &ImageSet<T>, start: usize, batch: usize) -> Result<Cached<T>> {
    let mut shape = set.sample_shape.to_vec();
    let mut data = Vec::new();
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let out = net.forward_range(&set.batch(chunk), 0, start, Mode::Eval, false)?;
        shape = out.shape()[1..].to_vec();
        data.extend_from_slice(out.data());
    }
    Ok(Cached {
        shape,
        data,
        labels: set.labels.clone(),
    })
}

fn eval_loss<T: Scalar>(
    net: &mut Network<T>,
    cached: &Cached<T>,
    start: usize,
    batch: usize,
    params: &FocalLossParams<T>,
) -> Result<f64> {
    if cached.len() == 0 {
        return Ok(f64::NAN);
    }
    let end = net.nodes.len();
    let idx: Vec<usize> = (0..cached.len()).collect();
    let mut total = 0.0;
    for chunk in idx.chunks(batch.max(1)) {
        let logits = net.forward_range(&cached.batch(chunk), start, end, Mode::Eval, false)?;
        let probs: Vec<T> = logits.data().iter().map(|&z| sigmoid(z)).collect();
        let labels: Vec<u8> = chunk.iter().map(|&i| cached.labels[i]).collect();
        total += focal_loss(&probs, &labels, params).loss.as_f64() * chunk.len() as f64;
    }
    Ok(total / cached.len() as f64)
}

struct PhaseRun<T> {
    losses: Vec<(f64, f64)>,
    snapshots: Vec<Network<T>>,
}

/// Shuffled mini-batch epochs over the trainable suffix of `net`, snapshotting after each.
#[allow(clippy::too_many_arguments)]
fn run_phase<T: Scalar>(
    net: &mut Network<T>,
    train: &ImageSet<T>,
    val: &ImageSet<T>,
    optimizer: OptimizerConfig,
    max_epochs: usize,
    patience: Option<usize>,
    batch_size: usize,
    focal: &FocalSpec,
    rng: &mut ChaCha8Rng,
) -> Result<PhaseRun<T>> {
    let mut run = PhaseRun {
        losses: Vec::new(),
        snapshots: Vec::new(),
    };
    if max_epochs == 0 {
        return Ok(run);
    }
    let params = focal.resolve::<T>(&train.labels);
    let start = net.first_trainable();
    let train_c = cache_prefix(net, train, start, batch_size)?;
    let val_c = cache_prefix(net, val, start, batch_size)?;
    let mut opt = Optimizer::new(optimizer);
    let mut stopper = patience.map(EarlyStopping::new);
    let mut order: Vec<usize> = (0..train_c.len()).collect();
    for _ in 0..max_epochs {
        order.shuffle(rng);
        for chunk in order.chunks(batch_size) {
            // A lone trailing sample gives degenerate batch statistics.
            if chunk.len() < 2 && order.len() >= 2 {
                continue;
            }
            let labels: Vec<u8> = chunk.iter().map(|&i| train_c.labels[i]).collect();
            backward_and_step(net, &train_c.batch(chunk), &labels, &params, &mut opt, start)?;
        }
        let tl = eval_loss(net, &train_c, start, batch_size, &params)?;
        let vl = eval_loss(net, &val_c, start, batch_size, &params)?;
        run.losses.push((tl, vl));
        run.snapshots.push(net.clone());
        if let Some(s) = stopper.as_mut() {
            if s.update(vl) {
                break;
            }
        }
    }
    Ok(run)
}

fn argmin_val(losses: &[(f64, f64)]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &(_, v)) in losses.iter().enumerate() {
        if best.is_none_or(|b| v < losses[b].1) {
            best = Some(i);
        }
    }
    best
}

fn push_trace(trace: &mut Vec<EpochTrace>, phase: Phase, losses: &[(f64, f64)], selected: Option<usize>) {
    for (i, &(train_loss, val_loss)) in losses.iter().enumerate() {
        trace.push(EpochTrace {
            phase,
            epoch: i + 1,
            train_loss,
            val_loss,
            selected: Some(i) == selected,
        });
    }
}

fn phase_rng(seed: u64, phase: Phase) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(phase as u64 + 1);
    rng
}

/// Phase 1 trains the adapter block and output layer with the backbone frozen and
/// keeps the minimum-validation-loss epoch; phase 2 fine-tunes every layer from
/// there with early stopping and again keeps the best epoch.
pub fn train_base<T: Scalar>(
    model: &Network<T>,
    train: &ImageSet<T>,
    val: &ImageSet<T>,
    schedule: &BaseTrainSchedule,
) -> Result<TrainOutcome<T>> {
    schedule.validate()?;
    assert_disjoint(train, val)?;
    let mut net = model.clone();
    let mut trace = Vec::new();

    net.freeze_where(|n| n.group == Group::Backbone);
    let mut rng = phase_rng(schedule.seed, Phase::Phase1);
    let p = &schedule.phase1;
    let run = run_phase(&mut net, train, val, p.optimizer, p.max_epochs, p.patience, schedule.batch_size, &schedule.focal, &mut rng)?;
    let pick = argmin_val(&run.losses);
    push_trace(&mut trace, Phase::Phase1, &run.losses, pick);
    if let Some(i) = pick {
        net = run.snapshots[i].clone();
    }

    net.unfreeze_all();
    let mut rng = phase_rng(schedule.seed, Phase::Phase2);
    let p = &schedule.phase2;
    let run = run_phase(&mut net, train, val, p.optimizer, p.max_epochs, p.patience, schedule.batch_size, &schedule.focal, &mut rng)?;
    let pick = argmin_val(&run.losses);
    push_trace(&mut trace, Phase::Phase2, &run.losses, pick);
    if let Some(i) = pick {
        net = run.snapshots[i].clone();
    }
    net.freeze_where(|n| model.nodes.iter().any(|m| m.name == n.name && m.frozen));
    Ok(TrainOutcome { model: net, trace })
}

/// Replaces the output layer of `base` with a fresh 32-unit head, trains only the
/// head with the schedule's optimizer and keeps the epoch chosen by [`custom_restore`].
pub fn tune_head<T: Scalar>(
    base: &Network<T>,
    train: &ImageSet<T>,
    val: &ImageSet<T>,
    schedule: &HeadTuneSchedule,
) -> Result<TrainOutcome<T>> {
    schedule.validate()?;
    assert_disjoint(train, val)?;
    let mut net = base.clone();
    net.adapt_head(schedule.seed ^ 0x4845_4144);
    let mut rng = phase_rng(schedule.seed, Phase::Head);
    let run = run_phase(
        &mut net,
        train,
        val,
        schedule.optimizer,
        schedule.max_epochs,
        None,
        schedule.batch_size,
        &schedule.focal,
        &mut rng,
    )?;
    let pick = custom_restore(&run.losses, schedule.tolerance, schedule.tolerance_mode);
    let mut trace = Vec::new();
    push_trace(&mut trace, Phase::Head, &run.losses, pick);
    if let Some(i) = pick {
        net = run.snapshots[i].clone();
    }
    Ok(TrainOutcome { model: net, trace })
}

/// Eval-mode probabilities, one record per sample of `set`, tagged with the fold
/// and the model hash.
pub fn predict_probabilities<T: Scalar>(
    model: &Network<T>,
    set: &ImageSet<T>,
    fold_id: usize,
    batch_size: usize,
) -> Result<Vec<PredictionRecord>> {
    let mut net = model.clone();
    let hash = net.hash();
    let idx: Vec<usize> = (0..set.len()).collect();
    let mut probs = Vec::with_capacity(set.len());
    for chunk in idx.chunks(batch_size.max(1)) {
        probs.extend(net.predict_proba(&set.batch(chunk))?);
    }
    Ok(probs
        .into_iter()
        .enumerate()
        .map(|(i, p)| {
            let p = p.as_f64();
            PredictionRecord {
                window: String::new(),
                condition: "tl_only".into(),
                participant_id: set.participants[i].clone(),
                ema_timestamp: set.timestamps[i],
                label: set.labels[i],
                tl_probability: Some(p),
                meta_probability: None,
                predicted_class: (p >= 0.5) as u8,
                fold_id,
                tl_fold_id: Some(fold_id),
                stage: Stage::Tl,
                model_hash: Some(hash.clone()),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::BackboneConfig;

    fn cfg() -> BackboneConfig {
        BackboneConfig {
            input_side: 4,
            input_channels: 1,
            stem_channels: 2,
            stem_kernel: 3,
            stem_stride: 1,
            widths: vec![2],
            blocks: vec![1],
        }
    }

    fn set(participants: &[&str], n_each: usize, seed: u64) -> ImageSet<f64> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ImageSet::empty([1, 4, 4]);
        for p in participants {
            for k in 0..n_each {
                let y = (k % 2) as u8;
                for _ in 0..16 {
                    let on = rng.random::<f64>() < if y == 1 { 0.7 } else { 0.3 };
                    s.images.push(on as u8 as f64);
                }
                s.labels.push(y);
                s.participants.push(p.to_string());
                s.timestamps.push(k as f64);
            }
        }
        s
    }

    #[test]
    fn zero_epochs_return_the_input_model() {
        let net = Network::<f64>::base(&cfg(), 1).unwrap();
        let mut sched = BaseTrainSchedule::default();
        sched.phase1.max_epochs = 0;
        sched.phase2.max_epochs = 0;
        let out = train_base(&net, &set(&["a"], 6, 1), &set(&["b"], 4, 2), &sched).unwrap();
        assert_eq!(out.model.hash(), net.hash());
        assert!(out.trace.is_empty());
    }

    #[test]
    fn overlapping_participants_are_rejected() {
        let net = Network::<f64>::base(&cfg(), 1).unwrap();
        let err = train_base(&net, &set(&["a", "b"], 4, 1), &set(&["b"], 4, 2), &BaseTrainSchedule::default());
        assert!(matches!(err, Err(Error::InvalidInput(_))));
    }

    #[test]
    fn zero_learning_rates_keep_parameters() {
        let net = Network::<f64>::base(&cfg(), 1).unwrap();
        let mut sched = BaseTrainSchedule::default();
        sched.phase1.optimizer.learning_rate = 0.0;
        sched.phase1.max_epochs = 2;
        sched.phase2.optimizer.learning_rate = 0.0;
        sched.phase2.max_epochs = 2;
        let out = train_base(&net, &set(&["a"], 8, 1), &set(&["b"], 4, 2), &sched).unwrap();
        assert_eq!(out.model.params_flat(), net.params_flat());
        assert_eq!(out.trace.len(), 4);
    }

    #[test]
    fn head_tuning_leaves_base_untouched() {
        let net = Network::<f64>::base(&cfg(), 1).unwrap();
        let sched = HeadTuneSchedule {
            optimizer: OptimizerConfig::nadam(1e-2),
            max_epochs: 5,
            ..HeadTuneSchedule::default()
        };
        let out = tune_head(&net, &set(&["a"], 8, 1), &set(&["b"], 4, 2), &sched).unwrap();
        let pool = out.model.pool_index();
        for (a, b) in out.model.nodes[..=pool].iter().zip(&net.nodes[..=pool]) {
            assert_eq!(a.name, b.name);
            let mut pa = Vec::new();
            let mut pb = Vec::new();
            a.layer.visit_params(&mut |p| pa.extend(p.value.iter().map(|v| v.to_bits())));
            b.layer.visit_params(&mut |p| pb.extend(p.value.iter().map(|v| v.to_bits())));
            assert_eq!(pa, pb);
        }
        assert_eq!(out.trace.iter().filter(|t| t.selected).count(), 1);
    }

    #[test]
    fn batch_and_single_inference_agree() {
        let net = Network::<f64>::base(&cfg(), 1).unwrap();
        let s = set(&["a"], 10, 3);
        let all = predict_probabilities(&net, &s, 0, 32).unwrap();
        let one = predict_probabilities(&net, &s, 0, 1).unwrap();
        for (a, b) in all.iter().zip(&one) {
            assert!((a.tl_probability.unwrap() - b.tl_probability.unwrap()).abs() <= 1e-10);
        }
    }
}
