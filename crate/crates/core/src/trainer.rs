//! Training loop: `L = L_CE + β·L_AS`, Adam, cosine schedule, EMA anchor.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchor::{
    anchor_attention_on_tape, row_mean_kl_on_tape, stabilization_loss_on_tape, AnchorState,
    TemporalEnsembleStore,
};
use crate::attention::{softmax_slice, AttentionMap};
use crate::data::Standardizer;
use crate::diagnostics::{mean_row_jsd, AttentionTrace};
use crate::error::{AsmilError, Result};
use crate::metrics::{accuracy, macro_auc, macro_f1};
use crate::model::{
    forward, forward_on_tape, init_params, token_drop_mask, Architecture, Bag, DropMask,
    ModelConfig, ParamGrads, ParamSet,
};
use crate::optim::{adam_step, cosine_lr, AdamState};
use crate::tape::GradTape;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Where the stabilization target comes from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AnchorStrategy {
    /// EMA anchor model, `KL(anchor ‖ online)`.
    Model,
    /// Per-bag EMA of past attention, `KL(online ‖ target)`.
    Temporal {
        rho: f64,
    },
    Off,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleGranularity {
    #[default]
    Epoch,
    Step,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    /// Weight of the stabilization term.
    pub beta: f64,
    /// FEAT-token drop rate `B`.
    pub drop_rate: f64,
    /// Anchor EMA factor `m`.
    pub momentum: f64,
    pub lr: f64,
    pub epochs: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub anchor: AnchorStrategy,
    pub anchor_map: AttentionMap,
    pub schedule: ScheduleGranularity,
    /// Number of leading validation bags whose attention is traced.
    pub probe_bags: usize,
    /// Trace every validation bag instead.
    pub trace_all: bool,
    /// Z-score features with statistics from the training bags.
    pub standardize: bool,
}

impl TrainConfig {
    pub fn new(model: ModelConfig) -> Self {
        Self {
            model,
            beta: 1.0,
            drop_rate: 0.5,
            momentum: 0.99,
            lr: 1e-4,
            epochs: 50,
            weight_decay: 1e-4,
            seed: 0,
            anchor: AnchorStrategy::Model,
            anchor_map: AttentionMap::Nsf,
            schedule: ScheduleGranularity::Epoch,
            probe_bags: 8,
            trace_all: false,
            standardize: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(AsmilError::config(
                "beta",
                "must be finite and non-negative",
            ));
        }
        if !(0.0..1.0).contains(&self.drop_rate) {
            return Err(AsmilError::config("drop_rate", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(AsmilError::config("momentum", "must lie in [0, 1)"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(AsmilError::config("lr", "must be finite and non-negative"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(AsmilError::config(
                "weight_decay",
                "must be finite and non-negative",
            ));
        }
        if let AnchorStrategy::Temporal { rho } = self.anchor {
            if !(rho > 0.0 && rho < 1.0) {
                return Err(AsmilError::config("rho", "must lie in (0, 1)"));
            }
        }
        self.anchor_map
            .validate()
            .map_err(|e| AsmilError::config("anchor_map", e.to_string()))
    }
}

/// The stabilization source for one loss evaluation.
pub enum Stabilizer<'a> {
    Off,
    Anchor(&'a AnchorState),
    Temporal(&'a mut TemporalEnsembleStore),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce: f64,
    pub stabilization: f64,
}

/// Everything one gradient step needs.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub loss: LossBreakdown,
    pub grads: ParamGrads,
    /// Gradients reaching anchor parameters; zero by construction.
    pub anchor_grads: Option<ParamGrads>,
    /// Online attention rows, pre-drop.
    pub attention: crate::tensor::DenseMatrix,
}

fn run_loss(
    bag: &Bag,
    params: &ParamSet,
    stabilizer: Stabilizer<'_>,
    beta: f64,
    mask: Option<&DropMask>,
) -> Result<StepOutput> {
    let mut tape = GradTape::new();
    let bound = params.bind(&mut tape);
    let x = tape.leaf(bag.features.clone());
    let out = forward_on_tape(&mut tape, x, &bound, &params.config, mask)?;
    let ce = tape.cross_entropy(out.logits, bag.label)?;
    let mut anchor_bound = None;
    let stab = if beta == 0.0 {
        None
    } else {
        match stabilizer {
            Stabilizer::Off => None,
            Stabilizer::Anchor(anchor) => {
                let (target, ab) = anchor_attention_on_tape(&mut tape, x, anchor)?;
                anchor_bound = Some(ab);
                Some(stabilization_loss_on_tape(
                    &mut tape,
                    out.attention,
                    target,
                )?)
            }
            Stabilizer::Temporal(store) => {
                let current = tape.value(out.attention).clone();
                let target = store.step(&bag.id, &current)?;
                let t = tape.leaf(target);
                let t = tape.stop_gradient(t);
                Some(row_mean_kl_on_tape(&mut tape, out.attention, t)?)
            }
        }
    };
    let total = match stab {
        Some(s) => {
            let weighted = tape.scale(s, beta);
            tape.add(ce, weighted)?
        }
        None => ce,
    };
    let grads = tape.backward(total)?;
    let loss = LossBreakdown {
        total: tape.value(total).item()?,
        ce: tape.value(ce).item()?,
        stabilization: match stab {
            Some(s) => tape.value(s).item()?,
            None => 0.0,
        },
    };
    Ok(StepOutput {
        loss,
        grads: bound.gradients(&grads),
        anchor_grads: anchor_bound.map(|ab| ab.gradients(&grads)),
        attention: tape.value(out.attention).clone(),
    })
}

/// `L = L_CE + β·L_AS` and its components; `β = 0` skips the second term.
pub fn total_loss(
    bag: &Bag,
    params: &ParamSet,
    stabilizer: Stabilizer<'_>,
    config: &TrainConfig,
    mask: Option<&DropMask>,
) -> Result<LossBreakdown> {
    Ok(run_loss(bag, params, stabilizer, config.beta, mask)?.loss)
}

pub fn loss_and_gradients(
    bag: &Bag,
    params: &ParamSet,
    stabilizer: Stabilizer<'_>,
    config: &TrainConfig,
    mask: Option<&DropMask>,
) -> Result<StepOutput> {
    run_loss(bag, params, stabilizer, config.beta, mask)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_bags: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub macro_auc: Option<f64>,
    pub mean_ce: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub bag_id: String,
    pub label: usize,
    pub predicted: usize,
    pub probabilities: Vec<f64>,
}

/// Inference with every FEAT token kept.
pub fn predict(bags: &[Bag], params: &ParamSet) -> Result<Vec<Prediction>> {
    bags.iter()
        .map(|bag| {
            let rec = forward(bag, params, None)?;
            let probabilities = softmax_slice(&rec.logits, 1.0);
            let predicted = probabilities
                .iter()
                .enumerate()
                .fold(
                    (0, f64::MIN),
                    |best, (k, &p)| if p > best.1 { (k, p) } else { best },
                )
                .0;
            Ok(Prediction {
                bag_id: bag.id.clone(),
                label: bag.label,
                predicted,
                probabilities,
            })
        })
        .collect()
}

pub fn evaluate(bags: &[Bag], params: &ParamSet) -> Result<EvalReport> {
    let preds = predict(bags, params)?;
    let k = params.config.n_classes;
    let labels: Vec<usize> = preds.iter().map(|p| p.label).collect();
    let predicted: Vec<usize> = preds.iter().map(|p| p.predicted).collect();
    let probs: Vec<Vec<f64>> = preds.iter().map(|p| p.probabilities.clone()).collect();
    let mean_ce = preds
        .iter()
        .map(|p| -p.probabilities[p.label].max(f64::MIN_POSITIVE).ln())
        .sum::<f64>()
        / preds.len() as f64;
    Ok(EvalReport {
        n_bags: bags.len(),
        accuracy: accuracy(&predicted, &labels)?,
        macro_f1: macro_f1(&predicted, &labels, k)?,
        macro_auc: macro_auc(&probs, &labels, k)?.macro_auc,
        mean_ce,
    })
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub loss_ce: f64,
    pub loss_as: f64,
    pub loss_total: f64,
    pub train_accuracy: f64,
    pub train_macro_f1: f64,
    pub train_macro_auc: Option<f64>,
    pub val_accuracy: Option<f64>,
    pub val_macro_f1: Option<f64>,
    pub val_macro_auc: Option<f64>,
    /// Mean JSD between this epoch's and the previous epoch's probe attention.
    pub mean_probe_jsd: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RngSnapshot {
    seed: [u8; 32],
    stream: u64,
    word_pos: String,
}

impl RngSnapshot {
    fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    fn restore(&self) -> Result<ChaCha8Rng> {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| AsmilError::Schema(format!("bad RNG position `{}`", self.word_pos)))?;
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

/// Complete training state; resuming from it continues bit-identically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: TrainConfig,
    pub epoch: usize,
    pub step: usize,
    pub params: ParamSet,
    pub anchor: Option<AnchorState>,
    pub temporal: Option<TemporalEnsembleStore>,
    pub adam: AdamState,
    rng: RngSnapshot,
    pub trace: AttentionTrace,
    pub history: Vec<EpochMetrics>,
    pub scaler: Option<Standardizer>,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(AsmilError::Schema(format!(
                "checkpoint format {} is not supported (expected {CHECKPOINT_VERSION})",
                ck.format_version
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Applies the stored scaler, if any, to raw bags.
    pub fn prepare(&self, bags: &[Bag]) -> Result<Vec<Bag>> {
        match &self.scaler {
            Some(s) => s.apply_all(bags),
            None => Ok(bags.to_vec()),
        }
    }
}

pub struct Trainer {
    config: TrainConfig,
    params: ParamSet,
    anchor: Option<AnchorState>,
    temporal: Option<TemporalEnsembleStore>,
    adam: AdamState,
    rng: ChaCha8Rng,
    epoch: usize,
    step: usize,
    trace: AttentionTrace,
    history: Vec<EpochMetrics>,
    scaler: Option<Standardizer>,
}

fn check_data(bags: &[Bag], config: &ModelConfig, what: &str) -> Result<()> {
    for bag in bags {
        if bag.dim() != config.input_dim {
            return Err(AsmilError::Schema(format!(
                "{what} bag `{}` has {} features, model expects {}",
                bag.id,
                bag.dim(),
                config.input_dim
            )));
        }
        if bag.label >= config.n_classes {
            return Err(AsmilError::Schema(format!(
                "{what} bag `{}` has label {}, model has {} classes",
                bag.id, bag.label, config.n_classes
            )));
        }
    }
    Ok(())
}

impl Trainer {
    pub fn new(config: TrainConfig, train: &[Bag]) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return Err(AsmilError::domain("training set is empty"));
        }
        check_data(train, &config.model, "training")?;
        let params = init_params(&config.model, config.seed)?;
        let anchor = match config.anchor {
            AnchorStrategy::Model => Some(AnchorState::from_online(
                &params,
                config.momentum,
                config.anchor_map,
            )?),
            _ => None,
        };
        let temporal = match config.anchor {
            AnchorStrategy::Temporal { rho } => Some(TemporalEnsembleStore::new(rho)?),
            _ => None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        let scaler = if config.standardize {
            Some(Standardizer::fit(train)?)
        } else {
            None
        };
        Ok(Self {
            adam: AdamState::new(&params),
            config,
            params,
            anchor,
            temporal,
            rng,
            epoch: 0,
            step: 0,
            trace: AttentionTrace::new(),
            history: Vec::new(),
            scaler,
        })
    }

    pub fn resume(ck: Checkpoint) -> Result<Self> {
        ck.config.validate()?;
        Ok(Self {
            rng: ck.rng.restore()?,
            config: ck.config,
            params: ck.params,
            anchor: ck.anchor,
            temporal: ck.temporal,
            adam: ck.adam,
            epoch: ck.epoch,
            step: ck.step,
            trace: ck.trace,
            history: ck.history,
            scaler: ck.scaler,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            epoch: self.epoch,
            step: self.step,
            params: self.params.clone(),
            anchor: self.anchor.clone(),
            temporal: self.temporal.clone(),
            adam: self.adam.clone(),
            rng: RngSnapshot::capture(&self.rng),
            trace: self.trace.clone(),
            history: self.history.clone(),
            scaler: self.scaler.clone(),
        }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn anchor(&self) -> Option<&AnchorState> {
        self.anchor.as_ref()
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    pub fn history(&self) -> &[EpochMetrics] {
        &self.history
    }

    pub fn trace(&self) -> &AttentionTrace {
        &self.trace
    }

    fn prepare(&self, bags: &[Bag]) -> Result<Vec<Bag>> {
        match &self.scaler {
            Some(s) => s.apply_all(bags),
            None => Ok(bags.to_vec()),
        }
    }

    /// Runs one epoch over `train`, then evaluates and traces probes.
    pub fn run_epoch(&mut self, train: &[Bag], val: &[Bag]) -> Result<EpochMetrics> {
        if self.is_finished() {
            return Err(AsmilError::contract("all configured epochs have run"));
        }
        if train.is_empty() {
            return Err(AsmilError::domain("training set is empty"));
        }
        check_data(train, &self.config.model, "training")?;
        check_data(val, &self.config.model, "validation")?;
        let train = self.prepare(train)?;
        let val = self.prepare(val)?;
        let cfg = self.config.clone();
        let n = train.len();
        let total_steps = cfg.epochs * n;
        let epoch_lr = cosine_lr(self.epoch, cfg.epochs, cfg.lr)?;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.rng);
        let (mut sum_ce, mut sum_as, mut sum_total) = (0.0, 0.0, 0.0);
        for (i, &idx) in order.iter().enumerate() {
            let bag = &train[idx];
            let mask = match cfg.model.architecture {
                Architecture::Asmil => Some(token_drop_mask(
                    cfg.model.n_tokens,
                    cfg.drop_rate,
                    &mut self.rng,
                )?),
                Architecture::Abmil => None,
            };
            let stabilizer = match (&self.anchor, &mut self.temporal) {
                (Some(a), _) => Stabilizer::Anchor(a),
                (None, Some(store)) => Stabilizer::Temporal(store),
                (None, None) => Stabilizer::Off,
            };
            let out = run_loss(bag, &self.params, stabilizer, cfg.beta, mask.as_ref())?;
            if !out.loss.total.is_finite() || !out.grads.is_finite() {
                return Err(AsmilError::NonFiniteLoss {
                    bag_id: bag.id.clone(),
                    epoch: self.epoch,
                    step: self.step,
                });
            }
            if i == 0 {
                if let Some(g) = &out.anchor_grads {
                    if g.max_abs() != 0.0 {
                        return Err(AsmilError::contract(
                            "anchor parameters received a gradient",
                        ));
                    }
                }
            }
            let lr = match cfg.schedule {
                ScheduleGranularity::Epoch => epoch_lr,
                ScheduleGranularity::Step => cosine_lr(self.step, total_steps, cfg.lr)?,
            };
            adam_step(
                &mut self.params,
                &out.grads,
                &mut self.adam,
                lr,
                cfg.weight_decay,
            )?;
            if let Some(anchor) = &mut self.anchor {
                anchor.ema_update(&self.params)?;
            }
            sum_ce += out.loss.ce;
            sum_as += out.loss.stabilization;
            sum_total += out.loss.total;
            self.step += 1;
        }
        self.epoch += 1;

        let train_eval = evaluate(&train, &self.params)?;
        let val_eval = if val.is_empty() {
            None
        } else {
            Some(evaluate(&val, &self.params)?)
        };
        let probe_source: &[Bag] = if val.is_empty() { &train } else { &val };
        let probes = if cfg.trace_all {
            probe_source
        } else {
            &probe_source[..cfg.probe_bags.min(probe_source.len())]
        };
        let mut jsd_sum = 0.0;
        let mut jsd_count = 0;
        for bag in probes {
            let rows = forward(bag, &self.params, None)?.attention;
            if let Some(prev) = self.trace.bags.get(&bag.id).and_then(|h| h.last()) {
                jsd_sum += mean_row_jsd(prev, &rows)?;
                jsd_count += 1;
            }
            self.trace.record(&bag.id, rows)?;
        }
        let metrics = EpochMetrics {
            epoch: self.epoch,
            lr: epoch_lr,
            loss_ce: sum_ce / n as f64,
            loss_as: sum_as / n as f64,
            loss_total: sum_total / n as f64,
            train_accuracy: train_eval.accuracy,
            train_macro_f1: train_eval.macro_f1,
            train_macro_auc: train_eval.macro_auc,
            val_accuracy: val_eval.as_ref().map(|e| e.accuracy),
            val_macro_f1: val_eval.as_ref().map(|e| e.macro_f1),
            val_macro_auc: val_eval.as_ref().and_then(|e| e.macro_auc),
            mean_probe_jsd: (jsd_count > 0).then(|| jsd_sum / jsd_count as f64),
        };
        self.history.push(metrics.clone());
        Ok(metrics)
    }

    pub fn finish(self) -> FitOutput {
        FitOutput {
            params: self.params,
            anchor: self.anchor,
            metrics: self.history,
            trace: self.trace,
            scaler: self.scaler,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitOutput {
    pub params: ParamSet,
    pub anchor: Option<AnchorState>,
    pub metrics: Vec<EpochMetrics>,
    pub trace: AttentionTrace,
    pub scaler: Option<Standardizer>,
}

impl FitOutput {
    /// Applies the fitted scaler, if any, to raw bags.
    pub fn prepare(&self, bags: &[Bag]) -> Result<Vec<Bag>> {
        match &self.scaler {
            Some(s) => s.apply_all(bags),
            None => Ok(bags.to_vec()),
        }
    }

    pub fn evaluate(&self, bags: &[Bag]) -> Result<EvalReport> {
        evaluate(&self.prepare(bags)?, &self.params)
    }
}

/// Trains for `config.epochs` epochs, one bag per step.
pub fn fit(train: &[Bag], val: &[Bag], config: &TrainConfig) -> Result<FitOutput> {
    let mut trainer = Trainer::new(config.clone(), train)?;
    while !trainer.is_finished() {
        trainer.run_epoch(train, val)?;
    }
    Ok(trainer.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchor::stabilization_loss;
    use crate::data::{generate_synthetic, SyntheticBagSpec};
    use crate::model::{OnlineAttention, HEAD_BIAS};

    fn tiny_model(arch: Architecture, d: usize) -> ModelConfig {
        ModelConfig {
            architecture: arch,
            input_dim: d,
            hidden_dim: 8,
            n_tokens: 4,
            n_classes: 2,
            embed_dim: None,
            online_attention: OnlineAttention::Softmax,
        }
    }

    fn synthetic(n: usize, d: usize, seed: u64) -> Vec<Bag> {
        generate_synthetic(&SyntheticBagSpec {
            n_bags: n,
            min_instances: 4,
            max_instances: 10,
            dim: d,
            witness_rate: 0.3,
            signal_shift: 3.0,
            noise_scale: 1.0,
            seed,
        })
        .unwrap()
        .dataset
        .bags
    }

    fn quick_config(arch: Architecture, d: usize, epochs: usize) -> TrainConfig {
        TrainConfig {
            lr: 5e-3,
            epochs,
            ..TrainConfig::new(tiny_model(arch, d))
        }
    }

    #[test]
    fn beta_zero_is_plain_cross_entropy() {
        let bags = synthetic(4, 5, 1);
        let cfg = TrainConfig {
            beta: 0.0,
            ..quick_config(Architecture::Abmil, 5, 1)
        };
        let params = init_params(&cfg.model, 3).unwrap();
        let anchor = AnchorState::from_online(&params, 0.9, AttentionMap::Nsf).unwrap();
        for bag in &bags {
            let l = total_loss(bag, &params, Stabilizer::Anchor(&anchor), &cfg, None).unwrap();
            let ce = crate::model::cross_entropy(
                &forward(bag, &params, None).unwrap().logits,
                bag.label,
            )
            .unwrap();
            assert_eq!(l.total, ce);
            assert_eq!(l.stabilization, 0.0);
        }
    }

    #[test]
    fn matching_attention_adds_nothing() {
        let bags = synthetic(3, 5, 2);
        let cfg = TrainConfig {
            anchor_map: AttentionMap::Softmax { temperature: 1.0 },
            ..quick_config(Architecture::Abmil, 5, 1)
        };
        let params = init_params(&cfg.model, 4).unwrap();
        let anchor = AnchorState::from_online(&params, 0.9, cfg.anchor_map).unwrap();
        for bag in &bags {
            let l = total_loss(bag, &params, Stabilizer::Anchor(&anchor), &cfg, None).unwrap();
            assert!(l.stabilization.abs() < 1e-15);
            assert!((l.total - l.ce).abs() < 1e-15);
        }
    }

    #[test]
    fn total_matches_independent_components() {
        let bags = synthetic(3, 6, 3);
        let cfg = TrainConfig {
            beta: 0.7,
            ..quick_config(Architecture::Asmil, 6, 1)
        };
        let params = init_params(&cfg.model, 5).unwrap();
        let mut perturbed = params.clone();
        perturbed
            .tensors_mut()
            .for_each(|t| t.data_mut().iter_mut().for_each(|v| *v *= 1.3));
        let anchor = AnchorState::from_online(&perturbed, 0.9, AttentionMap::Nsf).unwrap();
        let mask = DropMask::from_keep(vec![true, false, true, true]).unwrap();
        for bag in &bags {
            let l =
                total_loss(bag, &params, Stabilizer::Anchor(&anchor), &cfg, Some(&mask)).unwrap();
            let rec = forward(bag, &params, Some(&mask)).unwrap();
            let ce = crate::model::cross_entropy(&rec.logits, bag.label).unwrap();
            let target = crate::anchor::anchor_attention(bag, &anchor).unwrap();
            let las = stabilization_loss(&rec.attention, &target).unwrap();
            assert!(las > 0.0);
            assert!((l.total - (ce + 0.7 * las)).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_epochs_returns_initial_params() {
        let bags = synthetic(6, 4, 4);
        let cfg = quick_config(Architecture::Abmil, 4, 0);
        let out = fit(&bags, &[], &cfg).unwrap();
        assert_eq!(out.params, init_params(&cfg.model, cfg.seed).unwrap());
        assert!(out.metrics.is_empty());
    }

    #[test]
    fn runs_are_deterministic() {
        let bags = synthetic(10, 4, 5);
        for arch in [Architecture::Abmil, Architecture::Asmil] {
            let cfg = quick_config(arch, 4, 3);
            let a = fit(&bags[..6], &bags[6..], &cfg).unwrap();
            let b = fit(&bags[..6], &bags[6..], &cfg).unwrap();
            assert_eq!(a.metrics, b.metrics);
            assert_eq!(a.params, b.params);
        }
    }

    #[test]
    fn unweighted_anchor_is_inert() {
        let bags = synthetic(8, 4, 6);
        let with = TrainConfig {
            beta: 0.0,
            ..quick_config(Architecture::Asmil, 4, 3)
        };
        let without = TrainConfig {
            anchor: AnchorStrategy::Off,
            ..with.clone()
        };
        let a = fit(&bags, &[], &with).unwrap();
        let b = fit(&bags, &[], &without).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.metrics, b.metrics);
    }

    #[test]
    fn separable_bags_are_learned() {
        let bags = synthetic(40, 6, 7);
        let cfg = TrainConfig {
            lr: 1e-2,
            ..quick_config(Architecture::Abmil, 6, 30)
        };
        let out = fit(&bags, &[], &cfg).unwrap();
        let first = out.metrics[0].loss_ce;
        let last = out.metrics.last().unwrap().loss_ce;
        assert!(last <= 0.5 * first, "{first} -> {last}");
    }

    #[test]
    fn resume_is_bit_identical() {
        let bags = synthetic(10, 4, 8);
        for anchor in [AnchorStrategy::Model, AnchorStrategy::Temporal { rho: 0.8 }] {
            let cfg = TrainConfig {
                anchor,
                standardize: true,
                ..quick_config(Architecture::Asmil, 4, 4)
            };
            let (train, val) = bags.split_at(7);
            let straight = fit(train, val, &cfg).unwrap();
            let mut t = Trainer::new(cfg.clone(), train).unwrap();
            t.run_epoch(train, val).unwrap();
            t.run_epoch(train, val).unwrap();
            let json = t.checkpoint().to_json().unwrap();
            drop(t);
            let mut resumed = Trainer::resume(Checkpoint::from_json(&json).unwrap()).unwrap();
            while !resumed.is_finished() {
                resumed.run_epoch(train, val).unwrap();
            }
            let resumed = resumed.finish();
            assert_eq!(resumed.params, straight.params);
            assert_eq!(resumed.metrics, straight.metrics);
            assert_eq!(resumed.trace, straight.trace);
        }
    }

    #[test]
    fn frozen_model_has_flat_stability_curve() {
        let bags = synthetic(8, 4, 9);
        let cfg = TrainConfig {
            lr: 0.0,
            ..quick_config(Architecture::Abmil, 4, 3)
        };
        let out = fit(&bags[..5], &bags[5..], &cfg).unwrap();
        let curve = crate::diagnostics::stability_curve(&out.trace, 10).unwrap();
        assert!(curve.per_bag.values().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn non_finite_loss_aborts_with_bag_id() {
        let bags = synthetic(4, 4, 10);
        let cfg = quick_config(Architecture::Abmil, 4, 1);
        let mut t = Trainer::new(cfg, &bags).unwrap();
        t.params.get_mut(HEAD_BIAS).unwrap().data_mut()[0] = f64::NAN;
        match t.run_epoch(&bags, &[]) {
            Err(AsmilError::NonFiniteLoss { bag_id, step, .. }) => {
                assert!(bag_id.starts_with("syn_"));
                assert_eq!(step, 0);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn config_validation() {
        let base = quick_config(Architecture::Abmil, 4, 1);
        let bad = [
            TrainConfig {
                beta: -1.0,
                ..base.clone()
            },
            TrainConfig {
                drop_rate: 1.0,
                ..base.clone()
            },
            TrainConfig {
                momentum: 1.0,
                ..base.clone()
            },
            TrainConfig {
                anchor: AnchorStrategy::Temporal { rho: 1.5 },
                ..base.clone()
            },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(AsmilError::Config { .. })));
        }
        let bags = synthetic(2, 5, 1);
        assert!(matches!(
            Trainer::new(base, &bags),
            Err(AsmilError::Schema(_))
        ));
    }
}
