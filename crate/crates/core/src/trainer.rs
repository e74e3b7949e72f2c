//! Two-stage training and evaluation.
//!
//! Stage 1 trains backbone, naive gate, and experts jointly on clean
//! features. Stage 2 freezes them and trains the channel-aware gate on
//! features perturbed by sampled channels.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::channel::{sample_snr_db, ChannelConfig, ChannelDraw, Scenario};
use crate::data::{Dataset, Splits};
use crate::digital::{digital_transmit, DigitalLinkConfig};
use crate::error::{Error, Result};
use crate::moe::{GatingMode, LossMode, MoeDims, MoeModel, NoiseDraws, SigmaVector, Stage};
use crate::tensor::Matrix;

pub use crate::data::{split_dataset, DEFAULT_SPLIT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TransportKind {
    Ideal,
    Analog,
    Digital,
}

impl TransportKind {
    pub fn name(self) -> &'static str {
        match self {
            TransportKind::Ideal => "ideal",
            TransportKind::Analog => "analog",
            TransportKind::Digital => "digital",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ideal" => Ok(Self::Ideal),
            "analog" => Ok(Self::Analog),
            "digital" => Ok(Self::Digital),
            _ => Err(Error::Config(format!("unknown transport '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda: f64,
    /// Stage-2 regularizer weight; `None` reuses `lambda`.
    pub lambda_stage2: Option<f64>,
    /// Joint L2 norm cap on each step's trainable gradients.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    /// Channel distribution sampled during stage 2.
    pub channel: ChannelConfig,
    /// Transport used for the per-epoch test columns.
    pub eval_transport: TransportKind,
    /// Scenario used for the per-epoch validation and test columns.
    pub eval_scenario: Scenario,
    /// Also record digital accuracies after each stage-2 epoch.
    pub eval_digital: bool,
    /// Skip per-epoch evaluation; the accuracy columns are then NaN.
    pub eval_every_epoch: bool,
    pub digital: DigitalLinkConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_stage1: 50,
            epochs_stage2: 30,
            batch_size: 32,
            lr: 0.05,
            lambda: 0.01,
            lambda_stage2: None,
            grad_clip: Some(1.0),
            seed: 0,
            channel: ChannelConfig::default(),
            eval_transport: TransportKind::Analog,
            eval_scenario: Scenario::preset("random-fading").unwrap(),
            eval_digital: true,
            eval_every_epoch: true,
            digital: DigitalLinkConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr {} must be > 0", self.lr)));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda {} must be >= 0", self.lambda)));
        }
        if let Some(l) = self.lambda_stage2 {
            if !(l >= 0.0) || !l.is_finite() {
                return Err(Error::Config(format!("lambda_stage2 {l} must be >= 0")));
            }
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("grad_clip {c} must be > 0")));
            }
        }
        self.channel.validate()?;
        self.digital.validate()
    }

    pub fn stage2_lambda(&self) -> f64 {
        self.lambda_stage2.unwrap_or(self.lambda)
    }

    fn eval_context(&self) -> EvalContext {
        EvalContext {
            channel: self.channel.clone(),
            digital: self.digital.clone(),
            seed: self.seed,
        }
    }
}

/// One row of training history.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub stage: u8,
    /// 1-based within the stage.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub test_accuracy_naive: f64,
    pub test_accuracy_aw: f64,
    pub test_accuracy_naive_digital: Option<f64>,
    pub test_accuracy_aw_digital: Option<f64>,
    /// Mean gate weight per expert over the epoch's training samples.
    pub routing_fraction: Vec<f64>,
}

/// Column order of the history CSV. `routing` holds the per-expert
/// fractions joined by `;`.
pub const HISTORY_HEADER: [&str; 9] = [
    "stage",
    "epoch",
    "train_loss",
    "val_accuracy",
    "test_accuracy_naive",
    "test_accuracy_aw",
    "test_accuracy_naive_digital",
    "test_accuracy_aw_digital",
    "routing",
];

pub fn write_history<W: Write>(w: W, history: &[EpochRecord]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(HISTORY_HEADER)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in history {
        let routing: Vec<String> = r.routing_fraction.iter().map(f64::to_string).collect();
        out.write_record([
            r.stage.to_string(),
            r.epoch.to_string(),
            r.train_loss.to_string(),
            r.val_accuracy.to_string(),
            r.test_accuracy_naive.to_string(),
            r.test_accuracy_aw.to_string(),
            opt(r.test_accuracy_naive_digital),
            opt(r.test_accuracy_aw_digital),
            routing.join(";"),
        ])?;
    }
    out.flush().map_err(|e| Error::io("writing history", e))?;
    Ok(())
}

pub fn save_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let f = std::fs::File::create(path)
        .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    write_history(std::io::BufWriter::new(f), history)
}

/// Shared evaluation settings.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalContext {
    /// Distribution for scenario links that sample their SNR or fading.
    pub channel: ChannelConfig,
    pub digital: DigitalLinkConfig,
    /// Sample `i` draws its channel from stream `i` of this seed, so runs are
    /// reproducible and different scenarios see common random numbers.
    pub seed: u64,
}

impl Default for EvalContext {
    fn default() -> Self {
        TrainConfig::default().eval_context()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub accuracy: f64,
    /// Fraction of samples routed to each expert.
    pub routing_fraction: Vec<f64>,
    /// Mean Shannon entropy (nats) of the gate output.
    pub mean_routing_entropy: f64,
}

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Classifies every sample with one selected expert.
///
/// Each sample draws a fresh channel per expert from `scenario`, gates with
/// `mode`, and ships its feature over the chosen expert's link. Ideal
/// transport bypasses the channel: the gate sees zero noise and the feature
/// arrives intact, whatever the scenario.
pub fn evaluate(
    model: &MoeModel,
    split: &Dataset,
    transport: TransportKind,
    scenario: &Scenario,
    mode: GatingMode,
    ctx: &EvalContext,
) -> Result<EvalResult> {
    if split.is_empty() {
        return Err(Error::InvalidArgument("evaluation split is empty".into()));
    }
    let k = model.num_experts();
    scenario.check_experts(k)?;
    let z = model.extract_features(&split.features)?;
    let mut correct = 0usize;
    let mut counts = vec![0usize; k];
    let mut entropy = 0.0;
    for (i, (row, &label)) in z.iter_rows().zip(&split.labels).enumerate() {
        let mut rng = sample_rng(ctx.seed, i);
        let draws = match transport {
            TransportKind::Ideal => vec![ChannelDraw::ideal(); k],
            _ => scenario.draw_all(k, &ctx.channel, model.feature_power, &mut rng)?,
        };
        let sigma = SigmaVector::new(draws.iter().map(|d| d.sigma_tilde).collect())?;
        let mut send = |z: &[f64], expert: usize| -> Result<Vec<f64>> {
            let d = &draws[expert];
            match transport {
                TransportKind::Ideal => Ok(z.to_vec()),
                TransportKind::Analog => Ok(z
                    .iter()
                    .map(|v| {
                        let n: f64 = StandardNormal.sample(&mut rng);
                        v + d.sigma_tilde * n
                    })
                    .collect()),
                TransportKind::Digital => digital_transmit(z, d.h, d.snr_db, &ctx.digital, &mut rng),
            }
        };
        let out = model.infer_features(row, &sigma, mode, &mut send)?;
        correct += usize::from(out.class == label);
        counts[out.expert] += 1;
        entropy -= out
            .gate
            .weights()
            .iter()
            .filter(|&&g| g > 0.0)
            .map(|g| g * g.ln())
            .sum::<f64>();
    }
    let n = split.len() as f64;
    Ok(EvalResult {
        accuracy: correct as f64 / n,
        routing_fraction: counts.into_iter().map(|c| c as f64 / n).collect(),
        mean_routing_entropy: entropy / n,
    })
}

fn check_compatible(model: &MoeModel, ds: &Dataset) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }
    if ds.input_dim() != model.input_dim() {
        return Err(Error::InvalidDimension(format!(
            "data has {} inputs, model expects {}",
            ds.input_dim(),
            model.input_dim()
        )));
    }
    if ds.num_classes > model.num_classes() {
        return Err(Error::InvalidDimension(format!(
            "data has {} classes, model outputs {}",
            ds.num_classes,
            model.num_classes()
        )));
    }
    Ok(())
}

struct EpochStats {
    loss: f64,
    gate_sums: Vec<f64>,
    samples: usize,
}

impl EpochStats {
    fn new(k: usize) -> Self {
        Self {
            loss: 0.0,
            gate_sums: vec![0.0; k],
            samples: 0,
        }
    }

    fn add(&mut self, loss: f64, gates: &Matrix) {
        self.loss += loss * gates.rows() as f64;
        self.samples += gates.rows();
        for (s, c) in self.gate_sums.iter_mut().zip(gates.column_sums()) {
            *s += c;
        }
    }

    fn finish(self) -> (f64, Vec<f64>) {
        let n = self.samples as f64;
        (self.loss / n, self.gate_sums.into_iter().map(|s| s / n).collect())
    }
}

/// Mean squared feature entry on `ds`; the reference power for SNRs.
pub fn measure_feature_power(model: &MoeModel, ds: &Dataset) -> Result<f64> {
    let p = model.extract_features(&ds.features)?.mean_square();
    Ok(if p > 0.0 && p.is_finite() { p } else { 1.0 })
}

/// Stage 1: joint training under ideal links. Tags the model and records its
/// feature power on the training split.
pub fn stage1_train(mut model: MoeModel, splits: &Splits, cfg: &TrainConfig) -> Result<(MoeModel, Vec<EpochRecord>)> {
    cfg.validate()?;
    check_compatible(&model, &splits.train)?;
    let train = &splits.train;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs_stage1);
    let ctx = cfg.eval_context();

    for epoch in 1..=cfg.epochs_stage1 {
        order.shuffle(&mut rng);
        let mut stats = EpochStats::new(model.num_experts());
        for batch in order.chunks(cfg.batch_size) {
            let b = train.subset(batch);
            let mut out = model.loss(&b.features, &b.labels, cfg.lambda, LossMode::Stage1)?;
            if let Some(c) = cfg.grad_clip {
                MoeModel::clip_gradients(&mut out.grads, c, Stage::Stage1);
            }
            model.apply_gradients(&out.grads, cfg.lr, Stage::Stage1)?;
            stats.add(out.loss, &out.gates);
        }
        let (train_loss, routing_fraction) = stats.finish();
        let (val, test) = if cfg.eval_every_epoch {
            let ideal = Scenario::ideal();
            let val = evaluate(&model, &splits.val, TransportKind::Ideal, &ideal, GatingMode::Naive, &ctx)?;
            let test = evaluate(&model, &splits.test, TransportKind::Ideal, &ideal, GatingMode::Naive, &ctx)?;
            (val.accuracy, test.accuracy)
        } else {
            (f64::NAN, f64::NAN)
        };
        history.push(EpochRecord {
            stage: 1,
            epoch,
            train_loss,
            val_accuracy: val,
            test_accuracy_naive: test,
            // the channel-aware gate starts stage 2 as a copy of the naive one
            test_accuracy_aw: test,
            test_accuracy_naive_digital: None,
            test_accuracy_aw_digital: None,
            routing_fraction,
        });
    }
    model.stage = Stage::Stage1;
    model.feature_power = measure_feature_power(&model, train)?;
    Ok((model, history))
}

/// Samples `B x K` noise levels: SNR from the configured Gaussian, fading
/// from the configured law, referenced to the model's feature power.
pub fn sample_sigma_tilde(
    batch: usize,
    num_experts: usize,
    channel: &ChannelConfig,
    feature_power: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Matrix> {
    let mut sigma = Matrix::zeros(batch, num_experts);
    for v in sigma.as_mut_slice() {
        let snr = sample_snr_db(channel, rng);
        let h = channel.sample_fading(rng);
        *v = ChannelDraw::from_snr(snr, h, channel.p, feature_power)?.sigma_tilde;
    }
    Ok(sigma)
}

/// Stage 2: trains only the channel-aware gate. On the first call after
/// stage 1 the gate is initialized from the naive gate.
pub fn stage2_train(mut model: MoeModel, splits: &Splits, cfg: &TrainConfig) -> Result<(MoeModel, Vec<EpochRecord>)> {
    cfg.validate()?;
    if model.stage < Stage::Stage1 {
        return Err(Error::Precondition("stage 2 needs a model that completed stage 1".into()));
    }
    check_compatible(&model, &splits.train)?;
    if model.stage == Stage::Stage1 {
        model.init_channel_aware_from_naive();
    }
    let train = &splits.train;
    let k = model.num_experts();
    let nf = model.feature_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs_stage2);
    let ctx = cfg.eval_context();

    for epoch in 1..=cfg.epochs_stage2 {
        order.shuffle(&mut rng);
        let mut stats = EpochStats::new(k);
        for batch in order.chunks(cfg.batch_size) {
            let b = train.subset(batch);
            let sigma = sample_sigma_tilde(batch.len(), k, &cfg.channel, model.feature_power, &mut rng)?;
            let draws = NoiseDraws::sample(sigma, nf, &mut rng);
            let mut out = model.loss(&b.features, &b.labels, cfg.stage2_lambda(), LossMode::Stage2(&draws))?;
            if let Some(c) = cfg.grad_clip {
                MoeModel::clip_gradients(&mut out.grads, c, Stage::Stage2);
            }
            model.apply_gradients(&out.grads, cfg.lr, Stage::Stage2)?;
            stats.add(out.loss, &out.gates);
        }
        let (train_loss, routing_fraction) = stats.finish();
        let mut rec = EpochRecord {
            stage: 2,
            epoch,
            train_loss,
            val_accuracy: f64::NAN,
            test_accuracy_naive: f64::NAN,
            test_accuracy_aw: f64::NAN,
            test_accuracy_naive_digital: None,
            test_accuracy_aw_digital: None,
            routing_fraction,
        };
        if cfg.eval_every_epoch {
            let sc = &cfg.eval_scenario;
            let t = cfg.eval_transport;
            let aw = GatingMode::ChannelAware;
            let naive = GatingMode::Naive;
            rec.val_accuracy = evaluate(&model, &splits.val, t, sc, aw, &ctx)?.accuracy;
            rec.test_accuracy_naive = evaluate(&model, &splits.test, t, sc, naive, &ctx)?.accuracy;
            rec.test_accuracy_aw = evaluate(&model, &splits.test, t, sc, aw, &ctx)?.accuracy;
            if cfg.eval_digital && t != TransportKind::Digital {
                let d = TransportKind::Digital;
                rec.test_accuracy_naive_digital = Some(evaluate(&model, &splits.test, d, sc, naive, &ctx)?.accuracy);
                rec.test_accuracy_aw_digital = Some(evaluate(&model, &splits.test, d, sc, aw, &ctx)?.accuracy);
            }
        }
        history.push(rec);
    }
    model.stage = Stage::Stage2;
    Ok((model, history))
}

/// Grows a stage-1 model to `num_experts` by cloning its experts. Clone
/// preferences in the naive gate are jittered by `jitter` logits along
/// directions that average out within every class of `train`.
pub fn duplicate_specialties(
    base: &MoeModel,
    num_experts: usize,
    train: &Dataset,
    jitter: f64,
    seed: u64,
) -> Result<MoeModel> {
    let z = base.extract_features(&train.features)?;
    base.expand_experts(num_experts, &z, &train.labels, jitter, seed)
}

/// How many experts stage 1 trains before cloning.
pub fn base_experts(num_experts: usize, specialties: Option<usize>) -> usize {
    match specialties {
        Some(s) if s >= 1 && s < num_experts => s,
        _ => num_experts,
    }
}

/// Default jitter, in logits, for clone preferences.
pub const CLONE_JITTER: f64 = 0.5;

/// Output of [`train_two_stage`].
#[derive(Debug, Clone)]
pub struct TwoStageRun {
    /// Model after stage 1, before any cloning.
    pub stage1: MoeModel,
    /// Final model.
    pub model: MoeModel,
    pub history: Vec<EpochRecord>,
}

/// Builds a model with `base_experts(K, specialties)` experts seeded from
/// `cfg.seed`, runs stage 1, clones up to `dims.num_experts`, then runs
/// stage 2.
pub fn train_two_stage(
    dims: &MoeDims,
    specialties: Option<usize>,
    splits: &Splits,
    cfg: &TrainConfig,
) -> Result<TwoStageRun> {
    let k = dims.num_experts;
    let base_dims = MoeDims {
        num_experts: base_experts(k, specialties),
        ..dims.clone()
    };
    let initial = MoeModel::new(&base_dims, cfg.seed)?;
    let (stage1, mut history) = stage1_train(initial, splits, cfg)?;
    let model = if stage1.num_experts() < k {
        duplicate_specialties(&stage1, k, &splits.train, CLONE_JITTER, cfg.seed)?
    } else {
        stage1.clone()
    };
    let (model, h2) = stage2_train(model, splits, cfg)?;
    history.extend(h2);
    Ok(TwoStageRun { stage1, model, history })
}
