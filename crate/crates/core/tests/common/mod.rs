#![allow(dead_code)]

use channel_moe::channel::Scenario;
use channel_moe::data::{generate_synthetic, split_dataset, Splits, SyntheticSpec, DEFAULT_SPLIT};
use channel_moe::experiment::{grow, train_stage1, DataSource, ExperimentConfig};
use channel_moe::moe::GatingMode;
use channel_moe::tensor::{Gradients, Matrix, MlpParams};
use channel_moe::trainer::{evaluate, stage2_train, EvalContext, EvalResult, TransportKind};
use channel_moe::MoeModel;

/// Relative error with a floor on the scale, so entries that are zero up
/// to rounding compare absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-6)
}

/// Worst relative error between `analytic` and central differences of
/// `loss` over every parameter of `params`.
pub fn fd_worst(params: &MlpParams, analytic: &Gradients, eps: f64, loss: impl Fn(&MlpParams) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    for l in 0..params.num_layers() {
        for idx in 0..params.weights[l].as_slice().len() {
            let mut p = params.clone();
            p.weights[l].as_mut_slice()[idx] += eps;
            let mut m = params.clone();
            m.weights[l].as_mut_slice()[idx] -= eps;
            let fd = (loss(&p) - loss(&m)) / (2.0 * eps);
            worst = worst.max(rel_err(fd, analytic.weights[l].as_slice()[idx]));
        }
        for idx in 0..params.biases[l].len() {
            let mut p = params.clone();
            p.biases[l][idx] += eps;
            let mut m = params.clone();
            m.biases[l][idx] -= eps;
            let fd = (loss(&p) - loss(&m)) / (2.0 * eps);
            worst = worst.max(rel_err(fd, analytic.biases[l][idx]));
        }
    }
    worst
}

/// True when some hidden unit's pre-activation is within `tol` of the ReLU
/// kink, where a finite-difference step could cross it.
pub fn near_relu_kink(p: &MlpParams, x: &Matrix, tol: f64) -> bool {
    let (_, cache) = p.forward(x).unwrap();
    (0..p.num_layers() - 1).any(|l| {
        let mut z = cache.layer_input(l).matmul_transposed(&p.weights[l]).unwrap();
        for i in 0..z.rows() {
            z.row_mut(i).iter_mut().zip(&p.biases[l]).for_each(|(v, b)| *v += b);
        }
        z.as_slice().iter().any(|v| v.abs() < tol)
    })
}

/// Serialized parameters, for byte-level comparisons.
pub fn param_bytes(p: &MlpParams) -> Vec<u8> {
    let mut buf = Vec::new();
    p.write_to(&mut buf).unwrap();
    buf
}

/// `sum(C .* f(X))` for a linear head; its gradient wrt the logits is `C`.
pub fn linear_probe_loss(params: &MlpParams, x: &Matrix, c: &Matrix) -> f64 {
    let out = params.predict(x).unwrap();
    out.as_slice().iter().zip(c.as_slice()).map(|(a, b)| a * b).sum()
}

/// Synthetic task used by the experiment-level checks.
pub fn desk_config(seed: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig::defaults(seed, "unused").unwrap();
    if let DataSource::Synthetic(s) = &mut c.data {
        s.samples_per_class = 1000;
    }
    c.model.experts = 8;
    c.model.specialties = Some(4);
    c.train.lambda = 0.3;
    c.train.lambda_stage2 = Some(0.01);
    c.train.epochs_stage2 = 90;
    c.train.eval_every_epoch = false;
    c
}

pub fn splits_for(cfg: &ExperimentConfig) -> Splits {
    match &cfg.data {
        DataSource::Synthetic(s) => split_dataset(&generate_synthetic(s).unwrap(), DEFAULT_SPLIT, cfg.seed)
            .unwrap()
            .normalized()
            .unwrap()
            .0,
        DataSource::Tabular(_) => unreachable!("desk tests use synthetic data"),
    }
}

/// Result of running both stages for one seed and several K.
pub struct Run {
    pub splits: Splits,
    pub stage1: MoeModel,
    /// `(K, stage-2 model)` in the order requested.
    pub models: Vec<(usize, MoeModel)>,
    pub ctx: EvalContext,
}

/// Stage 1 once with `S` experts, then clone and run stage 2 for each K.
pub fn run_pipeline(cfg: &ExperimentConfig, ks: &[usize]) -> Run {
    let splits = splits_for(cfg);
    let base = cfg.model.specialties.unwrap_or(ks[0]);
    let (stage1, _) = train_stage1(cfg, &splits, base).unwrap();
    let models = ks
        .iter()
        .map(|&k| {
            let grown = grow(cfg, &stage1, &splits, k).unwrap();
            (k, stage2_train(grown, &splits, &cfg.train).unwrap().0)
        })
        .collect();
    let ctx = EvalContext {
        channel: cfg.train.channel.clone(),
        digital: cfg.train.digital.clone(),
        seed: cfg.seed,
    };
    Run {
        splits,
        stage1,
        models,
        ctx,
    }
}

impl Run {
    pub fn eval(&self, model: &MoeModel, t: TransportKind, scenario: &Scenario, mode: GatingMode) -> EvalResult {
        evaluate(model, &self.splits.test, t, scenario, mode, &self.ctx).unwrap()
    }

    pub fn model(&self, k: usize) -> &MoeModel {
        &self.models.iter().find(|(kk, _)| *kk == k).unwrap().1
    }

    /// Channel-aware minus naive analog accuracy on `scenario`.
    pub fn gain(&self, k: usize, scenario: &Scenario) -> (f64, f64) {
        let m = self.model(k);
        let naive = self.eval(m, TransportKind::Analog, scenario, GatingMode::Naive).accuracy;
        let aw = self.eval(m, TransportKind::Analog, scenario, GatingMode::ChannelAware).accuracy;
        (naive, aw)
    }
}

pub fn small_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        seed,
        ..SyntheticSpec::default()
    }
}
