//! Mixture-of-experts composition with naive and channel-aware gating.
//!
//! The server runs a backbone `F` producing features `z`, a gate choosing
//! among `K` experts, and ships `z` over the selected expert's link. The
//! naive gate sees only `z`; the channel-aware gate also sees the per-expert
//! effective noise levels `sigma_tilde`, compressed through `ln(1 + s)`.
//!
//! Training mixes expert logits with the gate weights and applies a single
//! softmax to the mixture. Inference selects one expert by argmax.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::codec;
use crate::error::{Error, Result};
use crate::tensor::{argmax, cross_entropy, dot, softmax, Gradients, Matrix, MlpParams, OutputHead};

const CHECKPOINT_MAGIC: &[u8; 8] = b"CHMOECKP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Point on the `K`-simplex produced by a gate for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct GateOutput(Vec<f64>);

impl GateOutput {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if weights.is_empty()
            || weights.iter().any(|w| !(*w >= 0.0))
            || (sum - 1.0).abs() > 1e-9
        {
            return Err(Error::InvalidArgument(format!(
                "gate weights {weights:?} are not on the simplex"
            )));
        }
        Ok(Self(weights))
    }

    pub fn weights(&self) -> &[f64] {
        &self.0
    }

    /// Index of the largest weight, lowest index on ties.
    pub fn select_expert(&self) -> usize {
        argmax(&self.0)
    }
}

/// Per-expert effective noise standard deviations, in feature units.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaVector(Vec<f64>);

impl SigmaVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(bad) = values.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
            return Err(Error::InvalidChannel(format!(
                "sigma_tilde entry {bad} must be finite and >= 0"
            )));
        }
        Ok(Self(values))
    }

    pub fn zeros(k: usize) -> Self {
        Self(vec![0.0; k])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Gate input encoding of a noise level.
#[inline]
pub fn condition_sigma(s: f64) -> f64 {
    s.ln_1p()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    Initialized,
    Stage1,
    Stage2,
}

impl Stage {
    fn tag(self) -> u8 {
        match self {
            Stage::Initialized => 0,
            Stage::Stage1 => 1,
            Stage::Stage2 => 2,
        }
    }

    fn from_tag(t: u8) -> Result<Self> {
        match t {
            0 => Ok(Stage::Initialized),
            1 => Ok(Stage::Stage1),
            2 => Ok(Stage::Stage2),
            _ => Err(Error::Checkpoint(format!("unknown stage tag {t}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Initialized => "init",
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GatingMode {
    Naive,
    ChannelAware,
}

impl GatingMode {
    pub fn name(self) -> &'static str {
        match self {
            GatingMode::Naive => "naive",
            GatingMode::ChannelAware => "channel_aware",
        }
    }
}

/// Layer widths of every block.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeDims {
    pub input_dim: usize,
    pub feature_dim: usize,
    pub num_experts: usize,
    pub num_classes: usize,
    pub backbone_hidden: Vec<usize>,
    pub gate_hidden: Vec<usize>,
    pub expert_hidden: Vec<usize>,
}

impl MoeDims {
    /// Desk-scale defaults: `16 -> 32 -> 16` backbone, `16 -> 64 -> K` gate,
    /// `16 -> 32 -> C` experts.
    pub fn desk(input_dim: usize, num_experts: usize, num_classes: usize) -> Self {
        Self {
            input_dim,
            feature_dim: 16,
            num_experts,
            num_classes,
            backbone_hidden: vec![32],
            gate_hidden: vec![64],
            expert_hidden: vec![32],
        }
    }

    fn stack(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
        let mut dims = Vec::with_capacity(hidden.len() + 2);
        dims.push(input);
        dims.extend_from_slice(hidden);
        dims.push(output);
        dims
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeModel {
    pub backbone: MlpParams,
    pub gating_naive: MlpParams,
    pub gating_aw: MlpParams,
    pub experts: Vec<MlpParams>,
    pub stage: Stage,
    /// Mean squared feature entry on the training set; the SNR reference.
    pub feature_power: f64,
    /// Base specialty of each expert; clones share a specialty.
    pub specialty: Vec<usize>,
}

/// Gradients for every block; frozen blocks come back as zeros.
#[derive(Debug, Clone)]
pub struct MoeGradients {
    pub backbone: Gradients,
    pub gating_naive: Gradients,
    pub gating_aw: Gradients,
    pub experts: Vec<Gradients>,
}

/// Channel realizations for one stage-2 batch.
#[derive(Debug, Clone)]
pub struct NoiseDraws {
    /// `B x K` effective noise levels.
    pub sigma_tilde: Matrix,
    /// `K` matrices of shape `B x N_F` with standard normal entries.
    pub noise: Vec<Matrix>,
}

impl NoiseDraws {
    pub fn zeros(batch: usize, num_experts: usize, feature_dim: usize) -> Self {
        Self {
            sigma_tilde: Matrix::zeros(batch, num_experts),
            noise: vec![Matrix::zeros(batch, feature_dim); num_experts],
        }
    }

    /// Standard normal noise for each expert with the given noise levels.
    pub fn sample<R: Rng + ?Sized>(sigma_tilde: Matrix, feature_dim: usize, rng: &mut R) -> Self {
        let (b, k) = sigma_tilde.shape();
        let noise = (0..k)
            .map(|_| {
                let data = (0..b * feature_dim)
                    .map(|_| StandardNormal.sample(rng))
                    .collect();
                Matrix::from_vec(b, feature_dim, data).unwrap()
            })
            .collect();
        Self { sigma_tilde, noise }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum LossMode<'a> {
    /// Ideal links; every expert sees the same clean features.
    Stage1,
    /// Noisy per-expert features; only the channel-aware gate is trainable.
    Stage2(&'a NoiseDraws),
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    /// `cross_entropy + lambda * balance`.
    pub loss: f64,
    pub cross_entropy: f64,
    pub balance: f64,
    /// Gate weights for the batch, `B x K`.
    pub gates: Matrix,
    pub grads: MoeGradients,
}

/// Result of routing one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub expert: usize,
    pub class: usize,
    pub gate: GateOutput,
}

/// Moves a feature vector to the chosen expert.
pub trait Transport {
    fn transmit(&mut self, z: &[f64], expert: usize) -> Result<Vec<f64>>;
}

impl<F> Transport for F
where
    F: FnMut(&[f64], usize) -> Result<Vec<f64>>,
{
    fn transmit(&mut self, z: &[f64], expert: usize) -> Result<Vec<f64>> {
        self(z, expert)
    }
}

/// Identity transport.
pub struct IdealTransport;

impl Transport for IdealTransport {
    fn transmit(&mut self, z: &[f64], _expert: usize) -> Result<Vec<f64>> {
        Ok(z.to_vec())
    }
}

const INIT_STREAM: u64 = 0x4d6f45;

impl MoeModel {
    pub fn new(dims: &MoeDims, seed: u64) -> Result<Self> {
        if dims.num_experts == 0 {
            return Err(Error::InvalidArgument("need at least one expert".into()));
        }
        // Own stream so data generated from the same seed stays independent.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(INIT_STREAM);
        let backbone = MlpParams::init_with_rng(
            &MoeDims::stack(dims.input_dim, &dims.backbone_hidden, dims.feature_dim),
            OutputHead::Linear,
            &mut rng,
        )?;
        let gating_naive = MlpParams::init_with_rng(
            &MoeDims::stack(dims.feature_dim, &dims.gate_hidden, dims.num_experts),
            OutputHead::Softmax,
            &mut rng,
        )?;
        let experts = (0..dims.num_experts)
            .map(|_| {
                MlpParams::init_with_rng(
                    &MoeDims::stack(dims.feature_dim, &dims.expert_hidden, dims.num_classes),
                    OutputHead::Linear,
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let gating_aw = extend_gate_for_sigma(&gating_naive, dims.num_experts);
        Ok(Self {
            backbone,
            gating_naive,
            gating_aw,
            experts,
            stage: Stage::Initialized,
            feature_power: 1.0,
            specialty: (0..dims.num_experts).collect(),
        })
    }

    /// Assembles a model from blocks, checking that the shapes fit together.
    pub fn from_parts(
        backbone: MlpParams,
        gating_naive: MlpParams,
        gating_aw: MlpParams,
        experts: Vec<MlpParams>,
    ) -> Result<Self> {
        let k = experts.len();
        let model = Self {
            backbone,
            gating_naive,
            gating_aw,
            experts,
            stage: Stage::Initialized,
            feature_power: 1.0,
            specialty: (0..k).collect(),
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.experts.len();
        let nf = self.backbone.output_dim();
        let bad = |m: String| Err(Error::InvalidDimension(m));
        if k == 0 {
            return bad("model has no experts".into());
        }
        let n_out = self.experts[0].output_dim();
        if self
            .experts
            .iter()
            .any(|e| e.input_dim() != nf || e.output_dim() != n_out)
        {
            return bad("experts must map N_F to a common N_out".into());
        }
        if self.gating_naive.input_dim() != nf || self.gating_naive.output_dim() != k {
            return bad(format!(
                "naive gate is {}->{}, expected {nf}->{k}",
                self.gating_naive.input_dim(),
                self.gating_naive.output_dim()
            ));
        }
        if self.gating_aw.input_dim() != nf + k || self.gating_aw.output_dim() != k {
            return bad(format!(
                "channel-aware gate is {}->{}, expected {}->{k}",
                self.gating_aw.input_dim(),
                self.gating_aw.output_dim(),
                nf + k
            ));
        }
        if self.specialty.len() != k {
            return bad("specialty map length".into());
        }
        Ok(())
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.backbone.output_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.backbone.input_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.experts[0].output_dim()
    }

    pub fn extract_features(&self, x: &Matrix) -> Result<Matrix> {
        self.backbone.predict(x)
    }

    /// Naive gate weights, one simplex row per sample.
    pub fn gate_naive(&self, z: &Matrix) -> Result<Matrix> {
        self.gating_naive.predict(z)
    }

    /// Channel-aware gate weights. `sigma` is `B x K`, or `1 x K` to use the
    /// same noise levels for every row.
    pub fn gate_channel_aware(&self, z: &Matrix, sigma: &Matrix) -> Result<Matrix> {
        let input = self.channel_aware_input(z, sigma)?;
        self.gating_aw.predict(&input)
    }

    fn channel_aware_input(&self, z: &Matrix, sigma: &Matrix) -> Result<Matrix> {
        let k = self.num_experts();
        if sigma.cols() != k {
            return Err(Error::InvalidDimension(format!(
                "sigma has {} columns for {k} experts",
                sigma.cols()
            )));
        }
        if sigma.rows() != z.rows() && sigma.rows() != 1 {
            return Err(Error::InvalidDimension(format!(
                "sigma has {} rows for a batch of {}",
                sigma.rows(),
                z.rows()
            )));
        }
        if let Some(bad) = sigma
            .as_slice()
            .iter()
            .find(|v| !(**v >= 0.0 && v.is_finite()))
        {
            return Err(Error::InvalidChannel(format!(
                "sigma_tilde entry {bad} must be finite and >= 0"
            )));
        }
        let conditioned = if sigma.rows() == z.rows() {
            sigma.map(condition_sigma)
        } else {
            let row: Vec<f64> = sigma.row(0).iter().map(|&s| condition_sigma(s)).collect();
            let data = row.iter().copied().cycle().take(z.rows() * k).collect();
            Matrix::from_vec(z.rows(), k, data)?
        };
        z.hconcat(&conditioned)
    }

    /// Logits of every expert on its own input.
    pub fn expert_logits(&self, per_expert_features: &[Matrix]) -> Result<Vec<Matrix>> {
        if per_expert_features.len() != self.num_experts() {
            return Err(Error::InvalidDimension(format!(
                "{} feature matrices for {} experts",
                per_expert_features.len(),
                self.num_experts()
            )));
        }
        self.experts
            .iter()
            .zip(per_expert_features)
            .map(|(e, z)| e.predict(z))
            .collect()
    }

    /// `sum_k g[:, k] * Q_k(z_k)`, computed on logits.
    pub fn mixture_forward(&self, gates: &Matrix, per_expert_features: &[Matrix]) -> Result<Matrix> {
        let logits = self.expert_logits(per_expert_features)?;
        mix_logits(gates, &logits)
    }

    /// Routes one feature vector: gate, pick one expert, transport the
    /// feature over that expert's link, and classify.
    pub fn infer_features<T: Transport + ?Sized>(
        &self,
        z: &[f64],
        sigma: &SigmaVector,
        mode: GatingMode,
        transport: &mut T,
    ) -> Result<Inference> {
        let k = self.num_experts();
        if sigma.len() != k {
            return Err(Error::InvalidDimension(format!(
                "sigma has {} entries for {k} experts",
                sigma.len()
            )));
        }
        let zm = Matrix::row_vector(z);
        let gates = match mode {
            GatingMode::Naive => self.gate_naive(&zm)?,
            GatingMode::ChannelAware => {
                self.gate_channel_aware(&zm, &Matrix::row_vector(sigma.as_slice()))?
            }
        };
        let gate = GateOutput(gates.row(0).to_vec());
        let expert = gate.select_expert();
        let received = transport.transmit(z, expert)?;
        let logits = self.experts[expert].predict(&Matrix::row_vector(&received))?;
        Ok(Inference {
            expert,
            class: argmax(logits.row(0)),
            gate,
        })
    }

    /// [`Self::infer_features`] starting from a raw `1 x N_in` sample.
    pub fn infer<T: Transport + ?Sized>(
        &self,
        x: &Matrix,
        sigma: &SigmaVector,
        mode: GatingMode,
        transport: &mut T,
    ) -> Result<usize> {
        if x.rows() != 1 {
            return Err(Error::InvalidDimension(format!(
                "inference takes one sample, got {}",
                x.rows()
            )));
        }
        let z = self.extract_features(x)?;
        Ok(self.infer_features(z.row(0), sigma, mode, transport)?.class)
    }

    /// Batch loss and gradients.
    ///
    /// Stage 1 trains backbone, naive gate, and experts on clean features.
    /// Stage 2 feeds expert `k` the features `z + sigma_tilde[:, k] * n_k`,
    /// gates with the channel-aware network, and only that gate receives
    /// gradients.
    pub fn loss(&self, x: &Matrix, labels: &[usize], lambda: f64, mode: LossMode<'_>) -> Result<LossOutput> {
        if x.rows() != labels.len() {
            return Err(Error::InvalidDimension(format!(
                "{} samples but {} labels",
                x.rows(),
                labels.len()
            )));
        }
        if x.rows() == 0 {
            return Err(Error::InvalidBatch("empty batch".into()));
        }
        match mode {
            LossMode::Stage1 => self.stage1_loss(x, labels, lambda),
            LossMode::Stage2(draws) => self.stage2_loss(x, labels, lambda, draws),
        }
    }

    fn zero_grads(&self) -> MoeGradients {
        MoeGradients {
            backbone: Gradients::zeros_like(&self.backbone),
            gating_naive: Gradients::zeros_like(&self.gating_naive),
            gating_aw: Gradients::zeros_like(&self.gating_aw),
            experts: self.experts.iter().map(Gradients::zeros_like).collect(),
        }
    }

    fn stage1_loss(&self, x: &Matrix, labels: &[usize], lambda: f64) -> Result<LossOutput> {
        let (z, backbone_cache) = self.backbone.forward(x)?;
        let (gates, gate_cache) = self.gating_naive.forward(&z)?;
        let mut expert_out = Vec::with_capacity(self.num_experts());
        let mut expert_caches = Vec::with_capacity(self.num_experts());
        for e in &self.experts {
            let (o, c) = e.forward(&z)?;
            expert_out.push(o);
            expert_caches.push(c);
        }
        let head = mixture_head(&gates, &expert_out, labels, lambda)?;

        let mut grads = self.zero_grads();
        let (g_gate, mut dz) = self.gating_naive.backward(&gate_cache, &head.grad_gate_logits)?;
        grads.gating_naive = g_gate;
        for (k, (e, cache)) in self.experts.iter().zip(&expert_caches).enumerate() {
            let (g_e, dz_e) = e.backward(cache, &head.grad_expert_logits[k])?;
            grads.experts[k] = g_e;
            dz.add_assign(&dz_e)?;
        }
        grads.backbone = self.backbone.backward(&backbone_cache, &dz)?.0;

        Ok(LossOutput {
            loss: head.cross_entropy + lambda * head.balance,
            cross_entropy: head.cross_entropy,
            balance: head.balance,
            gates,
            grads,
        })
    }

    fn stage2_loss(&self, x: &Matrix, labels: &[usize], lambda: f64, draws: &NoiseDraws) -> Result<LossOutput> {
        let k = self.num_experts();
        let b = x.rows();
        let nf = self.feature_dim();
        if draws.sigma_tilde.shape() != (b, k) {
            return Err(Error::InvalidDimension(format!(
                "sigma draws {:?}, expected ({b}, {k})",
                draws.sigma_tilde.shape()
            )));
        }
        if draws.noise.len() != k || draws.noise.iter().any(|n| n.shape() != (b, nf)) {
            return Err(Error::InvalidDimension("noise draws do not match batch".into()));
        }
        let z = self.extract_features(x)?;
        let mut expert_out = Vec::with_capacity(k);
        for (j, e) in self.experts.iter().enumerate() {
            let mut noisy = z.clone();
            for i in 0..b {
                let s = draws.sigma_tilde[(i, j)];
                if s != 0.0 {
                    for (v, n) in noisy.row_mut(i).iter_mut().zip(draws.noise[j].row(i)) {
                        *v += s * n;
                    }
                }
            }
            expert_out.push(e.predict(&noisy)?);
        }
        let aw_input = self.channel_aware_input(&z, &draws.sigma_tilde)?;
        let (gates, gate_cache) = self.gating_aw.forward(&aw_input)?;
        let head = mixture_head(&gates, &expert_out, labels, lambda)?;

        let mut grads = self.zero_grads();
        grads.gating_aw = self.gating_aw.backward(&gate_cache, &head.grad_gate_logits)?.0;
        Ok(LossOutput {
            loss: head.cross_entropy + lambda * head.balance,
            cross_entropy: head.cross_entropy,
            balance: head.balance,
            gates,
            grads,
        })
    }

    /// Rescales the trainable blocks of `grads` so their joint L2 norm is at
    /// most `max_norm`. Returns the norm before clipping.
    pub fn clip_gradients(grads: &mut MoeGradients, max_norm: f64, stage: Stage) -> f64 {
        let blocks: Vec<&mut Gradients> = match stage {
            Stage::Stage1 => std::iter::once(&mut grads.backbone)
                .chain(std::iter::once(&mut grads.gating_naive))
                .chain(grads.experts.iter_mut())
                .collect(),
            Stage::Stage2 => vec![&mut grads.gating_aw],
            Stage::Initialized => Vec::new(),
        };
        let norm = blocks.iter().map(|g| g.squared_norm()).sum::<f64>().sqrt();
        if norm > max_norm && norm > 0.0 {
            let f = max_norm / norm;
            for g in blocks {
                g.scale(f);
            }
        }
        norm
    }

    /// Applies SGD to the blocks that are trainable in `stage`.
    pub fn apply_gradients(&mut self, grads: &MoeGradients, lr: f64, stage: Stage) -> Result<()> {
        match stage {
            Stage::Stage1 => {
                self.backbone.sgd_step(&grads.backbone, lr)?;
                self.gating_naive.sgd_step(&grads.gating_naive, lr)?;
                for (e, g) in self.experts.iter_mut().zip(&grads.experts) {
                    e.sgd_step(g, lr)?;
                }
            }
            Stage::Stage2 => self.gating_aw.sgd_step(&grads.gating_aw, lr)?,
            Stage::Initialized => {
                return Err(Error::InvalidArgument("no trainable blocks before stage 1".into()))
            }
        }
        Ok(())
    }

    /// Re-seeds the channel-aware gate from the naive gate so that
    /// `G_AW(z, 0) = G(z)`; the noise-level inputs start with zero weights.
    pub fn init_channel_aware_from_naive(&mut self) {
        self.gating_aw = extend_gate_for_sigma(&self.gating_naive, self.num_experts());
    }

    /// Grows the model to `num_experts` by cloning experts.
    ///
    /// Experts are laid out in contiguous blocks: clones of base expert `s`
    /// sit next to each other. The naive gate's output row for `s` is copied
    /// to every clone with its bias lowered by `ln(r_s)`, so the mixture is
    /// unchanged up to a small perturbation. Each clone row also gets a
    /// random direction, orthogonal to the per-class mean of the gate's last
    /// hidden layer on `features`, scaled to `jitter` logits of spread. The
    /// gate therefore splits each class's traffic between clones instead of
    /// always picking the first one, while staying blind to the channel.
    pub fn expand_experts(
        &self,
        num_experts: usize,
        features: &Matrix,
        labels: &[usize],
        jitter: f64,
        seed: u64,
    ) -> Result<MoeModel> {
        let base = self.num_experts();
        if num_experts < base {
            return Err(Error::InvalidArgument(format!(
                "cannot shrink {base} experts to {num_experts}"
            )));
        }
        if features.rows() != labels.len() || features.cols() != self.feature_dim() {
            return Err(Error::InvalidDimension("expansion features/labels".into()));
        }
        // contiguous blocks; the first `num_experts % base` specialties get one extra clone
        let mut owner = Vec::with_capacity(num_experts);
        for s in 0..base {
            let r = num_experts / base + usize::from(s < num_experts % base);
            owner.extend(std::iter::repeat_n(s, r));
        }
        let clones_of = |s: usize| owner.iter().filter(|&&o| o == s).count();

        let experts = owner.iter().map(|&s| self.experts[s].clone()).collect();
        let specialty = owner.iter().map(|&s| self.specialty[s]).collect();

        let mut gate = self.gating_naive.clone();
        let last = gate.num_layers() - 1;
        let w = &self.gating_naive.weights[last];
        let b = &self.gating_naive.biases[last];
        let hidden_dim = w.cols();
        let mut new_w = Matrix::zeros(num_experts, hidden_dim);
        let mut new_b = vec![0.0; num_experts];
        for (j, &s) in owner.iter().enumerate() {
            new_w.row_mut(j).copy_from_slice(w.row(s));
            new_b[j] = b[s] - (clones_of(s) as f64).ln();
        }

        if num_experts > base && jitter > 0.0 && features.rows() > 0 {
            let (_, cache) = self.gating_naive.forward(features)?;
            let hidden = cache_layer_input(&cache, last);
            let basis = class_mean_basis(&hidden, labels);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for (j, &s) in owner.iter().enumerate() {
                if clones_of(s) < 2 {
                    continue;
                }
                let mut dir: Vec<f64> = (0..hidden_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                for q in &basis {
                    let c = dot(&dir, q);
                    dir.iter_mut().zip(q).for_each(|(d, qv)| *d -= c * qv);
                }
                let proj: Vec<f64> = hidden.iter_rows().map(|h| dot(&dir, h)).collect();
                let mean = proj.iter().sum::<f64>() / proj.len() as f64;
                let spread = (proj.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / proj.len() as f64).sqrt();
                if spread > 1e-12 {
                    let scale = jitter / spread;
                    for (wv, d) in new_w.row_mut(j).iter_mut().zip(&dir) {
                        *wv += scale * d;
                    }
                }
            }
        }
        gate.weights[last] = new_w;
        gate.biases[last] = new_b;
        let mut dims = gate.layer_dims().to_vec();
        *dims.last_mut().unwrap() = num_experts;
        let gating_naive = rebuild_with_dims(gate, &dims)?;

        let gating_aw = extend_gate_for_sigma(&gating_naive, num_experts);
        let model = MoeModel {
            backbone: self.backbone.clone(),
            gating_naive,
            gating_aw,
            experts,
            stage: self.stage,
            feature_power: self.feature_power,
            specialty,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC).map_err(|e| Error::io("write", e))?;
        codec::write_u32(w, CHECKPOINT_VERSION)?;
        codec::write_u8(w, self.stage.tag())?;
        codec::write_u32(w, self.num_experts() as u32)?;
        codec::write_u32(w, self.feature_dim() as u32)?;
        codec::write_u32(w, self.num_classes() as u32)?;
        codec::write_f64(w, self.feature_power)?;
        for &s in &self.specialty {
            codec::write_u32(w, s as u32)?;
        }
        self.backbone.write_to(w)?;
        self.gating_naive.write_to(w)?;
        self.gating_aw.write_to(w)?;
        for e in &self.experts {
            e.write_to(w)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        codec::expect_magic(r, CHECKPOINT_MAGIC)?;
        let version = codec::read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let stage = Stage::from_tag(codec::read_u8(r)?)?;
        let k = codec::read_u32(r)? as usize;
        let nf = codec::read_u32(r)? as usize;
        let n_out = codec::read_u32(r)? as usize;
        if k == 0 || k > 4096 {
            return Err(Error::Checkpoint(format!("implausible expert count {k}")));
        }
        let feature_power = codec::read_f64(r)?;
        let specialty = (0..k)
            .map(|_| codec::read_u32(r).map(|s| s as usize))
            .collect::<Result<Vec<_>>>()?;
        let backbone = MlpParams::read_from(r)?;
        let gating_naive = MlpParams::read_from(r)?;
        let gating_aw = MlpParams::read_from(r)?;
        let experts = (0..k).map(|_| MlpParams::read_from(r)).collect::<Result<Vec<_>>>()?;
        let model = MoeModel {
            backbone,
            gating_naive,
            gating_aw,
            experts,
            stage,
            feature_power,
            specialty,
        };
        model
            .validate()
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        if model.feature_dim() != nf || model.num_classes() != n_out {
            return Err(Error::Checkpoint("header dims disagree with blocks".into()));
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::read_from(&mut bytes.as_slice())
    }

    /// Serialized backbone and expert blocks; unchanged by stage 2.
    pub fn frozen_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.backbone.write_to(&mut buf).unwrap();
        for e in &self.experts {
            e.write_to(&mut buf).unwrap();
        }
        buf
    }
}

/// `R_bal = || mean_i g_i - 1/K ||^2`.
pub fn balance_regularizer(gates: &Matrix) -> Result<f64> {
    Ok(balance_with_grad(gates)?.0)
}

/// Balance value and its gradient with respect to each gate entry.
pub fn balance_with_grad(gates: &Matrix) -> Result<(f64, Matrix)> {
    let (b, k) = gates.shape();
    if b == 0 || k == 0 {
        return Err(Error::InvalidBatch(format!("gate batch is {b}x{k}")));
    }
    let inv_k = 1.0 / k as f64;
    let dev: Vec<f64> = gates
        .column_sums()
        .into_iter()
        .map(|s| s / b as f64 - inv_k)
        .collect();
    let value = dev.iter().map(|d| d * d).sum();
    let row: Vec<f64> = dev.iter().map(|d| 2.0 * d / b as f64).collect();
    let data = row.iter().copied().cycle().take(b * k).collect();
    Ok((value, Matrix::from_vec(b, k, data)?))
}

/// Row-wise convex combination of expert logits.
pub fn mix_logits(gates: &Matrix, expert_logits: &[Matrix]) -> Result<Matrix> {
    let (b, k) = gates.shape();
    if expert_logits.len() != k {
        return Err(Error::InvalidDimension(format!(
            "{} expert outputs for {k} gate columns",
            expert_logits.len()
        )));
    }
    let c = expert_logits[0].cols();
    if expert_logits.iter().any(|o| o.shape() != (b, c)) {
        return Err(Error::InvalidDimension("expert outputs differ in shape".into()));
    }
    let mut out = Matrix::zeros(b, c);
    for (j, o) in expert_logits.iter().enumerate() {
        for i in 0..b {
            let g = gates[(i, j)];
            if g == 0.0 {
                continue;
            }
            for (m, v) in out.row_mut(i).iter_mut().zip(o.row(i)) {
                *m += g * v;
            }
        }
    }
    Ok(out)
}

struct MixtureHead {
    cross_entropy: f64,
    balance: f64,
    grad_gate_logits: Matrix,
    grad_expert_logits: Vec<Matrix>,
}

/// Shared loss head: mixture, softmax, cross-entropy, balance penalty, and
/// the gradients flowing back into the gate logits and expert outputs.
fn mixture_head(gates: &Matrix, expert_out: &[Matrix], labels: &[usize], lambda: f64) -> Result<MixtureHead> {
    let mixture = mix_logits(gates, expert_out)?;
    let (ce, d_mix) = cross_entropy(&softmax(&mixture), labels)?;
    let (balance, d_bal) = balance_with_grad(gates)?;
    let (b, k) = gates.shape();

    let mut d_gates = d_bal.scale(lambda);
    for (j, o) in expert_out.iter().enumerate() {
        for i in 0..b {
            d_gates[(i, j)] += dot(d_mix.row(i), o.row(i));
        }
    }
    // softmax Jacobian: dL/dl_j = g_j (dL/dg_j - sum_m g_m dL/dg_m)
    let mut grad_gate_logits = Matrix::zeros(b, k);
    for i in 0..b {
        let g = gates.row(i);
        let dg = d_gates.row(i);
        let inner = dot(g, dg);
        for (out, (gj, dgj)) in grad_gate_logits.row_mut(i).iter_mut().zip(g.iter().zip(dg)) {
            *out = gj * (dgj - inner);
        }
    }
    let grad_expert_logits = (0..k)
        .map(|j| {
            let mut m = d_mix.clone();
            for i in 0..b {
                let g = gates[(i, j)];
                m.row_mut(i).iter_mut().for_each(|v| *v *= g);
            }
            m
        })
        .collect();
    Ok(MixtureHead {
        cross_entropy: ce,
        balance,
        grad_gate_logits,
        grad_expert_logits,
    })
}

/// Copies `gate` (input `N_F`) into a gate with `N_F + k` inputs whose extra
/// columns are zero.
fn extend_gate_for_sigma(gate: &MlpParams, k: usize) -> MlpParams {
    let mut dims = gate.layer_dims().to_vec();
    dims[0] += k;
    let mut out = gate.clone();
    let w0 = &gate.weights[0];
    let mut wide = Matrix::zeros(w0.rows(), w0.cols() + k);
    for r in 0..w0.rows() {
        wide.row_mut(r)[..w0.cols()].copy_from_slice(w0.row(r));
    }
    out.weights[0] = wide;
    rebuild_with_dims(out, &dims).expect("extended gate shapes are consistent")
}

fn rebuild_with_dims(params: MlpParams, dims: &[usize]) -> Result<MlpParams> {
    let mut fresh = MlpParams::zeros(dims, params.output_head)?;
    for (dst, src) in fresh.weights.iter_mut().zip(params.weights) {
        if dst.shape() != src.shape() {
            return Err(Error::InvalidDimension("rebuilt layer shape".into()));
        }
        *dst = src;
    }
    fresh.biases = params.biases;
    fresh.activation = params.activation;
    Ok(fresh)
}

fn cache_layer_input(cache: &crate::tensor::ForwardCache, layer: usize) -> Matrix {
    cache.layer_input(layer).clone()
}

/// Orthonormal basis of the span of per-class mean rows.
fn class_mean_basis(hidden: &Matrix, labels: &[usize]) -> Vec<Vec<f64>> {
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let dim = hidden.cols();
    let mut sums = vec![vec![0.0; dim]; classes];
    let mut counts = vec![0usize; classes];
    for (row, &y) in hidden.iter_rows().zip(labels) {
        counts[y] += 1;
        sums[y].iter_mut().zip(row).for_each(|(s, v)| *s += v);
    }
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for (mut v, n) in sums.into_iter().zip(counts) {
        if n == 0 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= n as f64);
        for q in &basis {
            let c = dot(&v, q);
            v.iter_mut().zip(q).for_each(|(x, qv)| *x -= c * qv);
        }
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-10 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    basis
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_model(k: usize, seed: u64) -> MoeModel {
        let dims = MoeDims {
            input_dim: 3,
            feature_dim: 4,
            num_experts: k,
            num_classes: 3,
            backbone_hidden: vec![5],
            gate_hidden: vec![6],
            expert_hidden: vec![5],
        };
        MoeModel::new(&dims, seed).unwrap()
    }

    fn batch() -> (Matrix, Vec<usize>) {
        let x = Matrix::from_rows(&[
            [0.2, -0.4, 1.0],
            [1.5, 0.3, -0.7],
            [-0.9, 0.8, 0.1],
            [0.0, 1.1, 0.4],
        ])
        .unwrap();
        (x, vec![0, 2, 1, 2])
    }

    #[test]
    fn select_expert_examples() {
        let g = |v: &[f64]| GateOutput::new(v.to_vec()).unwrap().select_expert();
        assert_eq!(g(&[0.1, 0.7, 0.2]), 1);
        assert_eq!(g(&[0.5, 0.5]), 0);
        assert_eq!(g(&[1.0, 0.0, 0.0]), 0);
        assert!(GateOutput::new(vec![0.5, 0.6]).is_err());
    }

    #[test]
    fn balance_examples() {
        let uniform = Matrix::filled(5, 4, 0.25);
        assert_eq!(balance_regularizer(&uniform).unwrap(), 0.0);
        let onehot = Matrix::from_rows(&[[1.0, 0.0, 0.0, 0.0]; 3]).unwrap();
        assert_eq!(balance_regularizer(&onehot).unwrap(), 0.75);
        let split = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert_eq!(balance_regularizer(&split).unwrap(), 0.0);
        assert!(matches!(
            balance_regularizer(&Matrix::zeros(0, 3)),
            Err(Error::InvalidBatch(_))
        ));
    }

    #[test]
    fn mixture_examples() {
        let a = Matrix::row_vector(&[2.0, 0.0]);
        let b = Matrix::row_vector(&[0.0, 2.0]);
        let half = Matrix::row_vector(&[0.5, 0.5]);
        assert_eq!(mix_logits(&half, &[a.clone(), b.clone()]).unwrap().as_slice(), &[1.0, 1.0]);
        let first = Matrix::row_vector(&[1.0, 0.0]);
        assert_eq!(mix_logits(&first, &[a.clone(), b]).unwrap(), a);
    }

    #[test]
    fn identical_experts_mixture_equals_expert() {
        let mut m = tiny_model(2, 3);
        m.experts[1] = m.experts[0].clone();
        let z = Matrix::from_rows(&[[0.1, 0.2, 0.3, 0.4]]).unwrap();
        let g = Matrix::row_vector(&[0.5, 0.5]);
        let mixed = m.mixture_forward(&g, &[z.clone(), z.clone()]).unwrap();
        let single = m.experts[0].predict(&z).unwrap();
        assert!(mixed.max_abs_diff(&single) < 1e-15);
    }

    #[test]
    fn zero_gates_are_uniform() {
        let mut m = tiny_model(4, 1);
        m.gating_naive = MlpParams::zeros(m.gating_naive.layer_dims(), OutputHead::Softmax).unwrap();
        m.gating_aw = MlpParams::zeros(m.gating_aw.layer_dims(), OutputHead::Softmax).unwrap();
        let z = Matrix::filled(2, 4, 0.7);
        for row in m.gate_naive(&z).unwrap().iter_rows() {
            assert_eq!(row, &[0.25; 4]);
        }
        let aw = m.gate_channel_aware(&z, &Matrix::zeros(1, 4)).unwrap();
        assert_eq!(aw.row(1), &[0.25; 4]);
    }

    #[test]
    fn saturated_gate_selects_first() {
        let mut m = tiny_model(2, 1);
        let last = m.gating_naive.num_layers() - 1;
        m.gating_naive.weights[last] = Matrix::zeros(2, 6);
        m.gating_naive.biases[last] = vec![10.0, -10.0];
        let g = m.gate_naive(&Matrix::filled(1, 4, 1.0)).unwrap();
        assert!(g[(0, 0)] > 1.0 - 1e-8);
    }

    #[test]
    fn channel_aware_gate_reacts_to_sigma() {
        let mut m = tiny_model(3, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        m.gating_aw = MlpParams::init_with_rng(m.gating_aw.layer_dims(), OutputHead::Softmax, &mut rng).unwrap();
        let z = Matrix::row_vector(&[0.3, -0.2, 0.5, 1.0]);
        let a = m.gate_channel_aware(&z, &Matrix::row_vector(&[0.0, 0.0, 0.0])).unwrap();
        let b = m.gate_channel_aware(&z, &Matrix::row_vector(&[5.0, 0.0, 0.1])).unwrap();
        assert!(a.max_abs_diff(&b) > 1e-6);
        assert!((b.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(matches!(
            m.gate_channel_aware(&z, &Matrix::row_vector(&[-1.0, 0.0, 0.0])),
            Err(Error::InvalidChannel(_))
        ));
        assert!(SigmaVector::new(vec![0.0, -0.5]).is_err());
    }

    #[test]
    fn extract_features_identity_backbone() {
        let mut m = tiny_model(2, 0);
        m.backbone = MlpParams::zeros(&[4, 4], OutputHead::Linear).unwrap();
        m.backbone.weights[0] = Matrix::identity(4);
        let x = Matrix::from_rows(&[[1.0, -2.0, 3.0, 0.5]]).unwrap();
        assert_eq!(m.extract_features(&x).unwrap(), x);
        m.backbone = MlpParams::zeros(&[4, 4], OutputHead::Linear).unwrap();
        assert!(m.extract_features(&x).unwrap().as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stage2_with_zero_noise_matches_stage1() {
        let mut m = tiny_model(3, 4);
        m.init_channel_aware_from_naive();
        let (x, y) = batch();
        let s1 = m.loss(&x, &y, 0.3, LossMode::Stage1).unwrap();
        let draws = NoiseDraws::zeros(4, 3, 4);
        let s2 = m.loss(&x, &y, 0.3, LossMode::Stage2(&draws)).unwrap();
        assert!((s1.loss - s2.loss).abs() < 1e-12);
        assert!(s2.grads.backbone.is_zero());
        assert!(s2.grads.experts.iter().all(Gradients::is_zero));
        assert!(!s2.grads.gating_aw.is_zero());
    }

    #[test]
    fn single_expert_reduces_to_plain_cross_entropy() {
        let m = tiny_model(1, 2);
        let (x, y) = batch();
        let out = m.loss(&x, &y, 0.0, LossMode::Stage1).unwrap();
        let z = m.extract_features(&x).unwrap();
        let logits = m.experts[0].predict(&z).unwrap();
        let (ce, _) = cross_entropy(&softmax(&logits), &y).unwrap();
        assert!((out.loss - ce).abs() < 1e-14);
        assert_eq!(out.balance, 0.0);
    }

    /// Central differences on every parameter of the trainable blocks.
    fn check_grads(model: &MoeModel, mode: LossMode<'_>, lambda: f64) {
        let (x, y) = batch();
        let out = model.loss(&x, &y, lambda, mode).unwrap();
        let eps = 1e-6;
        let mut worst: f64 = 0.0;
        let blocks: Vec<(&str, Box<dyn Fn(&mut MoeModel) -> &mut MlpParams>, &Gradients)> = match mode {
            LossMode::Stage1 => vec![
                ("backbone", Box::new(|m: &mut MoeModel| &mut m.backbone), &out.grads.backbone),
                ("gate", Box::new(|m: &mut MoeModel| &mut m.gating_naive), &out.grads.gating_naive),
                ("expert1", Box::new(|m: &mut MoeModel| &mut m.experts[1]), &out.grads.experts[1]),
            ],
            LossMode::Stage2(_) => vec![("aw", Box::new(|m: &mut MoeModel| &mut m.gating_aw), &out.grads.gating_aw)],
        };
        for (name, get, grads) in blocks {
            let n_layers = get(&mut model.clone()).num_layers();
            for l in 0..n_layers {
                let len = grads.weights[l].as_slice().len();
                for idx in 0..len {
                    let mut plus = model.clone();
                    get(&mut plus).weights[l].as_mut_slice()[idx] += eps;
                    let mut minus = model.clone();
                    get(&mut minus).weights[l].as_mut_slice()[idx] -= eps;
                    let fd = (plus.loss(&x, &y, lambda, mode).unwrap().loss
                        - minus.loss(&x, &y, lambda, mode).unwrap().loss)
                        / (2.0 * eps);
                    let an = grads.weights[l].as_slice()[idx];
                    let err = (fd - an).abs() / (fd.abs() + an.abs()).max(1e-6);
                    worst = worst.max(err);
                    assert!(err < 1e-4, "{name} layer {l} idx {idx}: fd {fd} vs {an}");
                }
            }
        }
        assert!(worst < 1e-4);
    }

    #[test]
    fn stage1_gradients_match_finite_differences() {
        check_grads(&tiny_model(3, 12), LossMode::Stage1, 0.5);
    }

    #[test]
    fn stage2_gradients_match_finite_differences() {
        let mut m = tiny_model(3, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        m.gating_aw = MlpParams::init_with_rng(m.gating_aw.layer_dims(), OutputHead::Softmax, &mut rng).unwrap();
        let sigma = Matrix::from_rows(&[[0.1, 2.0, 0.0], [1.0, 0.0, 0.3], [0.0, 0.0, 0.0], [3.0, 0.5, 0.5]]).unwrap();
        let draws = NoiseDraws::sample(sigma, 4, &mut rng);
        check_grads(&m, LossMode::Stage2(&draws), 0.5);
    }

    #[test]
    fn stage2_update_leaves_frozen_blocks() {
        let mut m = tiny_model(2, 5);
        m.stage = Stage::Stage1;
        let before = m.frozen_bytes();
        let (x, y) = batch();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let draws = NoiseDraws::sample(Matrix::filled(4, 2, 0.4), 4, &mut rng);
        let out = m.loss(&x, &y, 0.01, LossMode::Stage2(&draws)).unwrap();
        let aw_before = m.gating_aw.clone();
        m.apply_gradients(&out.grads, 0.1, Stage::Stage2).unwrap();
        assert_eq!(m.frozen_bytes(), before);
        assert_ne!(m.gating_aw, aw_before);
    }

    #[test]
    fn naive_inference_ignores_sigma() {
        let m = tiny_model(3, 6);
        let x = Matrix::row_vector(&[0.4, -0.1, 0.9]);
        let a = m
            .infer(&x, &SigmaVector::new(vec![0.0, 0.0, 0.0]).unwrap(), GatingMode::Naive, &mut IdealTransport)
            .unwrap();
        let b = m
            .infer(&x, &SigmaVector::new(vec![9.0, 0.1, 3.0]).unwrap(), GatingMode::Naive, &mut IdealTransport)
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_sigma_channel_aware_matches_naive_after_init() {
        let mut m = tiny_model(3, 7);
        m.init_channel_aware_from_naive();
        let x = Matrix::from_rows(&[[0.4, -0.1, 0.9], [1.0, 1.0, -1.0]]).unwrap();
        let z = m.extract_features(&x).unwrap();
        let naive = m.gate_naive(&z).unwrap();
        let aw = m.gate_channel_aware(&z, &Matrix::zeros(1, 3)).unwrap();
        assert_eq!(naive, aw);
    }

    #[test]
    fn expansion_clones_experts_and_keeps_mixture() {
        let mut m = tiny_model(2, 8);
        m.stage = Stage::Stage1;
        let (x, y) = batch();
        let z = m.extract_features(&x).unwrap();
        let big = m.expand_experts(5, &z, &y, 0.0, 1).unwrap();
        assert_eq!(big.num_experts(), 5);
        assert_eq!(big.specialty, vec![0, 0, 0, 1, 1]);
        assert_eq!(big.experts[1], m.experts[0]);
        assert_eq!(big.experts[4], m.experts[1]);
        let small_mix = m
            .mixture_forward(&m.gate_naive(&z).unwrap(), &vec![z.clone(); 2])
            .unwrap();
        let big_mix = big
            .mixture_forward(&big.gate_naive(&z).unwrap(), &vec![z.clone(); 5])
            .unwrap();
        assert!(small_mix.max_abs_diff(&big_mix) < 1e-12);
        assert!(m.expand_experts(1, &z, &y, 0.0, 1).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut m = tiny_model(3, 10);
        m.stage = Stage::Stage2;
        m.feature_power = 1.2345;
        let bytes = m.to_bytes();
        let back = MoeModel::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_bytes(), bytes);
        let mut corrupt = bytes.clone();
        corrupt[0] = b'X';
        assert!(MoeModel::read_from(&mut corrupt.as_slice()).is_err());
    }
}
