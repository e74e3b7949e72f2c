//! The four experiment pipelines behind the command-line tool.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::config::{render, DataSource, ExperimentConfig};
use super::results::{save_results, ResultRow};
use crate::channel::Scenario;
use crate::data::{generate_synthetic, load_tabular, split_dataset, Dataset, Splits};
use crate::digital::digital_transmit_detailed;
use crate::error::{Error, Result};
use crate::moe::{GatingMode, MoeModel};
use crate::trainer::{
    base_experts, duplicate_specialties, evaluate, save_history, stage1_train, stage2_train,
    EpochRecord, EvalContext, TransportKind,
};

/// Files written into an output directory. Unless [`OutputDir::commit`] is
/// called, dropping the guard deletes them again, along with the directory
/// itself if the guard created it and it is left empty.
pub struct OutputDir {
    dir: PathBuf,
    files: Vec<PathBuf>,
    made_dir: bool,
    committed: bool,
}

impl OutputDir {
    pub fn create(dir: &Path) -> Result<Self> {
        let made_dir = !dir.exists();
        std::fs::create_dir_all(dir)
            .map_err(|e| Error::io(format!("creating output directory {}", dir.display()), e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
            made_dir,
            committed: false,
        })
    }

    pub fn path(&self) -> &Path {
        &self.dir
    }

    /// Path of `name` inside the directory, tracked for cleanup.
    pub fn file(&mut self, name: &str) -> PathBuf {
        let p = self.dir.join(name);
        self.files.push(p.clone());
        p
    }

    pub fn commit(mut self) {
        self.committed = true;
    }
}

impl Drop for OutputDir {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        for f in &self.files {
            let _ = std::fs::remove_file(f);
        }
        if self.made_dir {
            let _ = std::fs::remove_dir(&self.dir);
        }
    }
}

fn write_config(out: &mut OutputDir, cfg: &ExperimentConfig) -> Result<()> {
    let p = out.file("config.toml");
    let body = format!("# seed = {}\n{}", cfg.seed, render(&cfg.resolved));
    std::fs::write(&p, body).map_err(|e| Error::io(format!("writing {}", p.display()), e))
}

/// Loads or generates the dataset, splits it, and normalizes with
/// training-split statistics.
pub fn prepare_splits(cfg: &ExperimentConfig) -> Result<Splits> {
    let ds: Dataset = match &cfg.data {
        DataSource::Synthetic(spec) => generate_synthetic(spec)?,
        DataSource::Tabular(path) => load_tabular(path)?,
    };
    Ok(split_dataset(&ds, cfg.split, cfg.seed)?.normalized()?.0)
}

fn eval_context(cfg: &ExperimentConfig) -> EvalContext {
    EvalContext {
        channel: cfg.train.channel.clone(),
        digital: cfg.train.digital.clone(),
        seed: cfg.seed,
    }
}

/// Stage-1 model with `base_experts(K, specialties)` experts.
pub fn train_stage1(cfg: &ExperimentConfig, splits: &Splits, num_experts: usize) -> Result<(MoeModel, Vec<EpochRecord>)> {
    let base_k = base_experts(num_experts, cfg.model.specialties);
    let dims = cfg
        .model
        .dims(splits.train.input_dim(), splits.train.num_classes, base_k);
    stage1_train(MoeModel::new(&dims, cfg.seed)?, splits, &cfg.train)
}

/// Clones a stage-1 model up to `num_experts` when it has fewer.
pub fn grow(cfg: &ExperimentConfig, stage1: &MoeModel, splits: &Splits, num_experts: usize) -> Result<MoeModel> {
    if stage1.num_experts() < num_experts {
        duplicate_specialties(stage1, num_experts, &splits.train, cfg.model.clone_jitter, cfg.seed)
    } else {
        Ok(stage1.clone())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Model at the end of stage 1, before any cloning.
    pub stage1: MoeModel,
    pub model: MoeModel,
    pub history: Vec<EpochRecord>,
    pub stage1_path: PathBuf,
    pub stage2_path: PathBuf,
    pub history_path: PathBuf,
}

/// Stage 1, optional cloning, stage 2. Writes `stage1.ckpt`, `stage2.ckpt`,
/// `history.csv`, and `config.toml`.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    let mut out = OutputDir::create(&cfg.out)?;
    let splits = prepare_splits(cfg)?;
    let k = cfg.model.experts;
    let (stage1, mut history) = train_stage1(cfg, &splits, k)?;
    let stage1_path = out.file("stage1.ckpt");
    stage1.save(&stage1_path)?;
    let (model, h2) = stage2_train(grow(cfg, &stage1, &splits, k)?, &splits, &cfg.train)?;
    history.extend(h2);
    let stage2_path = out.file("stage2.ckpt");
    model.save(&stage2_path)?;
    let history_path = out.file("history.csv");
    save_history(&history_path, &history)?;
    write_config(&mut out, cfg)?;
    out.commit();
    Ok(TrainOutcome {
        stage1,
        model,
        history,
        stage1_path,
        stage2_path,
        history_path,
    })
}

/// One row per gating mode and transport.
pub fn evaluate_rows(
    model: &MoeModel,
    split: &Dataset,
    scenario: &Scenario,
    transports: &[TransportKind],
    ctx: &EvalContext,
) -> Result<Vec<ResultRow>> {
    let mut rows = Vec::new();
    for &t in transports {
        for mode in [GatingMode::Naive, GatingMode::ChannelAware] {
            let r = evaluate(model, split, t, scenario, mode, ctx)?;
            rows.push(ResultRow {
                scenario: scenario.name.clone(),
                gating_mode: mode.name().into(),
                transport: t.name().into(),
                k: model.num_experts(),
                seed: ctx.seed,
                accuracy: r.accuracy,
                mean_routing_entropy: r.mean_routing_entropy,
            });
        }
    }
    Ok(rows)
}

/// Evaluates a checkpoint on the test split. Writes `eval.{csv,json,txt}`.
pub fn cmd_eval(cfg: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    let ckpt = cfg
        .eval
        .checkpoint
        .clone()
        .unwrap_or_else(|| cfg.out.join("stage2.ckpt"));
    let model = MoeModel::load(&ckpt)?;
    if model.num_experts() != cfg.model.experts {
        return Err(Error::Config(format!(
            "checkpoint {} has {} experts but model.experts = {}",
            ckpt.display(),
            model.num_experts(),
            cfg.model.experts
        )));
    }
    let scenario = Scenario::resolve(&cfg.eval.scenario)?;
    scenario.check_experts(model.num_experts())?;
    let splits = prepare_splits(cfg)?;
    if splits.test.input_dim() != model.input_dim() {
        return Err(Error::Config(format!(
            "checkpoint expects {} inputs but the data has {}",
            model.input_dim(),
            splits.test.input_dim()
        )));
    }
    let rows = evaluate_rows(&model, &splits.test, &scenario, &cfg.eval.transports, &eval_context(cfg))?;
    let mut out = OutputDir::create(&cfg.out)?;
    for ext in ["csv", "json", "txt"] {
        out.file(&format!("eval.{ext}"));
    }
    save_results(out.path(), "eval", &rows)?;
    write_config(&mut out, cfg)?;
    out.commit();
    Ok(rows)
}

/// Trains and evaluates every K in `ablate.k_values` for each seed. Stage 1
/// runs once per seed and base size; larger K reuse it through cloning.
/// Writes `ablate.{csv,json,txt}`.
pub fn cmd_ablate(cfg: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    let ks = &cfg.ablate.k_values;
    if ks.is_empty() {
        return Err(Error::InvalidArgument("ablate.k_values is empty".into()));
    }
    if let Some(k) = ks.iter().find(|&&k| k < 1) {
        return Err(Error::InvalidArgument(format!("K = {k} must be >= 1")));
    }
    let scenario = Scenario::resolve(&cfg.ablate.scenario)?;
    for &k in ks {
        scenario.check_experts(k)?;
    }
    let mut out = OutputDir::create(&cfg.out)?;
    let mut rows = Vec::new();
    for s in 0..cfg.ablate.seeds as u64 {
        let c = cfg.with_seed(cfg.seed + s);
        let splits = prepare_splits(&c)?;
        let mut bases: BTreeMap<usize, MoeModel> = BTreeMap::new();
        for &k in ks {
            let base_k = base_experts(k, c.model.specialties);
            if !bases.contains_key(&base_k) {
                bases.insert(base_k, train_stage1(&c, &splits, k)?.0);
            }
            let (model, _) = stage2_train(grow(&c, &bases[&base_k], &splits, k)?, &splits, &c.train)?;
            rows.extend(evaluate_rows(
                &model,
                &splits.test,
                &scenario,
                &[cfg.ablate.transport],
                &eval_context(&c),
            )?);
        }
    }
    for ext in ["csv", "json", "txt"] {
        out.file(&format!("ablate.{ext}"));
    }
    save_results(out.path(), "ablate", &rows)?;
    write_config(&mut out, cfg)?;
    out.commit();
    Ok(rows)
}

/// Mean channel-aware minus naive accuracy per K, over seeds.
pub fn mean_gain_by_k(rows: &[ResultRow]) -> BTreeMap<usize, f64> {
    let mut acc: BTreeMap<(usize, u64), [f64; 2]> = BTreeMap::new();
    for r in rows {
        let slot = usize::from(r.gating_mode != GatingMode::Naive.name());
        acc.entry((r.k, r.seed)).or_default()[slot] = r.accuracy;
    }
    let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for ((k, _), [naive, aw]) in acc {
        let e = sums.entry(k).or_default();
        e.0 += aw - naive;
        e.1 += 1;
    }
    sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

pub const BENCH_HEADER: [&str; 6] = ["snr_db", "ber", "channel_ber", "mse", "source_bits", "coded_bits"];

/// One SNR point of the digital link benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub snr_db: f64,
    /// Source bit error rate after Viterbi decoding.
    pub ber: f64,
    /// Coded bit error rate before decoding.
    pub channel_ber: f64,
    /// Mean squared feature reconstruction error.
    pub mse: f64,
    pub source_bits: usize,
    pub coded_bits: usize,
}

/// Monte-Carlo sweep of the digital link over `snr_grid` with unit fading.
/// Every SNR point sends the same frames with the same noise draws.
pub fn channel_bench(cfg: &ExperimentConfig) -> Result<Vec<BenchRow>> {
    let b = &cfg.bench;
    if b.snr_grid.is_empty() {
        return Err(Error::InvalidArgument("bench.snr_grid is empty".into()));
    }
    let mut src = ChaCha8Rng::seed_from_u64(cfg.seed);
    let frames: Vec<Vec<f64>> = (0..b.frames)
        .map(|_| (0..b.vector_len).map(|_| StandardNormal.sample(&mut src)).collect())
        .collect();
    let mut rows = Vec::with_capacity(b.snr_grid.len());
    for &snr in &b.snr_grid {
        let mut row = BenchRow {
            snr_db: snr,
            ber: 0.0,
            channel_ber: 0.0,
            mse: 0.0,
            source_bits: 0,
            coded_bits: 0,
        };
        let (mut decoded_err, mut channel_err, mut sq) = (0usize, 0usize, 0.0);
        for (f, z) in frames.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(f as u64 + 1);
            let t = digital_transmit_detailed(z, 1.0, snr, &cfg.train.digital, &mut rng)?;
            decoded_err += t.decoded_bit_errors;
            channel_err += t.channel_bit_errors;
            row.source_bits += t.source_bits;
            row.coded_bits += t.coded_bits;
            sq += z.iter().zip(&t.z_recon).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        }
        row.ber = decoded_err as f64 / row.source_bits.max(1) as f64;
        row.channel_ber = channel_err as f64 / row.coded_bits.max(1) as f64;
        row.mse = sq / (b.frames * b.vector_len).max(1) as f64;
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_bench_csv<W: Write>(w: W, rows: &[BenchRow]) -> Result<()> {
    let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    out.write_record(BENCH_HEADER)?;
    for r in rows {
        out.serialize(r)?;
    }
    out.flush().map_err(|e| Error::io("writing bench results", e))?;
    Ok(())
}

/// Runs [`channel_bench`] and writes `channel_bench.csv`.
pub fn cmd_channel_bench(cfg: &ExperimentConfig) -> Result<Vec<BenchRow>> {
    let rows = channel_bench(cfg)?;
    let mut out = OutputDir::create(&cfg.out)?;
    let p = out.file("channel_bench.csv");
    let f = std::fs::File::create(&p).map_err(|e| Error::io(format!("creating {}", p.display()), e))?;
    write_bench_csv(std::io::BufWriter::new(f), &rows)?;
    write_config(&mut out, cfg)?;
    out.commit();
    Ok(rows)
}
