//! Flat dotted-key configuration.
//!
//! A TOML file is flattened so that `[train] lr = 0.1` becomes the key
//! `train.lr`. Any key can then be overridden from the command line with
//! `--train.lr 0.1` or `--train.lr=0.1`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::channel::{ChannelConfig, Fading, Scenario};
use crate::data::SyntheticSpec;
use crate::digital::DigitalLinkConfig;
use crate::error::{Error, Result};
use crate::moe::MoeDims;
use crate::trainer::{TrainConfig, TransportKind};

pub type FlatConfig = BTreeMap<String, toml::Value>;

/// Every key the harness understands, with its default rendered as TOML.
pub const KEYS: &[(&str, &str)] = &[
    ("data.path", "\"\""),
    ("data.num_classes", "8"),
    ("data.specialty_groups", "4"),
    ("data.input_dim", "16"),
    ("data.samples_per_class", "300"),
    ("data.cluster_spread", "1.0"),
    ("data.separation", "6.0"),
    ("data.split", "[0.75, 0.083, 0.167]"),
    ("model.experts", "8"),
    ("model.specialties", "4"),
    ("model.feature_dim", "16"),
    ("model.backbone_hidden", "[32]"),
    ("model.gate_hidden", "[64]"),
    ("model.expert_hidden", "[32]"),
    ("model.clone_jitter", "0.5"),
    ("train.epochs_stage1", "50"),
    ("train.epochs_stage2", "30"),
    ("train.batch_size", "32"),
    ("train.lr", "0.05"),
    ("train.lambda", "0.01"),
    ("train.lambda_stage2", "-1.0"),
    ("train.grad_clip", "1.0"),
    ("train.eval_every_epoch", "true"),
    ("train.eval_transport", "\"analog\""),
    ("train.eval_scenario", "\"random-fading\""),
    ("train.eval_digital", "true"),
    ("channel.snr_mean_db", "30.0"),
    ("channel.snr_var_db2", "2500.0"),
    ("channel.fading", "\"rayleigh\""),
    ("channel.p", "1.0"),
    ("channel.snr_min_db", "-40.0"),
    ("channel.snr_max_db", "100.0"),
    ("channel.clamp", "true"),
    ("digital.bits", "8"),
    ("eval.checkpoint", "\"\""),
    ("eval.scenario", "\"heterogeneous\""),
    ("eval.transports", "[\"ideal\", \"analog\", \"digital\"]"),
    ("ablate.k_values", "[4, 8, 12]"),
    ("ablate.seeds", "1"),
    ("ablate.scenario", "\"heterogeneous\""),
    ("ablate.transport", "\"analog\""),
    ("bench.snr_grid", "[-5.0, 0.0, 5.0, 10.0, 15.0, 20.0, 100.0]"),
    ("bench.frames", "2000"),
    ("bench.vector_len", "64"),
];

/// Flattens nested tables into dotted keys.
pub fn flatten(table: &toml::Table) -> FlatConfig {
    fn walk(prefix: &str, table: &toml::Table, out: &mut FlatConfig) {
        for (k, v) in table {
            let key = if prefix.is_empty() {
                k.clone()
            } else {
                format!("{prefix}.{k}")
            };
            match v {
                toml::Value::Table(t) => walk(&key, t, out),
                other => {
                    out.insert(key, other.clone());
                }
            }
        }
    }
    let mut out = FlatConfig::new();
    walk("", table, &mut out);
    out
}

/// Parses configuration text; syntax errors carry the offending line.
pub fn parse_config_str(text: &str, path: &Path) -> Result<FlatConfig> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| {
        let line = e
            .span()
            .map(|s| text[..s.start.min(text.len())].lines().count().max(1))
            .unwrap_or(0);
        Error::Parse {
            path: path.to_path_buf(),
            line,
            message: e.message().to_string(),
        }
    })?;
    Ok(flatten(&table))
}

pub fn load_config(path: &Path) -> Result<FlatConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
    parse_config_str(&text, path)
}

/// Reads a command-line value as TOML, falling back to a bare string.
pub fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Splits `--section.key value` pairs out of an argument list. Only flags
/// whose name contains a dot are taken.
pub fn extract_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--").filter(|f| f.contains('.')) else {
            rest.push(arg);
            continue;
        };
        if let Some((k, v)) = flag.split_once('=') {
            overrides.push((k.to_string(), v.to_string()));
        } else {
            let v = it
                .next()
                .ok_or_else(|| Error::Config(format!("--{flag} needs a value")))?;
            overrides.push((flag.to_string(), v));
        }
    }
    Ok((rest, overrides))
}

/// Applies overrides on top of `flat`.
pub fn apply_overrides(flat: &mut FlatConfig, overrides: &[(String, String)]) {
    for (k, v) in overrides {
        flat.insert(k.clone(), parse_value(v));
    }
}

/// Defaults merged under `flat`, with unknown keys rejected.
pub fn resolve(flat: &FlatConfig) -> Result<FlatConfig> {
    let mut out: FlatConfig = KEYS
        .iter()
        .map(|(k, v)| (k.to_string(), parse_value(v)))
        .collect();
    for (k, v) in flat {
        if !out.contains_key(k) {
            return Err(Error::Config(format!("unknown configuration key '{k}'")));
        }
        out.insert(k.clone(), v.clone());
    }
    Ok(out)
}

/// Renders a flat config back to TOML, one dotted key per line.
pub fn render(flat: &FlatConfig) -> String {
    let mut out = String::new();
    for (k, v) in flat {
        out.push_str(&format!("{k} = {v}\n"));
    }
    out
}

struct Reader<'a>(&'a FlatConfig);

impl Reader<'_> {
    fn value(&self, key: &str) -> &toml::Value {
        &self.0[key]
    }

    fn bad(&self, key: &str, want: &str) -> Error {
        Error::Config(format!("{key} = {} is not {want}", self.value(key)))
    }

    fn f64(&self, key: &str) -> Result<f64> {
        match self.value(key) {
            toml::Value::Float(f) => Ok(*f),
            toml::Value::Integer(i) => Ok(*i as f64),
            _ => Err(self.bad(key, "a number")),
        }
    }

    fn u64(&self, key: &str) -> Result<u64> {
        match self.value(key) {
            toml::Value::Integer(i) if *i >= 0 => Ok(*i as u64),
            _ => Err(self.bad(key, "a non-negative integer")),
        }
    }

    fn usize(&self, key: &str) -> Result<usize> {
        self.u64(key).map(|v| v as usize)
    }

    fn bool(&self, key: &str) -> Result<bool> {
        self.value(key).as_bool().ok_or_else(|| self.bad(key, "a boolean"))
    }

    fn str(&self, key: &str) -> Result<&str> {
        self.value(key).as_str().ok_or_else(|| self.bad(key, "a string"))
    }

    fn list<T>(&self, key: &str, item: impl Fn(&toml::Value) -> Option<T>) -> Result<Vec<T>> {
        let v = self.value(key);
        let items: Vec<toml::Value> = match v {
            toml::Value::Array(a) => a.clone(),
            toml::Value::String(s) => s
                .split(',')
                .filter(|p| !p.trim().is_empty())
                .map(|p| parse_value(p.trim()))
                .collect(),
            other => vec![other.clone()],
        };
        items
            .iter()
            .map(|x| item(x).ok_or_else(|| self.bad(key, "a list of the expected type")))
            .collect()
    }

    fn usizes(&self, key: &str) -> Result<Vec<usize>> {
        self.list(key, |x| x.as_integer().filter(|i| *i >= 0).map(|i| i as usize))
    }

    fn f64s(&self, key: &str) -> Result<Vec<f64>> {
        self.list(key, |x| x.as_float().or_else(|| x.as_integer().map(|i| i as f64)))
    }

    fn strings(&self, key: &str) -> Result<Vec<String>> {
        self.list(key, |x| x.as_str().map(str::to_string))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    /// CSV rows of features followed by an integer label.
    Tabular(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSettings {
    pub experts: usize,
    /// Experts trained in stage 1 before cloning; `None` trains all `experts`.
    pub specialties: Option<usize>,
    pub feature_dim: usize,
    pub backbone_hidden: Vec<usize>,
    pub gate_hidden: Vec<usize>,
    pub expert_hidden: Vec<usize>,
    pub clone_jitter: f64,
}

impl ModelSettings {
    pub fn dims(&self, input_dim: usize, num_classes: usize, num_experts: usize) -> MoeDims {
        MoeDims {
            input_dim,
            feature_dim: self.feature_dim,
            num_experts,
            num_classes,
            backbone_hidden: self.backbone_hidden.clone(),
            gate_hidden: self.gate_hidden.clone(),
            expert_hidden: self.expert_hidden.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    /// Defaults to `<out>/stage2.ckpt`.
    pub checkpoint: Option<PathBuf>,
    pub scenario: String,
    pub transports: Vec<TransportKind>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblateSettings {
    pub k_values: Vec<usize>,
    /// Seeds `seed, seed + 1, ...`.
    pub seeds: usize,
    pub scenario: String,
    pub transport: TransportKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchSettings {
    pub snr_grid: Vec<f64>,
    pub frames: usize,
    pub vector_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub split: (f64, f64, f64),
    pub model: ModelSettings,
    pub train: TrainConfig,
    pub eval: EvalSettings,
    pub ablate: AblateSettings,
    pub bench: BenchSettings,
    pub seed: u64,
    pub out: PathBuf,
    /// Fully resolved key-value view, written next to the results.
    pub resolved: FlatConfig,
}

impl ExperimentConfig {
    /// Defaults only.
    pub fn defaults(seed: u64, out: impl Into<PathBuf>) -> Result<Self> {
        Self::from_flat(&FlatConfig::new(), seed, out)
    }

    /// Loads an optional file and applies overrides.
    pub fn load(
        path: Option<&Path>,
        overrides: &[(String, String)],
        seed: u64,
        out: impl Into<PathBuf>,
    ) -> Result<Self> {
        let mut flat = match path {
            Some(p) => load_config(p)?,
            None => FlatConfig::new(),
        };
        apply_overrides(&mut flat, overrides);
        Self::from_flat(&flat, seed, out)
    }

    pub fn from_flat(flat: &FlatConfig, seed: u64, out: impl Into<PathBuf>) -> Result<Self> {
        let resolved = resolve(flat)?;
        let r = Reader(&resolved);

        let path = r.str("data.path")?;
        let data = if path.is_empty() {
            let spec = SyntheticSpec {
                num_classes: r.usize("data.num_classes")?,
                num_specialty_groups: r.usize("data.specialty_groups")?,
                input_dim: r.usize("data.input_dim")?,
                samples_per_class: r.usize("data.samples_per_class")?,
                cluster_spread: r.f64("data.cluster_spread")?,
                inter_group_separation: r.f64("data.separation")?,
                seed,
            };
            spec.validate().map_err(|e| Error::Config(e.to_string()))?;
            DataSource::Synthetic(spec)
        } else {
            DataSource::Tabular(PathBuf::from(path))
        };
        let split = match r.f64s("data.split")?.as_slice() {
            [a, b, c] => (*a, *b, *c),
            _ => return Err(Error::Config("data.split needs three fractions".into())),
        };
        if split == (0.0, 0.0, 0.0) {
            return Err(Error::Config("data.split is all zero".into()));
        }

        let specialties = r.usize("model.specialties")?;
        let model = ModelSettings {
            experts: r.usize("model.experts")?,
            specialties: (specialties > 0).then_some(specialties),
            feature_dim: r.usize("model.feature_dim")?,
            backbone_hidden: r.usizes("model.backbone_hidden")?,
            gate_hidden: r.usizes("model.gate_hidden")?,
            expert_hidden: r.usizes("model.expert_hidden")?,
            clone_jitter: r.f64("model.clone_jitter")?,
        };
        if model.experts == 0 || model.feature_dim == 0 {
            return Err(Error::Config("model.experts and model.feature_dim must be >= 1".into()));
        }
        if !(model.clone_jitter >= 0.0) {
            return Err(Error::Config("model.clone_jitter must be >= 0".into()));
        }

        let fading = match r.value("channel.fading") {
            toml::Value::String(s) if s == "rayleigh" => Fading::RayleighUnit,
            v => Fading::Fixed(
                v.as_float()
                    .or_else(|| v.as_integer().map(|i| i as f64))
                    .ok_or_else(|| r.bad("channel.fading", "\"rayleigh\" or a gain"))?,
            ),
        };
        let channel = ChannelConfig {
            snr_mean_db: r.f64("channel.snr_mean_db")?,
            snr_var_db2: r.f64("channel.snr_var_db2")?,
            fading,
            p: r.f64("channel.p")?,
            snr_clamp_db: if r.bool("channel.clamp")? {
                Some((r.f64("channel.snr_min_db")?, r.f64("channel.snr_max_db")?))
            } else {
                None
            },
        };
        let digital = DigitalLinkConfig {
            bits: r.u64("digital.bits")? as u32,
            ..DigitalLinkConfig::default()
        };

        let lambda_stage2 = r.f64("train.lambda_stage2")?;
        let grad_clip = r.f64("train.grad_clip")?;
        let train = TrainConfig {
            epochs_stage1: r.usize("train.epochs_stage1")?,
            epochs_stage2: r.usize("train.epochs_stage2")?,
            batch_size: r.usize("train.batch_size")?,
            lr: r.f64("train.lr")?,
            lambda: r.f64("train.lambda")?,
            lambda_stage2: (lambda_stage2 >= 0.0).then_some(lambda_stage2),
            grad_clip: (grad_clip > 0.0).then_some(grad_clip),
            seed,
            channel,
            eval_transport: TransportKind::parse(r.str("train.eval_transport")?)?,
            eval_scenario: Scenario::resolve(r.str("train.eval_scenario")?)?,
            eval_digital: r.bool("train.eval_digital")?,
            eval_every_epoch: r.bool("train.eval_every_epoch")?,
            digital,
        };
        train.validate()?;

        let checkpoint = r.str("eval.checkpoint")?;
        let eval = EvalSettings {
            checkpoint: (!checkpoint.is_empty()).then(|| PathBuf::from(checkpoint)),
            scenario: r.str("eval.scenario")?.to_string(),
            transports: r
                .strings("eval.transports")?
                .iter()
                .map(|s| TransportKind::parse(s))
                .collect::<Result<_>>()?,
        };
        let ablate = AblateSettings {
            k_values: r.usizes("ablate.k_values")?,
            seeds: r.usize("ablate.seeds")?.max(1),
            scenario: r.str("ablate.scenario")?.to_string(),
            transport: TransportKind::parse(r.str("ablate.transport")?)?,
        };
        let bench = BenchSettings {
            snr_grid: r.f64s("bench.snr_grid")?,
            frames: r.usize("bench.frames")?,
            vector_len: r.usize("bench.vector_len")?,
        };
        if bench.vector_len == 0 {
            return Err(Error::Config("bench.vector_len must be >= 1".into()));
        }

        Ok(Self {
            data,
            split,
            model,
            train,
            eval,
            ablate,
            bench,
            seed,
            out: out.into(),
            resolved,
        })
    }

    /// Same configuration with a different seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seed = seed;
        c.train.seed = seed;
        if let DataSource::Synthetic(spec) = &mut c.data {
            spec.seed = seed;
        }
        c
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::defaults(0, "out").expect("built-in defaults are valid")
    }
}
