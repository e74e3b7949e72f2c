//! Per-expert channel scenarios used at evaluation time.
//!
//! A scenario assigns every expert a [`ExpertLink`]. Scenario files are CSV
//! with the header `expert,snr_db,fading,h,sigma,p`:
//!
//! ```text
//! # heterogeneous: experts alternate between -10 dB and 40 dB
//! expert,snr_db,fading,h,sigma,p
//! *,-10,fixed,1,,
//! *,40,fixed,1,,
//! 5,,,0.8,0.05,1
//! ```
//!
//! Rows with expert `*` form a pattern that repeats over the expert index;
//! numbered rows override single experts. `snr_db` is a number, `sampled`
//! (drawn from the configured SNR distribution), or `ideal`. When `sigma` is
//! present the row describes CSI directly and `sigma_tilde = sigma/(p|h|)`.
//! An empty `fading` column falls back to the configured fading.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::channel::analog::{sample_snr_db, ChannelConfig, ChannelDraw, Fading};
use crate::error::{Error, Result};

pub const SCENARIO_HEADER: &str = "expert,snr_db,fading,h,sigma,p";

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SnrSource {
    Fixed(f64),
    Sampled,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ExpertLink {
    Ideal,
    Snr {
        snr: SnrSource,
        /// `None` uses the configured fading.
        fading: Option<Fading>,
    },
    Csi { h: f64, sigma: f64, p: f64 },
}

impl ExpertLink {
    pub fn fixed(snr_db: f64) -> Self {
        ExpertLink::Snr {
            snr: SnrSource::Fixed(snr_db),
            fading: Some(Fading::Fixed(1.0)),
        }
    }

    /// Draws one realization of this link.
    pub fn draw<R: Rng + ?Sized>(
        &self,
        cfg: &ChannelConfig,
        feature_power: f64,
        rng: &mut R,
    ) -> Result<ChannelDraw> {
        match *self {
            ExpertLink::Ideal => Ok(ChannelDraw::ideal()),
            ExpertLink::Snr { snr, fading } => {
                let snr_db = match snr {
                    SnrSource::Fixed(db) => db,
                    SnrSource::Sampled => sample_snr_db(cfg, rng),
                };
                let h = match fading.unwrap_or(cfg.fading) {
                    Fading::RayleighUnit => crate::channel::sample_rayleigh(rng),
                    Fading::Fixed(h) => h,
                };
                ChannelDraw::from_snr(snr_db, h, cfg.p, feature_power)
            }
            ExpertLink::Csi { h, sigma, p } => ChannelDraw::from_csi(h, sigma, p, feature_power),
        }
    }

    fn is_ideal(&self) -> bool {
        match *self {
            ExpertLink::Ideal => true,
            ExpertLink::Snr {
                snr: SnrSource::Fixed(db),
                ..
            } => db == f64::INFINITY,
            ExpertLink::Csi { sigma, .. } => sigma == 0.0,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pattern: Vec<ExpertLink>,
    overrides: BTreeMap<usize, ExpertLink>,
}

impl Scenario {
    pub fn new(name: impl Into<String>, pattern: Vec<ExpertLink>) -> Result<Self> {
        if pattern.is_empty() {
            return Err(Error::Config("scenario pattern is empty".into()));
        }
        Ok(Self {
            name: name.into(),
            pattern,
            overrides: BTreeMap::new(),
        })
    }

    pub fn with_override(mut self, expert: usize, link: ExpertLink) -> Self {
        self.overrides.insert(expert, link);
        self
    }

    /// Every expert noiseless.
    pub fn ideal() -> Self {
        Self::new("ideal", vec![ExpertLink::Ideal]).unwrap()
    }

    /// Every expert at the same fixed SNR with unit gain.
    pub fn global_snr(snr_db: f64) -> Self {
        Self::new(format!("global:{snr_db}"), vec![ExpertLink::fixed(snr_db)]).unwrap()
    }

    /// Named presets: `ideal`, `uniform-good`, `heterogeneous`,
    /// `random-fading`, and `global:<dB>`.
    pub fn preset(name: &str) -> Option<Self> {
        let pattern = match name {
            "ideal" => vec![ExpertLink::Ideal],
            "uniform-good" => vec![ExpertLink::fixed(40.0)],
            "heterogeneous" => vec![ExpertLink::fixed(-10.0), ExpertLink::fixed(40.0)],
            "random-fading" => vec![ExpertLink::Snr {
                snr: SnrSource::Sampled,
                fading: Some(Fading::RayleighUnit),
            }],
            _ => {
                let db: f64 = name.strip_prefix("global:")?.parse().ok()?;
                return Some(Self::global_snr(db));
            }
        };
        Some(Self::new(name, pattern).unwrap())
    }

    /// Resolves a preset name or a scenario file path.
    pub fn resolve(reference: &str) -> Result<Self> {
        if let Some(s) = Self::preset(reference) {
            return Ok(s);
        }
        let path = Path::new(reference);
        if path.is_file() {
            return Self::load(path);
        }
        Err(Error::Config(format!(
            "unknown scenario '{reference}' (not a preset or a file)"
        )))
    }

    pub fn link(&self, expert: usize) -> ExpertLink {
        self.overrides
            .get(&expert)
            .copied()
            .unwrap_or(self.pattern[expert % self.pattern.len()])
    }

    /// True when every expert is noiseless for any draw.
    pub fn is_ideal(&self) -> bool {
        self.pattern.iter().all(ExpertLink::is_ideal)
            && self.overrides.values().all(ExpertLink::is_ideal)
    }

    /// Overrides must name existing experts.
    pub fn check_experts(&self, num_experts: usize) -> Result<()> {
        if let Some((&k, _)) = self.overrides.range(num_experts..).next() {
            return Err(Error::Config(format!(
                "scenario '{}' overrides expert {k} but the model has {num_experts} experts",
                self.name
            )));
        }
        Ok(())
    }

    /// One draw per expert.
    pub fn draw_all<R: Rng + ?Sized>(
        &self,
        num_experts: usize,
        cfg: &ChannelConfig,
        feature_power: f64,
        rng: &mut R,
    ) -> Result<Vec<ChannelDraw>> {
        (0..num_experts)
            .map(|k| self.link(k).draw(cfg, feature_power, rng))
            .collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading scenario {}", path.display()), e))?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "scenario".into());
        Self::parse(&name, &text, path)
    }

    pub fn parse(name: &str, text: &str, path: &Path) -> Result<Self> {
        let mut pattern = Vec::new();
        let mut overrides = BTreeMap::new();
        let err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.first() == Some(&"expert") {
                continue;
            }
            if fields.len() != 6 {
                return Err(err(
                    line_no,
                    format!("expected 6 columns ({SCENARIO_HEADER}), found {}", fields.len()),
                ));
            }
            let link = parse_link(&fields[1..]).map_err(|m| err(line_no, m))?;
            match fields[0] {
                "*" => pattern.push(link),
                k => {
                    let k: usize = k
                        .parse()
                        .map_err(|_| err(line_no, format!("bad expert index '{k}'")))?;
                    overrides.insert(k, link);
                }
            }
        }
        if pattern.is_empty() {
            pattern.push(ExpertLink::Ideal);
        }
        Ok(Self {
            name: name.to_string(),
            pattern,
            overrides,
        })
    }

    /// Serializes to the scenario file format.
    pub fn to_csv(&self) -> String {
        let mut out = format!("# scenario {}\n{SCENARIO_HEADER}\n", self.name);
        for link in &self.pattern {
            let _ = writeln!(out, "*,{}", format_link(link));
        }
        for (k, link) in &self.overrides {
            let _ = writeln!(out, "{k},{}", format_link(link));
        }
        out
    }
}

fn parse_num(field: &str, what: &str) -> std::result::Result<f64, String> {
    let v: f64 = field
        .parse()
        .map_err(|_| format!("{what} '{field}' is not a number"))?;
    if v.is_nan() {
        return Err(format!("{what} is NaN"));
    }
    Ok(v)
}

fn parse_link(fields: &[&str]) -> std::result::Result<ExpertLink, String> {
    let [snr, fading, h, sigma, p] = fields else {
        unreachable!("caller checks column count")
    };
    if !sigma.is_empty() {
        let h = if h.is_empty() { 1.0 } else { parse_num(h, "h")? };
        let sigma = parse_num(sigma, "sigma")?;
        let p = if p.is_empty() { 1.0 } else { parse_num(p, "p")? };
        if h == 0.0 {
            return Err("h must be nonzero".into());
        }
        if sigma < 0.0 || p <= 0.0 {
            return Err("sigma must be >= 0 and p > 0".into());
        }
        return Ok(ExpertLink::Csi { h, sigma, p });
    }
    let snr = match *snr {
        "ideal" => return Ok(ExpertLink::Ideal),
        "sampled" => SnrSource::Sampled,
        "" => return Err("row needs snr_db or sigma".into()),
        s => SnrSource::Fixed(parse_num(s, "snr_db")?),
    };
    let fading = match *fading {
        "" => None,
        "rayleigh" => Some(Fading::RayleighUnit),
        "fixed" => {
            let h = if h.is_empty() { 1.0 } else { parse_num(h, "h")? };
            if !(h > 0.0) {
                return Err(format!("fixed gain {h} must be > 0"));
            }
            Some(Fading::Fixed(h))
        }
        other => return Err(format!("unknown fading '{other}'")),
    };
    Ok(ExpertLink::Snr { snr, fading })
}

fn format_link(link: &ExpertLink) -> String {
    match *link {
        ExpertLink::Ideal => "ideal,,,,".into(),
        ExpertLink::Snr { snr, fading } => {
            let snr = match snr {
                SnrSource::Fixed(db) => format!("{db}"),
                SnrSource::Sampled => "sampled".into(),
            };
            match fading {
                None => format!("{snr},,,,"),
                Some(Fading::RayleighUnit) => format!("{snr},rayleigh,,,"),
                Some(Fading::Fixed(h)) => format!("{snr},fixed,{h},,"),
            }
        }
        ExpertLink::Csi { h, sigma, p } => format!(",,{h},{sigma},{p}"),
    }
}
