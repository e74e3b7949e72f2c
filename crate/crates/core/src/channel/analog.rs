//! Analog link: real-valued flat fading, AWGN, and perfect-CSI equalization.
//!
//! The expert receives `y = h p z + n` with `n ~ N(0, sigma^2 I)` and divides
//! by `p h`, so the feature it sees is `z + sigma_tilde * n'` with
//! `sigma_tilde = sigma / (p |h|)` and `n'` standard normal.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Fading {
    /// Rayleigh magnitude with unit mean-square gain.
    RayleighUnit,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelConfig {
    pub snr_mean_db: f64,
    pub snr_var_db2: f64,
    pub fading: Fading,
    /// Transmit power scaling `p`.
    pub p: f64,
    /// Sampled SNRs are clamped into `[lo, hi]`; `None` disables clamping.
    pub snr_clamp_db: Option<(f64, f64)>,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            snr_mean_db: 30.0,
            snr_var_db2: 2500.0,
            fading: Fading::RayleighUnit,
            p: 1.0,
            snr_clamp_db: Some((-40.0, 100.0)),
        }
    }
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.snr_var_db2 >= 0.0) || !self.snr_mean_db.is_finite() {
            return Err(Error::Config(format!(
                "SNR distribution N({}, {}) is invalid",
                self.snr_mean_db, self.snr_var_db2
            )));
        }
        if let Some((lo, hi)) = self.snr_clamp_db {
            if !(lo <= hi) {
                return Err(Error::Config(format!("empty SNR clamp range [{lo}, {hi}]")));
            }
        }
        if !(self.p > 0.0) {
            return Err(Error::Config(format!("power scaling p = {} must be > 0", self.p)));
        }
        if let Fading::Fixed(h) = self.fading {
            if !(h > 0.0) {
                return Err(Error::Config(format!("fixed fading gain {h} must be > 0")));
            }
        }
        Ok(())
    }

    pub fn sample_fading<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self.fading {
            Fading::RayleighUnit => sample_rayleigh(rng),
            Fading::Fixed(h) => h,
        }
    }
}

/// One channel realization for one expert.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelDraw {
    pub h: f64,
    pub sigma: f64,
    pub p: f64,
    pub sigma_tilde: f64,
    /// Nominal per-entry SNR before fading.
    pub snr_db: f64,
}

impl ChannelDraw {
    /// A noiseless link.
    pub fn ideal() -> Self {
        Self {
            h: 1.0,
            sigma: 0.0,
            p: 1.0,
            sigma_tilde: 0.0,
            snr_db: f64::INFINITY,
        }
    }

    /// Builds a draw from CSI; the SNR is referenced to `feature_power`.
    pub fn from_csi(h: f64, sigma: f64, p: f64, feature_power: f64) -> Result<Self> {
        let sigma_tilde = sigma_tilde_from_csi(h, sigma, p)?;
        if !(feature_power > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "feature power {feature_power} must be > 0"
            )));
        }
        let snr_db = 10.0 * (feature_power * p * p / (sigma * sigma)).log10();
        Ok(Self {
            h: h.abs(),
            sigma,
            p,
            sigma_tilde,
            snr_db,
        })
    }

    /// Builds a draw from a nominal SNR, a fading gain, and power scaling.
    ///
    /// `sigma` is chosen so that `p^2 * feature_power / sigma^2` equals the
    /// SNR; fading then scales the effective noise by `1 / |h|`.
    pub fn from_snr(snr_db: f64, h: f64, p: f64, feature_power: f64) -> Result<Self> {
        if !(p > 0.0) {
            return Err(Error::InvalidChannel(format!("power scaling p = {p}")));
        }
        let sigma = p * snr_to_sigma_tilde(snr_db, feature_power)?;
        let sigma_tilde = sigma_tilde_from_csi(h, sigma, p)?;
        Ok(Self {
            h: h.abs(),
            sigma,
            p,
            sigma_tilde,
            snr_db,
        })
    }

    /// SNR seen after equalization, `10 log10(P / sigma_tilde^2)`.
    pub fn effective_snr_db(&self) -> f64 {
        self.snr_db + 20.0 * self.h.log10()
    }
}

/// Rayleigh magnitude `sqrt(u^2 + v^2) / sqrt(2)`, so `E[h^2] = 1`.
pub fn sample_rayleigh<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = StandardNormal.sample(rng);
        let v: f64 = StandardNormal.sample(rng);
        let h = ((u * u + v * v) / 2.0).sqrt();
        if h > 0.0 {
            return h;
        }
    }
}

/// Gaussian SNR in dB, clamped per the config.
pub fn sample_snr_db<R: Rng + ?Sized>(cfg: &ChannelConfig, rng: &mut R) -> f64 {
    let n: f64 = StandardNormal.sample(rng);
    let snr = cfg.snr_mean_db + cfg.snr_var_db2.sqrt() * n;
    match cfg.snr_clamp_db {
        Some((lo, hi)) => snr.clamp(lo, hi),
        None => snr,
    }
}

/// `sqrt(feature_power / 10^(snr_db / 10))`; an infinite SNR maps to 0.
pub fn snr_to_sigma_tilde(snr_db: f64, feature_power: f64) -> Result<f64> {
    if !(feature_power > 0.0) || !feature_power.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "feature power {feature_power} must be finite and > 0"
        )));
    }
    if snr_db.is_nan() {
        return Err(Error::InvalidArgument("SNR is NaN".into()));
    }
    Ok((feature_power / 10f64.powf(snr_db / 10.0)).sqrt())
}

/// `sigma / (p |h|)`.
pub fn sigma_tilde_from_csi(h: f64, sigma: f64, p: f64) -> Result<f64> {
    if h == 0.0 || !h.is_finite() {
        return Err(Error::SingularChannel(h));
    }
    if !(p > 0.0) {
        return Err(Error::InvalidChannel(format!("power scaling p = {p}")));
    }
    if !(sigma >= 0.0) {
        return Err(Error::InvalidChannel(format!("noise std {sigma}")));
    }
    Ok(sigma / (p * h.abs()))
}

/// Adds `sigma_tilde * n` with `n` i.i.d. standard normal to every entry.
///
/// A zero `sigma_tilde` returns `z` unchanged without consuming randomness.
pub fn analog_transmit<R: Rng + ?Sized>(z: &Matrix, sigma_tilde: f64, rng: &mut R) -> Matrix {
    let mut out = z.clone();
    perturb_in_place(out.as_mut_slice(), sigma_tilde, rng);
    out
}

pub(crate) fn perturb_in_place<R: Rng + ?Sized>(values: &mut [f64], sigma_tilde: f64, rng: &mut R) {
    if sigma_tilde == 0.0 {
        return;
    }
    for v in values {
        let n: f64 = StandardNormal.sample(rng);
        *v += sigma_tilde * n;
    }
}
