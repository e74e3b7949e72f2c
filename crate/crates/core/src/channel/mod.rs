//! Wireless link models for feature transport between the server and experts.

pub mod analog;
pub mod scenario;

pub use analog::{
    analog_transmit, sample_rayleigh, sample_snr_db, sigma_tilde_from_csi, snr_to_sigma_tilde,
    ChannelConfig, ChannelDraw, Fading,
};
pub use scenario::{ExpertLink, Scenario, SnrSource};
