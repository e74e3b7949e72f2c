//! End-to-end digital feature link.
//!
//! quantize -> Huffman -> convolutional code -> 16-QAM -> fading + AWGN ->
//! equalize -> demodulate -> Viterbi -> Huffman -> reconstruct.
//!
//! The header (range, symbol count, pad length, codebook) travels on an
//! error-free side channel; only the payload sees the channel.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::conv::{self, conv_encode, viterbi_decode};
use super::huffman::{histogram, huffman_decode_lenient, huffman_encode, HuffmanCodebook};
use super::qam::{qam16_demodulate, qam16_modulate};
use super::quantize::{dequantize, quantize};
use super::BitStream;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeaderPolicy {
    ErrorFreeSideChannel,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DigitalLinkConfig {
    pub bits: u32,
    pub constraint_length: usize,
    pub generators: [u32; 2],
    pub header_policy: HeaderPolicy,
}

impl Default for DigitalLinkConfig {
    fn default() -> Self {
        Self {
            bits: 8,
            constraint_length: conv::CONSTRAINT_LENGTH,
            generators: conv::GENERATORS,
            header_policy: HeaderPolicy::ErrorFreeSideChannel,
        }
    }
}

impl DigitalLinkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bits != 8 {
            return Err(Error::Config(format!("quantizer depth {} (only 8 supported)", self.bits)));
        }
        if self.constraint_length != conv::CONSTRAINT_LENGTH || self.generators != conv::GENERATORS {
            return Err(Error::Config(
                "only the K=7 (133, 171) rate-1/2 code is supported".into(),
            ));
        }
        Ok(())
    }
}

/// Side information the receiver gets without errors.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkHeader {
    pub z_min: f64,
    pub z_max: f64,
    pub count: usize,
    pub pad: usize,
    pub codebook: HuffmanCodebook,
}

/// Everything produced on the transmit side for one vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedFrame {
    pub header: LinkHeader,
    /// Convolutionally coded payload before padding.
    pub coded: BitStream,
    pub symbols: Vec<Complex64>,
}

/// Diagnostics from one transmission.
#[derive(Debug, Clone, PartialEq)]
pub struct Transmission {
    pub z_recon: Vec<f64>,
    /// Huffman payload length before channel coding.
    pub source_bits: usize,
    /// Coded bits flipped by the channel.
    pub channel_bit_errors: usize,
    pub coded_bits: usize,
    /// Source bits still wrong after Viterbi decoding.
    pub decoded_bit_errors: usize,
}

/// `r = h s + w` with `Es/N0 = 10^(snr/10)` and `Es = 1`, followed by
/// perfect-CSI equalization `r / h`. Infinite SNR adds no noise and draws
/// nothing from `rng`.
pub fn symbol_channel<R: Rng + ?Sized>(
    symbols: &[Complex64],
    h: f64,
    snr_db: f64,
    rng: &mut R,
) -> Result<Vec<Complex64>> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::SingularChannel(h));
    }
    if snr_db.is_nan() {
        return Err(Error::InvalidArgument("SNR is NaN".into()));
    }
    let n0 = 10f64.powf(-snr_db / 10.0);
    if n0 == 0.0 {
        return Ok(symbols.to_vec());
    }
    let std = (n0 / 2.0).sqrt();
    Ok(symbols
        .iter()
        .map(|s| {
            let re: f64 = StandardNormal.sample(rng);
            let im: f64 = StandardNormal.sample(rng);
            let w = Complex64::new(std * re, std * im);
            (s * h + w) / h
        })
        .collect())
}

/// Transmit side of the link.
pub fn encode_frame(z: &[f64]) -> Result<EncodedFrame> {
    if z.is_empty() {
        return Err(Error::InvalidArgument("cannot transmit an empty vector".into()));
    }
    if let Some(bad) = z.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!("non-finite feature {bad}")));
    }
    let q = quantize(z);
    let codebook = HuffmanCodebook::build(&histogram(&q.bytes))?;
    let payload = huffman_encode(&q.bytes, &codebook)?;
    let coded = conv_encode(&payload);
    let (symbols, pad) = qam16_modulate(&coded);
    Ok(EncodedFrame {
        header: LinkHeader {
            z_min: q.z_min,
            z_max: q.z_max,
            count: q.bytes.len(),
            pad,
            codebook,
        },
        coded,
        symbols,
    })
}

/// Receive side; never fails on corrupted payloads.
pub fn decode_frame(header: &LinkHeader, received: &[Complex64]) -> (BitStream, Vec<f64>) {
    let mut bits = qam16_demodulate(received);
    bits.truncate(bits.len().saturating_sub(header.pad));
    let source = viterbi_decode(&bits).unwrap_or_default();
    let bytes = huffman_decode_lenient(&source, &header.codebook, header.count);
    (bits, dequantize(&bytes, header.z_min, header.z_max))
}

/// Full chain with diagnostics.
pub fn digital_transmit_detailed<R: Rng + ?Sized>(
    z: &[f64],
    h: f64,
    snr_db: f64,
    cfg: &DigitalLinkConfig,
    rng: &mut R,
) -> Result<Transmission> {
    cfg.validate()?;
    let frame = encode_frame(z)?;
    let received = symbol_channel(&frame.symbols, h, snr_db, rng)?;
    let (rx_coded, z_recon) = decode_frame(&frame.header, &received);
    let source_bits = frame.coded.len() / 2 - (conv::CONSTRAINT_LENGTH - 1);
    let decoded = viterbi_decode(&rx_coded).unwrap_or_default();
    let sent = viterbi_decode(&frame.coded).expect("encoder output always decodes");
    Ok(Transmission {
        z_recon,
        source_bits,
        channel_bit_errors: frame.coded.hamming_distance(&rx_coded),
        coded_bits: frame.coded.len(),
        decoded_bit_errors: sent.hamming_distance(&decoded),
    })
}

/// Sends `z` over the digital link and returns the reconstruction, which
/// always has the same length as `z`.
pub fn digital_transmit<R: Rng + ?Sized>(
    z: &[f64],
    h: f64,
    snr_db: f64,
    cfg: &DigitalLinkConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let frame = encode_frame(z)?;
    let received = symbol_channel(&frame.symbols, h, snr_db, rng)?;
    Ok(decode_frame(&frame.header, &received).1)
}
