//! 8-bit uniform quantization of a feature vector over its own range.

const LEVELS: f64 = 255.0;

/// Quantized vector with the range needed to reconstruct it.
#[derive(Debug, Clone, PartialEq)]
pub struct Quantized {
    pub bytes: Vec<u8>,
    pub z_min: f64,
    pub z_max: f64,
}

/// `q_i = round((z_i - z_min) * 255 / (z_max - z_min))`, rounding half away
/// from zero. A constant vector maps to all zeros.
pub fn quantize(z: &[f64]) -> Quantized {
    let z_min = z.iter().copied().fold(f64::INFINITY, f64::min);
    let z_max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if z.is_empty() {
        return Quantized {
            bytes: Vec::new(),
            z_min: 0.0,
            z_max: 0.0,
        };
    }
    let range = z_max - z_min;
    let bytes = if range > 0.0 {
        // f64::round is half away from zero
        z.iter()
            .map(|&v| ((v - z_min) * LEVELS / range).round().clamp(0.0, LEVELS) as u8)
            .collect()
    } else {
        vec![0; z.len()]
    };
    Quantized { bytes, z_min, z_max }
}

/// `z_i = q_i * (z_max - z_min) / 255 + z_min`.
pub fn dequantize(bytes: &[u8], z_min: f64, z_max: f64) -> Vec<f64> {
    let step = (z_max - z_min) / LEVELS;
    bytes.iter().map(|&q| f64::from(q) * step + z_min).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_midpoint() {
        let q = quantize(&[0.0, 1.0]);
        assert_eq!(q.bytes, vec![0, 255]);
        assert_eq!((q.z_min, q.z_max), (0.0, 1.0));
        assert_eq!(quantize(&[0.0, 0.5, 1.0]).bytes[1], 128);
    }

    #[test]
    fn constant_vector() {
        let q = quantize(&[3.0, 3.0, 3.0]);
        assert_eq!(q.bytes, vec![0, 0, 0]);
        assert_eq!(dequantize(&q.bytes, q.z_min, q.z_max), vec![3.0; 3]);
    }

    #[test]
    fn dequantize_endpoints() {
        assert_eq!(dequantize(&[0, 255], -2.0, 5.0), vec![-2.0, 5.0]);
    }
}
