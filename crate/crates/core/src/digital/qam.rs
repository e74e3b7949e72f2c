//! Gray-mapped 16-QAM with unit average symbol energy.
//!
//! Bits `b0 b1` select the in-phase level and `b2 b3` the quadrature level,
//! each through the Gray map `00 -> -3, 01 -> -1, 11 -> +1, 10 -> +3`.

use num_complex::Complex64;

use super::BitStream;

const SCALE: f64 = 0.316_227_766_016_837_94; // 1 / sqrt(10)

fn level(b0: bool, b1: bool) -> f64 {
    match (b0, b1) {
        (false, false) => -3.0,
        (false, true) => -1.0,
        (true, true) => 1.0,
        (true, false) => 3.0,
    }
}

fn slice(v: f64) -> (bool, bool) {
    let x = v / SCALE;
    if x < -2.0 {
        (false, false)
    } else if x < 0.0 {
        (false, true)
    } else if x < 2.0 {
        (true, true)
    } else {
        (true, false)
    }
}

/// Number of zero bits appended so the length is a multiple of 4.
pub fn pad_len(bits: usize) -> usize {
    (4 - bits % 4) % 4
}

/// Zero-pads to a multiple of 4 bits and maps each nibble to a symbol.
/// Returns the symbols and the pad length.
pub fn qam16_modulate(bits: &BitStream) -> (Vec<Complex64>, usize) {
    let pad = pad_len(bits.len());
    let padded: Vec<bool> = bits.iter().chain(std::iter::repeat_n(false, pad)).collect();
    let symbols = padded
        .chunks(4)
        .map(|c| Complex64::new(level(c[0], c[1]) * SCALE, level(c[2], c[3]) * SCALE))
        .collect();
    (symbols, pad)
}

/// Minimum-distance hard decisions, four bits per symbol.
pub fn qam16_demodulate(symbols: &[Complex64]) -> BitStream {
    let mut out = BitStream::with_capacity(symbols.len() * 4);
    for s in symbols {
        let (a, b) = slice(s.re);
        let (c, d) = slice(s.im);
        out.push(a);
        out.push(b);
        out.push(c);
        out.push(d);
    }
    out
}

/// All 16 points indexed by nibble value, `b0` as the most significant bit.
pub fn constellation() -> Vec<Complex64> {
    (0..16u8)
        .map(|n| {
            let bits: BitStream = (0..4).map(|i| n >> (3 - i) & 1 == 1).collect();
            qam16_modulate(&bits).0[0]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_average_energy() {
        let e: f64 = constellation().iter().map(|s| s.norm_sqr()).sum::<f64>() / 16.0;
        assert!((e - 1.0).abs() < 1e-12);
    }

    #[test]
    fn all_nibbles_round_trip() {
        for n in 0..16u8 {
            let bits: BitStream = (0..4).map(|i| n >> (3 - i) & 1 == 1).collect();
            let (sym, pad) = qam16_modulate(&bits);
            assert_eq!(pad, 0);
            assert_eq!(qam16_demodulate(&sym), bits);
        }
    }

    #[test]
    fn nearest_neighbours_differ_in_one_bit() {
        let pts = constellation();
        let step = 2.0 * SCALE;
        for (i, a) in pts.iter().enumerate() {
            for (j, b) in pts.iter().enumerate() {
                if ((a - b).norm() - step).abs() < 1e-9 {
                    assert_eq!(((i ^ j) as u8).count_ones(), 1, "{i} vs {j}");
                }
            }
        }
    }

    #[test]
    fn padding() {
        let (sym, pad) = qam16_modulate(&BitStream::from_str_bits("101"));
        assert_eq!((sym.len(), pad), (1, 1));
        assert_eq!(pad_len(8), 0);
        assert_eq!(pad_len(9), 3);
    }
}
