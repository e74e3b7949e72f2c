//! Rate-1/2 convolutional code, constraint length 7, generators 133 and 171
//! (octal), with a hard-decision Viterbi decoder.
//!
//! The register holds the current input in bit 6 and the previous six inputs
//! below it; the trellis state is the previous six inputs.

use super::BitStream;
use crate::error::{Error, Result};

pub const CONSTRAINT_LENGTH: usize = 7;
pub const GENERATORS: [u32; 2] = [0o133, 0o171];
const MEMORY: usize = CONSTRAINT_LENGTH - 1;
const STATES: usize = 1 << MEMORY;

#[inline]
fn parity(x: u32) -> bool {
    x.count_ones() & 1 == 1
}

#[inline]
fn branch_output(state: usize, bit: bool) -> (bool, bool) {
    let reg = (u32::from(bit) << MEMORY) | state as u32;
    (parity(reg & GENERATORS[0]), parity(reg & GENERATORS[1]))
}

#[inline]
fn next_state(state: usize, bit: bool) -> usize {
    ((usize::from(bit) << MEMORY) | state) >> 1
}

/// Encodes `bits` followed by six flush zeros; output length `2 (L + 6)`
/// with the two generator outputs interleaved.
pub fn conv_encode(bits: &BitStream) -> BitStream {
    let mut out = BitStream::with_capacity(2 * (bits.len() + MEMORY));
    let mut state = 0;
    for bit in bits.iter().chain(std::iter::repeat_n(false, MEMORY)) {
        let (a, b) = branch_output(state, bit);
        out.push(a);
        out.push(b);
        state = next_state(state, bit);
    }
    out
}

/// Maximum-likelihood decode under the Hamming metric, ending in the zero
/// state. Among equal-metric survivors the one whose oldest register bit is
/// `0` wins.
pub fn viterbi_decode(coded: &BitStream) -> Result<BitStream> {
    let n = coded.len();
    if n % 2 != 0 || n < 2 * MEMORY {
        return Err(Error::InvalidArgument(format!(
            "coded length {n} must be even and at least {}",
            2 * MEMORY
        )));
    }
    let steps = n / 2;
    const UNREACHED: u32 = u32::MAX / 2;
    let mut metric = [UNREACHED; STATES];
    metric[0] = 0;
    // survivors[t][s]: low bit of the predecessor of state s at step t
    let mut survivors = vec![[0u8; STATES]; steps];
    let bits = coded.as_slice();

    for (t, surv) in survivors.iter_mut().enumerate() {
        let r = (bits[2 * t], bits[2 * t + 1]);
        let mut next = [UNREACHED; STATES];
        for (s, slot) in next.iter_mut().enumerate() {
            let bit = s >> (MEMORY - 1) & 1 == 1;
            let base = (s << 1) & (STATES - 1);
            let mut best = UNREACHED;
            let mut best_low = 0u8;
            for low in 0..2u8 {
                let prev = base | low as usize;
                if metric[prev] >= UNREACHED {
                    continue;
                }
                let (a, b) = branch_output(prev, bit);
                let cost = metric[prev] + u32::from(a != r.0) + u32::from(b != r.1);
                if cost < best {
                    best = cost;
                    best_low = low;
                }
            }
            *slot = best;
            surv[s] = best_low;
        }
        metric = next;
    }

    let mut decoded = vec![false; steps];
    let mut state = 0usize;
    for t in (0..steps).rev() {
        decoded[t] = state >> (MEMORY - 1) & 1 == 1;
        state = ((state << 1) & (STATES - 1)) | survivors[t][state] as usize;
    }
    decoded.truncate(steps - MEMORY);
    Ok(decoded.into())
}
