//! Byte-level Huffman coding with deterministic tie-breaking.
//!
//! Merges take the two lightest subtrees; equal weights are ordered by the
//! smallest symbol each subtree contains. The lighter subtree becomes the
//! `0` branch.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use super::BitStream;
use crate::error::{Error, Result};

/// Prefix code over byte symbols.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HuffmanCodebook {
    codes: Vec<Option<BitStream>>,
}

/// Byte histogram of a message.
pub fn histogram(bytes: &[u8]) -> [u64; 256] {
    let mut counts = [0u64; 256];
    for &b in bytes {
        counts[b as usize] += 1;
    }
    counts
}

enum Node {
    Leaf(u8),
    Internal(usize, usize),
}

impl HuffmanCodebook {
    /// Optimal prefix code for the histogram. A lone symbol gets the code `0`.
    pub fn build(counts: &[u64; 256]) -> Result<Self> {
        let mut nodes = Vec::new();
        let mut heap = BinaryHeap::new();
        for (sym, &c) in counts.iter().enumerate() {
            if c > 0 {
                heap.push(Reverse((c, sym as u8, nodes.len())));
                nodes.push(Node::Leaf(sym as u8));
            }
        }
        let mut codes = vec![None; 256];
        match heap.len() {
            0 => return Err(Error::InvalidArgument("empty histogram".into())),
            1 => {
                let Reverse((_, sym, _)) = heap.pop().unwrap();
                codes[sym as usize] = Some(BitStream::from_str_bits("0"));
                return Ok(Self { codes });
            }
            _ => {}
        }
        while heap.len() > 1 {
            let Reverse((ca, ma, a)) = heap.pop().unwrap();
            let Reverse((cb, mb, b)) = heap.pop().unwrap();
            heap.push(Reverse((ca + cb, ma.min(mb), nodes.len())));
            nodes.push(Node::Internal(a, b));
        }
        let Reverse((_, _, root)) = heap.pop().unwrap();
        let mut stack = vec![(root, BitStream::new())];
        while let Some((idx, prefix)) = stack.pop() {
            match nodes[idx] {
                Node::Leaf(sym) => codes[sym as usize] = Some(prefix),
                Node::Internal(zero, one) => {
                    let mut p0 = prefix.clone();
                    p0.push(false);
                    let mut p1 = prefix;
                    p1.push(true);
                    stack.push((one, p1));
                    stack.push((zero, p0));
                }
            }
        }
        Ok(Self { codes })
    }

    /// Builds a codebook from explicit codes, checking that it is prefix-free.
    pub fn from_codes(entries: impl IntoIterator<Item = (u8, BitStream)>) -> Result<Self> {
        let mut codes = vec![None; 256];
        for (sym, code) in entries {
            if code.is_empty() {
                return Err(Error::InvalidArgument(format!("empty code for symbol {sym}")));
            }
            codes[sym as usize] = Some(code);
        }
        let book = Self { codes };
        if book.num_symbols() == 0 {
            return Err(Error::InvalidArgument("codebook has no symbols".into()));
        }
        if !book.is_prefix_free() {
            return Err(Error::InvalidArgument("codes are not prefix-free".into()));
        }
        Ok(book)
    }

    pub fn code(&self, symbol: u8) -> Option<&BitStream> {
        self.codes[symbol as usize].as_ref()
    }

    pub fn code_len(&self, symbol: u8) -> Option<usize> {
        self.code(symbol).map(BitStream::len)
    }

    /// `(symbol, code)` pairs in symbol order.
    pub fn entries(&self) -> impl Iterator<Item = (u8, &BitStream)> {
        self.codes
            .iter()
            .enumerate()
            .filter_map(|(s, c)| c.as_ref().map(|c| (s as u8, c)))
    }

    pub fn num_symbols(&self) -> usize {
        self.codes.iter().flatten().count()
    }

    pub fn is_prefix_free(&self) -> bool {
        let codes: Vec<&BitStream> = self.codes.iter().flatten().collect();
        for (i, a) in codes.iter().enumerate() {
            for (j, b) in codes.iter().enumerate() {
                if i != j && a.len() <= b.len() && a.as_slice() == &b.as_slice()[..a.len()] {
                    return false;
                }
            }
        }
        true
    }

    /// Shortest code, lowest symbol on ties.
    fn most_probable(&self) -> u8 {
        self.entries()
            .min_by_key(|(s, c)| (c.len(), *s))
            .map(|(s, _)| s)
            .expect("codebook is never empty")
    }

    fn tree(&self) -> DecodeTree {
        let mut tree = DecodeTree {
            children: vec![[None, None]],
            symbol: vec![None],
        };
        for (sym, code) in self.entries() {
            let mut node = 0;
            for bit in code.iter() {
                let next = match tree.children[node][bit as usize] {
                    Some(n) => n,
                    None => {
                        tree.children.push([None, None]);
                        tree.symbol.push(None);
                        let n = tree.children.len() - 1;
                        tree.children[node][bit as usize] = Some(n);
                        n
                    }
                };
                node = next;
            }
            tree.symbol[node] = Some(sym);
        }
        tree
    }
}

struct DecodeTree {
    children: Vec<[Option<usize>; 2]>,
    symbol: Vec<Option<u8>>,
}

pub fn huffman_encode(bytes: &[u8], codebook: &HuffmanCodebook) -> Result<BitStream> {
    let mut out = BitStream::new();
    for &b in bytes {
        let code = codebook
            .code(b)
            .ok_or_else(|| Error::InvalidArgument(format!("symbol {b} missing from codebook")))?;
        out.extend_from(code);
    }
    Ok(out)
}

/// Decodes exactly `count` symbols; a truncated, invalid, or overlong
/// stream is an error.
pub fn huffman_decode(bits: &BitStream, codebook: &HuffmanCodebook, count: usize) -> Result<Vec<u8>> {
    let tree = codebook.tree();
    let mut out = Vec::with_capacity(count);
    let mut node = 0;
    let mut consumed = 0;
    for bit in bits.iter() {
        if out.len() == count {
            break;
        }
        consumed += 1;
        node = tree.children[node][bit as usize]
            .ok_or_else(|| Error::Decode(format!("invalid code at bit {}", consumed - 1)))?;
        if let Some(sym) = tree.symbol[node] {
            out.push(sym);
            node = 0;
        }
    }
    if out.len() < count {
        return Err(Error::Decode(format!(
            "stream ended after {} of {count} symbols",
            out.len()
        )));
    }
    if consumed != bits.len() {
        return Err(Error::Decode(format!(
            "{} trailing bits after {count} symbols",
            bits.len() - consumed
        )));
    }
    Ok(out)
}

/// Best-effort decode of a possibly corrupted stream; always returns `count`
/// symbols.
///
/// With a single-symbol codebook every bit decodes to that symbol. An
/// invalid branch restarts at the root, and symbols missing at the end of
/// the stream are filled with the most probable symbol.
pub fn huffman_decode_lenient(bits: &BitStream, codebook: &HuffmanCodebook, count: usize) -> Vec<u8> {
    let fill = codebook.most_probable();
    if codebook.num_symbols() == 1 {
        return vec![fill; count];
    }
    let tree = codebook.tree();
    let mut out = Vec::with_capacity(count);
    let mut node = 0;
    for bit in bits.iter() {
        if out.len() == count {
            break;
        }
        node = tree.children[node][bit as usize].unwrap_or(0);
        if let Some(sym) = tree.symbol[node] {
            out.push(sym);
            node = 0;
        }
    }
    out.resize(count, fill);
    out
}
