//! Bit-exact debug dump of a digital frame: header fields, then the coded
//! payload packed 8 bits per byte, most significant bit first.
//!
//! Layout (little-endian integers and floats):
//!
//! ```text
//! magic "CMBS" | version u32 | z_min f64 | z_max f64 | count u64 | pad u8
//! | n_codes u16 | n_codes x (symbol u8, len u8, packed code bits)
//! | payload_bits u64 | packed payload
//! ```

use std::io::{Read, Write};

use super::huffman::HuffmanCodebook;
use super::link::LinkHeader;
use super::BitStream;
use crate::codec;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CMBS";
const VERSION: u32 = 1;

pub fn write_dump<W: Write>(w: &mut W, header: &LinkHeader, payload: &BitStream) -> Result<()> {
    let io = |e| Error::io("writing bitstream dump", e);
    w.write_all(MAGIC).map_err(io)?;
    codec::write_u32(w, VERSION)?;
    codec::write_f64(w, header.z_min)?;
    codec::write_f64(w, header.z_max)?;
    codec::write_u64(w, header.count as u64)?;
    codec::write_u8(w, header.pad as u8)?;
    let entries: Vec<_> = header.codebook.entries().collect();
    w.write_all(&(entries.len() as u16).to_le_bytes()).map_err(io)?;
    for (sym, code) in entries {
        codec::write_u8(w, sym)?;
        codec::write_u8(w, code.len() as u8)?;
        w.write_all(&code.to_packed()).map_err(io)?;
    }
    codec::write_u64(w, payload.len() as u64)?;
    w.write_all(&payload.to_packed()).map_err(io)?;
    Ok(())
}

pub fn read_dump<R: Read>(r: &mut R) -> Result<(LinkHeader, BitStream)> {
    codec::expect_magic(r, MAGIC)?;
    let version = codec::read_u32(r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported dump version {version}")));
    }
    let z_min = codec::read_f64(r)?;
    let z_max = codec::read_f64(r)?;
    let count = codec::read_u64(r)? as usize;
    let pad = codec::read_u8(r)? as usize;
    let mut n = [0u8; 2];
    read_exact(r, &mut n)?;
    let mut codes = Vec::new();
    for _ in 0..u16::from_le_bytes(n) {
        let sym = codec::read_u8(r)?;
        let len = codec::read_u8(r)? as usize;
        codes.push((sym, read_bits(r, len)?));
    }
    let codebook = HuffmanCodebook::from_codes(codes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let len = codec::read_u64(r)? as usize;
    let payload = read_bits(r, len)?;
    Ok((
        LinkHeader {
            z_min,
            z_max,
            count,
            pad,
            codebook,
        },
        payload,
    ))
}

pub fn dump_to_bytes(header: &LinkHeader, payload: &BitStream) -> Vec<u8> {
    let mut buf = Vec::new();
    write_dump(&mut buf, header, payload).expect("writing to a Vec cannot fail");
    buf
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Checkpoint(format!("truncated dump: {e}")))
}

fn read_bits<R: Read>(r: &mut R, len: usize) -> Result<BitStream> {
    if len > 1 << 32 {
        return Err(Error::Checkpoint(format!("implausible bit length {len}")));
    }
    let mut bytes = vec![0u8; len.div_ceil(8)];
    read_exact(r, &mut bytes)?;
    Ok(BitStream::from_packed(&bytes, len).expect("buffer sized for len"))
}

#[cfg(test)]
mod tests {
    use super::super::link::encode_frame;
    use super::*;

    #[test]
    fn dump_round_trip() {
        let z: Vec<f64> = (0..20).map(|i| (i as f64 * 0.7).cos()).collect();
        let frame = encode_frame(&z).unwrap();
        let bytes = dump_to_bytes(&frame.header, &frame.coded);
        assert_eq!(&bytes[..4], b"CMBS");
        let (header, payload) = read_dump(&mut bytes.as_slice()).unwrap();
        assert_eq!(header, frame.header);
        assert_eq!(payload, frame.coded);
        assert!(read_dump(&mut &bytes[..bytes.len() - 1]).is_err());
    }
}
