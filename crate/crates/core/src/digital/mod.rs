//! Digital feature transport.

mod bits;
pub mod conv;
pub mod dump;
pub mod huffman;
pub mod link;
pub mod qam;
pub mod quantize;

pub use bits::BitStream;
pub use conv::{conv_encode, viterbi_decode};
pub use huffman::{histogram, huffman_decode, huffman_decode_lenient, huffman_encode, HuffmanCodebook};
pub use link::{
    decode_frame, digital_transmit, digital_transmit_detailed, encode_frame, symbol_channel,
    DigitalLinkConfig, EncodedFrame, HeaderPolicy, LinkHeader, Transmission,
};
pub use qam::{qam16_demodulate, qam16_modulate};
pub use quantize::{dequantize, quantize, Quantized};
