//! Sparse psum codec: a presence bitmask plus packed nonzero codes, and a
//! zero-skipping accumulator.
//!
//! Wire layout of one block, all multi-byte fields little-endian:
//!
//! ```text
//! u16 s_count | u8 width_bits | bitmask (s_count bits, LSB-first, byte-padded)
//!             | payload (popcount * width_bits bits, LSB-first, byte-padded)
//! ```
//!
//! A stream is a plain concatenation of blocks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Psum codes, one block per output neuron.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompressedPsumBlock {
    pub s_count: usize,
    pub width_bits: u8,
    /// Payload codes are two's complement when set.
    pub signed: bool,
    /// Bit `s` set iff psum `s` is nonzero; LSB-first, byte-padded.
    pub bitmask: Vec<u8>,
    /// Nonzero codes in ascending segment order.
    pub payload: Vec<i32>,
}

impl CompressedPsumBlock {
    pub fn nnz(&self) -> usize {
        self.bitmask.iter().map(|b| b.count_ones() as usize).sum()
    }

    /// `s_count + width_bits * nnz`.
    pub fn size_bits(&self) -> u64 {
        self.s_count as u64 + self.width_bits as u64 * self.nnz() as u64
    }

    pub fn uncompressed_bits(&self) -> u64 {
        self.s_count as u64 * self.width_bits as u64
    }

    #[inline]
    pub fn is_set(&self, s: usize) -> bool {
        self.bitmask[s / 8] >> (s % 8) & 1 == 1
    }

    fn code_range(width: u8, signed: bool) -> (i64, i64) {
        if signed {
            (-(1i64 << (width - 1)), (1i64 << (width - 1)) - 1)
        } else {
            (0, (1i64 << width) - 1)
        }
    }
}

fn check_width(width: u8, signed: bool) -> Result<()> {
    if width == 0 || width > 32 || (signed && width < 2) {
        return Err(Error::InvalidArgument(format!(
            "unsupported psum width {width} (signed = {signed})"
        )));
    }
    Ok(())
}

/// Compress unsigned post-ADC codes.
pub fn compress(psums: &[i32], width_bits: u8) -> Result<CompressedPsumBlock> {
    compress_with(psums, width_bits, false)
}

/// Compress signed codes (vConv comparison runs).
pub fn compress_signed(psums: &[i32], width_bits: u8) -> Result<CompressedPsumBlock> {
    compress_with(psums, width_bits, true)
}

fn compress_with(psums: &[i32], width_bits: u8, signed: bool) -> Result<CompressedPsumBlock> {
    check_width(width_bits, signed)?;
    let (lo, hi) = CompressedPsumBlock::code_range(width_bits, signed);
    let mut bitmask = vec![0u8; psums.len().div_ceil(8)];
    let mut payload = Vec::new();
    for (i, &v) in psums.iter().enumerate() {
        if !(lo..=hi).contains(&(v as i64)) {
            return Err(Error::PsumOutOfRange {
                index: i,
                value: v as i64,
                width: width_bits,
            });
        }
        if v != 0 {
            bitmask[i / 8] |= 1 << (i % 8);
            payload.push(v);
        }
    }
    Ok(CompressedPsumBlock {
        s_count: psums.len(),
        width_bits,
        signed,
        bitmask,
        payload,
    })
}

/// Checks every structural invariant of a block.
pub fn validate_block(block: &CompressedPsumBlock) -> Result<()> {
    check_width(block.width_bits, block.signed)?;
    if block.bitmask.len() != block.s_count.div_ceil(8) {
        return Err(Error::Corrupt(format!(
            "bitmask is {} bytes for {} psums",
            block.bitmask.len(),
            block.s_count
        )));
    }
    if block.s_count % 8 != 0 {
        let tail = block.bitmask[block.s_count / 8] >> (block.s_count % 8);
        if tail != 0 {
            return Err(Error::Corrupt("bitmask padding bits set".into()));
        }
    }
    let nnz = block.nnz();
    if nnz != block.payload.len() {
        return Err(Error::Corrupt(format!(
            "bitmask popcount {nnz} but {} payload codes",
            block.payload.len()
        )));
    }
    let (lo, hi) = CompressedPsumBlock::code_range(block.width_bits, block.signed);
    for (i, &v) in block.payload.iter().enumerate() {
        if v == 0 {
            return Err(Error::Corrupt(format!("payload entry {i} is zero")));
        }
        if !(lo..=hi).contains(&(v as i64)) {
            return Err(Error::Corrupt(format!(
                "payload entry {i} = {v} exceeds {} bits",
                block.width_bits
            )));
        }
    }
    Ok(())
}

pub fn decompress(block: &CompressedPsumBlock) -> Result<Vec<i32>> {
    validate_block(block)?;
    let mut out = vec![0i32; block.s_count];
    let mut codes = block.payload.iter();
    for (s, slot) in out.iter_mut().enumerate() {
        if block.is_set(s) {
            *slot = *codes.next().expect("popcount checked");
        }
    }
    Ok(out)
}

/// `s_count * width / size_bits`; below 1 when compression loses.
pub fn compression_ratio(block: &CompressedPsumBlock) -> f64 {
    block.uncompressed_bits() as f64 / block.size_bits() as f64
}

/// Result of accumulating one neuron's psums with zero skipping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccumulatorReport {
    pub sum: i32,
    pub adds_performed: usize,
    pub psums_skipped: usize,
}

/// Sum psums, spending an add only on nonzero operands after the first.
///
/// The accumulator is 32-bit signed; overflow is an error.
pub fn zero_skip_accumulate(psums: &[i32]) -> Result<AccumulatorReport> {
    let mut acc: Option<i32> = None;
    let mut adds = 0;
    let mut skipped = 0;
    for &v in psums {
        if v == 0 {
            skipped += 1;
            continue;
        }
        acc = Some(match acc {
            None => v,
            Some(a) => {
                adds += 1;
                a.checked_add(v).ok_or(Error::AccumulatorOverflow { adds })?
            }
        });
    }
    Ok(AccumulatorReport {
        sum: acc.unwrap_or(0),
        adds_performed: adds,
        psums_skipped: skipped,
    })
}

/// Accumulate straight from a compressed block: the bitmask decides which
/// payload entries exist, so zeros never reach the adder.
pub fn accumulate_block(block: &CompressedPsumBlock) -> Result<AccumulatorReport> {
    validate_block(block)?;
    let mut it = block.payload.iter();
    let mut sum = match it.next() {
        Some(&v) => v,
        None => 0,
    };
    let mut adds = 0;
    for &v in it {
        adds += 1;
        sum = sum.checked_add(v).ok_or(Error::AccumulatorOverflow { adds })?;
    }
    Ok(AccumulatorReport {
        sum,
        adds_performed: adds,
        psums_skipped: block.s_count - block.payload.len(),
    })
}

struct BitWriter<'a> {
    out: &'a mut Vec<u8>,
    used: u32,
}

impl<'a> BitWriter<'a> {
    fn new(out: &'a mut Vec<u8>) -> Self {
        BitWriter { out, used: 8 }
    }

    fn push(&mut self, value: u64, bits: u32) {
        for i in 0..bits {
            if self.used == 8 {
                self.out.push(0);
                self.used = 0;
            }
            let bit = ((value >> i) & 1) as u8;
            *self.out.last_mut().expect("pushed above") |= bit << self.used;
            self.used += 1;
        }
    }
}

struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl BitReader<'_> {
    fn take(&mut self, bits: u32) -> Option<u64> {
        if self.pos + bits as usize > self.bytes.len() * 8 {
            return None;
        }
        let mut v = 0u64;
        for i in 0..bits as usize {
            let p = self.pos + i;
            v |= (((self.bytes[p / 8] >> (p % 8)) & 1) as u64) << i;
        }
        self.pos += bits as usize;
        Some(v)
    }
}

/// Append one block's wire form to `out`.
pub fn write_block(block: &CompressedPsumBlock, out: &mut Vec<u8>) -> Result<()> {
    validate_block(block)?;
    let s = u16::try_from(block.s_count).map_err(|_| {
        Error::InvalidArgument(format!("s_count {} does not fit the u16 header", block.s_count))
    })?;
    out.extend_from_slice(&s.to_le_bytes());
    out.push(block.width_bits);
    out.extend_from_slice(&block.bitmask);
    let mask = if block.width_bits == 32 { u32::MAX as u64 } else { (1u64 << block.width_bits) - 1 };
    let mut w = BitWriter::new(out);
    for &v in &block.payload {
        w.push(v as i64 as u64 & mask, block.width_bits as u32);
    }
    Ok(())
}

pub fn encode_stream(blocks: &[CompressedPsumBlock]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for b in blocks {
        write_block(b, &mut out)?;
    }
    Ok(out)
}

/// Parse a concatenation of blocks. `signed` selects how codes are read back.
pub fn decode_stream(bytes: &[u8], signed: bool) -> Result<Vec<CompressedPsumBlock>> {
    let mut blocks = Vec::new();
    let mut at = 0;
    while at < bytes.len() {
        let header = bytes
            .get(at..at + 3)
            .ok_or_else(|| Error::Corrupt(format!("truncated header at byte {at}")))?;
        let s_count = u16::from_le_bytes([header[0], header[1]]) as usize;
        let width = header[2];
        check_width(width, signed).map_err(|e| Error::Corrupt(format!("at byte {at}: {e}")))?;
        at += 3;
        let mask_len = s_count.div_ceil(8);
        let bitmask = bytes
            .get(at..at + mask_len)
            .ok_or_else(|| Error::Corrupt(format!("truncated bitmask at byte {at}")))?
            .to_vec();
        at += mask_len;
        let nnz: usize = bitmask.iter().map(|b| b.count_ones() as usize).sum();
        let payload_len = (nnz * width as usize).div_ceil(8);
        let raw = bytes
            .get(at..at + payload_len)
            .ok_or_else(|| Error::Corrupt(format!("truncated payload at byte {at}")))?;
        at += payload_len;
        let mut r = BitReader { bytes: raw, pos: 0 };
        let payload = (0..nnz)
            .map(|_| {
                let v = r.take(width as u32).expect("length computed from nnz");
                if signed && width < 64 && v >> (width - 1) & 1 == 1 {
                    (v as i64 - (1i64 << width)) as i32
                } else {
                    v as i64 as i32
                }
            })
            .collect();
        let used = nnz * width as usize;
        if used < raw.len() * 8 && raw[raw.len() - 1] >> (used % 8) != 0 {
            return Err(Error::Corrupt(format!("nonzero payload padding before byte {at}")));
        }
        let block = CompressedPsumBlock {
            s_count,
            width_bits: width,
            signed,
            bitmask,
            payload,
        };
        validate_block(&block)?;
        blocks.push(block);
    }
    Ok(blocks)
}

#[cfg(test)]
mod tests {
    use super::*;

    const WORKED_PATTERN: [i32; 9] = [37, 0, 112, 0, 0, 9, 0, 0, 0];

    #[test]
    fn worked_example_sizes() {
        let b = compress(&WORKED_PATTERN, 8).unwrap();
        assert_eq!(b.size_bits(), 33);
        assert_eq!(b.uncompressed_bits(), 72);
        let r = compression_ratio(&b);
        assert!((r - 72.0 / 33.0).abs() < 1e-12);
        let acc = zero_skip_accumulate(&WORKED_PATTERN).unwrap();
        assert_eq!(acc.adds_performed, 2);
        assert_eq!(acc.psums_skipped, 6);
        assert_eq!(acc.sum, 158);
        assert_eq!(accumulate_block(&b).unwrap(), acc);
    }

    #[test]
    fn all_zero_and_dense_blocks() {
        let b = compress(&[0; 9], 8).unwrap();
        assert_eq!(b.size_bits(), 9);
        assert!(b.payload.is_empty());
        assert_eq!(decompress(&b).unwrap(), vec![0; 9]);
        assert_eq!(zero_skip_accumulate(&[0; 9]).unwrap().adds_performed, 0);

        let dense = [1, 2, 3, 4, 5, 6, 7, 8, 9];
        let b = compress(&dense, 8).unwrap();
        assert_eq!(decompress(&b).unwrap(), dense);
        assert!(compression_ratio(&b) < 1.0);
        assert_eq!(zero_skip_accumulate(&dense).unwrap().adds_performed, 8);
    }

    #[test]
    fn out_of_range_names_index() {
        match compress(&[0, 3, 256], 8) {
            Err(Error::PsumOutOfRange { index, value, width }) => {
                assert_eq!((index, value, width), (2, 256, 8));
            }
            other => panic!("{other:?}"),
        }
        assert!(compress(&[-1], 8).is_err());
        assert!(compress_signed(&[-128, 127], 8).is_ok());
        assert!(compress_signed(&[-129], 8).is_err());
    }

    #[test]
    fn corruption_is_detected() {
        let mut b = compress(&WORKED_PATTERN, 8).unwrap();
        b.bitmask[0] ^= 0b10;
        assert!(matches!(decompress(&b), Err(Error::Corrupt(_))));

        let mut b = compress(&WORKED_PATTERN, 8).unwrap();
        b.bitmask[1] |= 0b10;
        assert!(decompress(&b).is_err(), "padding bit");

        let mut b = compress(&WORKED_PATTERN, 8).unwrap();
        b.payload[1] = 0;
        assert!(decompress(&b).is_err());
    }

    #[test]
    fn wire_bytes_of_worked_example() {
        let b = compress(&WORKED_PATTERN, 8).unwrap();
        let bytes = encode_stream(std::slice::from_ref(&b)).unwrap();
        assert_eq!(bytes, vec![9, 0, 8, 0b0010_0101, 0, 37, 112, 9]);
        assert_eq!(decode_stream(&bytes, false).unwrap(), vec![b]);
    }

    #[test]
    fn odd_widths_pack_across_bytes() {
        let v = [5, 0, 7, 1, 0, 3];
        let b = compress(&v, 3).unwrap();
        let bytes = encode_stream(&[b.clone(), b.clone()]).unwrap();
        // header 3 + mask 1 + payload ceil(12/8) = 2
        assert_eq!(bytes.len(), 12);
        let back = decode_stream(&bytes, false).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(decompress(&back[1]).unwrap(), v);

        let s = compress_signed(&[-4, 0, 3, -1], 3).unwrap();
        let back = decode_stream(&encode_stream(&[s]).unwrap(), true).unwrap();
        assert_eq!(decompress(&back[0]).unwrap(), vec![-4, 0, 3, -1]);
    }

    #[test]
    fn truncated_streams_fail() {
        let bytes = encode_stream(&[compress(&WORKED_PATTERN, 8).unwrap()]).unwrap();
        for cut in 1..bytes.len() {
            assert!(decode_stream(&bytes[..cut], false).is_err(), "cut at {cut}");
        }
    }

    #[test]
    fn overflow_is_checked() {
        assert!(matches!(
            zero_skip_accumulate(&[i32::MAX, 1]),
            Err(Error::AccumulatorOverflow { adds: 1 })
        ));
    }
}
