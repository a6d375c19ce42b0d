//! Asymmetric B-bit group quantization and LSB-first bit packing.
//!
//! A group of values is mapped to integer codes with a zero-point equal to
//! the group minimum and a scale equal to the range divided by `2^B - 1`:
//!
//! ```text
//! q_i = round((x_i - z) / s)        x~_i = q_i * s + z
//! ```
//!
//! Rounding is half-away-from-zero and the codes are clamped to
//! `[0, 2^B - 1]`, so every reconstructed element lies within `s / 2` of the
//! original. A group with zero range gets `s = 0`, all-zero codes, and
//! reconstructs exactly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Storage width of a quantized element. `Sixteen` is full-precision
/// pass-through and is never produced by [`quantize_group`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum BitWidth {
    Two,
    Four,
    Sixteen,
}

impl BitWidth {
    pub const fn bits(self) -> u32 {
        match self {
            BitWidth::Two => 2,
            BitWidth::Four => 4,
            BitWidth::Sixteen => 16,
        }
    }

    /// Largest representable code, `2^B - 1`.
    pub const fn max_code(self) -> u16 {
        match self {
            BitWidth::Two => 3,
            BitWidth::Four => 15,
            BitWidth::Sixteen => u16::MAX,
        }
    }

    pub const fn is_quantized(self) -> bool {
        !matches!(self, BitWidth::Sixteen)
    }
}

impl TryFrom<u8> for BitWidth {
    type Error = Error;

    fn try_from(bits: u8) -> Result<Self> {
        match bits {
            2 => Ok(BitWidth::Two),
            4 => Ok(BitWidth::Four),
            16 => Ok(BitWidth::Sixteen),
            other => Err(Error::invalid(format!("unsupported bit width {other}, expected 2, 4 or 16"))),
        }
    }
}

impl From<BitWidth> for u8 {
    fn from(b: BitWidth) -> u8 {
        b.bits() as u8
    }
}

impl std::fmt::Display for BitWidth {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.bits())
    }
}

/// Contiguous bit-packed codes, LSB-first within each byte.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedBuffer {
    bytes: Vec<u8>,
    bit_width: BitWidth,
    len: usize,
}

impl PackedBuffer {
    /// Wraps raw bytes without validation; [`unpack_codes`] reports any
    /// inconsistency as [`Error::CorruptBuffer`].
    pub fn from_raw_parts(bytes: Vec<u8>, bit_width: BitWidth, len: usize) -> Self {
        Self { bytes, bit_width, len }
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn bit_width(&self) -> BitWidth {
        self.bit_width
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Byte length required for `len` codes of `bit_width` bits.
    pub fn expected_byte_len(bit_width: BitWidth, len: usize) -> usize {
        (len * bit_width.bits() as usize).div_ceil(8)
    }
}

/// Packs codes LSB-first: element 0 occupies the lowest-order bits of byte 0.
/// The unused high bits of a final partial byte are zero.
pub fn pack_codes(codes: &[u16], bit_width: BitWidth) -> Result<PackedBuffer> {
    let bits = bit_width.bits() as usize;
    let max = bit_width.max_code();
    let mut bytes = vec![0u8; PackedBuffer::expected_byte_len(bit_width, codes.len())];
    for (i, &code) in codes.iter().enumerate() {
        if code > max {
            return Err(Error::invalid(format!("code {code} at index {i} exceeds {max} for {bits}-bit packing")));
        }
        let mut offset = i * bits;
        let mut remaining = bits;
        let mut value = code as u32;
        while remaining > 0 {
            let shift = offset % 8;
            let take = remaining.min(8 - shift);
            let mask = (1u32 << take) - 1;
            bytes[offset / 8] |= ((value & mask) << shift) as u8;
            value >>= take;
            offset += take;
            remaining -= take;
        }
    }
    Ok(PackedBuffer { bytes, bit_width, len: codes.len() })
}

/// Exact inverse of [`pack_codes`]. Rejects buffers whose byte length does
/// not match `len` or whose padding bits are set.
pub fn unpack_codes(buf: &PackedBuffer) -> Result<Vec<u16>> {
    let bits = buf.bit_width.bits() as usize;
    let expected = PackedBuffer::expected_byte_len(buf.bit_width, buf.len);
    if buf.bytes.len() != expected {
        return Err(Error::CorruptBuffer(format!(
            "{} bytes for {} codes of {} bits, expected {}",
            buf.bytes.len(),
            buf.len,
            bits,
            expected
        )));
    }
    let used_bits = buf.len * bits;
    if !used_bits.is_multiple_of(8) {
        let tail = buf.bytes[expected - 1] >> (used_bits % 8);
        if tail != 0 {
            return Err(Error::CorruptBuffer("nonzero padding bits in final byte".into()));
        }
    }
    let mut codes = Vec::with_capacity(buf.len);
    for i in 0..buf.len {
        let mut offset = i * bits;
        let mut remaining = bits;
        let mut value = 0u32;
        let mut written = 0;
        while remaining > 0 {
            let shift = offset % 8;
            let take = remaining.min(8 - shift);
            let mask = (1u32 << take) - 1;
            value |= ((buf.bytes[offset / 8] as u32 >> shift) & mask) << written;
            written += take;
            offset += take;
            remaining -= take;
        }
        codes.push(value as u16);
    }
    Ok(codes)
}

/// One quantization group: packed codes plus the shared zero-point and scale.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedGroup {
    codes: PackedBuffer,
    zero_point: f64,
    scale: f64,
}

impl QuantizedGroup {
    pub fn zero_point(&self) -> f64 {
        self.zero_point
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn bit_width(&self) -> BitWidth {
        self.codes.bit_width
    }

    pub fn len(&self) -> usize {
        self.codes.len
    }

    pub fn is_empty(&self) -> bool {
        self.codes.len == 0
    }

    pub fn packed(&self) -> &PackedBuffer {
        &self.codes
    }

    pub fn codes(&self) -> Vec<u16> {
        unpack_codes(&self.codes).expect("group holds a well-formed buffer")
    }

    /// Reassembles a group from stored parts, validating the buffer and the
    /// zero-scale invariant.
    pub fn from_parts(codes: PackedBuffer, zero_point: f64, scale: f64) -> Result<Self> {
        let unpacked = unpack_codes(&codes)?;
        if !codes.bit_width.is_quantized() {
            return Err(Error::invalid("quantized groups use 2 or 4 bits"));
        }
        if !scale.is_finite() || scale < 0.0 || !zero_point.is_finite() {
            return Err(Error::invalid(format!("bad group parameters z={zero_point} s={scale}")));
        }
        if scale == 0.0 && unpacked.iter().any(|&c| c != 0) {
            return Err(Error::invalid("zero-scale group must have all-zero codes"));
        }
        Ok(Self { codes, zero_point, scale })
    }
}

/// Quantizes `values` with `z = min`, `s = (max - min) / (2^B - 1)`.
pub fn quantize_group(values: &[f64], bit_width: BitWidth) -> Result<QuantizedGroup> {
    if values.is_empty() {
        return Err(Error::invalid("cannot quantize an empty group"));
    }
    if !bit_width.is_quantized() {
        return Err(Error::invalid("quantize_group requires 2 or 4 bits"));
    }
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for (i, &v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::invalid(format!("non-finite element {v} at index {i}")));
        }
        min = min.min(v);
        max = max.max(v);
    }
    let range = max - min;
    if !range.is_finite() {
        return Err(Error::invalid("group range overflows f64"));
    }
    let max_code = bit_width.max_code();
    let scale = range / max_code as f64;
    let codes: Vec<u16> = if scale > 0.0 {
        values
            .iter()
            .map(|&v| ((v - min) / scale).round().clamp(0.0, max_code as f64) as u16)
            .collect()
    } else {
        vec![0; values.len()]
    };
    Ok(QuantizedGroup { codes: pack_codes(&codes, bit_width)?, zero_point: min, scale: scale.max(0.0) })
}

/// `x~_i = q_i * s + z`.
pub fn dequantize_group(group: &QuantizedGroup) -> Vec<f64> {
    group.codes().into_iter().map(|q| q as f64 * group.scale + group.zero_point).collect()
}

/// The analytic elementwise reconstruction bound `s / 2`.
pub fn quantization_error_bound(group: &QuantizedGroup) -> f64 {
    group.scale / 2.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn on_grid_values_quantize_exactly() {
        let g = quantize_group(&[0.0, 1.0, 2.0, 3.0], BitWidth::Two).unwrap();
        assert_eq!(g.zero_point(), 0.0);
        assert_eq!(g.scale(), 1.0);
        assert_eq!(g.codes(), vec![0, 1, 2, 3]);
        assert_eq!(dequantize_group(&g), vec![0.0, 1.0, 2.0, 3.0]);
        assert_eq!(quantization_error_bound(&g), 0.5);
    }

    #[test]
    fn constant_group_is_lossless() {
        let g = quantize_group(&[5.0, 5.0, 5.0], BitWidth::Four).unwrap();
        assert_eq!((g.zero_point(), g.scale()), (5.0, 0.0));
        assert_eq!(g.codes(), vec![0, 0, 0]);
        assert_eq!(dequantize_group(&g), vec![5.0; 3]);
        assert_eq!(quantization_error_bound(&g), 0.0);
    }

    #[test]
    fn off_grid_example() {
        // Scalar oracle: s = 1/3; 0.3*3 = 0.9 -> 1, 0.7*3 = 2.1 -> 2.
        let x = [0.0, 0.3, 0.7, 1.0];
        let g = quantize_group(&x, BitWidth::Two).unwrap();
        assert_eq!(g.zero_point(), 0.0);
        assert!((g.scale() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(g.codes(), vec![0, 1, 2, 3]);
        let xt = dequantize_group(&g);
        let expect = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
        for (a, b) in xt.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        let max_err = x.iter().zip(&xt).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!((max_err - 1.0 / 30.0).abs() < 1e-12);
        assert!((quantization_error_bound(&g) - 1.0 / 6.0).abs() < 1e-15);
        assert!(max_err <= quantization_error_bound(&g));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(quantize_group(&[], BitWidth::Two), Err(Error::InvalidInput(_))));
        assert!(matches!(quantize_group(&[1.0, f64::NAN], BitWidth::Two), Err(Error::InvalidInput(_))));
        assert!(matches!(quantize_group(&[f64::INFINITY], BitWidth::Four), Err(Error::InvalidInput(_))));
        assert!(matches!(quantize_group(&[1.0], BitWidth::Sixteen), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn bit_width_construction() {
        assert_eq!(BitWidth::try_from(2).unwrap(), BitWidth::Two);
        assert_eq!(BitWidth::try_from(4).unwrap(), BitWidth::Four);
        assert_eq!(BitWidth::try_from(16).unwrap(), BitWidth::Sixteen);
        for bad in [0u8, 1, 3, 8, 32] {
            assert!(BitWidth::try_from(bad).is_err());
        }
    }

    #[test]
    fn pack_layout_is_lsb_first() {
        let buf = pack_codes(&[0, 1, 2, 3], BitWidth::Two).unwrap();
        assert_eq!(buf.bytes(), &[0xE4]);
        assert_eq!(unpack_codes(&buf).unwrap(), vec![0, 1, 2, 3]);

        let buf = pack_codes(&[15], BitWidth::Four).unwrap();
        assert_eq!(buf.bytes(), &[0x0F]);
        assert_eq!(unpack_codes(&buf).unwrap(), vec![15]);

        assert!(pack_codes(&[], BitWidth::Four).unwrap().bytes().is_empty());

        // Two nibbles: element 0 low, element 1 high.
        assert_eq!(pack_codes(&[0x3, 0xA], BitWidth::Four).unwrap().bytes(), &[0xA3]);
        // 16-bit codes are little-endian.
        assert_eq!(pack_codes(&[0x1234], BitWidth::Sixteen).unwrap().bytes(), &[0x34, 0x12]);
    }

    #[test]
    fn pack_rejects_out_of_range() {
        assert!(matches!(pack_codes(&[4], BitWidth::Two), Err(Error::InvalidInput(_))));
        assert!(matches!(pack_codes(&[16], BitWidth::Four), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn unpack_detects_corruption() {
        let wrong_len = PackedBuffer::from_raw_parts(vec![0xE4, 0x00], BitWidth::Two, 4);
        assert!(matches!(unpack_codes(&wrong_len), Err(Error::CorruptBuffer(_))));
        let dirty_pad = PackedBuffer::from_raw_parts(vec![0xF0], BitWidth::Two, 2);
        assert!(matches!(unpack_codes(&dirty_pad), Err(Error::CorruptBuffer(_))));
    }

    #[test]
    fn from_parts_validates() {
        let buf = pack_codes(&[1, 0], BitWidth::Two).unwrap();
        assert!(QuantizedGroup::from_parts(buf.clone(), 0.0, 0.0).is_err());
        assert!(QuantizedGroup::from_parts(buf.clone(), 0.0, -1.0).is_err());
        let g = QuantizedGroup::from_parts(buf, 1.0, 0.5).unwrap();
        assert_eq!(dequantize_group(&g), vec![1.5, 1.0]);
    }

    fn ulp_slack(values: &[f64]) -> f64 {
        let mag = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        8.0 * f64::EPSILON * mag.max(f64::MIN_POSITIVE)
    }

    proptest! {
        #[test]
        fn reconstruction_within_half_scale(
            values in prop::collection::vec(-1e3f64..1e3, 1..200),
            four in any::<bool>(),
        ) {
            let bw = if four { BitWidth::Four } else { BitWidth::Two };
            let g = quantize_group(&values, bw).unwrap();
            let bound = quantization_error_bound(&g) + ulp_slack(&values);
            for (x, xt) in values.iter().zip(dequantize_group(&g)) {
                prop_assert!((x - xt).abs() <= bound);
            }
        }

        #[test]
        fn four_bit_scale_is_fifth_of_two_bit(values in prop::collection::vec(-1e3f64..1e3, 1..64)) {
            let s2 = quantize_group(&values, BitWidth::Two).unwrap().scale();
            let s4 = quantize_group(&values, BitWidth::Four).unwrap().scale();
            prop_assert!((s4 - s2 / 5.0).abs() <= 4.0 * f64::EPSILON * s2.max(f64::MIN_POSITIVE));
        }

        #[test]
        fn permutation_permutes_codes(values in prop::collection::vec(-10f64..10.0, 2..40), rot in 0usize..40) {
            let rot = rot % values.len();
            let mut rotated = values.clone();
            rotated.rotate_left(rot);
            let a = quantize_group(&values, BitWidth::Four).unwrap();
            let b = quantize_group(&rotated, BitWidth::Four).unwrap();
            prop_assert_eq!(a.zero_point(), b.zero_point());
            prop_assert_eq!(a.scale(), b.scale());
            let mut ca = a.codes();
            ca.rotate_left(rot);
            prop_assert_eq!(ca, b.codes());
        }

        #[test]
        fn on_grid_round_trip(
            z in -100f64..100.0,
            s in 0.01f64..10.0,
            codes in prop::collection::vec(0u16..=15, 1..50),
        ) {
            let mut codes = codes;
            codes.extend([0, 15]);
            let values: Vec<f64> = codes.iter().map(|&k| z + k as f64 * s).collect();
            let g = quantize_group(&values, BitWidth::Four).unwrap();
            for (x, xt) in values.iter().zip(dequantize_group(&g)) {
                prop_assert!((x - xt).abs() <= 1e-9 * (1.0 + x.abs()));
            }
        }

        #[test]
        fn pack_unpack_identity(codes in prop::collection::vec(0u16..=15, 0..100)) {
            let buf = pack_codes(&codes, BitWidth::Four).unwrap();
            prop_assert_eq!(buf.bytes().len(), PackedBuffer::expected_byte_len(BitWidth::Four, codes.len()));
            prop_assert_eq!(unpack_codes(&buf).unwrap(), codes);
        }
    }
}
