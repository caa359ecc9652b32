//! Adaptive binary range coder shared by the parameter and image codecs.
//!
//! The encoder keeps a 64-bit `low` with carry propagation through a cached
//! byte and a 32-bit `range`; probabilities are 16-bit estimates of
//! `P(bit = 0)`. Everything is integer arithmetic, so streams are identical on
//! every platform. A stream of `n` renormalizations occupies exactly `n + 5`
//! bytes and the decoder consumes exactly that many, which lets container
//! formats detect both truncation and trailing garbage.

use crate::error::{Error, Result};

const TOP: u32 = 1 << 24;
const PROB_BITS: u32 = 16;
const PROB_INIT: u16 = 1 << (PROB_BITS - 1);

/// Adaptive probability state for one binary decision.
///
/// The adaptation rate starts fast and slows as the context sees more bins
/// (shift 4 up to 7).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Context {
    p0: u16,
    count: u8,
}

impl Default for Context {
    fn default() -> Self {
        Self {
            p0: PROB_INIT,
            count: 0,
        }
    }
}

impl Context {
    /// Probability of a zero bin, scaled by 2^16.
    pub fn p0(&self) -> u16 {
        self.p0
    }

    fn update(&mut self, bit: bool) {
        let shift = 4 + (self.count / 16).min(3);
        if bit {
            self.p0 -= self.p0 >> shift;
        } else {
            self.p0 += (((1u32 << PROB_BITS) - self.p0 as u32) >> shift) as u16;
        }
        self.count = self.count.saturating_add(1);
    }

    /// Ideal code length of `bit` in this state, in bits.
    pub fn cost(&self, bit: bool) -> f64 {
        let p0 = self.p0 as f64 / 65536.0;
        -(if bit { 1.0 - p0 } else { p0 }).log2()
    }
}

/// Anything that consumes context-coded and bypass bins: the real encoder or
/// a bit-cost estimator.
pub trait BinSink {
    fn encode(&mut self, ctx: &mut Context, bit: bool);
    fn encode_bypass(&mut self, bit: bool);

    /// `n` low bits of `value`, most significant first, in bypass mode.
    fn encode_bypass_bits(&mut self, value: u32, n: u32) {
        for k in (0..n).rev() {
            self.encode_bypass(value >> k & 1 == 1);
        }
    }
}

pub struct Encoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    out: Vec<u8>,
}

impl Default for Encoder {
    fn default() -> Self {
        Self::new()
    }
}

impl Encoder {
    pub fn new() -> Self {
        Self {
            low: 0,
            range: u32::MAX,
            cache: 0,
            cache_size: 1,
            out: Vec::new(),
        }
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut temp = self.cache;
            loop {
                self.out.push(temp.wrapping_add(carry));
                temp = 0xFF;
                self.cache_size -= 1;
                if self.cache_size == 0 {
                    break;
                }
            }
            self.cache = (self.low >> 24) as u8;
        }
        self.cache_size += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    fn encode_with(&mut self, p0: u16, bit: bool) {
        let bound = (self.range >> PROB_BITS) * p0 as u32;
        if bit {
            self.low += bound as u64;
            self.range -= bound;
        } else {
            self.range = bound;
        }
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

impl BinSink for Encoder {
    fn encode(&mut self, ctx: &mut Context, bit: bool) {
        self.encode_with(ctx.p0, bit);
        ctx.update(bit);
    }

    fn encode_bypass(&mut self, bit: bool) {
        self.encode_with(PROB_INIT, bit);
    }
}

/// Accumulates ideal code lengths while adapting the contexts it is given,
/// so a clone of the real contexts predicts what encoding would cost.
#[derive(Clone, Copy, Debug, Default)]
pub struct CostEstimator {
    pub bits: f64,
}

impl BinSink for CostEstimator {
    fn encode(&mut self, ctx: &mut Context, bit: bool) {
        self.bits += ctx.cost(bit);
        ctx.update(bit);
    }

    fn encode_bypass(&mut self, _bit: bool) {
        self.bits += 1.0;
    }
}

pub struct Decoder<'a> {
    data: &'a [u8],
    pos: usize,
    /// Offset of `data[0]` within the enclosing file, for error reports.
    base: usize,
    range: u32,
    code: u32,
}

impl<'a> Decoder<'a> {
    pub fn new(data: &'a [u8]) -> Result<Self> {
        Self::with_offset(data, 0)
    }

    /// As [`Decoder::new`], reporting errors relative to `base`.
    pub fn with_offset(data: &'a [u8], base: usize) -> Result<Self> {
        let mut d = Self {
            data,
            pos: 0,
            base,
            range: u32::MAX,
            code: 0,
        };
        if d.next_byte()? != 0 {
            return Err(Error::decode(base, "range coder stream must start with 0"));
        }
        for _ in 0..4 {
            d.code = d.code << 8 | d.next_byte()? as u32;
        }
        Ok(d)
    }

    fn next_byte(&mut self) -> Result<u8> {
        let b = *self
            .data
            .get(self.pos)
            .ok_or_else(|| Error::decode(self.base + self.pos, "arithmetic-coded payload truncated"))?;
        self.pos += 1;
        Ok(b)
    }

    fn decode_with(&mut self, p0: u16) -> Result<bool> {
        let bound = (self.range >> PROB_BITS) * p0 as u32;
        let bit = if self.code < bound {
            self.range = bound;
            false
        } else {
            self.code -= bound;
            self.range -= bound;
            true
        };
        while self.range < TOP {
            self.range <<= 8;
            self.code = self.code << 8 | self.next_byte()? as u32;
        }
        Ok(bit)
    }

    pub fn decode(&mut self, ctx: &mut Context) -> Result<bool> {
        let bit = self.decode_with(ctx.p0)?;
        ctx.update(bit);
        Ok(bit)
    }

    pub fn decode_bypass(&mut self) -> Result<bool> {
        self.decode_with(PROB_INIT)
    }

    pub fn decode_bypass_bits(&mut self, n: u32) -> Result<u32> {
        let mut v = 0;
        for _ in 0..n {
            v = v << 1 | self.decode_bypass()? as u32;
        }
        Ok(v)
    }

    /// Bytes consumed so far.
    pub fn position(&self) -> usize {
        self.pos
    }

    /// Fails unless the stream was consumed exactly.
    pub fn finish(&self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(Error::decode(
                self.base + self.pos,
                format!("{} unused bytes after arithmetic-coded payload", self.data.len() - self.pos),
            ));
        }
        Ok(())
    }
}

/// Exponent of the Exp-Golomb (k = 0) code of `value`: the number of prefix
/// ones before the terminating zero.
fn eg0_prefix_len(value: u32) -> u32 {
    31 - (value + 1).leading_zeros()
}

/// Exp-Golomb (k = 0) with context-coded unary prefix bins (prefix position
/// `i` uses `ctxs[min(i, len - 1)]`) and a bypass suffix.
pub fn encode_eg0<S: BinSink>(sink: &mut S, ctxs: &mut [Context], value: u32) {
    assert!(value < u32::MAX, "Exp-Golomb value out of range");
    let n = eg0_prefix_len(value);
    let last = ctxs.len() - 1;
    for i in 0..n as usize {
        sink.encode(&mut ctxs[i.min(last)], true);
    }
    sink.encode(&mut ctxs[(n as usize).min(last)], false);
    sink.encode_bypass_bits(value + 1 - (1 << n), n);
}

pub fn decode_eg0(dec: &mut Decoder<'_>, ctxs: &mut [Context]) -> Result<u32> {
    let last = ctxs.len() - 1;
    let mut n = 0usize;
    while dec.decode(&mut ctxs[n.min(last)])? {
        n += 1;
        if n > 31 {
            return Err(Error::decode(dec.base + dec.pos, "Exp-Golomb prefix too long"));
        }
    }
    let suffix = dec.decode_bypass_bits(n as u32)?;
    Ok(((1u64 << n) - 1 + suffix as u64) as u32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn empty_stream_is_five_bytes() {
        let bytes = Encoder::new().finish();
        assert_eq!(bytes, vec![0; 5]);
        Decoder::new(&bytes).unwrap().finish().unwrap();
    }

    #[test]
    fn skewed_source_compresses_near_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p1 = 0.05;
        let bits: Vec<bool> = (0..100_000).map(|_| rng.gen_bool(p1)).collect();
        let mut enc = Encoder::new();
        let mut ctx = Context::default();
        for &b in &bits {
            enc.encode(&mut ctx, b);
        }
        let bytes = enc.finish();
        let h = -(p1 * p1.log2() + (1.0 - p1) * (1.0 - p1).log2());
        let ideal = h * bits.len() as f64;
        let actual = 8.0 * bytes.len() as f64;
        assert!(actual < 1.05 * ideal, "{actual} vs {ideal}");

        let mut dec = Decoder::new(&bytes).unwrap();
        let mut ctx = Context::default();
        for &b in &bits {
            assert_eq!(dec.decode(&mut ctx).unwrap(), b);
        }
        dec.finish().unwrap();
    }

    #[test]
    fn truncation_reports_offset() {
        let mut enc = Encoder::new();
        let mut ctx = Context::default();
        for i in 0..2000 {
            enc.encode(&mut ctx, i % 3 == 0);
        }
        let bytes = enc.finish();
        let cut = &bytes[..bytes.len() - 2];
        let mut dec = Decoder::with_offset(cut, 100).unwrap();
        let mut ctx = Context::default();
        let err = (0..2000).try_for_each(|_| dec.decode(&mut ctx).map(|_| ())).unwrap_err();
        match err {
            Error::Decode { offset, .. } => assert_eq!(offset, 100 + cut.len()),
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn nonzero_lead_byte_is_rejected() {
        assert!(Decoder::new(&[1, 0, 0, 0, 0]).is_err());
    }

    #[derive(Default)]
    struct BinCount(usize);

    impl BinSink for BinCount {
        fn encode(&mut self, _ctx: &mut Context, _bit: bool) {
            self.0 += 1;
        }
        fn encode_bypass(&mut self, _bit: bool) {
            self.0 += 1;
        }
    }

    #[test]
    fn eg0_bin_counts() {
        // 2n + 1 bins for values in [2^n - 1, 2^(n+1) - 2]
        for (v, len) in [(0u32, 1), (1, 3), (2, 3), (3, 5), (6, 5), (7, 7)] {
            let mut count = BinCount::default();
            encode_eg0(&mut count, &mut [Context::default(); 2], v);
            assert_eq!(count.0, len, "value {v}");
        }
    }

    #[test]
    fn cost_estimate_tracks_real_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let values: Vec<u32> = (0..5000).map(|_| rng.gen_range(0..40)).collect();
        let mut enc = Encoder::new();
        let mut est = CostEstimator::default();
        let mut a = [Context::default(); 6];
        let mut b = a;
        for &v in &values {
            encode_eg0(&mut enc, &mut a, v);
            encode_eg0(&mut est, &mut b, v);
        }
        let real = 8.0 * enc.finish().len() as f64;
        assert!((real - est.bits).abs() < 0.01 * real + 48.0, "{real} vs {}", est.bits);
    }

    proptest! {
        #[test]
        fn mixed_bins_round_trip(
            bins in prop::collection::vec((0usize..4, any::<bool>(), any::<bool>()), 0..3000),
            values in prop::collection::vec(0u32..100_000, 0..200),
        ) {
            let mut enc = Encoder::new();
            let mut ctxs = [Context::default(); 4];
            let mut eg = [Context::default(); 3];
            for &(c, bypass, bit) in &bins {
                if bypass { enc.encode_bypass(bit) } else { enc.encode(&mut ctxs[c], bit) }
            }
            for &v in &values {
                encode_eg0(&mut enc, &mut eg, v);
            }
            let bytes = enc.finish();
            let mut dec = Decoder::new(&bytes).unwrap();
            let mut ctxs = [Context::default(); 4];
            let mut eg = [Context::default(); 3];
            for &(c, bypass, bit) in &bins {
                let got = if bypass { dec.decode_bypass().unwrap() } else { dec.decode(&mut ctxs[c]).unwrap() };
                prop_assert_eq!(got, bit);
            }
            for &v in &values {
                prop_assert_eq!(decode_eg0(&mut dec, &mut eg).unwrap(), v);
            }
            prop_assert!(dec.finish().is_ok());
        }
    }
}
