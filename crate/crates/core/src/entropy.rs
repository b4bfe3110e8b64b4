//! Binary range coder driven by externally supplied integer counts, and the
//! run-length code used for section masks.
//!
//! Everything here is integer-only so streams are platform independent.
//!
//! Coder layout: 32-bit `range`, 33-bit `low` (the extra bit catches carries),
//! byte-wise renormalization whenever `range < 2^24`. A symbol splits the
//! interval at `bound = (range * c0) >> 14`: bit 0 keeps `[low, low + bound)`,
//! bit 1 keeps the rest. Pending `0xFF` bytes are held back until a carry is
//! resolved. The first byte the classic scheme emits is always zero and is
//! not written; termination flushes the four bytes of `low`.

use thiserror::Error;

/// Total of every coding distribution.
pub const PROB_BITS: u32 = 14;
pub const PROB_TOTAL: u32 = 1 << PROB_BITS;

const TOP: u32 = 1 << 24;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EntropyError {
    #[error("invalid distribution ({c0}, {c1}): counts must be >= 1 and sum to 2^14")]
    InvalidDistribution { c0: u32, c1: u32 },
    #[error("arithmetic-coded stream exhausted")]
    StreamExhausted,
    #[error("corrupt run-length mask: {0}")]
    CorruptRle(&'static str),
}

/// Integer counts for the two symbols, `c0 + c1 = 2^14`, both nonzero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct QuantizedDist {
    c0: u16,
    c1: u16,
}

impl QuantizedDist {
    pub fn new(c0: u32, c1: u32) -> Result<Self, EntropyError> {
        if c0 == 0 || c1 == 0 || c0 + c1 != PROB_TOTAL {
            return Err(EntropyError::InvalidDistribution { c0, c1 });
        }
        Ok(QuantizedDist {
            c0: c0 as u16,
            c1: c1 as u16,
        })
    }

    pub fn from_c1(c1: u32) -> Result<Self, EntropyError> {
        Self::new(PROB_TOTAL.wrapping_sub(c1), c1)
    }

    pub const UNIFORM: QuantizedDist = QuantizedDist {
        c0: (PROB_TOTAL / 2) as u16,
        c1: (PROB_TOTAL / 2) as u16,
    };

    pub fn c0(&self) -> u32 {
        self.c0 as u32
    }

    pub fn c1(&self) -> u32 {
        self.c1 as u32
    }

    pub fn count(&self, bit: bool) -> u32 {
        if bit {
            self.c1()
        } else {
            self.c0()
        }
    }

    /// Ideal code length of `bit` in bits, `-log2(count / 2^14)`.
    pub fn cost(&self, bit: bool) -> f64 {
        PROB_BITS as f64 - (self.count(bit) as f64).log2()
    }
}

#[inline]
fn split(range: u32, dist: QuantizedDist) -> u32 {
    ((range as u64 * dist.c0() as u64) >> PROB_BITS) as u32
}

#[derive(Debug, Clone)]
pub struct Encoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    started: bool,
    out: Vec<u8>,
    symbols: u64,
}

impl Default for Encoder {
    fn default() -> Self {
        Self::new()
    }
}

impl Encoder {
    pub fn new() -> Self {
        Encoder {
            low: 0,
            range: u32::MAX,
            cache: 0,
            cache_size: 1,
            started: false,
            out: Vec::new(),
            symbols: 0,
        }
    }

    pub fn encode(&mut self, bit: bool, dist: QuantizedDist) {
        let bound = split(self.range, dist);
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
        self.symbols += 1;
    }

    /// Number of symbols encoded so far.
    pub fn symbols(&self) -> u64 {
        self.symbols
    }

    /// Bytes emitted so far (excluding the termination).
    pub fn bytes_written(&self) -> usize {
        self.out.len()
    }

    fn emit(&mut self, byte: u8) {
        if self.started {
            self.out.push(byte);
        } else {
            debug_assert_eq!(byte, 0);
            self.started = true;
        }
    }

    fn shift_low(&mut self) {
        if self.low < 0xFF00_0000 || self.low >= 1 << 32 {
            let carry = (self.low >> 32) as u8;
            let mut temp = self.cache;
            loop {
                self.emit(temp.wrapping_add(carry));
                temp = 0xFF;
                self.cache_size -= 1;
                if self.cache_size == 0 {
                    break;
                }
            }
            self.cache = ((self.low >> 24) & 0xFF) as u8;
        }
        self.cache_size += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    /// Flushes the interval; the result decodes every encoded symbol.
    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

#[derive(Debug, Clone)]
pub struct Decoder<'a> {
    code: u32,
    range: u32,
    input: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(input: &'a [u8]) -> Result<Self, EntropyError> {
        let mut dec = Decoder {
            code: 0,
            range: u32::MAX,
            input,
            pos: 0,
        };
        for _ in 0..4 {
            dec.code = (dec.code << 8) | dec.next_byte()? as u32;
        }
        Ok(dec)
    }

    fn next_byte(&mut self) -> Result<u8, EntropyError> {
        let b = *self
            .input
            .get(self.pos)
            .ok_or(EntropyError::StreamExhausted)?;
        self.pos += 1;
        Ok(b)
    }

    pub fn decode(&mut self, dist: QuantizedDist) -> Result<bool, EntropyError> {
        let bound = split(self.range, dist);
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
            self.code = (self.code << 8) | self.next_byte()? as u32;
        }
        Ok(bit)
    }

    /// True when every input byte has been consumed.
    pub fn is_exhausted(&self) -> bool {
        self.pos == self.input.len()
    }
}

/// Encodes a whole sequence in one call.
pub fn ac_encode_all<I>(symbols: I) -> Vec<u8>
where
    I: IntoIterator<Item = (bool, QuantizedDist)>,
{
    let mut enc = Encoder::new();
    for (bit, dist) in symbols {
        enc.encode(bit, dist);
    }
    enc.finish()
}

/// Run-length code: one byte with the first bit value, then each run length
/// as an unsigned LEB128 varint. Runs alternate starting from that value.
pub fn rle_encode(mask: &[bool]) -> Vec<u8> {
    let first = mask.first().copied().unwrap_or(false);
    let mut out = vec![first as u8];
    let mut i = 0;
    while i < mask.len() {
        let v = mask[i];
        let run = mask[i..].iter().take_while(|&&b| b == v).count();
        leb128::write::unsigned(&mut out, run as u64).expect("writing to a Vec cannot fail");
        i += run;
    }
    out
}

pub fn rle_decode(bytes: &[u8], len: usize) -> Result<Vec<bool>, EntropyError> {
    let (&first, mut rest) = bytes
        .split_first()
        .ok_or(EntropyError::CorruptRle("missing leading value"))?;
    if first > 1 {
        return Err(EntropyError::CorruptRle("leading value is not 0 or 1"));
    }
    let mut value = first == 1;
    let mut mask = Vec::with_capacity(len);
    while !rest.is_empty() {
        let run = leb128::read::unsigned(&mut rest)
            .map_err(|_| EntropyError::CorruptRle("bad varint"))?;
        if run == 0 {
            return Err(EntropyError::CorruptRle("zero-length run"));
        }
        if run > (len - mask.len()) as u64 {
            return Err(EntropyError::CorruptRle("runs exceed mask length"));
        }
        mask.extend(std::iter::repeat_n(value, run as usize));
        value = !value;
    }
    if mask.len() != len {
        return Err(EntropyError::CorruptRle("runs do not cover the mask"));
    }
    Ok(mask)
}
