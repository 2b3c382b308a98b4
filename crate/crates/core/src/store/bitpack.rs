//! LSB-first bit packing for code streams.
//!
//! Codes are appended least-significant-bit first into a byte stream; the
//! reader consumes them in the same order. Widths up to 32 bits.

pub struct BitWriter {
    out: Vec<u8>,
    acc: u64,
    acc_bits: u32,
}

impl BitWriter {
    pub fn new() -> Self {
        Self {
            out: Vec::new(),
            acc: 0,
            acc_bits: 0,
        }
    }

    pub fn push(&mut self, code: u32, bits: u32) {
        debug_assert!(bits >= 1 && bits <= 32);
        debug_assert!(bits == 32 || (code as u64) < (1u64 << bits));
        self.acc |= (code as u64) << self.acc_bits;
        self.acc_bits += bits;
        while self.acc_bits >= 8 {
            self.out.push((self.acc & 0xff) as u8);
            self.acc >>= 8;
            self.acc_bits -= 8;
        }
    }

    /// Pads the tail with zero bits up to the next byte boundary.
    pub fn align_to_byte(&mut self) {
        if self.acc_bits > 0 {
            self.out.push((self.acc & 0xff) as u8);
            self.acc = 0;
            self.acc_bits = 0;
        }
    }

    pub fn finish(mut self) -> Vec<u8> {
        self.align_to_byte();
        self.out
    }
}

impl Default for BitWriter {
    fn default() -> Self {
        Self::new()
    }
}

pub struct BitReader<'a> {
    data: &'a [u8],
    pos: usize,
    acc: u64,
    acc_bits: u32,
}

impl<'a> BitReader<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        Self {
            data,
            pos: 0,
            acc: 0,
            acc_bits: 0,
        }
    }

    /// Reads one code of `bits` width; `None` when the stream is exhausted.
    pub fn read(&mut self, bits: u32) -> Option<u32> {
        while self.acc_bits < bits {
            if self.pos >= self.data.len() {
                return None;
            }
            self.acc |= (self.data[self.pos] as u64) << self.acc_bits;
            self.pos += 1;
            self.acc_bits += 8;
        }
        let mask = if bits == 32 { u32::MAX as u64 } else { (1u64 << bits) - 1 };
        let v = (self.acc & mask) as u32;
        self.acc >>= bits;
        self.acc_bits -= bits;
        Some(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_mixed_widths() {
        let mut w = BitWriter::new();
        let codes = [(5u32, 3u32), (1023, 10), (0, 1), (7, 3), (65535, 16)];
        for &(c, b) in &codes {
            w.push(c, b);
        }
        let bytes = w.finish();
        let mut r = BitReader::new(&bytes);
        for &(c, b) in &codes {
            assert_eq!(r.read(b), Some(c));
        }
    }

    #[test]
    fn packing_is_tight() {
        // 100 codes at 3 bits = 300 bits -> 38 bytes.
        let mut w = BitWriter::new();
        for _ in 0..100 {
            w.push(5, 3);
        }
        assert_eq!(w.finish().len(), 38);
    }

    #[test]
    fn exhaustion_returns_none() {
        let mut w = BitWriter::new();
        w.push(3, 2);
        let bytes = w.finish();
        let mut r = BitReader::new(&bytes);
        assert_eq!(r.read(2), Some(3));
        // Remaining padding bits in the final byte.
        assert_eq!(r.read(6), Some(0));
        assert_eq!(r.read(1), None);
    }
}
