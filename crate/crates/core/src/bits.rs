//! Bit-packed binary sequences.
//!
//! Measurement outcomes and template-error streams are one bit per cycle;
//! paper-scale runs reach 2.6e9 cycles per channel, so everything downstream
//! of the simulator works on packed bytes (LSB-first, matching the trace file
//! payload layout).

/// A growable bit sequence packed 8 bits per byte, least-significant bit
/// first. Bit `i` lives in `bytes[i / 8]` at position `i % 8`.
#[derive(Clone, PartialEq, Eq)]
pub struct PackedBits {
    bytes: Vec<u8>,
    len: usize,
}

impl PackedBits {
    pub fn new() -> Self {
        PackedBits {
            bytes: Vec::new(),
            len: 0,
        }
    }

    pub fn with_capacity(bits: usize) -> Self {
        PackedBits {
            bytes: Vec::with_capacity(bits.div_ceil(8)),
            len: 0,
        }
    }

    /// Wrap raw packed bytes. Padding bits past `len` in the final byte must
    /// be zero; they are cleared here to make equality structural.
    pub fn from_bytes(mut bytes: Vec<u8>, len: usize) -> Self {
        assert!(bytes.len() == len.div_ceil(8), "byte length mismatch");
        if len % 8 != 0 {
            if let Some(last) = bytes.last_mut() {
                *last &= (1u8 << (len % 8)) - 1;
            }
        }
        PackedBits { bytes, len }
    }

    pub fn from_bools(bits: &[bool]) -> Self {
        let mut out = PackedBits::with_capacity(bits.len());
        for &b in bits {
            out.push(b);
        }
        out
    }

    pub fn push(&mut self, bit: bool) {
        if self.len % 8 == 0 {
            self.bytes.push(0);
        }
        if bit {
            *self.bytes.last_mut().unwrap() |= 1 << (self.len % 8);
        }
        self.len += 1;
    }

    /// Append all bits of `other`, handling any bit offset word-wise.
    pub fn extend_from(&mut self, other: &PackedBits) {
        let shift = self.len % 8;
        if shift == 0 {
            self.bytes.extend_from_slice(other.bytes());
            self.len += other.len;
            if self.len % 8 != 0 {
                // clear padding inherited from other's last byte
                let last = self.bytes.last_mut().unwrap();
                *last &= (1u8 << (self.len % 8)) - 1;
            }
            return;
        }
        for (i, &b) in other.bytes.iter().enumerate() {
            let last = self.bytes.last_mut().unwrap();
            *last |= b << shift;
            let avail = other.len - i * 8;
            if avail > 8 - shift {
                self.bytes.push(b >> (8 - shift));
            }
        }
        self.len += other.len;
        if self.len % 8 != 0 {
            let last = self.bytes.last_mut().unwrap();
            *last &= (1u8 << (self.len % 8)) - 1;
        }
    }

    /// Discard `n_bytes * 8` bits from the front.
    pub fn drop_front_bytes(&mut self, n_bytes: usize) {
        debug_assert!(n_bytes * 8 <= self.len);
        self.bytes.drain(..n_bytes);
        self.len -= n_bytes * 8;
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        debug_assert!(i < self.len);
        (self.bytes[i / 8] >> (i % 8)) & 1 == 1
    }

    /// Bit as 0/1 without branching, for hot loops.
    #[inline]
    pub fn bit_u32(&self, i: usize) -> u32 {
        ((self.bytes[i / 8] >> (i % 8)) & 1) as u32
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn count_ones(&self) -> usize {
        self.bytes.iter().map(|b| b.count_ones() as usize).sum()
    }

    /// Number of set bits in `[start, end)`.
    pub fn count_ones_range(&self, start: usize, end: usize) -> usize {
        debug_assert!(start <= end && end <= self.len);
        if start == end {
            return 0;
        }
        let (ws, we) = (start / 64, (end - 1) / 64);
        if ws == we {
            let mask = (u64::MAX << (start % 64))
                & (u64::MAX >> (63 - (end - 1) % 64));
            return (self.word(ws) & mask).count_ones() as usize;
        }
        let mut total = (self.word(ws) & (u64::MAX << (start % 64))).count_ones() as usize;
        for w in ws + 1..we {
            total += self.word(w).count_ones() as usize;
        }
        total += (self.word(we) & (u64::MAX >> (63 - (end - 1) % 64))).count_ones() as usize;
        total
    }

    /// 64-bit word of bits `[64 * w, 64 * w + 64)`, zero-padded past the end.
    #[inline]
    pub fn word(&self, w: usize) -> u64 {
        let start = w * 8;
        if start >= self.bytes.len() {
            return 0;
        }
        let end = (start + 8).min(self.bytes.len());
        let mut buf = [0u8; 8];
        buf[..end - start].copy_from_slice(&self.bytes[start..end]);
        u64::from_le_bytes(buf)
    }

    pub fn n_words(&self) -> usize {
        self.len.div_ceil(64)
    }

    pub fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        (0..self.len).map(move |i| self.get(i))
    }
}

impl Default for PackedBits {
    fn default() -> Self {
        Self::new()
    }
}

impl std::fmt::Debug for PackedBits {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "PackedBits({} bits)", self.len)
    }
}
