//! Per-channel measurement bit-streams.

use crate::bits::PackedBits;
use crate::model::CycleClock;

/// Binary measurement outcomes of one channel at a fixed cycle period.
/// Bit value 0 records a ground-state ("g") readout, 1 an excited-state
/// ("e") readout.
#[derive(Debug, Clone, PartialEq)]
pub struct QubitTrace {
    pub channel: String,
    pub clock: CycleClock,
    bits: PackedBits,
}

impl QubitTrace {
    pub fn new(channel: &str, clock: CycleClock, bits: PackedBits) -> Self {
        QubitTrace {
            channel: channel.to_string(),
            clock,
            bits,
        }
    }

    pub fn from_outcomes(channel: &str, clock: CycleClock, excited: &[bool]) -> Self {
        Self::new(channel, clock, PackedBits::from_bools(excited))
    }

    pub fn n_cycles(&self) -> usize {
        self.bits.len()
    }

    /// True when cycle `n` recorded an excited-state outcome.
    #[inline]
    pub fn excited(&self, n: usize) -> bool {
        self.bits.get(n)
    }

    pub fn bits(&self) -> &PackedBits {
        &self.bits
    }

    pub fn count_excited(&self) -> usize {
        self.bits.count_ones()
    }

    pub fn count_ground(&self) -> usize {
        self.n_cycles() - self.count_excited()
    }
}
