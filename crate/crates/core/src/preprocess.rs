//! Template-matched error streams and binned decay probabilities.
//!
//! A single ground-state readout is usually a SPAM error; three in a row is
//! a decay burst. The error stream marks every cycle that starts a run of
//! three consecutive ground outcomes, and the binned series converts hit
//! counts per bin of `N_b` cycles into a decay probability
//! `P_d = T / (N_b - 2)`.

use crate::bits::PackedBits;
use crate::model::CycleClock;
use crate::time::Nanos;
use crate::trace::QubitTrace;
use thiserror::Error;

/// Cycles in the all-ground template.
pub const TEMPLATE_LEN: usize = 3;

#[derive(Debug, Error, PartialEq)]
pub enum PreprocessError {
    #[error("trace has {0} cycles; template matching needs at least {TEMPLATE_LEN}")]
    TraceTooShort(usize),
    #[error("bin width {0} is smaller than the template length {TEMPLATE_LEN}")]
    BinTooNarrow(usize),
}

/// Positions where the all-ground template matched, one bit per window
/// start; length is `n_cycles - 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorStream {
    pub channel: String,
    pub clock: CycleClock,
    bits: PackedBits,
}

impl ErrorStream {
    pub fn new(channel: &str, clock: CycleClock, bits: PackedBits) -> Self {
        ErrorStream {
            channel: channel.to_string(),
            clock,
            bits,
        }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    #[inline]
    pub fn hit(&self, n: usize) -> bool {
        self.bits.get(n)
    }

    pub fn bits(&self) -> &PackedBits {
        &self.bits
    }

    pub fn count_hits(&self) -> usize {
        self.bits.count_ones()
    }
}

/// Mark every outcome position that begins three consecutive ground
/// readouts. Works word-at-a-time on the packed trace.
pub fn match_template_ggg(trace: &QubitTrace) -> Result<ErrorStream, PreprocessError> {
    let hits = ggg_hits_packed(trace.bits())?;
    Ok(ErrorStream::new(&trace.channel, trace.clock, hits))
}

/// Word-level template matcher on raw packed outcome bits (0 = ground).
/// Also used by the streaming detector on byte-aligned chunks.
pub fn ggg_hits_packed(outcomes: &PackedBits) -> Result<PackedBits, PreprocessError> {
    let n = outcomes.len();
    if n < TEMPLATE_LEN {
        return Err(PreprocessError::TraceTooShort(n));
    }
    let out_len = n - (TEMPLATE_LEN - 1);
    let n_words = out_len.div_ceil(64);
    let mut bytes = vec![0u8; out_len.div_ceil(8)];
    for w in 0..n_words {
        let g0 = !outcomes.word(w);
        let g_next = !outcomes.word(w + 1);
        let hits = g0 & ((g0 >> 1) | (g_next << 63)) & ((g0 >> 2) | (g_next << 62));
        let le = hits.to_le_bytes();
        let start = w * 8;
        let take = (bytes.len() - start).min(8);
        bytes[start..start + take].copy_from_slice(&le[..take]);
    }
    Ok(PackedBits::from_bytes(bytes, out_len))
}

/// Decay probability per bin of `bin_cycles` measurement cycles.
#[derive(Debug, Clone, PartialEq)]
pub struct BinnedSeries {
    pub channel: String,
    pub clock: CycleClock,
    pub bin_cycles: usize,
    /// Template hits per bin, counted over the windows fully inside the bin.
    counts: Vec<u32>,
}

impl BinnedSeries {
    /// Maximum template count per bin.
    pub fn t_max(&self) -> u32 {
        (self.bin_cycles - (TEMPLATE_LEN - 1)) as u32
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn count(&self, k: usize) -> u32 {
        self.counts[k]
    }

    pub fn p_d(&self, k: usize) -> f64 {
        self.counts[k] as f64 / self.t_max() as f64
    }

    pub fn p_d_values(&self) -> Vec<f64> {
        (0..self.len()).map(|k| self.p_d(k)).collect()
    }

    pub fn bin_duration(&self) -> Nanos {
        self.clock.cycle_period * self.bin_cycles as i64
    }

    pub fn bin_start(&self, k: usize) -> Nanos {
        self.clock.cycle_period * (k * self.bin_cycles) as i64
    }

    pub fn bin_center(&self, k: usize) -> Nanos {
        self.bin_start(k) + self.bin_duration() / 2
    }
}

/// Accumulate template hits into bins of `bin_cycles` cycles. A window is
/// counted in the bin that contains it entirely, so every bin shares the
/// denominator `bin_cycles - 2`; windows straddling a seam are dropped, as is
/// a trailing partial bin.
pub fn bin_decay_probability(
    es: &ErrorStream,
    bin_cycles: usize,
) -> Result<BinnedSeries, PreprocessError> {
    if bin_cycles < TEMPLATE_LEN {
        return Err(PreprocessError::BinTooNarrow(bin_cycles));
    }
    let n_cycles = es.len() + (TEMPLATE_LEN - 1);
    let n_bins = n_cycles / bin_cycles;
    let per_bin = bin_cycles - (TEMPLATE_LEN - 1);
    let counts = (0..n_bins)
        .map(|k| {
            let start = k * bin_cycles;
            es.bits().count_ones_range(start, start + per_bin) as u32
        })
        .collect();
    Ok(BinnedSeries {
        channel: es.channel.clone(),
        clock: es.clock,
        bin_cycles,
        counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CycleClock;

    fn trace_of(outcomes: &[bool]) -> QubitTrace {
        QubitTrace::from_outcomes("Q2", CycleClock::default(), outcomes)
    }

    /// Brute-force oracle: enumerate every 3-cycle window.
    fn naive_hits(outcomes: &[bool]) -> Vec<bool> {
        outcomes
            .windows(3)
            .map(|w| w.iter().all(|&e| !e))
            .collect()
    }

    #[test]
    fn all_excited_gives_no_hits() {
        let es = match_template_ggg(&trace_of(&[true; 50])).unwrap();
        assert_eq!(es.len(), 48);
        assert_eq!(es.count_hits(), 0);
    }

    #[test]
    fn all_ground_100_cycles_gives_98_hits() {
        let es = match_template_ggg(&trace_of(&[false; 100])).unwrap();
        assert_eq!(es.len(), 98);
        assert_eq!(es.count_hits(), 98);
    }

    #[test]
    fn isolated_excited_outcome_splits_hits() {
        // g,g,g,e,g,g,g -> 1,0,0,0,1
        let pattern = [false, false, false, true, false, false, false];
        let es = match_template_ggg(&trace_of(&pattern)).unwrap();
        let got: Vec<bool> = es.bits().iter().collect();
        assert_eq!(got, vec![true, false, false, false, true]);
        assert_eq!(got, naive_hits(&pattern));
    }

    #[test]
    fn matches_brute_force_on_random_patterns() {
        let mut state = 0x12345678u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 40) & 1 == 1
        };
        for len in [3usize, 17, 64, 65, 129, 500] {
            let pattern: Vec<bool> = (0..len).map(|_| next()).collect();
            let es = match_template_ggg(&trace_of(&pattern)).unwrap();
            let got: Vec<bool> = es.bits().iter().collect();
            assert_eq!(got, naive_hits(&pattern), "len {len}");
        }
    }

    #[test]
    fn short_trace_rejected() {
        assert_eq!(
            match_template_ggg(&trace_of(&[false, false])),
            Err(PreprocessError::TraceTooShort(2))
        );
    }

    /// Brute-force oracle for binning: count hits among the windows fully
    /// contained in each bin.
    fn naive_bins(outcomes: &[bool], n_b: usize) -> Vec<u32> {
        let hits = naive_hits(outcomes);
        (0..outcomes.len() / n_b)
            .map(|k| {
                (k * n_b..k * n_b + n_b - 2)
                    .filter(|&n| hits[n])
                    .count() as u32
            })
            .collect()
    }

    #[test]
    fn binning_examples() {
        // All-zero stream.
        let es = match_template_ggg(&trace_of(&[true; 300])).unwrap();
        let bs = bin_decay_probability(&es, 100).unwrap();
        assert_eq!(bs.len(), 3);
        assert!(bs.p_d_values().iter().all(|&p| p == 0.0));

        // A fully ground bin saturates at p_d = 1.
        let mut pattern = vec![false; 100];
        pattern.extend_from_slice(&[true; 100]);
        let es = match_template_ggg(&trace_of(&pattern)).unwrap();
        let bs = bin_decay_probability(&es, 100).unwrap();
        assert_eq!(bs.count(0), 98);
        assert_eq!(bs.p_d(0), 1.0);
        assert_eq!(bs.count(1), 0);
    }

    #[test]
    fn binning_matches_counting_oracle() {
        let mut state = 99u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 33) % 4 == 0 // mostly e with bursts of g
        };
        let pattern: Vec<bool> = (0..1237).map(|_| !next()).collect();
        let es = match_template_ggg(&trace_of(&pattern)).unwrap();
        for n_b in [3usize, 10, 100, 128] {
            let bs = bin_decay_probability(&es, n_b).unwrap();
            let oracle = naive_bins(&pattern, n_b);
            assert_eq!(bs.len(), oracle.len(), "n_b {n_b}");
            for (k, &t) in oracle.iter().enumerate() {
                assert_eq!(bs.count(k), t, "bin {k} at n_b {n_b}");
                let p = bs.p_d(k);
                assert!((0.0..=1.0).contains(&p));
                assert_eq!(p, t as f64 / (n_b as f64 - 2.0));
            }
        }
    }

    #[test]
    fn narrow_bins_rejected() {
        let es = match_template_ggg(&trace_of(&[false; 10])).unwrap();
        assert_eq!(
            bin_decay_probability(&es, 2),
            Err(PreprocessError::BinTooNarrow(2))
        );
    }

    #[test]
    fn prepending_idle_bins_shifts_series() {
        let mut state = 7u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 35) % 3 == 0
        };
        let tail: Vec<bool> = (0..400).map(|_| next()).collect();
        let n_b = 100;
        let base = bin_decay_probability(
            &match_template_ggg(&trace_of(&tail)).unwrap(),
            n_b,
        )
        .unwrap();
        for k in [1usize, 3] {
            let mut padded = vec![true; k * n_b];
            padded.extend_from_slice(&tail);
            let shifted = bin_decay_probability(
                &match_template_ggg(&trace_of(&padded)).unwrap(),
                n_b,
            )
            .unwrap();
            assert_eq!(shifted.len(), base.len() + k);
            assert!((0..k).all(|i| shifted.count(i) == 0));
            for i in 0..base.len() {
                assert_eq!(shifted.count(k + i), base.count(i), "bin {i}, pad {k}");
            }
        }
    }

    #[test]
    fn concatenation_differs_only_at_seam() {
        let a: Vec<bool> = (0..40).map(|i| i % 5 == 0).collect();
        let b: Vec<bool> = (0..40).map(|i| i % 7 != 3).collect();
        let whole: Vec<bool> = a.iter().chain(b.iter()).copied().collect();
        let es_whole: Vec<bool> = match_template_ggg(&trace_of(&whole))
            .unwrap()
            .bits()
            .iter()
            .collect();
        let es_a: Vec<bool> = match_template_ggg(&trace_of(&a)).unwrap().bits().iter().collect();
        let es_b: Vec<bool> = match_template_ggg(&trace_of(&b)).unwrap().bits().iter().collect();
        // Positions 0..len(a)-2 agree with es_a; positions len(a).. agree
        // with es_b; exactly the two seam positions may differ.
        for (n, &hit) in es_whole.iter().enumerate() {
            if n < a.len() - 2 {
                assert_eq!(hit, es_a[n], "pre-seam {n}");
            } else if n >= a.len() {
                assert_eq!(hit, es_b[n - a.len()], "post-seam {n}");
            }
        }
        assert_eq!(es_whole.len(), es_a.len() + es_b.len() + 2);
    }
}
