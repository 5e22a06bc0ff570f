//! Matched-filter event detection and start-time estimation.
//!
//! The filter is a zero-sum kernel: a flat background `c` before onset, then
//! `c + exp(-k dt / tau)` after, with `c` chosen so the taps sum to zero.
//! Cross-correlating it against the 0/1 error stream yields peaks wherever a
//! decay burst starts; thresholds are in the raw dot-product units ("a.u."),
//! so a saturated burst with `tau = 2.5 ms` peaks near 150.
//!
//! Correlation is evaluated in chunks with one kernel length of overlap. The
//! kernel's structure collapses the dot product to a windowed bit count plus
//! an exponentially weighted sum with an O(1)-per-cycle recursion, so a full
//! pass over a stream costs a few arithmetic ops per cycle and O(kernel +
//! chunk) memory regardless of stream length. [`StreamingDetector`] packages
//! that for file-sized traces and produces output identical to the in-memory
//! path.

use crate::bits::PackedBits;
use crate::model::{CycleClock, EventRecord};
use crate::preprocess::ErrorStream;
use crate::time::Nanos;
use std::collections::BTreeMap;
use std::collections::VecDeque;
use thiserror::Error;

/// Output positions computed per chunk; chunk boundaries are aligned to
/// multiples of this in both the in-memory and streaming paths so their
/// floating-point results match bit for bit.
const CHUNK: usize = 1 << 15;

#[derive(Debug, Error, PartialEq)]
pub enum DetectError {
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error("kernel geometry: {0}")]
    BadKernel(String),
    #[error("{what} ({duration}) is not a whole number of cycles ({dt})")]
    NonDivisible {
        what: &'static str,
        duration: Nanos,
        dt: Nanos,
    },
    #[error("stream of {len} cycles is too short for {need}")]
    StreamTooShort { len: usize, need: usize },
    #[error("detection params: {0}")]
    BadParams(String),
}

fn taps_of(duration: Nanos, dt: Nanos, what: &'static str) -> Result<usize, DetectError> {
    if duration.as_nanos() % dt.as_nanos() != 0 {
        return Err(DetectError::NonDivisible { what, duration, dt });
    }
    Ok((duration.as_nanos() / dt.as_nanos()) as usize)
}

/// Zero-sum matched filter: sudden onset followed by an exponential decay,
/// sampled at cycle resolution with unit amplitude.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterKernel {
    taps: Vec<f64>,
    pre_taps: usize,
    dt: Nanos,
    tau_s: f64,
    baseline: f64,
    /// exp(-dt/tau): per-tap decay of the recursion.
    decay: f64,
    /// exp(-M dt/tau): weight of the tap leaving the window.
    tail: f64,
}

impl FilterKernel {
    /// `tau_s` may be infinite (flat post-onset plateau). `dt` must divide
    /// both the window and the pre-onset span.
    pub fn build(
        tau_s: f64,
        window: Nanos,
        pre_onset: Nanos,
        dt: Nanos,
    ) -> Result<Self, DetectError> {
        if !(tau_s > 0.0) {
            return Err(DetectError::BadKernel(format!("tau must be positive, got {tau_s}")));
        }
        if dt <= Nanos::ZERO || pre_onset <= Nanos::ZERO || window <= pre_onset {
            return Err(DetectError::BadKernel(format!(
                "need window > pre_onset > 0 and dt > 0 (window {window}, pre_onset {pre_onset}, dt {dt})"
            )));
        }
        let total = taps_of(window, dt, "window")?;
        let pre_taps = taps_of(pre_onset, dt, "pre_onset")?;
        let post = total - pre_taps;
        let dt_s = dt.as_secs_f64();

        let mut taps = vec![0.0; total];
        let mut sum = 0.0f64;
        let mut comp = 0.0f64;
        for k in 0..post {
            let e = (-(k as f64) * dt_s / tau_s).exp();
            taps[pre_taps + k] = e;
            // Kahan: the background level must cancel this sum exactly.
            let y = e - comp;
            let t = sum + y;
            comp = (t - sum) - y;
            sum = t;
        }
        let mut baseline = -sum / total as f64;
        for t in taps.iter_mut() {
            *t += baseline;
        }
        // One correction pass squeezes the residual of the plain tap sum
        // below 1e-12 for any geometry.
        for _ in 0..2 {
            let residual = kahan_sum(&taps);
            if residual.abs() < 1e-14 {
                break;
            }
            let adj = residual / total as f64;
            for t in taps.iter_mut() {
                *t -= adj;
            }
            baseline -= adj;
        }
        Ok(FilterKernel {
            taps,
            pre_taps,
            dt,
            tau_s,
            baseline,
            decay: (-dt_s / tau_s).exp(),
            tail: (-(post as f64) * dt_s / tau_s).exp(),
        })
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    pub fn pre_taps(&self) -> usize {
        self.pre_taps
    }

    pub fn post_taps(&self) -> usize {
        self.taps.len() - self.pre_taps
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    pub fn baseline(&self) -> f64 {
        self.baseline
    }

    pub fn dt(&self) -> Nanos {
        self.dt
    }

    pub fn tau_s(&self) -> f64 {
        self.tau_s
    }
}

fn kahan_sum(xs: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for &x in xs {
        let y = x - comp;
        let t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
    sum
}

/// Step kernel for start-time estimation: -1 over one halfwidth before the
/// candidate point, +1 over one halfwidth after.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContrastKernel {
    half_taps: usize,
}

impl ContrastKernel {
    pub fn build(halfwidth: Nanos, dt: Nanos) -> Result<Self, DetectError> {
        if halfwidth <= Nanos::ZERO {
            return Err(DetectError::BadKernel("contrast halfwidth must be positive".into()));
        }
        let half_taps = taps_of(halfwidth, dt, "contrast halfwidth")?;
        Ok(ContrastKernel { half_taps })
    }

    pub fn half_taps(&self) -> usize {
        self.half_taps
    }

    pub fn len(&self) -> usize {
        2 * self.half_taps
    }

    /// Contrast score at position `n`: ones in `[n, n+half)` minus ones in
    /// `[n-half, n)`. Maximal where the stream steps from quiet to dense.
    pub fn score(&self, bits: &PackedBits, n: usize) -> i64 {
        let h = self.half_taps;
        bits.count_ones_range(n, n + h) as i64 - bits.count_ones_range(n - h, n) as i64
    }
}

/// Thresholds and geometry of the detection stage.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionParams {
    /// Matched-filter recovery constant per channel, seconds.
    pub tau_filter_per_channel_s: BTreeMap<String, f64>,
    /// Fallback for channels not in the map, seconds.
    pub default_tau_filter_s: f64,
    /// Correlation value above which a run becomes an event candidate.
    pub candidate_threshold: f64,
    /// Peak height above which a candidate group is kept as an event.
    pub event_threshold: f64,
    /// Groups closer than this are merged, keeping the larger peak.
    pub min_separation: Nanos,
    /// Half-width of the start-time search around the correlation peak.
    pub start_search_halfwidth: Nanos,
    pub kernel_window: Nanos,
    pub kernel_pre_onset: Nanos,
    pub contrast_halfwidth: Nanos,
}

impl Default for DetectionParams {
    fn default() -> Self {
        let tau_filter_per_channel_s: BTreeMap<String, f64> = [
            ("Q1".to_string(), 2.5e-3),
            ("Q2".to_string(), 2.5e-3),
            ("Q4".to_string(), 5.0e-3),
            ("RuQ2".to_string(), 2.5e-3),
        ]
        .into();
        DetectionParams {
            tau_filter_per_channel_s,
            default_tau_filter_s: 2.5e-3,
            candidate_threshold: 25.0,
            event_threshold: 40.0,
            min_separation: Nanos::from_millis(20),
            start_search_halfwidth: Nanos::from_millis(12),
            kernel_window: Nanos::from_millis(24),
            kernel_pre_onset: Nanos::from_millis(4),
            contrast_halfwidth: Nanos::from_millis(1),
        }
    }
}

impl DetectionParams {
    pub fn validate(&self) -> Result<(), DetectError> {
        if !(self.candidate_threshold > 0.0) {
            return Err(DetectError::BadParams("candidate_threshold must be positive".into()));
        }
        if self.event_threshold < self.candidate_threshold {
            return Err(DetectError::BadParams(format!(
                "event_threshold {} below candidate_threshold {}",
                self.event_threshold, self.candidate_threshold
            )));
        }
        if self.min_separation < Nanos::ZERO {
            return Err(DetectError::BadParams("min_separation must be >= 0".into()));
        }
        if self.start_search_halfwidth <= Nanos::ZERO {
            return Err(DetectError::BadParams("start_search_halfwidth must be positive".into()));
        }
        for (field, tau) in self
            .tau_filter_per_channel_s
            .iter()
            .map(|(k, v)| (k.as_str(), *v))
            .chain([("default", self.default_tau_filter_s)])
        {
            if !(tau > 0.0) {
                return Err(DetectError::BadParams(format!(
                    "filter tau for {field} must be positive, got {tau}"
                )));
            }
        }
        Ok(())
    }

    pub fn tau_filter_s(&self, channel: &str) -> f64 {
        self.tau_filter_per_channel_s
            .get(channel)
            .copied()
            .unwrap_or(self.default_tau_filter_s)
    }

    pub fn kernel_for(&self, channel: &str, dt: Nanos) -> Result<FilterKernel, DetectError> {
        FilterKernel::build(
            self.tau_filter_s(channel),
            self.kernel_window,
            self.kernel_pre_onset,
            dt,
        )
    }

    pub fn contrast_for(&self, dt: Nanos) -> Result<ContrastKernel, DetectError> {
        ContrastKernel::build(self.contrast_halfwidth, dt)
    }
}

/// Correlation output. `values[j]` is the dot product of the kernel with the
/// stream window starting at position `j`; the kernel onset then sits at
/// stream position `j + onset_offset`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationSeries {
    pub values: Vec<f64>,
    pub onset_offset: usize,
    pub clock: CycleClock,
}

impl CorrelationSeries {
    pub fn onset_position(&self, j: usize) -> usize {
        j + self.onset_offset
    }
}

/// Evaluate y for output positions `[start, end)` of `bits`, writing through
/// `sink(j, y)` in ascending order of `j`. Requires `end + K - 1 <= bits.len()`.
///
/// y[j] = c * W[j] + E[j] with W the kernel-window bit count and
/// E[j] = sum_{m<M} r^m x[j+P+m]. Both satisfy exact one-step recursions when
/// walked backwards (multiplying by r < 1 contracts rounding error), so each
/// chunk is seeded with one direct evaluation at its right edge and filled
/// right to left.
fn correlate_range(
    bits: &PackedBits,
    start: usize,
    end: usize,
    kernel: &FilterKernel,
    mut sink: impl FnMut(usize, f64),
) {
    if start >= end {
        return;
    }
    let k_len = kernel.len();
    let p = kernel.pre_taps;
    let m = k_len - p;
    let r = kernel.decay;
    let tail = kernel.tail;
    let c = kernel.baseline;
    debug_assert!(end + k_len - 1 <= bits.len());

    let mut w_buf: Vec<u32> = Vec::with_capacity(CHUNK);
    let mut e_buf: Vec<f64> = Vec::with_capacity(CHUNK);
    let mut chunk_start = start;
    while chunk_start < end {
        let chunk_end = (chunk_start + CHUNK).min(end);
        let n = chunk_end - chunk_start;
        w_buf.clear();
        w_buf.resize(n, 0);
        e_buf.clear();
        e_buf.resize(n, 0.0);

        // direct evaluation at the right edge
        let j_last = chunk_end - 1;
        let mut w = bits.count_ones_range(j_last, j_last + k_len) as u32;
        let mut e = 0.0f64;
        for i in (0..m).rev() {
            e = e * r + bits.bit_u32(j_last + p + i) as f64;
        }
        w_buf[n - 1] = w;
        e_buf[n - 1] = e;
        for j in (chunk_start..j_last).rev() {
            w = w + bits.bit_u32(j) - bits.bit_u32(j + k_len);
            e = bits.bit_u32(j + p) as f64 + r * e - tail * bits.bit_u32(j + p + m) as f64;
            let i = j - chunk_start;
            w_buf[i] = w;
            e_buf[i] = e;
        }
        for i in 0..n {
            sink(chunk_start + i, c * w_buf[i] as f64 + e_buf[i]);
        }
        chunk_start = chunk_end;
    }
}

/// Sliding cross-correlation of the error stream with the matched filter.
/// Streams shorter than the kernel produce an empty series.
pub fn cross_correlate(es: &ErrorStream, kernel: &FilterKernel) -> CorrelationSeries {
    let k_len = kernel.len();
    let mut values = Vec::new();
    if es.len() >= k_len {
        values.reserve_exact(es.len() - k_len + 1);
        correlate_range(es.bits(), 0, es.len() - k_len + 1, kernel, |_, y| values.push(y));
    }
    CorrelationSeries {
        values,
        onset_offset: kernel.pre_taps,
        clock: es.clock,
    }
}

/// Naive O(N*K) reference correlation over real-valued samples. Oracle for
/// the optimized path and for linearity properties.
pub fn cross_correlate_ref(xs: &[f64], kernel: &FilterKernel) -> Vec<f64> {
    let k = kernel.len();
    if xs.len() < k {
        return Vec::new();
    }
    (0..=xs.len() - k)
        .map(|j| {
            kernel
                .taps
                .iter()
                .zip(&xs[j..j + k])
                .map(|(t, x)| t * x)
                .sum()
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
struct Group {
    first: usize,
    last: usize,
    peak_j: usize,
    peak_y: f64,
}

/// Contiguous positions always share a group; otherwise the gap must close
/// to under `min_sep` positions.
#[inline]
fn same_group(gap: usize, min_sep: usize) -> bool {
    gap == 1 || gap < min_sep
}

/// Group supra-candidate runs of the correlation series, merge groups closer
/// than `min_separation` (keeping the larger peak), and keep groups whose
/// peak reaches the event threshold. Returned records carry the peak time at
/// cycle resolution and the filter constant used; start times are refined
/// separately by [`estimate_start_time`].
pub fn find_events(
    series: &CorrelationSeries,
    params: &DetectionParams,
    channel: &str,
) -> Vec<EventRecord> {
    let min_sep =
        (params.min_separation.as_nanos() / series.clock.cycle_period.as_nanos()).max(0) as usize;
    let mut groups: Vec<Group> = Vec::new();
    for (j, &y) in series.values.iter().enumerate() {
        if y < params.candidate_threshold {
            continue;
        }
        match groups.last_mut() {
            Some(g) if same_group(j - g.last, min_sep) => {
                g.last = j;
                if y > g.peak_y {
                    g.peak_y = y;
                    g.peak_j = j;
                }
            }
            _ => groups.push(Group {
                first: j,
                last: j,
                peak_j: j,
                peak_y: y,
            }),
        }
    }
    groups
        .into_iter()
        .filter(|g| g.peak_y >= params.event_threshold)
        .map(|g| {
            EventRecord::detected(
                channel,
                series
                    .clock
                    .cycle_to_time(series.onset_position(g.peak_j) as u64),
                Nanos::from_secs_f64(params.tau_filter_s(channel)),
                g.peak_y,
            )
        })
        .collect()
}

/// Refined start-time estimate from the contrast template.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StartEstimate {
    pub time: Nanos,
    pub score: i64,
    /// Set when the search window held no contrast at all (flat stream);
    /// the earliest position is returned in that case.
    pub degenerate: bool,
}

/// Slide the contrast template within `start_search_halfwidth` of the
/// candidate's peak position and return the position of the maximum score,
/// ties resolved toward the earliest time. The window is clipped to the
/// stream bounds.
pub fn estimate_start_time(
    es: &ErrorStream,
    candidate: &EventRecord,
    params: &DetectionParams,
) -> Result<StartEstimate, DetectError> {
    let contrast = params.contrast_for(es.clock.cycle_period)?;
    let peak = es.clock.time_to_cycle(candidate.start_ns)? as usize;
    let hw = (params.start_search_halfwidth.as_nanos() / es.clock.cycle_period.as_nanos()) as usize;
    estimate_start_at(es.bits(), es.len(), 0, peak, hw, &contrast, &es.clock)
}

/// Shared argmax scan; `base` maps local bit positions to absolute stream
/// positions for the streaming detector's ring buffer.
fn estimate_start_at(
    bits: &PackedBits,
    stream_len: usize,
    base: usize,
    peak: usize,
    halfwidth: usize,
    contrast: &ContrastKernel,
    clock: &CycleClock,
) -> Result<StartEstimate, DetectError> {
    let h = contrast.half_taps();
    if stream_len < 2 * h + 1 {
        return Err(DetectError::StreamTooShort {
            len: stream_len,
            need: 2 * h + 1,
        });
    }
    // absolute valid positions: [h, stream_len - h]
    let lo_abs = peak.saturating_sub(halfwidth).max(h).max(base + h);
    let hi_abs = (peak + halfwidth).min(stream_len - h);
    let (lo, hi) = if lo_abs > hi_abs {
        let clip = hi_abs.max(h); // window entirely off the valid range
        (clip, clip)
    } else {
        (lo_abs, hi_abs)
    };
    let mut best_n = lo;
    let mut best = i64::MIN;
    let mut all_equal = true;
    let mut first = 0i64;
    // incremental slide: score(n+1) - score(n) = x[n+h] - 2 x[n] + x[n-h]
    let mut score = contrast.score(bits, lo - base);
    for n in lo..=hi {
        if n == lo {
            first = score;
        } else if score != first {
            all_equal = false;
        }
        if score > best {
            best = score;
            best_n = n;
        }
        if n < hi {
            let l = n - base;
            score += bits.bit_u32(l + h) as i64 - 2 * bits.bit_u32(l) as i64
                + bits.bit_u32(l - h) as i64;
        }
    }
    Ok(StartEstimate {
        time: clock.cycle_to_time(best_n as u64),
        score: best,
        degenerate: all_equal,
    })
}

/// Detected event with its start estimate already applied.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub record: EventRecord,
    pub estimate: StartEstimate,
}

/// Run the full in-memory chain (correlate, group, threshold, estimate) and
/// return events with refined start times, sorted by start.
pub fn detect_events(
    es: &ErrorStream,
    params: &DetectionParams,
    channel: &str,
) -> Result<Vec<Detection>, DetectError> {
    let kernel = params.kernel_for(channel, es.clock.cycle_period)?;
    let series = cross_correlate(es, &kernel);
    let mut out = Vec::new();
    for mut record in find_events(&series, params, channel) {
        let estimate = estimate_start_time(es, &record, params)?;
        record.start_ns = estimate.time;
        out.push(Detection { record, estimate });
    }
    out.sort_by_key(|d| d.record.start_ns);
    Ok(out)
}

/// Single-pass detector over a channel's packed outcome bits, with state
/// bounded by the kernel length plus one chunk regardless of stream length.
/// Produces exactly the events of [`detect_events`] on the same data.
pub struct StreamingDetector {
    channel: String,
    clock: CycleClock,
    params: DetectionParams,
    kernel: FilterKernel,
    contrast: ContrastKernel,
    min_sep: usize,
    halfwidth: usize,
    // ggg template carry: up to TEMPLATE_LEN - 1 trailing outcome bits
    outcome_tail: PackedBits,
    started: bool,
    // error bits kept for correlation lookahead and start estimation;
    // covers absolute positions [base, base + err_buf.len())
    err_buf: PackedBits,
    base: usize,
    // next correlation output position
    consumed: usize,
    open: Option<Group>,
    closing: VecDeque<Group>,
    detections: Vec<Detection>,
    warnings: Vec<String>,
}

impl StreamingDetector {
    pub fn new(
        channel: &str,
        clock: CycleClock,
        params: &DetectionParams,
    ) -> Result<Self, DetectError> {
        params.validate()?;
        let kernel = params.kernel_for(channel, clock.cycle_period)?;
        let contrast = params.contrast_for(clock.cycle_period)?;
        let min_sep =
            (params.min_separation.as_nanos() / clock.cycle_period.as_nanos()).max(1) as usize;
        let halfwidth =
            (params.start_search_halfwidth.as_nanos() / clock.cycle_period.as_nanos()) as usize;
        Ok(StreamingDetector {
            channel: channel.to_string(),
            clock,
            params: params.clone(),
            kernel,
            contrast,
            min_sep,
            halfwidth,
            outcome_tail: PackedBits::new(),
            started: false,
            err_buf: PackedBits::new(),
            base: 0,
            consumed: 0,
            open: None,
            closing: VecDeque::new(),
            detections: Vec::new(),
            warnings: Vec::new(),
        })
    }

    /// Total error-stream positions produced so far.
    fn err_len(&self) -> usize {
        self.base + self.err_buf.len()
    }

    /// Feed the next slice of the outcome stream (any length).
    pub fn push_outcomes(&mut self, outcomes: &PackedBits) {
        if outcomes.is_empty() {
            return;
        }
        let mut combined = self.outcome_tail.clone();
        combined.extend_from(outcomes);
        if combined.len() >= crate::preprocess::TEMPLATE_LEN {
            let hits = crate::preprocess::ggg_hits_packed(&combined).expect("length checked");
            self.err_buf.extend_from(&hits);
            self.started = true;
        }
        // keep the last TEMPLATE_LEN - 1 outcome bits
        let keep = crate::preprocess::TEMPLATE_LEN - 1;
        let mut tail = PackedBits::new();
        let from = combined.len().saturating_sub(keep);
        for i in from..combined.len() {
            tail.push(combined.get(i));
        }
        self.outcome_tail = tail;
        self.advance(false);
    }

    /// Flush remaining positions and return detections (sorted by start
    /// time) plus any warnings.
    pub fn finish(mut self) -> (Vec<Detection>, Vec<String>) {
        self.advance(true);
        if let Some(g) = self.open.take() {
            self.closing.push_back(g);
        }
        self.drain_closing(true);
        if self.err_len() < self.kernel.len() {
            self.warnings.push(format!(
                "channel {}: stream of {} template positions is shorter than the {}-tap kernel; no detection possible",
                self.channel,
                self.err_len(),
                self.kernel.len()
            ));
        }
        let mut detections = std::mem::take(&mut self.detections);
        detections.sort_by_key(|d| d.record.start_ns);
        (detections, std::mem::take(&mut self.warnings))
    }

    fn advance(&mut self, at_end: bool) {
        let k_len = self.kernel.len();
        loop {
            let out_avail = (self.err_len() + 1).saturating_sub(k_len); // valid output positions
            let end = if at_end {
                out_avail
            } else {
                // full chunks only, aligned to multiples of CHUNK
                let aligned = (out_avail / CHUNK) * CHUNK;
                aligned.min(self.consumed + CHUNK)
            };
            if end <= self.consumed {
                break;
            }
            let (s, e) = (self.consumed, end);
            self.scan_range(s, e);
            self.consumed = e;
            if at_end {
                break;
            }
        }
        self.drain_closing(at_end);
        self.compact();
    }

    fn scan_range(&mut self, s: usize, e: usize) {
        let base = self.base;
        // borrow juggling: collect group transitions locally
        let mut open = self.open.take();
        let mut closed: Vec<Group> = Vec::new();
        let cand = self.params.candidate_threshold;
        let min_sep = self.min_sep;
        correlate_range(
            &self.err_buf,
            s - base,
            e - base,
            &self.kernel,
            |j_local, y| {
                let j = j_local + base;
                if let Some(g) = open {
                    if j - g.last >= min_sep {
                        closed.push(g);
                        open = None;
                    }
                }
                if y >= cand {
                    match &mut open {
                        Some(g) => {
                            g.last = j;
                            if y > g.peak_y {
                                g.peak_y = y;
                                g.peak_j = j;
                            }
                        }
                        None => {
                            open = Some(Group {
                                first: j,
                                last: j,
                                peak_j: j,
                                peak_y: y,
                            });
                        }
                    }
                }
            },
        );
        self.open = open;
        self.closing.extend(closed);
    }

    /// Emit closed groups whose start-estimation window is fully available.
    fn drain_closing(&mut self, at_end: bool) {
        let p = self.kernel.pre_taps();
        let h = self.contrast.half_taps();
        while let Some(g) = self.closing.front().copied() {
            let onset = g.peak_j + p;
            let need_end = onset + self.halfwidth + h + 1;
            if !at_end && self.err_len() < need_end {
                break;
            }
            self.closing.pop_front();
            if g.peak_y < self.params.event_threshold {
                continue;
            }
            let span = g.last - g.first;
            if span * 2 >= self.err_len().max(1) {
                self.warnings.push(format!(
                    "channel {}: a single candidate group spans {} of {} positions; the stream looks saturated",
                    self.channel,
                    span,
                    self.err_len()
                ));
            }
            let mut record = EventRecord::detected(
                &self.channel,
                self.clock.cycle_to_time(onset as u64),
                Nanos::from_secs_f64(self.params.tau_filter_s(&self.channel)),
                g.peak_y,
            );
            match estimate_start_at(
                &self.err_buf,
                self.err_len(),
                self.base,
                onset,
                self.halfwidth,
                &self.contrast,
                &self.clock,
            ) {
                Ok(estimate) => {
                    record.start_ns = estimate.time;
                    self.detections.push(Detection { record, estimate });
                }
                Err(_) => {
                    // stream shorter than one contrast window; keep the
                    // unrefined peak time
                    let estimate = StartEstimate {
                        time: record.start_ns,
                        score: 0,
                        degenerate: true,
                    };
                    self.detections.push(Detection { record, estimate });
                }
            }
        }
    }

    /// Drop error bits no longer reachable by correlation or estimation.
    fn compact(&mut self) {
        let p = self.kernel.pre_taps();
        let h = self.contrast.half_taps();
        let margin = self.halfwidth + h + 1;
        let mut floor = self.consumed;
        for g in self.open.iter().chain(self.closing.iter()) {
            floor = floor.min((g.peak_j + p).saturating_sub(margin));
        }
        let droppable = floor.saturating_sub(self.base) / 8;
        if droppable >= 4096 {
            self.err_buf.drop_front_bytes(droppable);
            self.base += droppable * 8;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CycleClock;
    use crate::preprocess::match_template_ggg;
    use crate::trace::QubitTrace;

    fn dt() -> Nanos {
        Nanos::from_micros(10)
    }

    fn default_kernel() -> FilterKernel {
        FilterKernel::build(2.5e-3, Nanos::from_millis(24), Nanos::from_millis(4), dt()).unwrap()
    }

    #[test]
    fn kernel_sums_to_zero() {
        let k = default_kernel();
        assert_eq!(k.len(), 2400);
        assert_eq!(k.pre_taps(), 400);
        let plain: f64 = k.taps().iter().sum();
        assert!(plain.abs() < 1e-12, "plain sum {plain:e}");
    }

    #[test]
    fn kernel_background_matches_geometric_series() {
        // Closed-form oracle: c = -S/K with S the geometric series over the
        // post-onset taps.
        let tau = 2.5e-3;
        let k = default_kernel();
        let r = (-dt().as_secs_f64() / tau).exp();
        let m = k.post_taps() as f64;
        let s_closed = (1.0 - r.powf(m)) / (1.0 - r);
        let c_oracle = -s_closed / k.len() as f64;
        assert!(
            (k.baseline() - c_oracle).abs() < 1e-12,
            "baseline {} vs oracle {c_oracle}",
            k.baseline()
        );
    }

    #[test]
    fn kernel_flat_limit() {
        // tau -> infinity: post-onset taps become c + 1 and c -> -M/K.
        let k = FilterKernel::build(
            f64::INFINITY,
            Nanos::from_millis(24),
            Nanos::from_millis(4),
            dt(),
        )
        .unwrap();
        let c_expect = -(k.post_taps() as f64) / k.len() as f64;
        assert!((k.baseline() - c_expect).abs() < 1e-12);
        let last = *k.taps().last().unwrap();
        assert!((last - (k.baseline() + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn kernel_rejects_bad_geometry() {
        assert!(matches!(
            FilterKernel::build(2.5e-3, Nanos::from_millis(24), Nanos::from_micros(4_005), dt()),
            Err(DetectError::NonDivisible { .. })
        ));
        assert!(FilterKernel::build(2.5e-3, Nanos::from_millis(4), Nanos::from_millis(4), dt()).is_err());
        assert!(FilterKernel::build(0.0, Nanos::from_millis(24), Nanos::from_millis(4), dt()).is_err());
    }

    fn es_from_bools(bits: &[bool]) -> ErrorStream {
        // wrap raw error bits directly (channel/clock irrelevant to math)
        ErrorStream::new(
            "Q2",
            CycleClock::default(),
            PackedBits::from_bools(bits),
        )
    }

    #[test]
    fn correlate_zero_and_constant_streams() {
        let k = default_kernel();
        let zeros = es_from_bools(&vec![false; 5000]);
        let y = cross_correlate(&zeros, &k);
        assert_eq!(y.values.len(), 5000 - k.len() + 1);
        assert!(y.values.iter().all(|&v| v == 0.0));

        // all-ones: zero-sum kernel nulls any constant input
        let ones = es_from_bools(&vec![true; 5000]);
        let y = cross_correlate(&ones, &k);
        assert!(y.values.iter().all(|&v| v.abs() < 1e-9));
    }

    #[test]
    fn correlate_matches_naive_oracle() {
        let k = default_kernel();
        // 3 ms block of ones on a sparse background
        let mut bits = vec![false; 9000];
        for b in bits.iter_mut().skip(3000).take(300) {
            *b = true;
        }
        for i in (0..9000).step_by(731) {
            bits[i] = true;
        }
        let es = es_from_bools(&bits);
        let fast = cross_correlate(&es, &k);
        let xs: Vec<f64> = bits.iter().map(|&b| b as u8 as f64).collect();
        let naive = cross_correlate_ref(&xs, &k);
        assert_eq!(fast.values.len(), naive.len());
        for (j, (a, b)) in fast.values.iter().zip(&naive).enumerate() {
            assert!(
                (a - b).abs() <= 1e-9 * (1.0 + b.abs()),
                "j={j}: {a} vs {b}"
            );
        }
        let peak_fast = fast.values.iter().cloned().fold(f64::MIN, f64::max);
        let peak_naive = naive.iter().cloned().fold(f64::MIN, f64::max);
        assert!((peak_fast - peak_naive).abs() < 1e-9 * peak_naive);
    }

    #[test]
    fn saturated_burst_peaks_near_150() {
        // Near-saturated error density over one recovery span: the dot
        // product lands in the ~150 a.u. cluster.
        let k = default_kernel();
        let mut bits = vec![false; 12000];
        for b in bits.iter_mut().skip(4000).take(570) {
            *b = true;
        }
        let es = es_from_bools(&bits);
        let y = cross_correlate(&es, &k);
        let peak = y.values.iter().cloned().fold(f64::MIN, f64::max);
        assert!((100.0..220.0).contains(&peak), "peak {peak}");
    }

    #[test]
    fn find_events_trivial_and_merge() {
        let params = DetectionParams::default();
        let clock = CycleClock::default();
        let flat = CorrelationSeries {
            values: vec![0.0; 10_000],
            onset_offset: 400,
            clock,
        };
        assert!(find_events(&flat, &params, "Q2").is_empty());

        // two synthetic peaks 15 ms apart merge; 30 ms apart stay separate
        let mut mk = |gap_cycles: usize| {
            let mut v = vec![0.0; 20_000];
            for (i, val) in v.iter_mut().enumerate().skip(5000).take(200) {
                *val = 120.0 - 0.3 * (i - 5000) as f64;
            }
            for (i, val) in v.iter_mut().enumerate().skip(5000 + gap_cycles).take(200) {
                *val = 150.0 - 0.3 * (i - 5000 - gap_cycles) as f64;
            }
            let series = CorrelationSeries {
                values: v,
                onset_offset: 400,
                clock,
            };
            find_events(&series, &params, "Q2")
        };
        let merged = mk(1500);
        assert_eq!(merged.len(), 1);
        assert_eq!(merged[0].peak_au, Some(150.0));
        let split = mk(3000);
        assert_eq!(split.len(), 2);
    }

    #[test]
    fn start_estimate_on_ideal_step() {
        let params = DetectionParams::default();
        let n0 = 2500usize;
        let mut bits = vec![false; 6000];
        for b in bits.iter_mut().skip(n0) {
            *b = true;
        }
        let es = es_from_bools(&bits);
        let candidate = EventRecord::detected(
            "Q2",
            es.clock.cycle_to_time(n0 as u64 + 7), // peak slightly off
            Nanos::from_millis(2),
            100.0,
        );
        let est = estimate_start_time(&es, &candidate, &params).unwrap();
        assert_eq!(est.time, es.clock.cycle_to_time(n0 as u64));
        assert!(!est.degenerate);
    }

    #[test]
    fn start_estimate_degenerate_flat_stream() {
        let params = DetectionParams::default();
        let es = es_from_bools(&vec![false; 5000]);
        let candidate = EventRecord::detected(
            "Q2",
            es.clock.cycle_to_time(2500),
            Nanos::from_millis(2),
            100.0,
        );
        let est = estimate_start_time(&es, &candidate, &params).unwrap();
        assert!(est.degenerate);
        // earliest position of the clipped window
        let expect = 2500 - 1200;
        assert_eq!(est.time, es.clock.cycle_to_time(expect));
    }

    #[test]
    fn start_estimate_clips_to_stream() {
        let params = DetectionParams::default();
        let mut bits = vec![false; 1500];
        for b in bits.iter_mut().skip(700) {
            *b = true;
        }
        let es = es_from_bools(&bits);
        let candidate = EventRecord::detected(
            "Q2",
            es.clock.cycle_to_time(100),
            Nanos::from_millis(2),
            100.0,
        );
        let est = estimate_start_time(&es, &candidate, &params).unwrap();
        // window [0-hw, 100+hw] clips to [100, 1300]; argmax at the step
        assert_eq!(est.time, es.clock.cycle_to_time(700));
    }

    /// Build a trace with saturated ground-state bursts at the given cycles.
    fn synthetic_trace(n_cycles: usize, bursts: &[(usize, usize)]) -> QubitTrace {
        let mut state = 0xDEADBEEFu64;
        let mut chance = |p_num: u64, p_den: u64| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) % p_den < p_num
        };
        let mut excited = vec![true; n_cycles];
        for e in excited.iter_mut() {
            if chance(1, 25) {
                *e = false; // SPAM-like isolated g
            }
        }
        for &(start, len) in bursts {
            for e in excited.iter_mut().skip(start).take(len) {
                *e = chance(1, 100); // dense g run
            }
        }
        QubitTrace::from_outcomes("Q2", CycleClock::default(), &excited)
    }

    #[test]
    fn streaming_matches_in_memory_path() {
        let params = DetectionParams::default();
        let trace = synthetic_trace(
            300_000,
            &[(40_000, 600), (41_800, 400), (150_000, 500), (260_000, 700)],
        );
        let es = match_template_ggg(&trace).unwrap();
        let expected = detect_events(&es, &params, "Q2").unwrap();
        assert!(!expected.is_empty());

        for chunk_bits in [8 * 1009, 8 * 37, 524_288] {
            let mut det = StreamingDetector::new("Q2", trace.clock, &params).unwrap();
            let mut fed = 0usize;
            while fed < trace.n_cycles() {
                let take = chunk_bits.min(trace.n_cycles() - fed);
                let mut chunk = PackedBits::with_capacity(take);
                for i in fed..fed + take {
                    chunk.push(trace.excited(i));
                }
                det.push_outcomes(&chunk);
                fed += take;
            }
            let (got, warnings) = det.finish();
            assert!(warnings.is_empty(), "{warnings:?}");
            assert_eq!(got.len(), expected.len(), "chunk {chunk_bits}");
            for (g, e) in got.iter().zip(&expected) {
                assert_eq!(g.record, e.record, "chunk {chunk_bits}");
                assert_eq!(g.estimate, e.estimate, "chunk {chunk_bits}");
            }
        }
    }

    #[test]
    fn streaming_flags_saturated_stream() {
        // all-ground trace: one group spanning everything
        let trace = QubitTrace::from_outcomes("Q2", CycleClock::default(), &vec![false; 60_000]);
        let mut det =
            StreamingDetector::new("Q2", trace.clock, &DetectionParams::default()).unwrap();
        det.push_outcomes(trace.bits());
        let (events, warnings) = det.finish();
        assert_eq!(events.len(), 1);
        assert!(
            warnings.iter().any(|w| w.contains("saturated")),
            "{warnings:?}"
        );
    }

    #[test]
    fn correlation_shift_invariance_on_real_input() {
        // zero-sum kernel: adding a constant leaves the output unchanged
        let k = default_kernel();
        let xs: Vec<f64> = (0..4000)
            .map(|i| ((i * 37 + 11) % 17) as f64 / 17.0)
            .collect();
        let shifted: Vec<f64> = xs.iter().map(|x| x + 0.7).collect();
        let y0 = cross_correlate_ref(&xs, &k);
        let y1 = cross_correlate_ref(&shifted, &k);
        for (a, b) in y0.iter().zip(&y1) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn correlation_linearity_on_real_input() {
        let k = default_kernel();
        let x1: Vec<f64> = (0..3000).map(|i| ((i * 13) % 7) as f64).collect();
        let x2: Vec<f64> = (0..3000).map(|i| ((i * 29) % 11) as f64).collect();
        let (alpha, beta) = (0.6, -1.3);
        let mix: Vec<f64> = x1
            .iter()
            .zip(&x2)
            .map(|(a, b)| alpha * a + beta * b)
            .collect();
        let y_mix = cross_correlate_ref(&mix, &k);
        let y1 = cross_correlate_ref(&x1, &k);
        let y2 = cross_correlate_ref(&x2, &k);
        for ((m, a), b) in y_mix.iter().zip(&y1).zip(&y2) {
            let expect = alpha * a + beta * b;
            assert!((m - expect).abs() < 1e-8 * (1.0 + expect.abs()));
        }
    }
}
