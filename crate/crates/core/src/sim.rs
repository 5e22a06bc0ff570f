//! Seeded Monte Carlo generation of correlated decay bursts and synthesis of
//! measurement bit-streams.
//!
//! Impacts arrive per region as independent homogeneous Poisson processes.
//! A module impact co-triggers the motherboard with probability
//! `p_module_to_mb` (a particle traversing module and carrier) and every
//! other module with probability `p_shower`. Each impacted region then
//! triggers its resident channels: qubits respond independently with
//! probability `p_respond`, router probes always respond (the router is a
//! large structure covering the whole carrier).
//!
//! Each responding channel receives an additive decay-rate transient
//! `gamma0 * exp(-(t - start)/tau)`. Within a region the first declared
//! channel anchors the impact time; other channels are offset by
//! `N(jitter_mean, jitter_sigma / sqrt(2))`, so the start-time difference
//! between two channels of one module is distributed
//! `N(jitter_mean, jitter_sigma)`.

use crate::model::{ChannelKind, ChannelSpec, CycleClock, EventRecord, RegionKind, Topology};
use crate::rng::substream;
use crate::time::Nanos;
use crate::trace::QubitTrace;
use rand::Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error("sim config field {field}: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("unknown channel {0:?}")]
    UnknownChannel(String),
    #[error("topology has no router probe channel")]
    NoRouterProbe,
}

/// Full parameter set for one simulated observation run.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub topology: Topology,
    pub clock: CycleClock,
    pub duration: Nanos,
    /// Impact rate per region, 1/s.
    pub region_rates_per_s: BTreeMap<String, f64>,
    /// Probability that a module impact also hits the motherboard.
    pub p_module_to_mb: f64,
    /// Probability that a module impact co-triggers another module (shower).
    pub p_shower: f64,
    /// Per-qubit response probability given an impact on its module.
    pub p_respond: f64,
    /// Systematic onset offset of non-anchor channels within a region.
    pub jitter_mean: Nanos,
    /// Standard deviation of the onset difference between two channels of the
    /// same region.
    pub jitter_sigma: Nanos,
    /// Median of the onset decay-rate transient, 1/s.
    pub gamma0_median_per_s: f64,
    /// Log-normal spread factor of gamma0 (1 = no spread).
    pub gamma0_spread: f64,
    /// Log-normal spread factor of the recovery constant around the
    /// channel's mean (1 = no spread).
    pub tau_spread: f64,
    pub seed: u64,
}

/// Equal per-region rate such that a qubit responding with probability
/// `p_respond` sees events at the reference rate of one per 144 s.
pub fn default_region_rate(p_respond: f64) -> f64 {
    (1.0 / 144.0) / p_respond
}

impl Default for SimConfig {
    fn default() -> Self {
        let topology = crate::model::paper_topology();
        let p_respond = 0.9;
        let region_rates_per_s = topology
            .regions
            .iter()
            .map(|r| (r.label.clone(), default_region_rate(p_respond)))
            .collect();
        SimConfig {
            topology,
            clock: CycleClock::default(),
            duration: Nanos::from_secs(1800),
            region_rates_per_s,
            p_module_to_mb: 0.4,
            p_shower: 0.02,
            p_respond,
            jitter_mean: Nanos::from_micros(-35),
            jitter_sigma: Nanos::from_micros(121),
            gamma0_median_per_s: 1e7,
            gamma0_spread: 2.0,
            tau_spread: 1.5,
            seed: 1,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        self.topology.validate()?;
        self.clock.validate()?;
        let bad = |field: &'static str, reason: String| Err(SimError::InvalidConfig { field, reason });
        if self.duration <= Nanos::ZERO {
            return bad("duration", format!("must be positive, got {}", self.duration));
        }
        for (field, p) in [
            ("p_module_to_mb", self.p_module_to_mb),
            ("p_shower", self.p_shower),
            ("p_respond", self.p_respond),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(field, format!("probability must be within [0, 1], got {p}"));
            }
        }
        for (region, rate) in &self.region_rates_per_s {
            if self.topology.region(region).is_none() {
                return bad("region_rates_per_s", format!("unknown region {region:?}"));
            }
            if !(rate.is_finite() && *rate >= 0.0) {
                return bad(
                    "region_rates_per_s",
                    format!("rate for {region:?} must be finite and >= 0, got {rate}"),
                );
            }
        }
        if self.jitter_sigma < Nanos::ZERO {
            return bad("jitter_sigma", "must be >= 0".into());
        }
        if !(self.gamma0_median_per_s.is_finite() && self.gamma0_median_per_s > 0.0) {
            return bad("gamma0_median_per_s", "must be positive and finite".into());
        }
        for (field, s) in [
            ("gamma0_spread", self.gamma0_spread),
            ("tau_spread", self.tau_spread),
        ] {
            if !(s.is_finite() && s >= 1.0) {
                return bad(field, format!("spread factor must be >= 1, got {s}"));
            }
        }
        Ok(())
    }

    fn rate_for(&self, region: &str) -> f64 {
        self.region_rates_per_s.get(region).copied().unwrap_or(0.0)
    }
}

/// Injected events plus the underlying per-region impact times.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruth {
    /// All channel events, sorted by start time.
    pub events: Vec<EventRecord>,
    /// Impact times per region (including co-triggered impacts), sorted.
    pub impacts: BTreeMap<String, Vec<Nanos>>,
}

impl GroundTruth {
    pub fn events_for<'a>(&'a self, channel: &'a str) -> impl Iterator<Item = &'a EventRecord> {
        self.events.iter().filter(move |e| e.channel == channel)
    }

    /// Events that affect a channel's trace: its own, plus the linked
    /// qubit's for a router probe.
    pub fn visible_events_for(&self, topology: &Topology, channel: &str) -> Vec<&EventRecord> {
        let linked = topology.channel(channel).and_then(|c| match &c.kind {
            ChannelKind::RouterProbe { linked_qubit } => Some(linked_qubit.as_str()),
            ChannelKind::Qubit => None,
        });
        self.events
            .iter()
            .filter(|e| e.channel == channel || Some(e.channel.as_str()) == linked)
            .collect()
    }
}

/// Draw all impact times and channel responses for one run. Deterministic
/// given the config (seed included); an empty result is valid when rates or
/// duration are zero-effective.
pub fn generate_events(cfg: &SimConfig) -> Result<GroundTruth, SimError> {
    cfg.validate()?;
    let topo = &cfg.topology;
    let duration = cfg.duration;
    let has_mb = topo.motherboard().is_some();

    // Phase 1: Poisson impacts per region, with co-trigger draws taken from
    // the originating region's stream right after each arrival.
    let mut impacts: BTreeMap<String, Vec<Nanos>> = topo
        .regions
        .iter()
        .map(|r| (r.label.clone(), Vec::new()))
        .collect();
    for region in &topo.regions {
        let rate = cfg.rate_for(&region.label);
        if rate <= 0.0 {
            continue;
        }
        let mut rng = substream(cfg.seed, "impacts", &region.label);
        let exp = Exp::new(rate).expect("validated rate");
        let mut t_s = 0.0f64;
        loop {
            t_s += exp.sample(&mut rng);
            let t = Nanos::from_secs_f64(t_s);
            if t >= duration {
                break;
            }
            impacts.get_mut(&region.label).unwrap().push(t);
            if region.kind == RegionKind::Module {
                if has_mb && rng.random::<f64>() < cfg.p_module_to_mb {
                    let mb = topo.motherboard().unwrap().label.clone();
                    impacts.get_mut(&mb).unwrap().push(t);
                }
                for other in topo.modules() {
                    if other.label != region.label && rng.random::<f64>() < cfg.p_shower {
                        impacts.get_mut(&other.label).unwrap().push(t);
                    }
                }
            }
        }
    }
    for times in impacts.values_mut() {
        times.sort();
    }

    // Phase 2: per-region channel responses, walking impacts chronologically.
    let mut events: Vec<EventRecord> = Vec::new();
    let sigma_channel_ns = cfg.jitter_sigma.as_nanos() as f64 / std::f64::consts::SQRT_2;
    let ln_g0_spread = cfg.gamma0_spread.ln();
    let ln_tau_spread = cfg.tau_spread.ln();
    for region in &topo.regions {
        let times = &impacts[&region.label];
        if times.is_empty() {
            continue;
        }
        let residents: Vec<&ChannelSpec> = topo.channels_in_region(&region.label).collect();
        let mut rng = substream(cfg.seed, "respond", &region.label);
        for &impact in times {
            for (slot, ch) in residents.iter().enumerate() {
                let responds = match ch.kind {
                    ChannelKind::Qubit => rng.random::<f64>() < cfg.p_respond,
                    ChannelKind::RouterProbe { .. } => true,
                };
                if !responds {
                    continue;
                }
                let offset_mean_ns = if slot == 0 {
                    0.0
                } else {
                    cfg.jitter_mean.as_nanos() as f64
                };
                let z_jitter: f64 = StandardNormal.sample(&mut rng);
                let z_gamma: f64 = StandardNormal.sample(&mut rng);
                let z_tau: f64 = StandardNormal.sample(&mut rng);
                let onset_ns =
                    impact.as_nanos() as f64 + offset_mean_ns + sigma_channel_ns * z_jitter;
                let onset = Nanos(onset_ns.round().max(0.0) as i64);
                if onset >= duration {
                    continue;
                }
                let gamma0 = cfg.gamma0_median_per_s * (z_gamma * ln_g0_spread).exp();
                // Mean-preserving log-normal: E[tau] equals the channel mean.
                let tau_ms = ch.tau_recovery_mean_ms
                    * (z_tau * ln_tau_spread - 0.5 * ln_tau_spread * ln_tau_spread).exp();
                events.push(EventRecord::ground_truth(
                    &ch.label,
                    onset,
                    gamma0,
                    Nanos::from_millis_f64(tau_ms),
                ));
            }
        }
    }
    let index_of = |label: &str| topo.channel_index(label).unwrap_or(usize::MAX);
    events.sort_by(|a, b| {
        (a.start_ns, index_of(&a.channel)).cmp(&(b.start_ns, index_of(&b.channel)))
    });
    Ok(GroundTruth { events, impacts })
}

/// Instantaneous decay rate of a channel at time `t`: the baseline 1/T1 plus
/// the tails of every event on that channel that started at or before `t`.
/// For a router probe this covers the router side only; the linked qubit's
/// own rate is added during trace synthesis.
pub fn effective_decay_rate(
    topology: &Topology,
    gt: &GroundTruth,
    channel: &str,
    t: Nanos,
) -> Result<f64, SimError> {
    let spec = topology
        .channel(channel)
        .ok_or_else(|| SimError::UnknownChannel(channel.to_string()))?;
    let mut rate = spec.base_rate_per_s();
    for e in gt.events_for(channel) {
        if e.start_ns <= t {
            let dt_s = (t - e.start_ns).as_secs_f64();
            rate += e.gamma0_per_s * (-dt_s / e.tau_ns.as_secs_f64()).exp();
        }
    }
    Ok(rate)
}

/// Probability that cycle `n` of a channel records an excited-state outcome,
/// combining excited-state survival over the idle window with readout errors.
/// This is the exact success probability behind each trace bit.
pub fn recorded_excited_probability(
    cfg: &SimConfig,
    gt: &GroundTruth,
    channel: &str,
    cycle: u64,
) -> Result<f64, SimError> {
    let spec = cfg
        .topology
        .channel(channel)
        .ok_or_else(|| SimError::UnknownChannel(channel.to_string()))?;
    let t_mid = cfg.clock.idle_midpoint(cycle);
    let mut rate = effective_decay_rate(&cfg.topology, gt, channel, t_mid)?;
    if let ChannelKind::RouterProbe { linked_qubit } = &spec.kind {
        rate += effective_decay_rate(&cfg.topology, gt, linked_qubit, t_mid)?;
    }
    let p_e = (-cfg.clock.t_idle.as_secs_f64() * rate).exp();
    Ok(p_e * spec.f_e + (1.0 - p_e) * (1.0 - spec.f_g))
}

struct ActiveEvent {
    start_ns: i64,
    gamma0: f64,
    inv_tau_s: f64,
    cutoff_ns: i64,
}

/// Synthesize the measurement bit-stream of one channel. Cycles are
/// conditionally independent given the event waveform; survival is evaluated
/// at the idle-window midpoint of each cycle. Deterministic per
/// `(seed, channel)`: regenerating one channel never changes another.
pub fn simulate_trace(
    cfg: &SimConfig,
    gt: &GroundTruth,
    channel: &str,
) -> Result<QubitTrace, SimError> {
    let spec = cfg
        .topology
        .channel(channel)
        .ok_or_else(|| SimError::UnknownChannel(channel.to_string()))?;

    // A probe's survival is the product of router survival and linked-qubit
    // survival over the same idle window, i.e. one exponential of the summed
    // rates with the merged event list.
    let (base_rate, mut event_list): (f64, Vec<&EventRecord>) = match &spec.kind {
        ChannelKind::Qubit => (spec.base_rate_per_s(), gt.events_for(channel).collect()),
        ChannelKind::RouterProbe { linked_qubit } => {
            let linked = cfg
                .topology
                .channel(linked_qubit)
                .ok_or_else(|| SimError::UnknownChannel(linked_qubit.clone()))?;
            (
                spec.base_rate_per_s() + linked.base_rate_per_s(),
                gt.visible_events_for(&cfg.topology, channel),
            )
        }
    };
    event_list.sort_by_key(|e| e.start_ns);

    let events: Vec<ActiveEvent> = event_list
        .iter()
        .map(|e| ActiveEvent {
            start_ns: e.start_ns.as_nanos(),
            gamma0: e.gamma0_per_s,
            inv_tau_s: 1.0 / e.tau_ns.as_secs_f64(),
            // Beyond 60 tau the tail is below one ulp of any representable
            // rate sum; dropping it leaves the survival probability
            // bit-identical.
            cutoff_ns: e.start_ns.as_nanos().saturating_add(60 * e.tau_ns.as_nanos()),
        })
        .collect();

    let n_cycles = cfg.clock.n_cycles(cfg.duration);
    let t_idle_s = cfg.clock.t_idle.as_secs_f64();
    let p_e_base = (-t_idle_s * base_rate).exp();
    let p_rec_base = p_e_base * spec.f_e + (1.0 - p_e_base) * (1.0 - spec.f_g);

    let period_ns = cfg.clock.cycle_period.as_nanos();
    let half_idle_ns = cfg.clock.t_idle.as_nanos() / 2;

    let mut rng = substream(cfg.seed, "trace", channel);
    let mut bits = crate::bits::PackedBits::with_capacity(n_cycles as usize);
    let mut next_event = 0usize;
    let mut active: Vec<usize> = Vec::new();

    for n in 0..n_cycles {
        let t_mid_ns = n as i64 * period_ns + half_idle_ns;
        while next_event < events.len() && events[next_event].start_ns <= t_mid_ns {
            active.push(next_event);
            next_event += 1;
        }
        if !active.is_empty() {
            active.retain(|&i| events[i].cutoff_ns >= t_mid_ns);
        }
        let u: f64 = rng.random();
        let p = if active.is_empty() {
            p_rec_base
        } else {
            let mut rate = base_rate;
            for &i in &active {
                let e = &events[i];
                let dt_s = (t_mid_ns - e.start_ns) as f64 * 1e-9;
                rate += e.gamma0 * (-dt_s * e.inv_tau_s).exp();
            }
            let p_e = (-t_idle_s * rate).exp();
            p_e * spec.f_e + (1.0 - p_e) * (1.0 - spec.f_g)
        };
        bits.push(u < p);
    }
    Ok(QubitTrace::new(channel, cfg.clock, bits))
}

/// Synthesize the router-probe trace (the first router probe in the
/// topology).
pub fn simulate_router_trace(cfg: &SimConfig, gt: &GroundTruth) -> Result<QubitTrace, SimError> {
    let probe = cfg
        .topology
        .channels
        .iter()
        .find(|c| matches!(c.kind, ChannelKind::RouterProbe { .. }))
        .ok_or(SimError::NoRouterProbe)?;
    simulate_trace(cfg, gt, &probe.label.clone())
}
