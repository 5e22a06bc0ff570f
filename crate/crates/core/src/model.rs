//! Device topology, cycle clock and event records.
//!
//! All values here are immutable once constructed and cheap to clone; every
//! pipeline stage shares them by reference or by value without locking.

use crate::time::Nanos;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("topology has no channels")]
    NoChannels,
    #[error("duplicate region label {0:?}")]
    DuplicateRegion(String),
    #[error("duplicate channel label {0:?}")]
    DuplicateChannel(String),
    #[error("channel {channel:?} references unknown region {region:?}")]
    UnknownRegion { channel: String, region: String },
    #[error("router probe {probe:?} links to unknown or non-qubit channel {linked:?}")]
    BadProbeLink { probe: String, linked: String },
    #[error("channel {channel:?}: {reason}")]
    BadChannelParam { channel: String, reason: String },
    #[error("cycle clock requires cycle_period > t_idle > 0 (got period {period}, idle {idle})")]
    BadClock { period: Nanos, idle: Nanos },
    #[error("negative time {0} has no cycle index")]
    NegativeTime(Nanos),
}

/// Physical role of a region: a flip-chip module hosting qubits, or the
/// carrier motherboard hosting the router.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionKind {
    Module,
    Motherboard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionSpec {
    pub label: String,
    pub kind: RegionKind,
}

/// What a measurement channel physically probes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ChannelKind {
    /// A qubit measured directly with the repeated excite-idle-measure cycle.
    Qubit,
    /// The router on the motherboard, probed by swapping an excitation out of
    /// a linked qubit. Decay of the probe outcome cannot distinguish router
    /// events from events in the linked qubit.
    RouterProbe { linked_qubit: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub label: String,
    pub region: String,
    pub kind: ChannelKind,
    /// Baseline energy relaxation time in microseconds.
    pub t1_base_us: f64,
    /// Readout fidelity of the ground state.
    pub f_g: f64,
    /// Readout fidelity of the excited state.
    pub f_e: f64,
    /// Mean of the per-event recovery constant population, in milliseconds.
    pub tau_recovery_mean_ms: f64,
    /// Opaque channel metadata (idle/readout frequencies, gate fidelities,
    /// Ramsey times). Carried through configs verbatim, never computed on.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl ChannelSpec {
    /// Baseline decay rate 1/T1 in 1/s. `t1_base_us = inf` is a valid ideal
    /// qubit and yields a zero rate.
    pub fn base_rate_per_s(&self) -> f64 {
        1e6 / self.t1_base_us
    }

    fn validate(&self) -> Result<(), ModelError> {
        let bad = |reason: &str| {
            Err(ModelError::BadChannelParam {
                channel: self.label.clone(),
                reason: reason.to_string(),
            })
        };
        if !(self.t1_base_us > 0.0) {
            return bad("t1_base_us must be positive");
        }
        if !(self.f_g > 0.0 && self.f_g <= 1.0) {
            return bad("f_g must be in (0, 1]");
        }
        if !(self.f_e > 0.0 && self.f_e <= 1.0) {
            return bad("f_e must be in (0, 1]");
        }
        if !(self.tau_recovery_mean_ms > 0.0 && self.tau_recovery_mean_ms.is_finite()) {
            return bad("tau_recovery_mean_ms must be positive and finite");
        }
        Ok(())
    }
}

/// Channels mapped onto physical regions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub regions: Vec<RegionSpec>,
    pub channels: Vec<ChannelSpec>,
}

impl Topology {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.channels.is_empty() {
            return Err(ModelError::NoChannels);
        }
        let mut region_labels = std::collections::BTreeSet::new();
        for r in &self.regions {
            if !region_labels.insert(r.label.as_str()) {
                return Err(ModelError::DuplicateRegion(r.label.clone()));
            }
        }
        let mut channel_labels = std::collections::BTreeSet::new();
        for c in &self.channels {
            if !channel_labels.insert(c.label.as_str()) {
                return Err(ModelError::DuplicateChannel(c.label.clone()));
            }
            if !region_labels.contains(c.region.as_str()) {
                return Err(ModelError::UnknownRegion {
                    channel: c.label.clone(),
                    region: c.region.clone(),
                });
            }
            c.validate()?;
            if let ChannelKind::RouterProbe { linked_qubit } = &c.kind {
                let ok = self
                    .channels
                    .iter()
                    .any(|q| q.label == *linked_qubit && q.kind == ChannelKind::Qubit);
                if !ok {
                    return Err(ModelError::BadProbeLink {
                        probe: c.label.clone(),
                        linked: linked_qubit.clone(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn channel(&self, label: &str) -> Option<&ChannelSpec> {
        self.channels.iter().find(|c| c.label == label)
    }

    pub fn channel_index(&self, label: &str) -> Option<usize> {
        self.channels.iter().position(|c| c.label == label)
    }

    pub fn region(&self, label: &str) -> Option<&RegionSpec> {
        self.regions.iter().find(|r| r.label == label)
    }

    pub fn motherboard(&self) -> Option<&RegionSpec> {
        self.regions.iter().find(|r| r.kind == RegionKind::Motherboard)
    }

    /// Module regions in declaration order.
    pub fn modules(&self) -> impl Iterator<Item = &RegionSpec> {
        self.regions.iter().filter(|r| r.kind == RegionKind::Module)
    }

    /// Channels resident in a region, in declaration order.
    pub fn channels_in_region<'a>(
        &'a self,
        region: &'a str,
    ) -> impl Iterator<Item = &'a ChannelSpec> {
        self.channels.iter().filter(move |c| c.region == region)
    }
}

/// Repetition clock of the excite-idle-measure sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CycleClock {
    /// Full cycle period (pulse + idle + measure + wait).
    pub cycle_period: Nanos,
    /// Idle window between the excitation pulse and readout; decay during this
    /// window is what the measurement detects.
    pub t_idle: Nanos,
}

impl Default for CycleClock {
    fn default() -> Self {
        CycleClock {
            cycle_period: Nanos::from_micros(10),
            t_idle: Nanos::from_micros(1),
        }
    }
}

impl CycleClock {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.cycle_period > self.t_idle && self.t_idle > Nanos::ZERO {
            Ok(())
        } else {
            Err(ModelError::BadClock {
                period: self.cycle_period,
                idle: self.t_idle,
            })
        }
    }

    /// Index of the cycle containing time `t` (floor division). Negative
    /// times are rejected.
    pub fn time_to_cycle(&self, t: Nanos) -> Result<u64, ModelError> {
        if t.is_negative() {
            return Err(ModelError::NegativeTime(t));
        }
        Ok((t.as_nanos() / self.cycle_period.as_nanos()) as u64)
    }

    /// Start time of cycle `n`; inverse of [`Self::time_to_cycle`] onto cycle
    /// boundaries.
    pub fn cycle_to_time(&self, n: u64) -> Nanos {
        Nanos(n as i64 * self.cycle_period.as_nanos())
    }

    /// Midpoint of the idle window of cycle `n`, where the decay rate is
    /// sampled when synthesizing traces.
    pub fn idle_midpoint(&self, n: u64) -> Nanos {
        self.cycle_to_time(n) + self.t_idle / 2
    }

    /// Number of whole cycles in `duration`.
    pub fn n_cycles(&self, duration: Nanos) -> u64 {
        if duration.is_negative() {
            0
        } else {
            (duration.as_nanos() / self.cycle_period.as_nanos()) as u64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventSource {
    GroundTruth,
    Detected,
}

/// One decay burst on one channel, either injected by the simulator or
/// recovered by the detector. Both sides share this schema so comparison
/// tooling stays format-free.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub channel: String,
    /// Onset time.
    pub start_ns: Nanos,
    /// Extra decay rate at onset, 1/s. Zero for detected events, where the
    /// amplitude is carried by `peak_au` instead.
    pub gamma0_per_s: f64,
    /// Recovery constant of the rate transient. Detected events carry the
    /// matched-filter constant used to find them.
    pub tau_ns: Nanos,
    /// Matched-filter peak height; present exactly when `source` is
    /// `Detected`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub peak_au: Option<f64>,
    pub source: EventSource,
}

impl EventRecord {
    pub fn ground_truth(channel: &str, start: Nanos, gamma0_per_s: f64, tau: Nanos) -> Self {
        EventRecord {
            channel: channel.to_string(),
            start_ns: start,
            gamma0_per_s,
            tau_ns: tau,
            peak_au: None,
            source: EventSource::GroundTruth,
        }
    }

    pub fn detected(channel: &str, start: Nanos, tau: Nanos, peak_au: f64) -> Self {
        EventRecord {
            channel: channel.to_string(),
            start_ns: start,
            gamma0_per_s: 0.0,
            tau_ns: tau,
            peak_au: Some(peak_au),
            source: EventSource::Detected,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.tau_ns > Nanos::ZERO
            && self.gamma0_per_s >= 0.0
            && (self.peak_au.is_some() == (self.source == EventSource::Detected))
    }
}

/// The three-qubit, two-module device the pipeline defaults model, with the
/// router probed through Q2. Q3 was not operational and is omitted.
pub fn paper_topology() -> Topology {
    let regions = vec![
        RegionSpec {
            label: "DB_A".into(),
            kind: RegionKind::Module,
        },
        RegionSpec {
            label: "DB_B".into(),
            kind: RegionKind::Module,
        },
        RegionSpec {
            label: "MB".into(),
            kind: RegionKind::Motherboard,
        },
    ];
    let qubit = |label: &str, region: &str, t1: f64, f_g: f64, f_e: f64, tau_ms: f64| ChannelSpec {
        label: label.into(),
        region: region.into(),
        kind: ChannelKind::Qubit,
        t1_base_us: t1,
        f_g,
        f_e,
        tau_recovery_mean_ms: tau_ms,
        metadata: BTreeMap::new(),
    };
    let channels = vec![
        qubit("Q1", "DB_A", 36.0, 0.997, 0.974, 3.7),
        qubit("Q2", "DB_B", 41.4, 0.996, 0.982, 2.2),
        qubit("Q4", "DB_B", 11.6, 0.988, 0.959, 6.2),
        ChannelSpec {
            label: "RuQ2".into(),
            region: "MB".into(),
            kind: ChannelKind::RouterProbe {
                linked_qubit: "Q2".into(),
            },
            // Router lifetime; readout happens through Q2, so the probe
            // carries Q2's readout fidelities.
            t1_base_us: 10.1,
            f_g: 0.996,
            f_e: 0.982,
            tau_recovery_mean_ms: 2.5,
            metadata: BTreeMap::new(),
        },
    ];
    let topo = Topology { regions, channels };
    debug_assert!(topo.validate().is_ok());
    topo
}
