//! Pulse envelopes, schedule composition and virtual-Z frames.
//!
//! A [`Schedule`] holds flux pulses on the coupler line, microwave pulses on
//! the two qutrit drive lines and zero-duration frame shifts. Frame shifts
//! are bookkeeping only: a shift of `angle` on (qutrit, subspace) at time
//! `t` advances the carrier phase of every later pulse in that subspace,
//! which is the same as a logical `Z(-angle)` inserted at `t` followed by a
//! compensating frame change that the propagator applies to its reported
//! result.

use std::collections::hash_map::DefaultHasher;
use std::f64::consts::PI;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::linalg::C64;

/// Default separation between flux and microwave events, ns.
pub const DEFAULT_BUFFER_NS: f64 = 10.0;

/// Default single-qutrit gate length, ns.
pub const DEFAULT_GATE_NS: f64 = 40.0;

/// Fraction of a microwave pulse spent in each cosine ramp.
pub const RAMP_FRACTION: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Qutrit {
    Q1,
    Q2,
}

impl Qutrit {
    pub fn channel_name(&self) -> &'static str {
        match self {
            Qutrit::Q1 => "q1",
            Qutrit::Q2 => "q2",
        }
    }

    pub fn other(&self) -> Qutrit {
        match self {
            Qutrit::Q1 => Qutrit::Q2,
            Qutrit::Q2 => Qutrit::Q1,
        }
    }
}

/// Two-level subspace of a qutrit addressed by a drive tone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Subspace {
    #[serde(rename = "01")]
    S01,
    #[serde(rename = "12")]
    S12,
}

impl Subspace {
    /// Lower level of the pair.
    pub fn lower(&self) -> usize {
        match self {
            Subspace::S01 => 0,
            Subspace::S12 => 1,
        }
    }

    /// Matrix element <l+1|a^dagger|l> of the addressed transition.
    pub fn ladder_element(&self) -> f64 {
        ((self.lower() + 1) as f64).sqrt()
    }

    /// The level outside the pair within {0,1,2}.
    pub fn spectator(&self) -> usize {
        match self {
            Subspace::S01 => 2,
            Subspace::S12 => 0,
        }
    }
}

impl fmt::Display for Subspace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Subspace::S01 => "01",
            Subspace::S12 => "12",
        })
    }
}

/// Square flux pulse with smooth edges. The envelope is added to the idle
/// bias of the coupler.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FluxPulse {
    pub v_max: f64,
    pub tau_edge: f64,
    pub tau_flat: f64,
    pub start: f64,
    /// Use `sin(pi s / tau_edge)` edges instead of the monotone quarter-sine.
    #[serde(default)]
    pub literal_edges: bool,
}

impl FluxPulse {
    pub fn new(v_max: f64, tau_edge: f64, tau_flat: f64, start: f64) -> Self {
        FluxPulse { v_max, tau_edge, tau_flat, start, literal_edges: false }
    }

    pub fn duration(&self) -> f64 {
        2.0 * self.tau_edge + self.tau_flat
    }

    pub fn end(&self) -> f64 {
        self.start + self.duration()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau_edge > 0.0) || !(self.tau_flat >= 0.0) || !self.v_max.is_finite() || !self.start.is_finite() {
            return Err(SimError::InvalidParameter(format!("invalid flux pulse {self:?}")));
        }
        Ok(())
    }

    /// Bias offset at time `t`; zero outside the pulse.
    pub fn envelope(&self, t: f64) -> f64 {
        let s = t - self.start;
        let (e, f) = (self.tau_edge, self.tau_flat);
        if s <= 0.0 || s >= 2.0 * e + f {
            return 0.0;
        }
        let edge = |x: f64| {
            if self.literal_edges {
                (PI * x / e).sin()
            } else {
                (PI * x / (2.0 * e)).sin()
            }
        };
        if s < e {
            self.v_max * edge(s)
        } else if s <= e + f {
            self.v_max
        } else {
            self.v_max * edge(2.0 * e + f - s)
        }
    }

    pub fn with_start(&self, start: f64) -> Self {
        FluxPulse { start, ..*self }
    }
}

/// Free function form of [`FluxPulse::envelope`].
pub fn flux_envelope(pulse: &FluxPulse, t: f64) -> f64 {
    pulse.envelope(t)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MicrowavePulse {
    pub channel: Qutrit,
    pub subspace: Subspace,
    /// Carrier frequency, GHz.
    pub carrier: f64,
    pub duration: f64,
    /// Peak Rabi rate of the addressed transition, rad/ns.
    pub amplitude: f64,
    pub phase: f64,
    pub drag_coeff: f64,
    pub start: f64,
}

impl MicrowavePulse {
    pub fn end(&self) -> f64 {
        self.start + self.duration
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0)
            || !self.amplitude.is_finite()
            || !self.phase.is_finite()
            || !self.drag_coeff.is_finite()
            || !(self.carrier > 0.0)
        {
            return Err(SimError::InvalidParameter(format!("invalid microwave pulse {self:?}")));
        }
        Ok(())
    }

    /// Cosine-ramped flat-top envelope and its time derivative at `t`.
    pub fn base_envelope(&self, t: f64) -> (f64, f64) {
        let s = t - self.start;
        let d = self.duration;
        if s <= 0.0 || s >= d {
            return (0.0, 0.0);
        }
        let r = RAMP_FRACTION * d;
        let a = self.amplitude;
        if s < r {
            let x = PI * s / r;
            (0.5 * a * (1.0 - x.cos()), 0.5 * a * PI / r * x.sin())
        } else if s <= d - r {
            (a, 0.0)
        } else {
            let x = PI * (d - s) / r;
            (0.5 * a * (1.0 - x.cos()), -0.5 * a * PI / r * x.sin())
        }
    }

    /// Envelope area divided by amplitude.
    pub fn area_factor(&self) -> f64 {
        self.duration * (1.0 - RAMP_FRACTION)
    }
}

/// In-phase envelope plus DRAG quadrature `drag_coeff * dOmega/dt / (2 pi |alpha|)`.
pub fn drag_envelope(pulse: &MicrowavePulse, t: f64, anharmonicity_ghz: f64) -> Result<C64> {
    if anharmonicity_ghz == 0.0 {
        return Err(SimError::Singular("DRAG needs a nonzero anharmonicity".into()));
    }
    let (omega, domega) = pulse.base_envelope(t);
    let quad = if pulse.drag_coeff == 0.0 {
        0.0
    } else {
        pulse.drag_coeff * domega / (2.0 * PI * anharmonicity_ghz.abs())
    };
    Ok(C64::new(omega, quad))
}

/// Virtual-Z frame update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameShift {
    pub qutrit: Qutrit,
    pub subspace: Subspace,
    pub angle: f64,
    pub time: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Event {
    Flux(FluxPulse),
    Microwave(MicrowavePulse),
    Frame(FrameShift),
}

impl Event {
    pub fn start(&self) -> f64 {
        match self {
            Event::Flux(p) => p.start,
            Event::Microwave(p) => p.start,
            Event::Frame(f) => f.time,
        }
    }

    pub fn end(&self) -> f64 {
        match self {
            Event::Flux(p) => p.end(),
            Event::Microwave(p) => p.end(),
            Event::Frame(f) => f.time,
        }
    }

    pub fn channel(&self) -> &'static str {
        match self {
            Event::Flux(_) => "flux",
            Event::Microwave(p) => p.channel.channel_name(),
            Event::Frame(f) => f.qutrit.channel_name(),
        }
    }

    fn sort_key(&self) -> (f64, &'static str, u8, u8) {
        let (rank, sub) = match self {
            Event::Frame(f) => (0, f.subspace as u8),
            Event::Flux(_) => (1, 0),
            Event::Microwave(p) => (1, p.subspace as u8),
        };
        (self.start(), self.channel(), rank, sub)
    }

    fn describe(&self) -> String {
        match self {
            Event::Flux(p) => format!("flux pulse [{}, {}] ns", p.start, p.end()),
            Event::Microwave(p) => {
                format!("{} {} pulse [{}, {}] ns", p.channel.channel_name(), p.subspace, p.start, p.end())
            }
            Event::Frame(f) => format!("frame {} {} at {} ns", f.qutrit.channel_name(), f.subspace, f.time),
        }
    }
}

/// Time-ordered pulse sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    /// Minimum gap between flux and microwave events, ns.
    pub buffer: f64,
    /// Total duration, ns (at least the last event end).
    pub duration: f64,
    #[serde(rename = "event", default)]
    pub events: Vec<Event>,
}

impl Schedule {
    pub fn empty(duration: f64) -> Self {
        Schedule { buffer: DEFAULT_BUFFER_NS, duration, events: Vec::new() }
    }

    /// Canonical order: start time, then channel name.
    fn canonicalize(&mut self) {
        self.events
            .sort_by(|a, b| a.sort_key().partial_cmp(&b.sort_key()).unwrap_or(std::cmp::Ordering::Equal));
    }

    pub fn validate(&self) -> Result<()> {
        let physical: Vec<&Event> = self.events.iter().filter(|e| !matches!(e, Event::Frame(_))).collect();
        for e in &self.events {
            match e {
                Event::Flux(p) => p.validate()?,
                Event::Microwave(p) => p.validate()?,
                Event::Frame(f) => {
                    if !f.angle.is_finite() || !f.time.is_finite() {
                        return Err(SimError::Schedule(format!("non-finite {}", e.describe())));
                    }
                }
            }
        }
        for (i, a) in physical.iter().enumerate() {
            for b in physical.iter().skip(i + 1) {
                let gap = (b.start() - a.end()).max(a.start() - b.end());
                if a.channel() == b.channel() {
                    if gap < -1e-9 {
                        return Err(SimError::Schedule(format!(
                            "{} overlaps {}",
                            a.describe(),
                            b.describe()
                        )));
                    }
                } else if (a.channel() == "flux") != (b.channel() == "flux") && gap < self.buffer - 1e-9 {
                    return Err(SimError::Schedule(format!(
                        "{} and {} are {gap} ns apart, below the {} ns buffer",
                        a.describe(),
                        b.describe(),
                        self.buffer
                    )));
                }
            }
        }
        Ok(())
    }

    /// Sum of frame angles on (qutrit, subspace) at or before `t`.
    pub fn frame_at(&self, qutrit: Qutrit, subspace: Subspace, t: f64) -> f64 {
        self.events
            .iter()
            .filter_map(|e| match e {
                Event::Frame(f) if f.qutrit == qutrit && f.subspace == subspace && f.time <= t + 1e-12 => {
                    Some(f.angle)
                }
                _ => None,
            })
            .sum()
    }

    /// Accumulated frame at the end of the schedule.
    pub fn final_frame(&self, qutrit: Qutrit, subspace: Subspace) -> f64 {
        self.frame_at(qutrit, subspace, f64::INFINITY)
    }

    pub fn flux_pulses(&self) -> impl Iterator<Item = &FluxPulse> {
        self.events.iter().filter_map(|e| match e {
            Event::Flux(p) => Some(p),
            _ => None,
        })
    }

    pub fn microwave_pulses(&self) -> impl Iterator<Item = &MicrowavePulse> {
        self.events.iter().filter_map(|e| match e {
            Event::Microwave(p) => Some(p),
            _ => None,
        })
    }

    /// Total flux bias offset at `t`.
    pub fn flux_at(&self, t: f64) -> f64 {
        self.flux_pulses().map(|p| p.envelope(t)).sum()
    }

    /// Append events shifted by `offset` ns; the result is revalidated.
    pub fn append(&self, other: &Schedule, offset: f64) -> Result<Schedule> {
        let mut events = self.events.clone();
        for e in &other.events {
            events.push(shift_event(e, offset));
        }
        let mut s = compose(events, self.buffer)?;
        s.duration = s.duration.max(self.duration).max(offset + other.duration);
        Ok(s)
    }

    /// Extend the total duration with idle time.
    pub fn with_duration(mut self, duration: f64) -> Self {
        self.duration = self.duration.max(duration);
        self
    }

    /// Stable hash of the canonical event list.
    pub fn canonical_hash(&self) -> u64 {
        let mut c = self.clone();
        c.canonicalize();
        let mut h = DefaultHasher::new();
        c.buffer.to_bits().hash(&mut h);
        c.duration.to_bits().hash(&mut h);
        for e in &c.events {
            format!("{e:?}").hash(&mut h);
        }
        h.finish()
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let mut sched: Schedule = toml::from_str(s)?;
        sched.canonicalize();
        sched.validate()?;
        Ok(sched)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }
}

fn shift_event(e: &Event, offset: f64) -> Event {
    match *e {
        Event::Flux(p) => Event::Flux(FluxPulse { start: p.start + offset, ..p }),
        Event::Microwave(p) => Event::Microwave(MicrowavePulse { start: p.start + offset, ..p }),
        Event::Frame(f) => Event::Frame(FrameShift { time: f.time + offset, ..f }),
    }
}

/// Build a validated schedule from individual events.
pub fn compose(events: Vec<Event>, buffer: f64) -> Result<Schedule> {
    let duration = events.iter().map(|e| e.end()).fold(0.0, f64::max);
    let mut s = Schedule { buffer, duration, events };
    s.canonicalize();
    s.validate()?;
    Ok(s)
}

/// Advance the phase of every later pulse on (qutrit, subspace) by `angle`,
/// starting at the current end of the schedule.
pub fn apply_virtual_z(schedule: &Schedule, qutrit: Qutrit, subspace: Subspace, angle: f64) -> Schedule {
    apply_virtual_z_at(schedule, qutrit, subspace, angle, schedule.duration)
}

pub fn apply_virtual_z_at(schedule: &Schedule, qutrit: Qutrit, subspace: Subspace, angle: f64, time: f64) -> Schedule {
    let mut s = schedule.clone();
    if angle != 0.0 {
        s.events.push(Event::Frame(FrameShift { qutrit, subspace, angle, time }));
        s.canonicalize();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pi_pulse(q: Qutrit, sub: Subspace, start: f64) -> MicrowavePulse {
        MicrowavePulse {
            channel: q,
            subspace: sub,
            carrier: 6.0,
            duration: 40.0,
            amplitude: PI / 30.0,
            phase: 0.0,
            drag_coeff: 0.0,
            start,
        }
    }

    #[test]
    fn flux_envelope_examples() {
        let p = FluxPulse::new(0.4, 50.0, 19.0, 10.0);
        assert_eq!(p.envelope(60.0), 0.4);
        assert_eq!(p.envelope(10.0), 0.0);
        assert_eq!(p.envelope(p.end()), 0.0);
        assert!((p.envelope(10.0 + 50.0 / 3.0) - 0.2).abs() < 1e-14);
    }

    #[test]
    fn literal_edges_return_to_zero_mid_edge() {
        let p = FluxPulse { literal_edges: true, ..FluxPulse::new(0.4, 50.0, 19.0, 0.0) };
        assert!(p.envelope(50.0 - 1e-9).abs() < 1e-9);
        assert!((p.envelope(25.0) - 0.4).abs() < 1e-14);
    }

    #[test]
    fn envelope_support_is_exact() {
        let p = FluxPulse::new(0.3, 20.0, 5.0, 3.0);
        assert_eq!(p.envelope(2.999), 0.0);
        assert_eq!(p.envelope(48.001), 0.0);
    }

    #[test]
    fn drag_quadrature_vanishes() {
        let p = pi_pulse(Qutrit::Q1, Subspace::S01, 0.0);
        assert_eq!(drag_envelope(&p, 5.0, -0.256).unwrap().im, 0.0);
        let d = MicrowavePulse { drag_coeff: 0.5, ..p };
        assert_eq!(drag_envelope(&d, 20.0, -0.256).unwrap().im, 0.0);
        assert!(drag_envelope(&d, 5.0, -0.256).unwrap().im != 0.0);
        assert!(drag_envelope(&d, 5.0, 0.0).is_err());
    }

    #[test]
    fn envelope_area_is_three_quarters() {
        let p = pi_pulse(Qutrit::Q1, Subspace::S01, 0.0);
        let n = 400_000;
        let h = p.duration / n as f64;
        let area: f64 = (0..n).map(|k| p.base_envelope((k as f64 + 0.5) * h).0 * h).sum();
        assert!((area - PI).abs() < 1e-8);
    }

    #[test]
    fn single_pulse_duration() {
        let s = compose(vec![Event::Microwave(pi_pulse(Qutrit::Q1, Subspace::S01, 0.0))], 10.0).unwrap();
        assert_eq!(s.duration, 40.0);
    }

    #[test]
    fn buffer_violation_is_reported() {
        let f = FluxPulse::new(0.3, 50.0, 19.0, 0.0);
        let m = pi_pulse(Qutrit::Q1, Subspace::S12, f.end() + 5.0);
        let err = compose(vec![Event::Flux(f), Event::Microwave(m)], 10.0).unwrap_err();
        assert!(err.to_string().contains("buffer"));
    }

    #[test]
    fn overlap_on_one_channel_is_rejected() {
        let a = pi_pulse(Qutrit::Q2, Subspace::S01, 0.0);
        let b = pi_pulse(Qutrit::Q2, Subspace::S12, 30.0);
        assert!(compose(vec![Event::Microwave(a), Event::Microwave(b)], 10.0).is_err());
    }

    #[test]
    fn simultaneous_pulse_order_does_not_change_hash() {
        let a = Event::Microwave(pi_pulse(Qutrit::Q1, Subspace::S12, 0.0));
        let b = Event::Microwave(pi_pulse(Qutrit::Q2, Subspace::S12, 0.0));
        let s1 = compose(vec![a, b], 10.0).unwrap();
        let s2 = compose(vec![b, a], 10.0).unwrap();
        assert_eq!(s1.canonical_hash(), s2.canonical_hash());
    }

    #[test]
    fn zero_frame_is_noop() {
        let s = compose(vec![Event::Microwave(pi_pulse(Qutrit::Q1, Subspace::S01, 0.0))], 10.0).unwrap();
        assert_eq!(apply_virtual_z(&s, Qutrit::Q1, Subspace::S01, 0.0), s);
    }

    #[test]
    fn frames_add() {
        let s = Schedule::empty(10.0);
        let s = apply_virtual_z(&s, Qutrit::Q2, Subspace::S12, 0.3);
        let s = apply_virtual_z(&s, Qutrit::Q2, Subspace::S12, 0.4);
        assert!((s.final_frame(Qutrit::Q2, Subspace::S12) - 0.7).abs() < 1e-15);
        assert_eq!(s.final_frame(Qutrit::Q2, Subspace::S01), 0.0);
    }

    #[test]
    fn toml_round_trip_is_exact() {
        let f = FluxPulse::new(0.123456789012345, 50.0, 19.3, 0.0);
        let m = pi_pulse(Qutrit::Q1, Subspace::S12, f.end() + 10.0);
        let s = compose(vec![Event::Flux(f), Event::Microwave(m)], 10.0).unwrap();
        let s = apply_virtual_z(&s, Qutrit::Q1, Subspace::S01, 0.1 + 0.2);
        let back = Schedule::from_toml_str(&s.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, s);
    }
}
