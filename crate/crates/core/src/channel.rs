//! Delayed communication: wave-variable (scattering) links, raw delayed value
//! lookups, delay assignment and channel disturbances.
//!
//! On a link oriented tail -> head, each end turns its output `y` and what it
//! decoded from the other end, `r`, into an outgoing frame
//! `s = sign (r - y) / sqrt(2)`, with `sign = -1` at the tail and `+1` at the
//! head. The far end receives the frame delayed and rotated pairwise by
//! `(a, b) -> (-b, a)` and decodes `r = sign sqrt(2) s_received - y`. With zero
//! delay in both directions this hands every bus its neighbour's
//! `(pc, zeta)` exactly; with delay the link stays passive.

use std::collections::VecDeque;
use std::f64::consts::SQRT_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::network::{End, Topology};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChannelError {
    #[error("history lookup at t = {t} outside retained window [{first}, {last}]")]
    Underrun { t: f64, first: f64, last: f64 },
    #[error("frame has {got} slots, channel carries {expected}")]
    SchemeMismatch { expected: usize, got: usize },
    #[error("delay {delay} on {from}->{to} is not a finite non-negative number")]
    BadDelay { from: usize, to: usize, delay: f64 },
    #[error("no delay given for {from}->{to}")]
    MissingDelay { from: usize, to: usize },
    #[error("delay {from}->{to} refers to a pair with no communication link")]
    UnknownLink { from: usize, to: usize },
    #[error("delay interval [{lo}, {hi}) is empty or negative")]
    BadInterval { lo: f64, hi: f64 },
    #[error("noise power {0} is negative")]
    NegativePower(f64),
}

pub fn sign(end: End) -> f64 {
    match end {
        End::Tail => -1.0,
        End::Head => 1.0,
    }
}

/// The channel gain: pairwise `(a, b) -> (-b, a)`.
pub fn rotate(frame: &mut [f64]) {
    for pair in frame.chunks_exact_mut(2) {
        let a = pair[0];
        pair[0] = -pair[1];
        pair[1] = a;
    }
}

/// Outgoing frame of the bus at `end` given its output and its decoded input.
pub fn encode_send(end: End, y: &[f64], r: &[f64], out: &mut [f64]) -> Result<(), ChannelError> {
    if y.len() != out.len() || r.len() != out.len() {
        return Err(ChannelError::SchemeMismatch { expected: out.len(), got: y.len().min(r.len()) });
    }
    let s = sign(end) / SQRT_2;
    for ((o, yv), rv) in out.iter_mut().zip(y).zip(r) {
        *o = s * (rv - yv);
    }
    Ok(())
}

/// Decoded neighbour information at `end` from a received (rotated) frame.
pub fn decode(end: End, received: &[f64], y: &[f64], out: &mut [f64]) {
    let s = sign(end) * SQRT_2;
    for ((o, rv), yv) in out.iter_mut().zip(received).zip(y) {
        *o = s * rv - yv;
    }
}

/// The decode written without frames: with `rt` the round-trip delay and `T`
/// the forward delay, `r(t) = -r(t - rt) + y(t - rt) - y(t) + 2 x(t - T)`,
/// where `y` is the receiver's output and `x = rotate(sender output)`.
pub fn loop_eliminated_decode(r_past: &[f64], y_past: &[f64], y_now: &[f64], x_sender: &[f64], out: &mut [f64]) {
    for k in 0..out.len() {
        out[k] = -r_past[k] + y_past[k] - y_now[k] + 2.0 * x_sender[k];
    }
}

/// Interpolation of recorded histories at off-grid times.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Interpolation {
    #[default]
    Linear,
    /// Four-point Lagrange; exact on cubics.
    Cubic,
}

/// Values recorded on the uniform grid `t_k = k h`, `k >= 0`, plus a constant
/// value standing in for all negative times.
#[derive(Debug, Clone)]
pub struct History {
    h: f64,
    width: usize,
    first: usize,
    len: usize,
    keep: usize,
    data: VecDeque<f64>,
    prehistory: Vec<f64>,
}

impl History {
    /// `span` is the longest look-back that will ever be requested.
    pub fn new(h: f64, prehistory: Vec<f64>, span: f64) -> Self {
        let keep = (span / h).ceil() as usize + 6;
        Self { h, width: prehistory.len(), first: 0, len: 0, keep, data: VecDeque::new(), prehistory }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn prehistory(&self) -> &[f64] {
        &self.prehistory
    }

    /// Appends the value at the next grid point.
    pub fn push(&mut self, values: &[f64]) {
        debug_assert_eq!(values.len(), self.width);
        self.data.extend(values.iter().copied());
        self.len += 1;
        while self.len - self.first > self.keep {
            self.data.drain(..self.width);
            self.first += 1;
        }
    }

    /// Number of grid points pushed so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Value at grid index `k`; negative indices give the prehistory.
    pub fn point(&self, k: isize, out: &mut [f64]) {
        if k < 0 {
            out.copy_from_slice(&self.prehistory);
        } else {
            for (slot, o) in out.iter_mut().enumerate() {
                *o = self.get(k as usize, slot);
            }
        }
    }

    fn get(&self, k: usize, slot: usize) -> f64 {
        self.data[(k - self.first) * self.width + slot]
    }

    /// Value at time `tau`, interpolated between grid points.
    pub fn sample(&self, tau: f64, interp: Interpolation, out: &mut [f64]) -> Result<(), ChannelError> {
        let h = self.h;
        if tau < -1e-9 * h || self.len == 0 {
            out.copy_from_slice(&self.prehistory);
            return Ok(());
        }
        let last = self.len - 1;
        let s = (tau / h).max(0.0);
        let underrun =
            || ChannelError::Underrun { t: tau, first: self.first as f64 * h, last: last as f64 * h };
        if s > last as f64 + 1e-9 {
            return Err(underrun());
        }
        let k = (s.floor() as usize).min(last);
        if k < self.first {
            return Err(underrun());
        }
        let frac = s - k as f64;
        if k == last || frac == 0.0 {
            for (slot, o) in out.iter_mut().enumerate() {
                *o = self.get(k, slot);
            }
            return Ok(());
        }
        match interp {
            Interpolation::Cubic if last - self.first >= 3 => {
                let m = k.saturating_sub(1).max(self.first).min(last - 3);
                let x = s - m as f64;
                let w = [
                    -(x - 1.0) * (x - 2.0) * (x - 3.0) / 6.0,
                    x * (x - 2.0) * (x - 3.0) / 2.0,
                    -x * (x - 1.0) * (x - 3.0) / 2.0,
                    x * (x - 1.0) * (x - 2.0) / 6.0,
                ];
                for (slot, o) in out.iter_mut().enumerate() {
                    *o = (0..4).map(|i| w[i] * self.get(m + i, slot)).sum();
                }
            }
            _ => {
                for (slot, o) in out.iter_mut().enumerate() {
                    let (a, b) = (self.get(k, slot), self.get(k + 1, slot));
                    *o = a + frac * (b - a);
                }
            }
        }
        Ok(())
    }
}

/// One direction of a link: the frames its sender has emitted and the delay
/// they take to arrive.
#[derive(Debug, Clone)]
pub struct DelayedChannel {
    pub from: usize,
    pub to: usize,
    pub delay: f64,
    pub history: History,
}

impl DelayedChannel {
    /// Frame arriving at time `t`, rotated by the channel gain.
    pub fn receive(&self, t: f64, interp: Interpolation, out: &mut [f64]) -> Result<(), ChannelError> {
        self.history.sample(t - self.delay, interp, out)?;
        rotate(out);
        Ok(())
    }
}

/// Both directions of one communication link.
#[derive(Debug, Clone)]
pub struct ScatterLink {
    pub width: usize,
    /// Slots beyond this count are forced to zero (cross-area tie-line links).
    pub active: usize,
    /// Frames emitted by the tail.
    pub to_head: DelayedChannel,
    /// Frames emitted by the head.
    pub to_tail: DelayedChannel,
}

/// Decoded inputs and emitted frames of both ends of a link at one instant.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Exchange {
    pub r_tail: [f64; 6],
    pub r_head: [f64; 6],
    pub s_tail: [f64; 6],
    pub s_head: [f64; 6],
}

impl ScatterLink {
    fn mask(&self, v: &mut [f64; 6]) {
        v[self.active..].iter_mut().for_each(|x| *x = 0.0);
    }

    /// Link with empty histories; `prehistory` stands in for frames sent before
    /// `t = 0` as `[tail, head]`.
    pub fn new(
        tail: usize,
        head: usize,
        width: usize,
        active: usize,
        delays: (f64, f64),
        h: f64,
        prehistory: [&[f64]; 2],
    ) -> Self {
        let span = delays.0.max(delays.1);
        let chan = |from, to, delay, pre: &[f64]| DelayedChannel {
            from,
            to,
            delay,
            history: History::new(h, pre[..width].to_vec(), span),
        };
        Self {
            width,
            active,
            to_head: chan(tail, head, delays.0, prehistory[0]),
            to_tail: chan(head, tail, delays.1, prehistory[1]),
        }
    }

    /// Runs the protocol at time `t` from the current outputs of both ends.
    ///
    /// `d_to_head` and `d_to_tail` are added to every slot of the frame arriving
    /// at the head and the tail respectively.
    pub fn exchange(
        &self,
        t: f64,
        y_tail: &[f64; 6],
        y_head: &[f64; 6],
        d_to_head: f64,
        d_to_tail: f64,
        interp: Interpolation,
    ) -> Result<Exchange, ChannelError> {
        let w = self.width;
        let mut ex = Exchange::default();
        let (th, ht) = (self.to_head.delay, self.to_tail.delay);
        if th == 0.0 && ht == 0.0 {
            return Ok(instant_exchange(w, self.active, y_tail, y_head, d_to_head, d_to_tail));
        }
        let mut recv = [0.0; 6];
        let first_head = th > 0.0;
        if first_head {
            self.to_head.receive(t, interp, &mut recv[..w])?;
            self.decode_into(End::Head, &mut recv, d_to_head, y_head, &mut ex.r_head);
            encode_send(End::Head, &y_head[..w], &ex.r_head[..w], &mut ex.s_head[..w])?;
            if ht > 0.0 {
                self.to_tail.receive(t, interp, &mut recv[..w])?;
            } else {
                recv[..w].copy_from_slice(&ex.s_head[..w]);
                rotate(&mut recv[..w]);
            }
            self.decode_into(End::Tail, &mut recv, d_to_tail, y_tail, &mut ex.r_tail);
            encode_send(End::Tail, &y_tail[..w], &ex.r_tail[..w], &mut ex.s_tail[..w])?;
        } else {
            self.to_tail.receive(t, interp, &mut recv[..w])?;
            self.decode_into(End::Tail, &mut recv, d_to_tail, y_tail, &mut ex.r_tail);
            encode_send(End::Tail, &y_tail[..w], &ex.r_tail[..w], &mut ex.s_tail[..w])?;
            recv[..w].copy_from_slice(&ex.s_tail[..w]);
            rotate(&mut recv[..w]);
            self.decode_into(End::Head, &mut recv, d_to_head, y_head, &mut ex.r_head);
            encode_send(End::Head, &y_head[..w], &ex.r_head[..w], &mut ex.s_head[..w])?;
        }
        Ok(ex)
    }

    fn decode_into(&self, end: End, recv: &mut [f64; 6], d: f64, y: &[f64; 6], r: &mut [f64; 6]) {
        let w = self.width;
        inject_disturbance(&mut recv[..w], d);
        decode(end, &recv[..w], &y[..w], &mut r[..w]);
        self.mask(r);
    }

    /// Records the frames both ends emitted at the next grid point.
    pub fn record(&mut self, ex: &Exchange) {
        self.to_head.history.push(&ex.s_tail[..self.width]);
        self.to_tail.history.push(&ex.s_head[..self.width]);
    }
}

/// Both ends exchanging without delay. Each frame depends on the other, so the
/// loop is solved in closed form:
/// `r = rotate(y_far) + sign / sqrt(2) (d_near + rotate(d_far))`.
pub fn instant_exchange(
    width: usize,
    active: usize,
    y_tail: &[f64; 6],
    y_head: &[f64; 6],
    d_to_head: f64,
    d_to_tail: f64,
) -> Exchange {
    let w = width;
    let mut ex = Exchange::default();
    let mut x_tail = *y_tail;
    let mut x_head = *y_head;
    rotate(&mut x_tail[..w]);
    rotate(&mut x_head[..w]);
    let mut dh = [d_to_tail; 6];
    let mut dt = [d_to_head; 6];
    rotate(&mut dh[..w]);
    rotate(&mut dt[..w]);
    for k in 0..active.min(w) {
        ex.r_head[k] = x_tail[k] + (d_to_head + dh[k]) / SQRT_2;
        ex.r_tail[k] = x_head[k] - (d_to_tail + dt[k]) / SQRT_2;
    }
    encode_send(End::Tail, &y_tail[..w], &ex.r_tail[..w], &mut ex.s_tail[..w]).expect("equal widths");
    encode_send(End::Head, &y_head[..w], &ex.r_head[..w], &mut ex.s_head[..w]).expect("equal widths");
    ex
}

/// Value a neighbour broadcast `delay` ago; `current` is used for zero delay.
pub fn raw_delayed_lookup(
    history: &History,
    t: f64,
    delay: f64,
    current: &[f64],
    interp: Interpolation,
    out: &mut [f64],
) -> Result<(), ChannelError> {
    if delay == 0.0 {
        out.copy_from_slice(current);
        Ok(())
    } else {
        history.sample(t - delay, interp, out)
    }
}

/// Adds the channel disturbance to every slot.
pub fn inject_disturbance(values: &mut [f64], d: f64) {
    if d != 0.0 {
        values.iter_mut().for_each(|v| *v += d);
    }
}

/// How link delays are assigned.
#[derive(Debug, Clone, PartialEq)]
pub enum DelaySpec {
    /// Same delay in every direction of every link.
    Uniform(f64),
    /// Independent uniform draws from `[lo, hi)` per direction.
    Interval { lo: f64, hi: f64, seed: u64 },
    /// Per direction, as `(from, to, delay)` bus indices.
    Explicit(Vec<(usize, usize, f64)>),
}

/// Delay of every link direction.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkDelays {
    /// Tail to head.
    pub to_head: Vec<f64>,
    /// Head to tail.
    pub to_tail: Vec<f64>,
}

impl LinkDelays {
    pub fn max(&self) -> f64 {
        self.to_head.iter().chain(&self.to_tail).fold(0.0, |m, &d| m.max(d))
    }

    /// Delay of the direction arriving at `end` of `link`.
    pub fn arriving(&self, link: usize, end: End) -> f64 {
        match end {
            End::Head => self.to_head[link],
            End::Tail => self.to_tail[link],
        }
    }
}

pub fn resolve_delays(spec: &DelaySpec, topo: &Topology) -> Result<LinkDelays, ChannelError> {
    let m = topo.n_comm();
    let delays = match spec {
        DelaySpec::Uniform(d) => LinkDelays { to_head: vec![*d; m], to_tail: vec![*d; m] },
        DelaySpec::Interval { lo, hi, seed } => {
            if !(*lo >= 0.0 && hi > lo && hi.is_finite()) {
                return Err(ChannelError::BadInterval { lo: *lo, hi: *hi });
            }
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let mut out = LinkDelays { to_head: vec![0.0; m], to_tail: vec![0.0; m] };
            for e in 0..m {
                out.to_head[e] = rng.gen_range(*lo..*hi);
                out.to_tail[e] = rng.gen_range(*lo..*hi);
            }
            out
        }
        DelaySpec::Explicit(list) => {
            let mut to_head = vec![None; m];
            let mut to_tail = vec![None; m];
            for &(from, to, d) in list {
                let link = topo
                    .comm
                    .iter()
                    .position(|l| (l.from, l.to) == (from, to) || (l.from, l.to) == (to, from))
                    .ok_or(ChannelError::UnknownLink { from, to })?;
                if topo.comm[link].from == from {
                    to_head[link] = Some(d);
                } else {
                    to_tail[link] = Some(d);
                }
            }
            let mut out = LinkDelays { to_head: vec![0.0; m], to_tail: vec![0.0; m] };
            for (e, l) in topo.comm.iter().enumerate() {
                out.to_head[e] = to_head[e].ok_or(ChannelError::MissingDelay { from: l.from, to: l.to })?;
                out.to_tail[e] = to_tail[e].ok_or(ChannelError::MissingDelay { from: l.to, to: l.from })?;
            }
            out
        }
    };
    for (e, l) in topo.comm.iter().enumerate() {
        for (from, to, d) in [(l.from, l.to, delays.to_head[e]), (l.to, l.from, delays.to_tail[e])] {
            if !(d >= 0.0 && d.is_finite()) {
                return Err(ChannelError::BadDelay { from, to, delay: d });
            }
        }
    }
    Ok(delays)
}

/// Disturbance models for received channel data.
#[derive(Debug, Clone, PartialEq)]
pub enum DisturbanceSpec {
    None,
    /// `1 / (e + t)` with `e` drawn once per link direction from `(0, 1)`.
    Decaying { seed: u64 },
    /// Zero-mean Gaussian with variance `power`, drawn afresh every step.
    Gaussian { power: f64, seed: u64 },
}

/// Disturbance state for every link direction.
#[derive(Debug, Clone)]
pub struct Disturbance {
    spec: DisturbanceSpec,
    /// `[to_head, to_tail]` per link: offsets for the decaying model, current
    /// draws for the Gaussian one.
    values: Vec<[f64; 2]>,
    rng: ChaCha8Rng,
    normal: Option<Normal<f64>>,
}

impl Disturbance {
    pub fn new(spec: &DisturbanceSpec, n_links: usize) -> Result<Self, ChannelError> {
        let seed = match spec {
            DisturbanceSpec::None => 0,
            DisturbanceSpec::Decaying { seed } | DisturbanceSpec::Gaussian { seed, .. } => *seed,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = vec![[0.0; 2]; n_links];
        let mut normal = None;
        match spec {
            DisturbanceSpec::None => {}
            DisturbanceSpec::Decaying { .. } => {
                for v in values.iter_mut() {
                    for x in v.iter_mut() {
                        // Open interval: reject the zero endpoint.
                        let mut e = 0.0;
                        while e == 0.0 {
                            e = rng.gen::<f64>();
                        }
                        *x = e;
                    }
                }
            }
            DisturbanceSpec::Gaussian { power, .. } => {
                if *power < 0.0 || !power.is_finite() {
                    return Err(ChannelError::NegativePower(*power));
                }
                normal = Some(Normal::new(0.0, power.sqrt()).expect("finite standard deviation"));
            }
        }
        Ok(Self { spec: spec.clone(), values, rng, normal })
    }

    pub fn is_none(&self) -> bool {
        self.spec == DisturbanceSpec::None
    }

    /// Draws the noise used for the coming integration step.
    pub fn begin_step(&mut self) {
        if let Some(normal) = &self.normal {
            for v in self.values.iter_mut() {
                v[0] = normal.sample(&mut self.rng);
                v[1] = normal.sample(&mut self.rng);
            }
        }
    }

    /// Disturbance on the direction of `link` arriving at `end`.
    pub fn value(&self, t: f64, link: usize, end: End) -> f64 {
        let i = match end {
            End::Head => 0,
            End::Tail => 1,
        };
        match self.spec {
            DisturbanceSpec::None => 0.0,
            DisturbanceSpec::Decaying { .. } => 1.0 / (self.values[link][i] + t),
            DisturbanceSpec::Gaussian { .. } => self.values[link][i],
        }
    }

    /// Per-direction offsets of the decaying model.
    pub fn offsets(&self) -> &[[f64; 2]] {
        &self.values
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rotation_pairs() {
        let mut f = [1.0, 2.0];
        rotate(&mut f);
        assert_eq!(f, [-2.0, 1.0]);
        let mut g = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        rotate(&mut g);
        assert_eq!(g, [-2.0, 1.0, -4.0, 3.0, -6.0, 5.0]);
    }

    #[test]
    fn encode_examples() {
        let mut s = [0.0; 2];
        encode_send(End::Head, &[0.3, -0.2], &[0.3, -0.2], &mut s).unwrap();
        assert_eq!(s, [0.0, 0.0]);
        encode_send(End::Head, &[0.0, 1.0], &[1.0, 0.0], &mut s).unwrap();
        assert!((s[0] - 1.0 / SQRT_2).abs() < 1e-15 && (s[1] + 1.0 / SQRT_2).abs() < 1e-15);
        assert!(encode_send(End::Head, &[0.0; 6], &[0.0; 6], &mut s).is_err());
    }

    #[test]
    fn ramp_interpolates_exactly() {
        let h = 0.01;
        let mut hist = History::new(h, vec![0.0], 1.0);
        for k in 0..200 {
            hist.push(&[k as f64 * h]);
        }
        let mut v = [0.0];
        for interp in [Interpolation::Linear, Interpolation::Cubic] {
            hist.sample(1.5 - 0.3, interp, &mut v).unwrap();
            assert!((v[0] - 1.2).abs() < 1e-12);
            hist.sample(1.0 + 0.1234, interp, &mut v).unwrap();
            assert!((v[0] - 1.1234).abs() < 1e-12);
        }
    }

    #[test]
    fn negative_time_gives_prehistory() {
        let mut hist = History::new(0.1, vec![7.0, 8.0], 1.0);
        hist.push(&[1.0, 1.0]);
        let mut v = [0.0; 2];
        hist.sample(-0.05, Interpolation::Linear, &mut v).unwrap();
        assert_eq!(v, [7.0, 8.0]);
    }

    #[test]
    fn eviction_and_underrun() {
        let mut hist = History::new(0.1, vec![0.0], 0.3);
        for k in 0..100 {
            hist.push(&[k as f64]);
        }
        let mut v = [0.0];
        assert!(hist.sample(9.9 - 0.3, Interpolation::Linear, &mut v).is_ok());
        assert!(matches!(hist.sample(1.0, Interpolation::Linear, &mut v), Err(ChannelError::Underrun { .. })));
        assert!(matches!(hist.sample(10.5, Interpolation::Linear, &mut v), Err(ChannelError::Underrun { .. })));
    }

    #[test]
    fn decaying_disturbance_value() {
        let d = Disturbance::new(&DisturbanceSpec::Decaying { seed: 1 }, 3).unwrap();
        for v in d.offsets() {
            assert!(v[0] > 0.0 && v[0] < 1.0 && v[1] > 0.0 && v[1] < 1.0);
        }
        let e = d.offsets()[0][0];
        assert!((d.value(0.0, 0, End::Head) - 1.0 / e).abs() < 1e-15);
        assert!(Disturbance::new(&DisturbanceSpec::Gaussian { power: -1.0, seed: 0 }, 1).is_err());
    }
}
