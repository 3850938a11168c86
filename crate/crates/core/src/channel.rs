//! Simulated lossy, laggy, reordering link.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid channel config: {0}")]
pub struct ChannelError(pub String);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Operator to vehicle (commands).
    #[default]
    Uplink,
    /// Vehicle to operator (state feed).
    Downlink,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    /// Mean one-way delay (s).
    pub base_delay: f64,
    /// Standard deviation of the delay (s); total delay is clipped at 0.
    pub delay_jitter: f64,
    pub drop_probability: f64,
    pub direction: Direction,
    pub seed: u64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self::identity(Direction::Uplink)
    }
}

impl ChannelConfig {
    /// No delay, no loss.
    pub fn identity(direction: Direction) -> Self {
        Self {
            base_delay: 0.0,
            delay_jitter: 0.0,
            drop_probability: 0.0,
            direction,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ChannelError> {
        if !(self.base_delay >= 0.0 && self.base_delay.is_finite()) {
            return Err(ChannelError(format!("base_delay must be >= 0, got {}", self.base_delay)));
        }
        if !(self.delay_jitter >= 0.0 && self.delay_jitter.is_finite()) {
            return Err(ChannelError(format!("delay_jitter must be >= 0, got {}", self.delay_jitter)));
        }
        if !(0.0..=1.0).contains(&self.drop_probability) {
            return Err(ChannelError(format!(
                "drop_probability must be in [0, 1], got {}",
                self.drop_probability
            )));
        }
        Ok(())
    }
}

/// One packet's fate. `delivery_time` is `None` when the packet was dropped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PacketEvent<T = Vec<u8>> {
    pub payload: T,
    pub send_time: f64,
    pub delivery_time: Option<f64>,
    pub sequence: u64,
}

impl<T> PacketEvent<T> {
    pub fn dropped(&self) -> bool {
        self.delivery_time.is_none()
    }
}

/// Decides one packet's fate. Always consumes exactly one uniform (drop)
/// and one normal (jitter) draw so that the stream position does not
/// depend on the outcome.
pub fn transmit<T, R: Rng + ?Sized>(
    payload: T,
    send_time: f64,
    sequence: u64,
    config: &ChannelConfig,
    rng: &mut R,
) -> PacketEvent<T> {
    let u: f64 = rng.random();
    let z: f64 = rng.sample(StandardNormal);
    let delivery_time = if u < config.drop_probability {
        None
    } else {
        Some(send_time + (config.base_delay + config.delay_jitter * z).max(0.0))
    };
    PacketEvent {
        payload,
        send_time,
        delivery_time,
        sequence,
    }
}

/// Removes and returns the events delivered by `now`, ordered by delivery
/// time (then sequence). Dropped events are discarded.
pub fn deliverable<T>(events: &mut Vec<PacketEvent<T>>, now: f64) -> Vec<PacketEvent<T>> {
    let mut ready = Vec::new();
    let mut keep = Vec::with_capacity(events.len());
    for e in events.drain(..) {
        match e.delivery_time {
            None => {}
            Some(t) if t <= now => ready.push(e),
            Some(_) => keep.push(e),
        }
    }
    *events = keep;
    ready.sort_by(|a, b| {
        let (ta, tb) = (a.delivery_time.unwrap_or(f64::INFINITY), b.delivery_time.unwrap_or(f64::INFINITY));
        ta.total_cmp(&tb).then(a.sequence.cmp(&b.sequence))
    });
    ready
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkStats {
    pub sent: u64,
    pub dropped: u64,
    pub delivered: u64,
}

/// One direction of a link: assigns sequence numbers, applies impairments
/// and buffers packets in flight.
#[derive(Debug, Clone)]
pub struct Link<T> {
    config: ChannelConfig,
    rng: ChaCha8Rng,
    in_flight: Vec<PacketEvent<T>>,
    next_sequence: u64,
    stats: LinkStats,
}

impl<T> Link<T> {
    pub fn new(config: ChannelConfig) -> Result<Self, ChannelError> {
        config.validate()?;
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            in_flight: Vec::new(),
            next_sequence: 0,
            stats: LinkStats::default(),
        })
    }

    pub fn config(&self) -> &ChannelConfig {
        &self.config
    }

    /// Sends `payload` at `send_time`; returns its link sequence number.
    pub fn send(&mut self, payload: T, send_time: f64) -> u64 {
        let seq = self.next_sequence;
        self.next_sequence += 1;
        let e = transmit(payload, send_time, seq, &self.config, &mut self.rng);
        self.stats.sent += 1;
        if e.dropped() {
            self.stats.dropped += 1;
        } else {
            self.in_flight.push(e);
        }
        seq
    }

    /// Packets that have arrived by `now`, each released once.
    pub fn poll(&mut self, now: f64) -> Vec<PacketEvent<T>> {
        let out = deliverable(&mut self.in_flight, now);
        self.stats.delivered += out.len() as u64;
        out
    }

    pub fn in_flight(&self) -> usize {
        self.in_flight.len()
    }

    pub fn stats(&self) -> LinkStats {
        self.stats
    }
}
