//! Link emulation: per-direction delay, jitter, serialization and loss.
//!
//! A [`LinkTimeline`] turns "message of N bytes handed over at time t" into a
//! delivery time or a loss, reproducibly from a seed. The [`proxy`] applies
//! one timeline per direction to live TCP traffic.

pub mod calibrate;
pub mod proxy;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetemError {
    #[error("{field} = {value} is invalid ({why})")]
    Invalid {
        field: &'static str,
        value: f64,
        why: &'static str,
    },
    #[error("unknown profile `{0}` (built-in: ideal, wifi-5ghz, 5g-n77)")]
    UnknownProfile(String),
    #[error("profile JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Impairments applied to one direction of a link.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirectionModel {
    pub base_delay_ms: f64,
    /// Standard deviation of the Gaussian jitter added to the base delay.
    pub jitter_std_ms: f64,
    pub rate_mbps: f64,
    pub loss_prob: f64,
}

impl DirectionModel {
    pub const IDEAL: DirectionModel = DirectionModel {
        base_delay_ms: 0.0,
        jitter_std_ms: 0.0,
        rate_mbps: 1e6,
        loss_prob: 0.0,
    };

    pub fn validate(&self) -> Result<(), NetemError> {
        let check = |field, value: f64, ok: bool, why| {
            if value.is_finite() && ok {
                Ok(())
            } else {
                Err(NetemError::Invalid { field, value, why })
            }
        };
        check("base_delay_ms", self.base_delay_ms, self.base_delay_ms >= 0.0, "must be >= 0")?;
        check("jitter_std_ms", self.jitter_std_ms, self.jitter_std_ms >= 0.0, "must be >= 0")?;
        check("rate_mbps", self.rate_mbps, self.rate_mbps > 0.0, "must be > 0")?;
        check(
            "loss_prob",
            self.loss_prob,
            (0.0..=1.0).contains(&self.loss_prob),
            "must lie in [0, 1]",
        )
    }

    /// Transmission time of `bytes` at the configured rate.
    pub fn serialization_ms(&self, bytes: usize) -> f64 {
        bytes as f64 * 8.0 / (self.rate_mbps * 1e3)
    }
}

/// A named pair of direction models. Uplink is client → server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetProfile {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub uplink: DirectionModel,
    pub downlink: DirectionModel,
}

pub const BUILTIN_PROFILES: [&str; 3] = ["ideal", "wifi-5ghz", "5g-n77"];

impl NetProfile {
    pub fn ideal() -> Self {
        Self {
            name: "ideal".into(),
            seed: 0,
            uplink: DirectionModel::IDEAL,
            downlink: DirectionModel::IDEAL,
        }
    }

    /// Indoor 5 GHz WiFi, fitted to the measured control and AR round trips.
    pub fn wifi_5ghz() -> Self {
        Self {
            name: "wifi-5ghz".into(),
            seed: 0,
            uplink: DirectionModel {
                base_delay_ms: 10.9,
                jitter_std_ms: 1.0,
                rate_mbps: 120.0,
                loss_prob: 0.002,
            },
            downlink: DirectionModel {
                base_delay_ms: 10.9,
                jitter_std_ms: 1.0,
                rate_mbps: 19.25,
                loss_prob: 0.002,
            },
        }
    }

    /// Outdoor standalone 5G in band n77, fitted like [`NetProfile::wifi_5ghz`].
    pub fn nr_n77() -> Self {
        Self {
            name: "5g-n77".into(),
            seed: 0,
            uplink: DirectionModel {
                base_delay_ms: 17.3,
                jitter_std_ms: 4.0,
                rate_mbps: 60.0,
                loss_prob: 0.005,
            },
            downlink: DirectionModel {
                base_delay_ms: 30.8,
                jitter_std_ms: 6.0,
                rate_mbps: 10.37,
                loss_prob: 0.005,
            },
        }
    }

    pub fn builtin(name: &str) -> Result<Self, NetemError> {
        match name {
            "ideal" => Ok(Self::ideal()),
            "wifi-5ghz" | "wifi" => Ok(Self::wifi_5ghz()),
            "5g-n77" | "5g" => Ok(Self::nr_n77()),
            other => Err(NetemError::UnknownProfile(other.into())),
        }
    }

    /// A built-in name, or otherwise a path to a profile JSON file.
    pub fn resolve(name_or_path: &str) -> Result<Self, NetemError> {
        match Self::builtin(name_or_path) {
            Ok(p) => Ok(p),
            Err(e) => {
                let path = std::path::Path::new(name_or_path);
                if path.exists() {
                    Self::from_json(&std::fs::read_to_string(path)?)
                } else {
                    Err(e)
                }
            }
        }
    }

    pub fn from_json(text: &str) -> Result<Self, NetemError> {
        let p: NetProfile = serde_json::from_str(text)?;
        p.validate()?;
        Ok(p)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("profile serializes")
    }

    pub fn validate(&self) -> Result<(), NetemError> {
        self.uplink.validate()?;
        self.downlink.validate()
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Uplink,
    Downlink,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Uplink => "uplink",
            Direction::Downlink => "downlink",
        }
    }
}

/// Outcome of scheduling one message on a link.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Delivery {
    /// Delivery time in nanoseconds on the caller's clock.
    At(u64),
    Lost,
}

/// Deterministic per-stream seed derived from a profile seed.
pub fn stream_seed(profile_seed: u64, direction: Direction, session: u64) -> u64 {
    // splitmix64 finalizer over the combined inputs
    let mut z = profile_seed
        ^ session.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ match direction {
            Direction::Uplink => 0x5555_0000_0000_0001,
            Direction::Downlink => 0xAAAA_0000_0000_0002,
        };
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// The delivery schedule of one direction of one connection.
///
/// Delivery times never decrease, so the link stays FIFO even when jitter
/// would reorder messages.
#[derive(Debug, Clone)]
pub struct LinkTimeline {
    model: DirectionModel,
    rng: ChaCha8Rng,
    last_delivery: u64,
}

impl LinkTimeline {
    pub fn new(model: DirectionModel, seed: u64) -> Self {
        Self {
            model,
            rng: ChaCha8Rng::seed_from_u64(seed),
            last_delivery: 0,
        }
    }

    pub fn model(&self) -> &DirectionModel {
        &self.model
    }

    /// Schedule a `msg_bytes` message handed to the link at `send_ns`.
    ///
    /// Both random draws happen for every message, exempt or not, so the
    /// decision sequence depends only on the seed and the message count.
    pub fn schedule(&mut self, msg_bytes: usize, send_ns: u64, loss_exempt: bool) -> Delivery {
        let u: f64 = self.rng.random();
        let z: f64 = StandardNormal.sample(&mut self.rng);
        if !loss_exempt && u < self.model.loss_prob {
            return Delivery::Lost;
        }
        let propagation = (self.model.base_delay_ms + self.model.jitter_std_ms * z).max(0.0);
        let delay_ms = propagation + self.model.serialization_ms(msg_bytes);
        let at = (send_ns + (delay_ms * 1e6).round() as u64).max(self.last_delivery);
        self.last_delivery = at;
        Delivery::At(at)
    }
}

/// Free-function form of [`LinkTimeline::schedule`].
pub fn sample_delivery_time(
    timeline: &mut LinkTimeline,
    msg_bytes: usize,
    send_ns: u64,
) -> Delivery {
    timeline.schedule(msg_bytes, send_ns, false)
}
