//! Fitting link profiles to reference round-trip times.
//!
//! The loop is modelled as uplink delivery of a frame upload, a fixed server
//! dwell, and downlink delivery of the response, all through the same
//! [`LinkTimeline`] the proxy uses. A closed-form estimate seeds a local grid
//! sweep over the total base delay and the downlink rate that minimizes the
//! squared error against the control-mode and AR-mode targets of a profile.

use super::{Delivery, DirectionModel, LinkTimeline, NetProfile};
use crate::Mode;

/// Reference mean round trips (ms) the built-in profiles are fitted to.
pub const REFERENCE_RTT_MS: [(&str, Mode, f64); 4] = [
    ("wifi-5ghz", Mode::Control, 39.57),
    ("5g-n77", Mode::Control, 69.57),
    ("wifi-5ghz", Mode::Ar, 62.54),
    ("5g-n77", Mode::Ar, 112.18),
];

pub fn reference_rtt(profile: &str, mode: Mode) -> Option<f64> {
    REFERENCE_RTT_MS
        .iter()
        .find(|(p, m, _)| *p == profile && *m == mode)
        .map(|t| t.2)
}

/// Everything about the loop other than the link itself.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoopModel {
    /// Wire size of one FRAME_UPLOAD.
    pub upload_bytes: usize,
    /// Wire size of one CONTROL_RESULT.
    pub control_response_bytes: usize,
    /// Wire size of one ANNOTATED_FRAME.
    pub ar_response_bytes: usize,
    /// Mean server processing time.
    pub server_ms: f64,
    /// Fixed host-side cost per round trip (loopback hops, wakeups).
    pub overhead_ms: f64,
    pub fps: f64,
}

impl Default for LoopModel {
    fn default() -> Self {
        Self {
            upload_bytes: 24 + 17 + 52_000,
            control_response_bytes: 24 + 20 + 750,
            ar_response_bytes: 24 + 20 + 56_000,
            server_ms: 13.4,
            overhead_ms: 0.6,
            fps: 30.0,
        }
    }
}

impl LoopModel {
    pub fn response_bytes(&self, mode: Mode) -> usize {
        match mode {
            Mode::Control => self.control_response_bytes,
            Mode::Ar => self.ar_response_bytes,
        }
    }
}

/// Monte-Carlo mean RTT of `samples` frames sent at the model's frame rate.
pub fn simulate_mean_rtt(
    profile: &NetProfile,
    mode: Mode,
    model: &LoopModel,
    samples: usize,
    seed: u64,
) -> f64 {
    let mut up = LinkTimeline::new(profile.uplink, seed);
    let mut down = LinkTimeline::new(profile.downlink, seed ^ 0xD0D0);
    let period_ns = 1e9 / model.fps;
    let server_ns = (model.server_ms * 1e6) as u64;
    let response = model.response_bytes(mode);
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..samples {
        let send = (i as f64 * period_ns) as u64;
        let Delivery::At(arrive) = up.schedule(model.upload_bytes, send, false) else {
            continue;
        };
        let Delivery::At(back) = down.schedule(response, arrive + server_ns, false) else {
            continue;
        };
        sum += (back - send) as f64 / 1e6 + model.overhead_ms;
        n += 1;
    }
    sum / n.max(1) as f64
}

/// Mean RTT ignoring jitter truncation and FIFO clamping.
pub fn closed_form_rtt(profile: &NetProfile, mode: Mode, model: &LoopModel) -> f64 {
    profile.uplink.base_delay_ms
        + profile.uplink.serialization_ms(model.upload_bytes)
        + model.server_ms
        + profile.downlink.base_delay_ms
        + profile.downlink.serialization_ms(model.response_bytes(mode))
        + model.overhead_ms
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fit {
    pub profile: NetProfile,
    /// Simulated mean RTT for (control, ar).
    pub simulated: (f64, f64),
    pub sse: f64,
}

fn with_link(template: &NetProfile, base_sum: f64, dl_rate: f64) -> NetProfile {
    let t = template;
    let total = t.uplink.base_delay_ms + t.downlink.base_delay_ms;
    let up_share = if total > 0.0 { t.uplink.base_delay_ms / total } else { 0.5 };
    let mut p = t.clone();
    p.uplink = DirectionModel {
        base_delay_ms: base_sum * up_share,
        ..t.uplink
    };
    p.downlink = DirectionModel {
        base_delay_ms: base_sum * (1.0 - up_share),
        rate_mbps: dl_rate,
        ..t.downlink
    };
    p
}

/// Fit the total base delay and downlink rate of `template` to the control
/// and AR targets. Uplink rate, jitter, loss and the uplink/downlink base
/// split are kept from the template.
pub fn fit_profile(
    template: &NetProfile,
    target_control: f64,
    target_ar: f64,
    model: &LoopModel,
    samples: usize,
) -> Fit {
    // closed form: the AR/control gap is pure downlink serialization
    let extra_bits = (model.ar_response_bytes - model.control_response_bytes) as f64 * 8.0;
    let dl_rate0 = extra_bits / ((target_ar - target_control) * 1e3);
    let fixed = template.uplink.serialization_ms(model.upload_bytes)
        + model.server_ms
        + model.overhead_ms
        + model.control_response_bytes as f64 * 8.0 / (dl_rate0 * 1e3);
    let base0 = (target_control - fixed).max(0.0);

    let eval = |base_sum: f64, dl_rate: f64| {
        let p = with_link(template, base_sum, dl_rate);
        let c = simulate_mean_rtt(&p, Mode::Control, model, samples, 1);
        let a = simulate_mean_rtt(&p, Mode::Ar, model, samples, 1);
        let sse = (c - target_control).powi(2) + (a - target_ar).powi(2);
        Fit {
            profile: p,
            simulated: (c, a),
            sse,
        }
    };

    let mut best = eval(base0, dl_rate0);
    for i in -20..=20 {
        for j in -20..=20 {
            let base = base0 + i as f64 * 0.1;
            let rate = dl_rate0 * (1.0 + j as f64 * 0.005);
            if base < 0.0 {
                continue;
            }
            let fit = eval(base, rate);
            if fit.sse < best.sse {
                best = fit;
            }
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_matches_simulation_without_jitter() {
        let mut p = NetProfile::wifi_5ghz();
        p.uplink.jitter_std_ms = 0.0;
        p.downlink.jitter_std_ms = 0.0;
        p.uplink.loss_prob = 0.0;
        p.downlink.loss_prob = 0.0;
        let m = LoopModel::default();
        for mode in [Mode::Control, Mode::Ar] {
            let sim = simulate_mean_rtt(&p, mode, &m, 500, 3);
            assert!((sim - closed_form_rtt(&p, mode, &m)).abs() < 0.01);
        }
    }

    #[test]
    fn wifi_uplink_mean_one_way_delay() {
        // 10^4 FRAME_UPLOADs of 50,041 bytes over the wifi uplink
        let p = NetProfile::wifi_5ghz();
        let mut t = LinkTimeline::new(p.uplink, 5);
        let mut sum = 0.0;
        let mut n = 0;
        for i in 0..10_000u64 {
            let send = i * 33_333_333;
            if let Delivery::At(at) = t.schedule(50_041, send, false) {
                sum += (at - send) as f64 / 1e6;
                n += 1;
            }
        }
        let mean = sum / n as f64;
        let expected = p.uplink.base_delay_ms + p.uplink.serialization_ms(50_041);
        assert!((mean - expected).abs() < 0.05, "{mean} vs {expected}");
    }

    #[test]
    fn builtin_profiles_sit_on_the_fit() {
        let model = LoopModel::default();
        for (name, mode, target) in REFERENCE_RTT_MS {
            let p = NetProfile::builtin(name).unwrap();
            let sim = simulate_mean_rtt(&p, mode, &model, 20_000, 17);
            assert!(
                (sim - target).abs() / target < 0.02,
                "{name}/{mode}: simulated {sim:.2} vs {target}"
            );
        }
    }

    #[test]
    fn sweep_recovers_builtin_parameters() {
        let model = LoopModel::default();
        for name in ["wifi-5ghz", "5g-n77"] {
            let builtin = NetProfile::builtin(name).unwrap();
            let fit = fit_profile(
                &builtin,
                reference_rtt(name, Mode::Control).unwrap(),
                reference_rtt(name, Mode::Ar).unwrap(),
                &model,
                2_000,
            );
            let base = |p: &NetProfile| p.uplink.base_delay_ms + p.downlink.base_delay_ms;
            assert!((base(&fit.profile) - base(&builtin)).abs() < 0.5, "{name}: {fit:?}");
            let rate_err = (fit.profile.downlink.rate_mbps / builtin.downlink.rate_mbps - 1.0).abs();
            assert!(rate_err < 0.03, "{name}: {fit:?}");
        }
    }
}
