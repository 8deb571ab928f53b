//! Prints the profile fit for the built-in profiles.
use edgeloop::netem::calibrate::{fit_profile, reference_rtt, LoopModel};
use edgeloop::netem::NetProfile;
use edgeloop::Mode;

fn main() {
    let model = LoopModel::default();
    for name in ["wifi-5ghz", "5g-n77"] {
        let template = NetProfile::builtin(name).unwrap();
        let fit = fit_profile(
            &template,
            reference_rtt(name, Mode::Control).unwrap(),
            reference_rtt(name, Mode::Ar).unwrap(),
            &model,
            4_000,
        );
        println!("{name}: sse {:.4} simulated {:?}", fit.sse, fit.simulated);
        println!("{}", fit.profile.to_json());
    }
}
