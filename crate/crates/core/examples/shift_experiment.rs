//! Pretrains on a seeded drifting scenario and compares every stream mode.
//!
//! `cargo run --release -p candi-core --example shift_experiment -- [seed]`
//! Knobs come from environment variables (LATENT, EPS, TREND, ROT, AMAG,
//! ADUR, NOISE, HIDDEN, LR, STEPS, GATE, ALPHA, MINPOOL).

use std::time::Instant;

use candi_core::backbone::{BackboneConfig, PretrainConfig};
use candi_core::data::SplitSpec;
use candi_core::fpm::CurationConfig;
use candi_core::optim::OptimConfig;
use candi_core::pipeline::{prepare, run_stream, Mode, RunConfig};
use candi_core::sana::{AdaptConfig, SanaConfig};
use candi_core::synth::{generate_shift_scenario, ShiftScenario};

fn knob<T: std::str::FromStr>(name: &str, default: T) -> T {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() -> candi_core::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|v| v.parse().ok()).unwrap_or(0);
    let t0 = Instant::now();
    let mut scenario = ShiftScenario::desk(seed);
    scenario.shifts[0].magnitude = knob("TREND", scenario.shifts[0].magnitude);
    scenario.shifts[1].magnitude = knob("ROT", scenario.shifts[1].magnitude);
    scenario.anomalies.magnitude = knob("AMAG", scenario.anomalies.magnitude);
    scenario.anomalies.duration = knob("ADUR", scenario.anomalies.duration);
    scenario.noise_std = knob("NOISE", scenario.noise_std);
    let data = generate_shift_scenario(&scenario)?;
    let curation = CurationConfig {
        epsilon: knob("EPS", 1e-6),
        ..CurationConfig::default()
    };
    let backbone = BackboneConfig {
        latent: knob("LATENT", 64),
        ..BackboneConfig::new(scenario.dims, 10)
    };
    let prepared = prepare(
        &data.train,
        &data.test,
        &SplitSpec::default(),
        backbone,
        &PretrainConfig {
            seed,
            ..PretrainConfig::default()
        },
        curation,
    )?;
    println!(
        "pretrained in {:.1}s, loss {:.4} -> {:.4}",
        t0.elapsed().as_secs_f64(),
        prepared.log.train_loss[0],
        prepared.log.train_loss.last().unwrap()
    );
    let cfg = RunConfig {
        alpha: knob("ALPHA", 0.01),
        sana: SanaConfig {
            hidden: knob("HIDDEN", 32),
            gating_init: knob("GATE", 0.0),
            ..SanaConfig::default()
        },
        adapt: AdaptConfig {
            optimizer: OptimConfig::sgd_nesterov(knob("LR", 0.01)),
            steps: knob("STEPS", 1),
            min_pool: knob("MINPOOL", 16),
        },
        seed,
        ..RunConfig::default()
    };
    for mode in Mode::ALL {
        let t = Instant::now();
        let r = run_stream(
            &prepared.splits.test,
            &prepared.backbone,
            &prepared.calibration,
            &RunConfig { mode, ..cfg.clone() },
        )?;
        let m = r.metrics.as_ref().expect("labeled");
        println!(
            "{:<18} auroc {:.4} auprc {:.4} adapt {:>5} (hard {:>4} mod {:>5} below {:>5}) anomalies {:?} events {} {:.1}s",
            mode.as_str(),
            m.auroc,
            m.auprc,
            r.counts.total_adapt,
            r.counts.hard,
            r.counts.moderate,
            r.counts.below,
            r.counts.anomalies_in_pools,
            r.counts.adapt_events,
            t.elapsed().as_secs_f64()
        );
    }
    println!("total {:.1}s", t0.elapsed().as_secs_f64());
    Ok(())
}
