//! Overfits the network on a handful of synthetic scenes and reports the
//! loss drop, AP and PA on the same scenes.
//!
//! cargo run --release -p usnet --example overfit -- [steps] [batch] [seed] [eval_every]

use usnet::data::{synth_generate, SynthParams};
use usnet::eval::{evaluate, DEFAULT_AP_IOU, EVAL_CONF_THRESHOLD};
use usnet::geometry::{generate_anchors, AnchorConfig};
use usnet::inference::DetectParams;
use usnet::network::{NetworkConfig, UsNet};
use usnet::training::{train, TrainConfig};

fn main() -> usnet::Result<()> {
    usnet::sys::tune_allocator();
    let arg = |i: usize, d: u64| std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let (steps, batch, seed, eval_every) = (arg(1, 300), arg(2, 4) as usize, arg(3, 0), arg(4, 0));
    let scenes = synth_generate(
        &SynthParams {
            seed,
            ..SynthParams::default()
        },
        8,
    )?
    .scenes;
    let anchors = generate_anchors(&AnchorConfig::default())?;
    let mut model = UsNet::<f32>::build(&NetworkConfig::default(), seed)?;
    let cfg = TrainConfig {
        steps,
        batch_size: batch,
        eval_every,
        seed,
        ..TrainConfig::default()
    };
    let mut out = std::io::stderr();
    let (_, trace) = train(&mut model, &anchors, &scenes, &cfg, Some(&mut out))?;
    let params = DetectParams {
        conf_threshold: EVAL_CONF_THRESHOLD,
        ..DetectParams::default()
    };
    let m = evaluate(&model, &anchors, &scenes, &params, DEFAULT_AP_IOU, batch)?;
    let (first, last) = (trace.first_total().unwrap(), trace.last_total().unwrap());
    println!(
        "loss {first:.4} -> {last:.4} ({:.1}% drop) ap {:.4} pa {:.4} in {:.0}s",
        100.0 * (1.0 - last / first),
        m.ap,
        m.pa,
        trace.wall_clock_secs
    );
    Ok(())
}
