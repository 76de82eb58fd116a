//! Regenerate `tests/data/pilot_baseline.txt` from a pilot run on a different
//! seed than the acceptance harness.
//!
//! ```text
//! cargo run --release --example pilot_baseline [-- <out>]
//! ```

#[path = "../tests/common/experiments.rs"]
#[allow(dead_code)]
mod experiments;

use std::path::PathBuf;

use experiments::*;
use qlip::config::KvConfig;
use qlip::syndata::NUM_CLASSES;

const PILOT_SEED: u64 = 1;

fn main() -> qlip::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| {
        PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/pilot_baseline.txt")
    });
    let c = corpora(PILOT_SEED)?;
    let (label, align, recon) = RATIOS.into_iter().find(|r| r.0 == BALANCED).expect("balanced ratio");
    let run = run_ablation(label, align, recon, &c, PILOT_SEED)?;
    println!("stage one {label}: {:?} in {:.0}s", run.metrics, run.train_secs);
    let (stage2, _) = run_finetune(&run.model, &c, PILOT_SEED)?;
    let s2 = heldout_metrics(&stage2, &c.heldout)?;
    println!("stage two: {s2:?}");

    let chance = 1.0 / NUM_CLASSES as f64;
    let sigma = (chance * (1.0 - chance) / HELDOUT_PAIRS as f64).sqrt();
    let mut kv = KvConfig::default();
    kv.set("pilot.seed", PILOT_SEED);
    kv.set("pilot.stage1.zs", run.metrics.zs);
    kv.set("pilot.stage1.mse", run.metrics.mse);
    kv.set("pilot.stage1.align", run.metrics.align);
    kv.set("pilot.stage2.mse", s2.mse);
    kv.set("c4.chance_zs_max", chance + 4.0 * sigma);
    kv.set("c4.zs_margin", 0.0);
    kv.set("c4.balance_tol", 0.10);
    kv.set("c5.heldout_drop_min", 0.10);
    kv.set("c6.ratio_min", 10.0);
    kv.set("c7.psnr_pilot", run.metrics.psnr);
    kv.set("c8.t2i_drop_min", 0.30);
    kv.set("codec.heldout_mse_max", 1.25 * s2.mse);
    std::fs::write(&out, format!("# written by examples/pilot_baseline.rs\n{}", kv.render()))?;
    println!("wrote {}", out.display());
    Ok(())
}
