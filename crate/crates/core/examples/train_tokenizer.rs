//! Short two-stage tokenizer run on the synthetic corpus: train, finetune the
//! decoder, evaluate, save a checkpoint and a loss plot, and tokenize one image.

use qlip::checkpoint::{load_qlip, save_qlip};
use qlip::evalkit::{evaluate, EvalOptions};
use qlip::plot::line_chart;
use qlip::syndata::{gen_pair_corpus_split, Split};
use qlip::tokcodec::{decode_tokens_to_image, encode_image_to_tokens};
use qlip::trainer::{run_stage1, run_stage2, TrainConfig};

fn main() -> qlip::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let train = gen_pair_corpus_split(512, 16, 0, Split::Train)?;
    let heldout = gen_pair_corpus_split(256, 16, 0, Split::Val)?;

    let s1 = TrainConfig { total_steps: steps, warmup: steps / 10, ..TrainConfig::toy_stage1() };
    let (model, log1) = run_stage1(&s1, &train)?;
    let s2 = TrainConfig { total_steps: steps / 2, warmup: steps / 20, ..TrainConfig::toy_stage2() };
    let (model, log2) = run_stage2(&s2, &model, &train, &[])?;
    println!("stage one final mse {:.5}, stage two final mse {:.5}", log1.last("mse").unwrap_or(f64::NAN), log2.last("mse").unwrap_or(f64::NAN));

    let report = evaluate(&model, &train, &heldout, &EvalOptions::default())?;
    println!("{}", report.to_record());

    let dir = std::env::temp_dir().join("qlip-train-example");
    std::fs::create_dir_all(&dir)?;
    let ckpt = dir.join("model.ckpt");
    save_qlip(&ckpt, &model)?;
    let model = load_qlip(&ckpt)?;
    let svg = line_chart("stage one", &[("align".into(), log1.series("align")), ("mse".into(), log1.series("mse"))], true);
    std::fs::write(dir.join("stage1.svg"), svg)?;

    let grid = encode_image_to_tokens(&model, &heldout.pairs[0].image)?;
    let recon = decode_tokens_to_image(&model, &grid)?;
    println!("tokens {:?} -> {}x{} image; outputs in {}", grid.ids, recon.height, recon.width, dir.display());
    Ok(())
}
