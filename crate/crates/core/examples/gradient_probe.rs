//! Per-loss gradient norms at the last encoder layer of a freshly initialized
//! tokenizer, unweighted and at the default weights.

use qlip::model::{ModelConfig, QlipModel};
use qlip::objectives::{probe_gradients, Batch, QuantLossConfig, Stage1Weights};
use qlip::syndata::{gen_pair_corpus_split, Split};

fn main() -> qlip::Result<()> {
    let model = QlipModel::new(ModelConfig::small(), 0)?;
    let corpus = gen_pair_corpus_split(32, 16, 0, Split::Train)?;
    let pairs: Vec<_> = corpus.pairs.iter().collect();
    let batch = Batch::from_pairs(&model, &pairs)?;
    let w = Stage1Weights::default();
    let unit = [("mse", 1.0), ("bsq", 1.0), ("align", 1.0), ("commit", 1.0)];
    let weighted = [("mse", w.recon), ("bsq", w.quant), ("align", w.align), ("commit", w.commit)];
    let q = QuantLossConfig::default();
    let a = probe_gradients(&model, &batch, &q, &unit, 0)?;
    let b = probe_gradients(&model, &batch, &q, &weighted, 0)?;
    println!("probe parameter {}", a.param);
    for ((name, n), (_, nw)) in a.norms.iter().zip(&b.norms) {
        println!("{name:>7}: unweighted {n:.3e}  weighted {nw:.3e}");
    }
    Ok(())
}
