//! Binarize a few unit vectors and compare the factorized entropy terms with
//! full enumeration of the codebook.

use qlip::bsq::{entropy_loss_exact, entropy_value, index_to_code, quantize};

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn main() -> qlip::Result<()> {
    let batch: Vec<Vec<f64>> = [[0.9, -0.1, 0.3, -0.2], [-0.5, 0.5, 0.5, 0.5], [0.1, 0.2, -0.9, 0.4]]
        .iter()
        .map(|v| unit(v))
        .collect();
    for u in &batch {
        let q = quantize(u);
        println!("u = {:?}\n  corner = {:?}  index = {}", u, q.u_hat, q.index);
        assert_eq!(index_to_code(q.index, u.len())?, q.u_hat);
    }
    for tau in [0.3, 1.0] {
        let fact = entropy_value(&batch, tau, 1.0)?;
        let exact = entropy_loss_exact(&batch, tau, 1.0)?;
        println!(
            "tau {tau}: per-sample {:.6} (exact {:.6}), codebook {:.6} (exact {:.6})",
            fact.per_sample, exact.per_sample, fact.codebook, exact.codebook
        );
    }
    Ok(())
}
