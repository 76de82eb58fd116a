//! Pick the reconstruction weight from the converged loss magnitudes of two
//! single-objective runs.

use qlip::objectives::{balance_weights, BalanceMode};

fn main() -> qlip::Result<()> {
    for (align, mse) in [(3.5, 0.0035), (1.62, 0.0029), (5.0, 0.02)] {
        let rounded = balance_weights(align, mse, BalanceMode::PowerOfTen)?;
        let exact = balance_weights(align, mse, BalanceMode::Exact)?;
        println!("align {align} mse {mse}: alpha_r/alpha_a = {rounded} (unrounded {exact:.1})");
    }
    Ok(())
}
