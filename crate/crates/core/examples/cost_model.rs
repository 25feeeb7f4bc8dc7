//! Operation counts of the text-based methods for a WN18RR-sized graph.
//!
//! `cargo run --example cost_model`

use kglab::eval::{cost_model, CostMethod, CostModelInput};

fn main() -> kglab::Result<()> {
    let (l, e, r) = (32.0, 40_943.0, 11.0);
    println!("L = {l}, E = {e}, R = {r}");
    for method in CostMethod::ALL {
        let row = cost_model(&CostModelInput { l, e, r, method })?;
        println!("{:<10} {:<26} {:>12.4e}", row.method, row.expression, row.value);
    }
    Ok(())
}
