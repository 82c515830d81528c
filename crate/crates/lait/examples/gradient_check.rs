//! Central finite differences against backprop in f64 for a few random
//! configurations at P = 0, L / 2 and L.

use lait::verify::{gradient_stats, GRADIENT_TOL};

fn main() -> lait::Result<()> {
    let g = gradient_stats(6, 42)?;
    for (p, l) in &g.depths {
        println!("checked P={p} of L={l}");
    }
    println!(
        "{} coordinates, max relative error {:.3e} (tolerance {GRADIENT_TOL:.0e}), worst at {}",
        g.coordinates, g.max_rel_error, g.worst
    );
    Ok(())
}
