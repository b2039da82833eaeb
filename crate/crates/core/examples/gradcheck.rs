//! Reverse-mode gradients on a hand-built graph, then the full primitive
//! suite against central differences.
//!
//! `cargo run --release --example gradcheck -- [seed]`

use loma::autodiff::{grad_check, primitive_suite, Graph};
use loma::cli::{GRADCHECK_PRIMITIVE_EPSILON, GRADCHECK_PRIMITIVE_TOL};
use loma::Tensor;

fn main() -> loma::Result<()> {
    let seed = std::env::args().nth(1).map_or(0, |s| s.parse().expect("numeric seed"));

    // f(x) = sum(x * softplus(x))
    let f = |g: &mut Graph<f64>, x| {
        let s = g.softplus(x)?;
        let p = g.mul(x, s)?;
        g.sum(p)
    };
    let mut g = Graph::new();
    let x = g.param(&[4], vec![-1.0, -0.2, 0.3, 2.0])?;
    let y = f(&mut g, x)?;
    g.backward(y)?;
    println!("f = {:.6}, df/dx = {:?}", g.value(y)[0], g.grad(x).unwrap());
    let point = Tensor::new([4], vec![-1.0, -0.2, 0.3, 2.0])?;
    println!("central-difference agreement: {:.2e}", grad_check(f, &point, 1e-5)?.max_rel_error);

    let rows = primitive_suite(seed, GRADCHECK_PRIMITIVE_EPSILON)?;
    println!("check,coords,max_rel_error");
    for r in &rows {
        println!("{},{},{:.2e}", r.name, r.checked, r.max_rel_error);
    }
    let worst = rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    println!("{} primitives, worst {worst:.2e} (tolerance {GRADCHECK_PRIMITIVE_TOL:.0e})", rows.len());
    Ok(())
}
