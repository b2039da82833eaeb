//! Central-difference verification of analytic gradients.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Outcome of comparing analytic and numeric gradients.
#[derive(Debug, Clone)]
pub struct GradCheck {
    /// `max |analytic − numeric| / max(|analytic|, |numeric|, 1e-8)` over checked coordinates.
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub checked: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

fn eval_scalar<T: Real, F>(f: &F, point: Tensor<T>, grad: bool) -> Result<(Graph<T>, Var, Var)>
where
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = if grad { g.leaf(point.with_grad()) } else { g.constant(point) };
    let y = f(&mut g, x)?;
    if g.value(y).len() != 1 {
        return Err(Error::shape("grad_check", format!("function must return a scalar, got {:?}", g.shape(y))));
    }
    if !g.value(y)[0].is_finite() {
        return Err(Error::numeric("grad_check", "non-finite function value"));
    }
    Ok((g, x, y))
}

/// Checks every coordinate of `point`.
pub fn grad_check<T: Real, F>(f: F, point: &Tensor<T>, epsilon: T) -> Result<GradCheck>
where
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..point.numel()).collect();
    grad_check_coords(f, point, epsilon, &coords)
}

/// Checks only the listed flat coordinates of `point`.
pub fn grad_check_coords<T: Real, F>(f: F, point: &Tensor<T>, epsilon: T, coords: &[usize]) -> Result<GradCheck>
where
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    if epsilon <= T::zero() {
        return Err(Error::contract("grad_check: epsilon must be positive"));
    }
    if let Some(&c) = coords.iter().find(|&&c| c >= point.numel()) {
        return Err(Error::shape("grad_check", format!("coordinate {c} out of range")));
    }
    let (mut g, x, y) = eval_scalar(&f, point.clone(), true)?;
    g.backward(y)?;
    let full = g.grad(x).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); point.numel()]);
    let analytic: Vec<f64> = coords.iter().map(|&c| full[c].f64()).collect();

    let mut numeric = Vec::with_capacity(coords.len());
    for &c in coords {
        let mut plus = point.clone();
        plus.data_mut()[c] += epsilon;
        let mut minus = point.clone();
        minus.data_mut()[c] -= epsilon;
        let fp = {
            let (g, _, y) = eval_scalar(&f, plus, false)?;
            g.value(y)[0].f64()
        };
        let fm = {
            let (g, _, y) = eval_scalar(&f, minus, false)?;
            g.value(y)[0].f64()
        };
        numeric.push((fp - fm) / (2.0 * epsilon.f64()));
    }

    let mut max_rel_error = 0.0f64;
    let mut worst_index = coords.first().copied().unwrap_or(0);
    for ((&c, &a), &n) in coords.iter().zip(&analytic).zip(&numeric) {
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
        if rel > max_rel_error {
            max_rel_error = rel;
            worst_index = c;
        }
    }
    Ok(GradCheck { max_rel_error, worst_index, checked: coords.len(), analytic, numeric })
}

/// One row of [`primitive_suite`].
#[derive(Debug, Clone)]
pub struct PrimitiveCheck {
    /// Primitive and the operand being differentiated, e.g. `matmul/b`.
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
}

type ScalarFn = Box<dyn Fn(&mut Graph<f64>, Var) -> Result<Var>>;

/// Fixed pseudo-random weights so that sums of outputs do not cancel gradients.
fn weights(n: usize) -> Tensor<f64> {
    Tensor::from_fn([n], |i| ((i as f64 * 0.618_034 + 0.1).fract() - 0.5) * 2.0 + 0.05)
}

fn weighted_sum(g: &mut Graph<f64>, y: Var) -> Result<Var> {
    let n = g.value(y).len();
    let shape = g.shape(y).to_vec();
    let w = g.constant(weights(n).reshaped(shape)?);
    let p = g.mul(y, w)?;
    g.sum(p)
}

/// Uniform draws in `[lo, hi)` that keep at least `gap` away from every point in `kinks`.
fn draw(rng: &mut rand_chacha::ChaCha8Rng, shape: &[usize], lo: f64, hi: f64, kinks: &[f64], gap: f64) -> Tensor<f64> {
    use rand::Rng;
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v = rng.random_range(lo..hi);
            if kinks.iter().all(|k| (v - k).abs() >= gap) {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches draw count")
}

/// Checks every differentiable primitive, and each operand of multi-input ones,
/// through a fixed random-weighted sum of its output in double precision.
pub fn primitive_suite(seed: u64, epsilon: f64) -> Result<Vec<PrimitiveCheck>> {
    use crate::ssm::InputDiscretization;
    use std::sync::Arc;

    let mut rng = crate::nn::seeded_rng(seed, 0x6772_6164);
    let r = &mut rng;
    let mut cases: Vec<(String, Tensor<f64>, ScalarFn)> = Vec::new();
    let mut push = |name: &str, point: Tensor<f64>, f: ScalarFn| cases.push((name.to_string(), point, f));

    // binary ops, each operand in turn, including a broadcast row
    let other = draw(r, &[3, 4], -1.0, 1.0, &[], 0.0);
    let den = draw(r, &[3, 4], 0.5, 2.0, &[], 0.0);
    let row = draw(r, &[4], -1.0, 1.0, &[], 0.0);
    type Bin = fn(&mut Graph<f64>, Var, Var) -> Result<Var>;
    let bins: [(&str, Bin); 4] = [("add", Graph::add), ("sub", Graph::sub), ("mul", Graph::mul), ("div", Graph::div)];
    for (name, op) in bins {
        let rhs = if name == "div" { den.clone() } else { other.clone() };
        let x = draw(r, &[3, 4], -1.0, 1.0, &[], 0.0);
        let c = rhs.clone();
        push(&format!("{name}/a"), x.clone(), Box::new(move |g, v| {
            let b = g.constant(c.clone());
            let y = op(g, v, b)?;
            weighted_sum(g, y)
        }));
        let lhs = x.clone();
        push(&format!("{name}/b"), rhs, Box::new(move |g, v| {
            let a = g.constant(lhs.clone());
            let y = op(g, a, v)?;
            weighted_sum(g, y)
        }));
        let lhs = x;
        let point = if name == "div" { draw(r, &[4], 0.5, 2.0, &[], 0.0) } else { row.clone() };
        push(&format!("{name}/row"), point, Box::new(move |g, v| {
            let a = g.constant(lhs.clone());
            let y = op(g, a, v)?;
            weighted_sum(g, y)
        }));
    }

    // elementwise unary ops
    type Un = fn(&mut Graph<f64>, Var) -> Result<Var>;
    let unary: [(&str, Un, f64, f64, Vec<f64>); 7] = [
        ("exp", Graph::exp, -2.0, 2.0, vec![]),
        ("log", Graph::log, 0.2, 3.0, vec![]),
        ("softplus", Graph::softplus, -4.0, 4.0, vec![]),
        ("sigmoid", Graph::sigmoid, -4.0, 4.0, vec![]),
        ("silu", Graph::silu, -4.0, 4.0, vec![]),
        ("relu", Graph::relu, -2.0, 2.0, vec![0.0]),
        ("relu6", Graph::relu6, -2.0, 8.0, vec![0.0, 6.0]),
    ];
    for (name, op, lo, hi, kinks) in unary {
        push(name, draw(r, &[2, 3, 5], lo, hi, &kinks, 0.05), Box::new(move |g, v| {
            let y = op(g, v)?;
            weighted_sum(g, y)
        }));
    }
    push("affine", draw(r, &[2, 5], -1.0, 1.0, &[], 0.0), Box::new(|g, v| {
        let y = g.affine(v, -1.7, 0.4)?;
        weighted_sum(g, y)
    }));
    push("clamp", draw(r, &[2, 5], -1.0, 1.0, &[-0.5, 0.5], 0.05), Box::new(|g, v| {
        let y = g.clamp(v, -0.5, 0.5)?;
        weighted_sum(g, y)
    }));

    // contractions
    let mb = draw(r, &[4, 3], -1.0, 1.0, &[], 0.0);
    let ma = draw(r, &[5, 4], -1.0, 1.0, &[], 0.0);
    {
        let b = mb.clone();
        push("matmul/a", ma.clone(), Box::new(move |g, v| {
            let b = g.constant(b.clone());
            let y = g.matmul(v, b)?;
            weighted_sum(g, y)
        }));
        let a = ma;
        push("matmul/b", mb, Box::new(move |g, v| {
            let a = g.constant(a.clone());
            let y = g.matmul(a, v)?;
            weighted_sum(g, y)
        }));
    }
    for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
        let x = draw(r, &[2, 5, 6, 3], -1.0, 1.0, &[], 0.0);
        let w = draw(r, &[3, 3, 3, 2], -1.0, 1.0, &[], 0.0);
        let wc = w.clone();
        push(&format!("conv2d/x s{stride}p{pad}"), x.clone(), Box::new(move |g, v| {
            let w = g.constant(wc.clone());
            let y = g.conv2d(v, w, stride, pad)?;
            weighted_sum(g, y)
        }));
        let xc = x;
        push(&format!("conv2d/w s{stride}p{pad}"), w, Box::new(move |g, v| {
            let x = g.constant(xc.clone());
            let y = g.conv2d(x, v, stride, pad)?;
            weighted_sum(g, y)
        }));
        let x = draw(r, &[2, 5, 6, 3], -1.0, 1.0, &[], 0.0);
        let w = draw(r, &[3, 3, 3], -1.0, 1.0, &[], 0.0);
        let wc = w.clone();
        push(&format!("depthwise_conv2d/x s{stride}p{pad}"), x.clone(), Box::new(move |g, v| {
            let w = g.constant(wc.clone());
            let y = g.depthwise_conv2d(v, w, stride, pad)?;
            weighted_sum(g, y)
        }));
        let xc = x;
        push(&format!("depthwise_conv2d/w s{stride}p{pad}"), w, Box::new(move |g, v| {
            let x = g.constant(xc.clone());
            let y = g.depthwise_conv2d(x, v, stride, pad)?;
            weighted_sum(g, y)
        }));
    }

    // normalization and pooling
    push("layer_norm", draw(r, &[3, 6], -1.0, 1.0, &[], 0.0), Box::new(|g, v| {
        let y = g.layer_norm(v, 1e-5)?;
        weighted_sum(g, y)
    }));
    push("batch_norm", draw(r, &[2, 3, 2, 4], -1.0, 1.0, &[], 0.0), Box::new(|g, v| {
        let (y, _) = g.batch_norm(v, 1e-5)?;
        weighted_sum(g, y)
    }));
    push("global_avg_pool", draw(r, &[2, 3, 4, 2], -1.0, 1.0, &[], 0.0), Box::new(|g, v| {
        let y = g.global_avg_pool(v)?;
        weighted_sum(g, y)
    }));
    push("avg_pool", draw(r, &[2, 4, 6, 2], -1.0, 1.0, &[], 0.0), Box::new(|g, v| {
        let y = g.avg_pool(v, 2)?;
        weighted_sum(g, y)
    }));
    push("resize_bilinear", draw(r, &[1, 3, 5, 2], -1.0, 1.0, &[], 0.0), Box::new(|g, v| {
        let y = g.resize_bilinear(v, 7, 4)?;
        weighted_sum(g, y)
    }));
    push("upsample2", draw(r, &[1, 3, 2, 2], -1.0, 1.0, &[], 0.0), Box::new(|g, v| {
        let y = g.upsample2(v)?;
        weighted_sum(g, y)
    }));

    // layout
    let tail = draw(r, &[2, 3, 2], -1.0, 1.0, &[], 0.0);
    push("concat", draw(r, &[2, 3, 3], -1.0, 1.0, &[], 0.0), Box::new(move |g, v| {
        let t = g.constant(tail.clone());
        let y = g.concat(&[t, v, t])?;
        weighted_sum(g, y)
    }));
    push("reshape", draw(r, &[2, 6], -1.0, 1.0, &[], 0.0), Box::new(|g, v| {
        let y = g.reshape(v, &[3, 4])?;
        weighted_sum(g, y)
    }));
    push("permute", draw(r, &[2, 3, 4], -1.0, 1.0, &[], 0.0), Box::new(|g, v| {
        let y = g.permute(v, &[2, 0, 1])?;
        weighted_sum(g, y)
    }));
    push("sum", draw(r, &[2, 3], -1.0, 1.0, &[], 0.0), Box::new(|g, v| {
        let y = g.sum(v)?;
        g.scale(y, 1.3)
    }));
    push("mean", draw(r, &[2, 3], -1.0, 1.0, &[], 0.0), Box::new(|g, v| {
        let y = g.mean(v)?;
        g.scale(y, 1.3)
    }));
    push("sum_last", draw(r, &[2, 3, 4], -1.0, 1.0, &[], 0.0), Box::new(|g, v| {
        let y = g.sum_last(v)?;
        weighted_sum(g, y)
    }));
    let idx = Arc::new(vec![3, 0, 0, 2, 1, 3]);
    push("gather_rows", draw(r, &[4, 3], -1.0, 1.0, &[], 0.0), Box::new(move |g, v| {
        let y = g.gather_rows(v, idx.clone())?;
        weighted_sum(g, y)
    }));

    // selective scan over two segments, every operand, both discretizations
    let (len, dch, n) = (7, 3, 2);
    let ops = [
        draw(r, &[len, dch], -1.0, 1.0, &[], 0.0),
        draw(r, &[len, dch], 0.05, 0.8, &[], 0.0),
        draw(r, &[dch, n], -2.0, -0.2, &[], 0.0),
        draw(r, &[len, n], -1.0, 1.0, &[], 0.0),
        draw(r, &[len, n], -1.0, 1.0, &[], 0.0),
        draw(r, &[dch], -1.0, 1.0, &[], 0.0),
    ];
    let segs = Arc::new(vec![4, 3]);
    for mode in [InputDiscretization::ExactZoh, InputDiscretization::Simplified] {
        for (slot, operand) in ["u", "delta", "a", "b", "c", "d"].iter().enumerate() {
            let fixed = ops.clone();
            let segs = segs.clone();
            push(&format!("selective_scan/{operand} {}", mode.name()), ops[slot].clone(), Box::new(move |g, v| {
                let vars: Vec<Var> =
                    (0..6).map(|i| if i == slot { v } else { g.constant(fixed[i].clone()) }).collect();
                let y = g.selective_scan(vars[0], vars[1], vars[2], vars[3], vars[4], vars[5], segs.clone(), mode)?;
                weighted_sum(g, y)
            }));
        }
    }

    cases
        .into_iter()
        .map(|(name, point, f)| {
            let res = grad_check(f, &point, epsilon)?;
            Ok(PrimitiveCheck { name, max_rel_error: res.max_rel_error, checked: res.checked })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::from_fn([3, 4], |i| (i as f64) * 0.3 - 1.0);
        let r = grad_check(|g, v| g.sum(v), &x, 1e-5).unwrap();
        assert!(r.analytic.iter().all(|&a| a == 1.0));
        assert!(r.max_rel_error <= 1e-10, "{}", r.max_rel_error);
    }

    #[test]
    fn suite_covers_every_operand() {
        let rows = primitive_suite(0, 1e-5).unwrap();
        assert!(rows.len() > 40);
        for r in &rows {
            assert!(r.max_rel_error <= 1e-5, "{} {}", r.name, r.max_rel_error);
        }
    }

    #[test]
    fn rejects_nonpositive_epsilon_and_non_scalar_output() {
        let x = Tensor::from_fn([2], |i| i as f64);
        assert!(grad_check(|g, v| g.sum(v), &x, 0.0).is_err());
        assert!(grad_check(|g, v| g.exp(v), &x, 1e-5).is_err());
    }
}
