//! Finite-difference verification of every differentiable primitive.
//!
//! These checks rely only on forward evaluation, so they stay independent of
//! the backward passes they validate. Each primitive has a fixed fixture: a
//! small graph with a scalar output that routes through the primitive at a
//! generic point (away from kinks and ties). The reported figure per
//! primitive is the worst relative error between the reverse-mode gradient
//! and a central difference.

use super::graph::{AdError, Graph, NodeId};
use super::tensor::Tensor;

/// Central-difference gradient of a scalar output with respect to one leaf.
///
/// Perturbs each component by `±h` and re-runs the forward pass. The leaf is
/// restored afterwards.
pub fn central_diff_grad(
    g: &mut Graph,
    output: NodeId,
    leaf: NodeId,
    h: f64,
) -> Result<Tensor, AdError> {
    let original = g.value(leaf).clone();
    let mut grad = Tensor::zeros(original.shape());
    for i in 0..original.numel() {
        let mut plus = original.clone();
        plus.data_mut()[i] += h;
        let fp = g.forward(output, vec![(leaf, plus)])?.item();
        let mut minus = original.clone();
        minus.data_mut()[i] -= h;
        let fm = g.forward(output, vec![(leaf, minus)])?.item();
        grad.data_mut()[i] = (fp - fm) / (2.0 * h);
    }
    g.bind(leaf, original)?;
    g.refresh()?;
    Ok(grad)
}

/// Central-difference Jacobian of a (possibly non-scalar) output with respect
/// to one leaf, one column per leaf component: shape `[output len, leaf len]`.
pub fn central_diff_jacobian(
    g: &mut Graph,
    output: NodeId,
    leaf: NodeId,
    h: f64,
) -> Result<Tensor, AdError> {
    let original = g.value(leaf).clone();
    let m = g.value(output).numel();
    let n = original.numel();
    let mut jac = vec![0.0; m * n];
    for j in 0..n {
        let mut plus = original.clone();
        plus.data_mut()[j] += h;
        let fp = g.forward(output, vec![(leaf, plus)])?;
        let mut minus = original.clone();
        minus.data_mut()[j] -= h;
        let fm = g.forward(output, vec![(leaf, minus)])?;
        for i in 0..m {
            jac[i * n + j] = (fp.data()[i] - fm.data()[i]) / (2.0 * h);
        }
    }
    g.bind(leaf, original)?;
    g.refresh()?;
    Ok(Tensor::matrix(m, n, jac))
}

/// Worst relative disagreement between two tensors, with a floor that treats
/// near-zero components absolutely.
pub fn max_rel_err(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "comparing tensors of different shapes");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

pub struct PrimitiveCheck {
    pub primitive: &'static str,
    pub max_rel_err: f64,
    pub pass: bool,
}

pub struct GradcheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub checks: Vec<PrimitiveCheck>,
}

impl GradcheckReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

/// Names of every differentiable primitive, in registry order.
pub const PRIMITIVE_NAMES: [&str; 26] = [
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale_const",
    "add_const",
    "scale_by_scalar",
    "add_row_broadcast",
    "column_sums",
    "broadcast_rows",
    "matmul",
    "transpose",
    "relu",
    "heaviside",
    "exp",
    "log",
    "tanh",
    "sigmoid",
    "pow_const",
    "sum",
    "mean",
    "max",
    "argmax_mask",
    "softmax_cross_entropy",
    "softmax_ce_grad_logits",
];

/// Run the finite-difference suite over every registered primitive.
///
/// `corrupt` names a primitive whose reverse-mode gradient is deliberately
/// perturbed before comparison; it exists so the failure path of callers can
/// be exercised and should be `None` in ordinary use.
pub fn run_gradcheck(h: f64, tolerance: f64, corrupt: Option<&str>) -> GradcheckReport {
    let mut checks = Vec::new();
    for name in PRIMITIVE_NAMES {
        let fixture = build_fixture(name);
        let mut worst: f64 = 0.0;
        let mut g = fixture.graph;
        for leaf in &fixture.leaves {
            let mut ad = g
                .grad(fixture.output, &[*leaf])
                .expect("fixture gradients are well-formed")
                .remove(0);
            if corrupt == Some(name) {
                for v in ad.data_mut() {
                    *v += 1e-3;
                }
            }
            let fd = central_diff_grad(&mut g, fixture.output, *leaf, h)
                .expect("fixture forward passes are well-formed");
            worst = worst.max(max_rel_err(&ad, &fd));
        }
        checks.push(PrimitiveCheck {
            primitive: name,
            max_rel_err: worst,
            pass: worst < tolerance,
        });
    }
    GradcheckReport { step: h, tolerance, checks }
}

struct Fixture {
    graph: Graph,
    output: NodeId,
    leaves: Vec<NodeId>,
}

/// Deterministic generic values: smooth, sign-varying, bounded by ~0.9.
fn fill(shape: &[usize], salt: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|i| 0.9 * (1.7 * (i as f64 + 1.0) + salt).sin())
        .collect();
    Tensor::new(shape.to_vec(), data)
}

/// Like [`fill`] but strictly positive (for log, div denominators, powers).
fn fill_positive(shape: &[usize], salt: f64) -> Tensor {
    let mut t = fill(shape, salt);
    for v in t.data_mut() {
        *v = 1.5 + *v;
    }
    t
}

/// Reduce any tensor to a scalar through fixed weights, so each component of
/// the upstream gradient is distinct.
fn weighted_sum(g: &mut Graph, x: NodeId, salt: f64) -> NodeId {
    let shape = g.value(x).shape().to_vec();
    let w = g.constant(fill_positive(&shape, salt));
    let prod = g.mul(x, w).expect("weighting shapes match");
    g.sum(prod).expect("sum of weighted tensor")
}

fn build_fixture(name: &str) -> Fixture {
    let mut g = Graph::new();
    let (output, leaves) = match name {
        "add" => {
            let a = g.leaf(fill(&[2, 3], 0.1));
            let b = g.leaf(fill(&[2, 3], 0.7));
            let y = g.add(a, b).unwrap();
            (weighted_sum(&mut g, y, 2.0), vec![a, b])
        }
        "sub" => {
            let a = g.leaf(fill(&[2, 3], 0.2));
            let b = g.leaf(fill(&[2, 3], 0.9));
            let y = g.sub(a, b).unwrap();
            (weighted_sum(&mut g, y, 2.1), vec![a, b])
        }
        "mul" => {
            let a = g.leaf(fill(&[2, 3], 0.3));
            let b = g.leaf(fill(&[2, 3], 1.1));
            let y = g.mul(a, b).unwrap();
            (weighted_sum(&mut g, y, 2.2), vec![a, b])
        }
        "div" => {
            let a = g.leaf(fill(&[2, 3], 0.4));
            let b = g.leaf(fill_positive(&[2, 3], 1.3));
            let y = g.div(a, b).unwrap();
            (weighted_sum(&mut g, y, 2.3), vec![a, b])
        }
        "neg" => {
            let a = g.leaf(fill(&[4], 0.5));
            let y = g.neg(a).unwrap();
            (weighted_sum(&mut g, y, 2.4), vec![a])
        }
        "scale_const" => {
            let a = g.leaf(fill(&[4], 0.6));
            let y = g.scale_const(a, -1.7).unwrap();
            (weighted_sum(&mut g, y, 2.5), vec![a])
        }
        "add_const" => {
            let a = g.leaf(fill(&[4], 0.7));
            let y = g.add_const(a, 0.9).unwrap();
            (weighted_sum(&mut g, y, 2.6), vec![a])
        }
        "scale_by_scalar" => {
            let a = g.leaf(fill(&[2, 3], 0.8));
            let s = g.leaf(Tensor::scalar(0.75));
            let y = g.scale_by_scalar(a, s).unwrap();
            (weighted_sum(&mut g, y, 2.7), vec![a, s])
        }
        "add_row_broadcast" => {
            let m = g.leaf(fill(&[3, 2], 0.9));
            let b = g.leaf(fill(&[2], 1.5));
            let y = g.add_row_broadcast(m, b).unwrap();
            (weighted_sum(&mut g, y, 2.8), vec![m, b])
        }
        "column_sums" => {
            let m = g.leaf(fill(&[3, 2], 1.0));
            let y = g.column_sums(m).unwrap();
            (weighted_sum(&mut g, y, 2.9), vec![m])
        }
        "broadcast_rows" => {
            let v = g.leaf(fill(&[3], 1.1));
            let y = g.broadcast_rows(v, 4).unwrap();
            (weighted_sum(&mut g, y, 3.0), vec![v])
        }
        "matmul" => {
            let a = g.leaf(fill(&[2, 3], 1.2));
            let b = g.leaf(fill(&[3, 2], 1.8));
            let y = g.matmul(a, b).unwrap();
            (weighted_sum(&mut g, y, 3.1), vec![a, b])
        }
        "transpose" => {
            let a = g.leaf(fill(&[2, 3], 1.3));
            let y = g.transpose(a).unwrap();
            (weighted_sum(&mut g, y, 3.2), vec![a])
        }
        "relu" => {
            let a = g.leaf(away_from_zero(fill(&[2, 3], 1.4)));
            let y = g.relu(a).unwrap();
            (weighted_sum(&mut g, y, 3.3), vec![a])
        }
        "heaviside" => {
            let a = g.leaf(away_from_zero(fill(&[2, 3], 1.5)));
            let y = g.heaviside(a).unwrap();
            (weighted_sum(&mut g, y, 3.4), vec![a])
        }
        "exp" => {
            let a = g.leaf(fill(&[4], 1.6));
            let y = g.exp(a).unwrap();
            (weighted_sum(&mut g, y, 3.5), vec![a])
        }
        "log" => {
            let a = g.leaf(fill_positive(&[4], 1.7));
            let y = g.log(a).unwrap();
            (weighted_sum(&mut g, y, 3.6), vec![a])
        }
        "tanh" => {
            let a = g.leaf(fill(&[4], 1.8));
            let y = g.tanh(a).unwrap();
            (weighted_sum(&mut g, y, 3.7), vec![a])
        }
        "sigmoid" => {
            let a = g.leaf(fill(&[4], 1.9));
            let y = g.sigmoid(a).unwrap();
            (weighted_sum(&mut g, y, 3.8), vec![a])
        }
        "pow_const" => {
            let a = g.leaf(fill_positive(&[4], 2.0));
            let y = g.pow_const(a, 2.5).unwrap();
            (weighted_sum(&mut g, y, 3.9), vec![a])
        }
        "sum" => {
            let a = g.leaf(fill(&[2, 3], 2.1));
            (g.sum(a).unwrap(), vec![a])
        }
        "mean" => {
            let a = g.leaf(fill(&[2, 3], 2.2));
            (g.mean(a).unwrap(), vec![a])
        }
        "max" => {
            let a = g.leaf(fill(&[5], 2.3));
            (g.max(a).unwrap(), vec![a])
        }
        "argmax_mask" => {
            let a = g.leaf(fill(&[5], 2.4));
            let y = g.argmax_mask(a).unwrap();
            (weighted_sum(&mut g, y, 4.0), vec![a])
        }
        "softmax_cross_entropy" => {
            let z = g.leaf(fill(&[3, 4], 2.5));
            let t = g.constant(Tensor::vector(vec![2.0, 0.0, 3.0]));
            (g.softmax_cross_entropy(z, t).unwrap(), vec![z])
        }
        "softmax_ce_grad_logits" => {
            let z = g.leaf(fill(&[3, 4], 2.6));
            let t = g.constant(Tensor::vector(vec![1.0, 3.0, 0.0]));
            let y = g.softmax_ce_grad_logits(z, t).unwrap();
            (weighted_sum(&mut g, y, 4.1), vec![z])
        }
        other => panic!("no fixture registered for primitive {other}"),
    };
    Fixture { graph: g, output, leaves }
}

/// Push values at least 0.05 away from zero so kinked primitives are checked
/// at smooth points.
fn away_from_zero(mut t: Tensor) -> Tensor {
    for v in t.data_mut() {
        if v.abs() < 0.05 {
            *v += if *v >= 0.0 { 0.1 } else { -0.1 };
        }
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_appears_exactly_once_and_passes() {
        let report = run_gradcheck(1e-5, 1e-6, None);
        assert_eq!(report.checks.len(), PRIMITIVE_NAMES.len());
        for (check, name) in report.checks.iter().zip(PRIMITIVE_NAMES) {
            assert_eq!(check.primitive, name);
            assert!(
                check.pass,
                "{} gradient disagrees with central differences: {}",
                check.primitive, check.max_rel_err
            );
        }
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let report = run_gradcheck(1e-5, 1e-6, Some("matmul"));
        assert!(!report.all_pass());
        let bad = report.checks.iter().find(|c| c.primitive == "matmul").unwrap();
        assert!(!bad.pass);
    }
}
