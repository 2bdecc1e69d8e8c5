//! Hypergradient engines.
//!
//! Both engines answer the same question: how does the validation loss react
//! to the optimiser hyperparameters? [`NeumannEngine`] approximates the
//! answer from the current state alone with a truncated series of
//! vector-Jacobian products, at constant memory in the look-back distance.
//! [`UnrollEngine`] differentiates through an explicitly recorded window of
//! weight updates and is exact for that window, at memory linear in its
//! length. The restricted baselines reuse these engines: one masks the
//! truncated-series result to weight decay alone, the other scores the
//! learning rate by the correlation of consecutive gradients.
//!
//! All hypergradients are expressed in internal (transformed) hyperparameter
//! coordinates; the transform chain rule is part of the recorded update.

use std::f64::consts::LN_10;

use thiserror::Error;

use crate::autodiff::{AdError, Graph, NodeId, Tensor};
use crate::update::{
    attach_hypers, attach_update, AttachedHypers, HyperMask, HyperVector, UpdateError,
};

/// Accumulator entries above this magnitude are treated as divergence.
const OVERFLOW_LIMIT: f64 = 1e100;

#[derive(Debug, Error)]
pub enum HypergradError {
    #[error("hypergradient diverged: {0}")]
    Diverged(&'static str),
    #[error("steps per hyperparameter update must be at least 1")]
    ZeroSteps,
    #[error("unroll window must be at least 1")]
    ZeroWindow,
    #[error("expected {expected} tensors for {what}, got {got}")]
    ArityMismatch { what: &'static str, expected: usize, got: usize },
    #[error(transparent)]
    Graph(#[from] AdError),
    #[error(transparent)]
    Update(#[from] UpdateError),
}

/// Schedule for the truncated-series engine: `t` weight updates between
/// hyperparameter updates, look-back distance `i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NeumannConfig {
    pub t: usize,
    pub i: usize,
}

impl NeumannConfig {
    pub fn new(t: usize, i: usize) -> Result<Self, HypergradError> {
        if t == 0 {
            return Err(HypergradError::ZeroSteps);
        }
        Ok(Self { t, i })
    }
}

/// A hypergradient split into the direct dependence of the validation loss
/// on the hyperparameters and the indirect dependence through the weights.
/// `total` is exactly `direct + indirect`, in internal coordinates, ordered
/// like [`HyperVector::internal_flat`].
#[derive(Debug, Clone, PartialEq)]
pub struct Hypergradient {
    pub direct: Vec<f64>,
    pub indirect: Vec<f64>,
    pub total: Vec<f64>,
}

impl Hypergradient {
    pub fn from_parts(direct: Vec<f64>, indirect: Vec<f64>) -> Self {
        assert_eq!(direct.len(), indirect.len());
        let total = direct.iter().zip(&indirect).map(|(d, i)| d + i).collect();
        Self { direct, indirect, total }
    }

    pub fn dims(&self) -> usize {
        self.total.len()
    }

    /// Project onto a coordinate mask: unmasked components become exactly
    /// zero in all three vectors, masked ones are copied bit for bit.
    pub fn masked(&self, flags: &[bool]) -> Self {
        assert_eq!(flags.len(), self.total.len());
        let keep = |v: &[f64]| -> Vec<f64> {
            v.iter().zip(flags).map(|(&x, &on)| if on { x } else { 0.0 }).collect()
        };
        Self { direct: keep(&self.direct), indirect: keep(&self.indirect), total: keep(&self.total) }
    }
}

/// Per-entry relative absolute error between two hypergradients, measured on
/// the totals: `|approx - exact| / max(|exact|, 1e-12)`.
pub fn hypergradient_error(approx: &Hypergradient, exact: &Hypergradient) -> Vec<f64> {
    assert_eq!(approx.dims(), exact.dims());
    approx
        .total
        .iter()
        .zip(&exact.total)
        .map(|(&a, &e)| (a - e).abs() / e.abs().max(1e-12))
        .collect()
}

/// Loss construction callback: record a scalar loss on `g` reading the given
/// weight nodes, returning the loss node and any placeholders that carry
/// batch data, in the order the engine should bind them later.
pub type LossSlots = (NodeId, Vec<NodeId>);

fn bind_all(g: &mut Graph, ids: &[NodeId], values: &[Tensor], what: &'static str) -> Result<(), HypergradError> {
    if ids.len() != values.len() {
        return Err(HypergradError::ArityMismatch {
            what,
            expected: ids.len(),
            got: values.len(),
        });
    }
    for (&id, v) in ids.iter().zip(values) {
        g.bind(id, v.clone())?;
    }
    Ok(())
}

fn bind_internal(g: &mut Graph, hypers: &AttachedHypers, hv: &HyperVector) -> Result<(), HypergradError> {
    let flat = hv.internal_flat();
    if flat.len() != hypers.leaves.len() {
        return Err(HypergradError::ArityMismatch {
            what: "hyperparameter coordinates",
            expected: hypers.leaves.len(),
            got: flat.len(),
        });
    }
    for (&leaf, &x) in hypers.leaves.iter().zip(&flat) {
        g.bind(leaf, Tensor::scalar(x))?;
    }
    Ok(())
}

fn check_finite(tensors: &[Tensor], what: &'static str) -> Result<(), HypergradError> {
    for t in tensors {
        if !t.all_finite() {
            return Err(HypergradError::Diverged(what));
        }
        if t.data().iter().any(|v| v.abs() > OVERFLOW_LIMIT) {
            return Err(HypergradError::Diverged("accumulator overflow"));
        }
    }
    Ok(())
}

/// Truncated-series hypergradients from the current state alone.
///
/// The graph records one weight update `w_next = w - u(w, buf, lambda)` plus
/// the validation loss at `w`. Each [`hypergradient`](Self::hypergradient)
/// call rebinds state and data, then runs the accumulator loop
///
/// ```text
/// v = p = dL_val/dw
/// repeat i times: v <- v (I - du/dw)   (one VJP against w_next)
///                 p <- p + v
/// indirect = -p du/dlambda             (one VJP against w_next)
/// ```
///
/// which sums the series powers 0..=i without materialising a Jacobian. Only
/// the two accumulators and the VJP in flight are alive at once, so memory
/// does not grow with the look-back distance.
pub struct NeumannEngine {
    g: Graph,
    weights: Vec<NodeId>,
    velocity: Vec<NodeId>,
    hypers: AttachedHypers,
    updates: Vec<NodeId>,
    stepped: Vec<NodeId>,
    val_loss: NodeId,
    train_slots: Vec<NodeId>,
    val_slots: Vec<NodeId>,
}

impl NeumannEngine {
    /// Record the problem once. `train` and `val` receive the weight nodes
    /// and attach their losses; batch shapes are fixed by the placeholders
    /// they create.
    pub fn new(
        hv: &HyperVector,
        weight_shapes: &[Vec<usize>],
        train: impl FnOnce(&mut Graph, &[NodeId]) -> Result<LossSlots, AdError>,
        val: impl FnOnce(&mut Graph, &[NodeId]) -> Result<LossSlots, AdError>,
    ) -> Result<Self, HypergradError> {
        let mut g = Graph::new();
        let weights: Vec<NodeId> =
            weight_shapes.iter().map(|s| g.leaf(Tensor::zeros(s))).collect();
        let velocity: Vec<NodeId> =
            weight_shapes.iter().map(|s| g.constant(Tensor::zeros(s))).collect();
        let hypers = attach_hypers(&mut g, hv)?;
        let (train_loss, train_slots) = train(&mut g, &weights)?;
        let parts = attach_update(&mut g, train_loss, &weights, &velocity, &hypers)?;
        let stepped: Vec<NodeId> = weights
            .iter()
            .zip(&parts.updates)
            .map(|(&w, &u)| g.sub(w, u))
            .collect::<Result<_, _>>()?;
        let (val_loss, val_slots) = val(&mut g, &weights)?;
        Ok(Self {
            g,
            weights,
            velocity,
            hypers,
            updates: parts.updates,
            stepped,
            val_loss,
            train_slots,
            val_slots,
        })
    }

    /// Compute the hypergradient at state `(w, velocity, hv)` with the given
    /// batches. Reads nothing besides its arguments: the result is a pure
    /// function of the current state, never of earlier steps.
    pub fn hypergradient(
        &mut self,
        w: &[Tensor],
        velocity: &[Tensor],
        hv: &HyperVector,
        train_data: &[Tensor],
        val_data: &[Tensor],
        cfg: &NeumannConfig,
    ) -> Result<Hypergradient, HypergradError> {
        let g = &mut self.g;
        bind_all(g, &self.weights, w, "weights")?;
        bind_all(g, &self.velocity, velocity, "velocity")?;
        bind_internal(g, &self.hypers, hv)?;
        bind_all(g, &self.train_slots, train_data, "training batch")?;
        bind_all(g, &self.val_slots, val_data, "validation batch")?;
        g.refresh()?;

        let mut v = g.grad(self.val_loss, &self.weights)?;
        check_finite(&v, "validation gradient")?;
        let mut p = v.clone();
        for _ in 0..cfg.i {
            // One VJP against w - u maps v to v (I - du/dw) in place.
            v = g.vjp_multi(&self.stepped, v, &self.weights)?;
            check_finite(&v, "series accumulator")?;
            for (acc, term) in p.iter_mut().zip(&v) {
                acc.add_assign(term);
            }
        }
        // Seeding w - u with p yields -p du/dlambda at the hyperparameter
        // leaves, because the weights enter the stepped value identically.
        let lam = g.vjp_multi(&self.stepped, p, &self.hypers.leaves)?;
        check_finite(&lam, "hyperparameter gradient")?;
        let indirect = self.hypers.grads_to_flat(&lam);
        let direct = vec![0.0; indirect.len()];
        Ok(Hypergradient::from_parts(direct, indirect))
    }

    /// Graph handle for diagnostics that assemble dense Jacobians.
    pub fn graph(&self) -> &Graph {
        &self.g
    }

    pub fn weight_nodes(&self) -> &[NodeId] {
        &self.weights
    }

    pub fn update_nodes(&self) -> &[NodeId] {
        &self.updates
    }

    /// Stepped-value nodes `w - u`, one per weight tensor.
    pub fn stepped_nodes(&self) -> &[NodeId] {
        &self.stepped
    }

    pub fn hyper_leaves(&self) -> &[NodeId] {
        &self.hypers.leaves
    }

    pub fn val_loss_node(&self) -> NodeId {
        self.val_loss
    }
}

/// Weight-decay-only baseline: the truncated-series hypergradient projected
/// onto the weight decay coordinate. Other components are exactly zero; the
/// weight decay component is bit-identical to the unrestricted engine's.
pub fn lorraine_hypergradient(
    engine: &mut NeumannEngine,
    w: &[Tensor],
    velocity: &[Tensor],
    hv: &HyperVector,
    train_data: &[Tensor],
    val_data: &[Tensor],
    cfg: &NeumannConfig,
) -> Result<Hypergradient, HypergradError> {
    let full = engine.hypergradient(w, velocity, hv, train_data, val_data, cfg)?;
    let flags = hv.mask_flags(HyperMask { lr: false, wd: true, momentum: false });
    Ok(full.masked(&flags))
}

/// Brute-force reference for the truncated series: assembles the update
/// Jacobians as dense matrices by probing the graph with basis vectors, then
/// evaluates the same sum of matrix powers with explicit row-by-row
/// arithmetic. Costs one VJP per weight coordinate twice over, so it is
/// reserved for models with a handful of parameters.
pub fn dense_reference_hypergradient(
    engine: &mut NeumannEngine,
    w: &[Tensor],
    velocity: &[Tensor],
    hv: &HyperVector,
    train_data: &[Tensor],
    val_data: &[Tensor],
    cfg: &NeumannConfig,
) -> Result<Hypergradient, HypergradError> {
    let bind_only = NeumannConfig { t: cfg.t, i: 0 };
    engine.hypergradient(w, velocity, hv, train_data, val_data, &bind_only)?;

    let g = engine.graph();
    let shapes: Vec<Vec<usize>> = w.iter().map(|t| t.shape().to_vec()).collect();
    let n: usize = w.iter().map(Tensor::numel).sum();
    let flatten = |ts: &[Tensor]| -> Vec<f64> {
        ts.iter().flat_map(|t| t.data().iter().copied()).collect()
    };
    let basis = |k: usize| -> Vec<Tensor> {
        let mut seeds: Vec<Tensor> = shapes.iter().map(|s| Tensor::zeros(s)).collect();
        let mut offset = 0;
        for seed in &mut seeds {
            let len = seed.numel();
            if k < offset + len {
                seed.data_mut()[k - offset] = 1.0;
                break;
            }
            offset += len;
        }
        seeds
    };

    let p = flatten(&g.grad(engine.val_loss_node(), engine.weight_nodes())?);
    // Row r of step_jac is e_r (I - du/dw); row r of lam_jac is -e_r du/dlambda.
    let mut step_jac = Vec::with_capacity(n);
    let mut lam_jac = Vec::with_capacity(n);
    for r in 0..n {
        let row = g.vjp_multi(engine.stepped_nodes(), basis(r), engine.weight_nodes())?;
        step_jac.push(flatten(&row));
        let row = g.vjp_multi(engine.stepped_nodes(), basis(r), engine.hyper_leaves())?;
        lam_jac.push(flatten(&row));
    }

    let mut acc = p.clone();
    let mut v = p;
    for _ in 0..cfg.i {
        let mut next = vec![0.0; n];
        for (r, vr) in v.iter().enumerate() {
            for (c, m) in step_jac[r].iter().enumerate() {
                next[c] += vr * m;
            }
        }
        v = next;
        for (a, b) in acc.iter_mut().zip(&v) {
            *a += b;
        }
    }

    let dims = hv.dims();
    let mut indirect = vec![0.0; dims];
    for (r, row) in lam_jac.iter().enumerate() {
        for (c, val) in row.iter().enumerate() {
            indirect[c] += acc[r] * val;
        }
    }
    if indirect.iter().any(|x| !x.is_finite()) {
        return Err(HypergradError::Diverged("dense reference overflow"));
    }
    Ok(Hypergradient::from_parts(vec![0.0; dims], indirect))
}

/// Learning-rate-only baseline: the correlation of the current gradient with
/// the one consumed by the previous weight update,
/// `-<grad_now, grad_prev>`, in natural learning rate space. Returns zero
/// when there is no previous gradient yet.
pub fn baydin_hypergradient(grad_now: &[Tensor], grad_prev: Option<&[Tensor]>) -> f64 {
    match grad_prev {
        None => 0.0,
        Some(prev) => {
            assert_eq!(grad_now.len(), prev.len());
            -grad_now.iter().zip(prev).map(|(a, b)| a.dot(b)).sum::<f64>()
        }
    }
}

/// Lift the natural-space learning rate derivative into a flat internal
/// hypergradient: the log10 chain rule multiplies by `ln(10) * lr`, every
/// other coordinate is zero.
pub fn baydin_flat(hv: &HyperVector, natural: f64) -> Vec<f64> {
    let mut flat = vec![0.0; hv.dims()];
    for k in 0..hv.lr_width() {
        flat[k] = natural * LN_10 * hv.lr_natural(k);
    }
    flat
}

/// Exact hypergradients through an explicitly recorded window of weight
/// updates.
///
/// The window starts from detached leaves `(w0, buf0)`, so nothing flows
/// past its first step, and shares one set of hyperparameter leaves across
/// every recorded update. The result is the exact derivative of the validation
/// loss at the final weights with respect to those leaves.
pub struct UnrollEngine {
    g: Graph,
    w0: Vec<NodeId>,
    buf0: Vec<NodeId>,
    hypers: AttachedHypers,
    step_slots: Vec<Vec<NodeId>>,
    val_slots: Vec<NodeId>,
    val_loss: NodeId,
    window: usize,
}

impl UnrollEngine {
    pub fn new(
        hv: &HyperVector,
        weight_shapes: &[Vec<usize>],
        window: usize,
        mut train: impl FnMut(&mut Graph, &[NodeId]) -> Result<LossSlots, AdError>,
        val: impl FnOnce(&mut Graph, &[NodeId]) -> Result<LossSlots, AdError>,
    ) -> Result<Self, HypergradError> {
        if window == 0 {
            return Err(HypergradError::ZeroWindow);
        }
        let mut g = Graph::new();
        // The window boundary is a detachment point: the start state is a
        // plain leaf, not a function of the hyperparameters, so gradient
        // flow stops there while the recorded losses still differentiate
        // through it within the window.
        let w0: Vec<NodeId> = weight_shapes.iter().map(|s| g.leaf(Tensor::zeros(s))).collect();
        let buf0: Vec<NodeId> = weight_shapes.iter().map(|s| g.leaf(Tensor::zeros(s))).collect();
        let hypers = attach_hypers(&mut g, hv)?;
        let mut w = w0.clone();
        let mut buf = buf0.clone();
        let mut step_slots = Vec::with_capacity(window);
        for _ in 0..window {
            let (loss, slots) = train(&mut g, &w)?;
            let parts = attach_update(&mut g, loss, &w, &buf, &hypers)?;
            let next: Vec<NodeId> = w
                .iter()
                .zip(&parts.updates)
                .map(|(&wk, &uk)| g.sub(wk, uk))
                .collect::<Result<_, _>>()?;
            w = next;
            buf = parts.velocity_next;
            step_slots.push(slots);
        }
        let (val_loss, val_slots) = val(&mut g, &w)?;
        Ok(Self { g, w0, buf0, hypers, step_slots, val_slots, val_loss, window })
    }

    pub fn window(&self) -> usize {
        self.window
    }

    /// Exact hypergradient through the window. `step_data` supplies one
    /// batch per recorded step, oldest first.
    pub fn hypergradient(
        &mut self,
        w0: &[Tensor],
        buf0: &[Tensor],
        hv: &HyperVector,
        step_data: &[Vec<Tensor>],
        val_data: &[Tensor],
    ) -> Result<Hypergradient, HypergradError> {
        if step_data.len() != self.window {
            return Err(HypergradError::ArityMismatch {
                what: "per-step batches",
                expected: self.window,
                got: step_data.len(),
            });
        }
        let g = &mut self.g;
        bind_all(g, &self.w0, w0, "window-start weights")?;
        bind_all(g, &self.buf0, buf0, "window-start velocity")?;
        bind_internal(g, &self.hypers, hv)?;
        for (slots, data) in self.step_slots.iter().zip(step_data) {
            bind_all(g, slots, data, "step batch")?;
        }
        bind_all(g, &self.val_slots, val_data, "validation batch")?;
        g.refresh()?;

        let grads = g.grad(self.val_loss, &self.hypers.leaves)?;
        check_finite(&grads, "unrolled hypergradient")?;
        let indirect = self.hypers.grads_to_flat(&grads);
        let direct = vec![0.0; indirect.len()];
        Ok(Hypergradient::from_parts(direct, indirect))
    }
}
