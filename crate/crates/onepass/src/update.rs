//! Hyperparameter parameterisation and the SGD update rule.
//!
//! Hyperparameters are stored in an unconstrained internal space: learning
//! rate and weight decay as base-10 logarithms, momentum through an inverse
//! sigmoid. Hypergradients and the meta-optimiser both operate on internal
//! coordinates, so positivity and range constraints hold by construction.
//!
//! The update rule is SGD with momentum and decoupled weight decay. For each
//! parameter tensor `w` with velocity `buf` and gradient `g`:
//!
//! ```text
//! buf <- m * buf + g + wd * w
//! w   <- w - lr * buf
//! ```
//!
//! [`sgd_step`] applies it to plain tensors during training, while
//! [`attach_update`] records the same arithmetic on a [`Graph`] so the
//! hypergradient engines can differentiate the update with respect to both
//! weights and hyperparameters. The two paths produce bitwise identical
//! numbers.

use std::f64::consts::LN_10;

use thiserror::Error;

use crate::autodiff::{sigmoid, AdError, Graph, NodeId, Tensor};

/// Natural-space clamp range for the learning rate.
pub const LR_MIN: f64 = 1e-10;
pub const LR_MAX: f64 = 1.0;

#[derive(Debug, Error)]
pub enum UpdateError {
    #[error("learning rate has {got} entries, expected 1 or {expected}")]
    LearningRateWidth { expected: usize, got: usize },
    #[error(transparent)]
    Graph(#[from] AdError),
}

/// Bijection between a hyperparameter's natural value and its internal
/// coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transform {
    /// Internal coordinate is `log10(natural)`; natural values stay positive.
    Log10,
    /// Internal coordinate is `logit(natural)`; natural values stay in (0, 1).
    /// Inputs are clamped to `[1e-12, 1 - 1e-12]` before the logit so the
    /// endpoints map to finite coordinates.
    InverseSigmoid,
    Identity,
}

impl Transform {
    pub fn to_internal(self, natural: f64) -> f64 {
        match self {
            Transform::Log10 => natural.log10(),
            Transform::InverseSigmoid => {
                let p = natural.clamp(1e-12, 1.0 - 1e-12);
                (p / (1.0 - p)).ln()
            }
            Transform::Identity => natural,
        }
    }

    pub fn to_natural(self, internal: f64) -> f64 {
        match self {
            Transform::Log10 => (internal * LN_10).exp(),
            Transform::InverseSigmoid => sigmoid(internal),
            Transform::Identity => internal,
        }
    }

    /// Record the internal-to-natural map on `g`, returning the natural node.
    pub fn attach(self, g: &mut Graph, internal: NodeId) -> Result<NodeId, AdError> {
        match self {
            Transform::Log10 => {
                let scaled = g.scale_const(internal, LN_10)?;
                g.exp(scaled)
            }
            Transform::InverseSigmoid => g.sigmoid(internal),
            Transform::Identity => Ok(internal),
        }
    }
}

/// The hyperparameters the update rule consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HyperKind {
    LearningRate,
    WeightDecay,
    Momentum,
}

/// One hyperparameter: its role, its transform, and one internal coordinate
/// per degree of freedom. Learning rates may carry one coordinate per
/// parameter tensor; weight decay and momentum are always scalar.
#[derive(Debug, Clone)]
pub struct HyperEntry {
    pub kind: HyperKind,
    pub transform: Transform,
    pub internal: Vec<f64>,
}

/// Which hyperparameters receive meta-updates. Unmasked entries keep their
/// initial values for the whole run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct HyperMask {
    pub lr: bool,
    pub wd: bool,
    pub momentum: bool,
}

/// Learning rate, weight decay, and momentum in internal coordinates, in
/// that fixed order.
#[derive(Debug, Clone)]
pub struct HyperVector {
    entries: [HyperEntry; 3],
}

impl HyperVector {
    /// Build from natural values with a shared scalar learning rate.
    pub fn from_natural(lr: f64, wd: f64, momentum: f64) -> Self {
        Self::with_lr_width(lr, wd, momentum, 1)
    }

    /// Build from natural values with one learning rate per parameter tensor,
    /// every coordinate replicated from the same scalar draw.
    pub fn with_lr_width(lr: f64, wd: f64, momentum: f64, lr_width: usize) -> Self {
        assert!(lr_width >= 1, "learning rate needs at least one coordinate");
        let lr_internal = Transform::Log10.to_internal(lr);
        Self {
            entries: [
                HyperEntry {
                    kind: HyperKind::LearningRate,
                    transform: Transform::Log10,
                    internal: vec![lr_internal; lr_width],
                },
                HyperEntry {
                    kind: HyperKind::WeightDecay,
                    transform: Transform::Log10,
                    internal: vec![Transform::Log10.to_internal(wd)],
                },
                HyperEntry {
                    kind: HyperKind::Momentum,
                    transform: Transform::InverseSigmoid,
                    internal: vec![Transform::InverseSigmoid.to_internal(momentum)],
                },
            ],
        }
    }

    pub fn entries(&self) -> &[HyperEntry] {
        &self.entries
    }

    pub fn entry(&self, kind: HyperKind) -> &HyperEntry {
        self.entries
            .iter()
            .find(|e| e.kind == kind)
            .expect("all kinds present by construction")
    }

    pub fn lr_width(&self) -> usize {
        self.entry(HyperKind::LearningRate).internal.len()
    }

    /// Natural learning rate for parameter tensor `k`; a scalar entry
    /// broadcasts to every tensor.
    pub fn lr_natural(&self, k: usize) -> f64 {
        let e = self.entry(HyperKind::LearningRate);
        let idx = if e.internal.len() == 1 { 0 } else { k };
        e.transform.to_natural(e.internal[idx])
    }

    pub fn weight_decay(&self) -> f64 {
        let e = self.entry(HyperKind::WeightDecay);
        e.transform.to_natural(e.internal[0])
    }

    pub fn momentum(&self) -> f64 {
        let e = self.entry(HyperKind::Momentum);
        e.transform.to_natural(e.internal[0])
    }

    /// Scalar learning rate for reporting: the geometric mean when the entry
    /// is per-tensor.
    pub fn export_lr(&self) -> f64 {
        let e = self.entry(HyperKind::LearningRate);
        let mean = e.internal.iter().sum::<f64>() / e.internal.len() as f64;
        e.transform.to_natural(mean)
    }

    /// Total internal degrees of freedom.
    pub fn dims(&self) -> usize {
        self.entries.iter().map(|e| e.internal.len()).sum()
    }

    /// Internal coordinates flattened in entry order.
    pub fn internal_flat(&self) -> Vec<f64> {
        self.entries.iter().flat_map(|e| e.internal.iter().copied()).collect()
    }

    pub fn internal_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.entries.iter_mut().flat_map(|e| e.internal.iter_mut())
    }

    /// Expand a mask over kinds into per-coordinate flags aligned with
    /// [`internal_flat`](Self::internal_flat).
    pub fn mask_flags(&self, mask: HyperMask) -> Vec<bool> {
        self.entries
            .iter()
            .flat_map(|e| {
                let on = match e.kind {
                    HyperKind::LearningRate => mask.lr,
                    HyperKind::WeightDecay => mask.wd,
                    HyperKind::Momentum => mask.momentum,
                };
                std::iter::repeat(on).take(e.internal.len())
            })
            .collect()
    }

    /// Multiply every learning rate coordinate by `factor` in natural space.
    pub fn multiply_lr(&mut self, factor: f64) {
        let shift = factor.log10();
        for x in &mut self.entries[0].internal {
            *x += shift;
        }
    }

    /// Clamp every learning rate into `[LR_MIN, LR_MAX]`. Idempotent, applied
    /// in internal coordinates.
    pub fn clip_lr(&mut self) {
        let e = &mut self.entries[0];
        let lo = e.transform.to_internal(LR_MIN);
        let hi = e.transform.to_internal(LR_MAX);
        for x in &mut e.internal {
            *x = x.clamp(lo, hi);
        }
    }
}

/// Momentum buffers, one per parameter tensor.
#[derive(Debug, Clone)]
pub struct SgdState {
    pub velocity: Vec<Tensor>,
}

impl SgdState {
    pub fn zeros_like(params: &[Tensor]) -> Self {
        Self { velocity: params.iter().map(|p| Tensor::zeros(p.shape())).collect() }
    }
}

/// Apply one SGD step in place.
pub fn sgd_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut SgdState,
    hv: &HyperVector,
) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.velocity.len());
    let m = hv.momentum();
    let wd = hv.weight_decay();
    for k in 0..params.len() {
        let lr = hv.lr_natural(k);
        let g = grads[k].data();
        let w = params[k].data_mut();
        let buf = state.velocity[k].data_mut();
        for i in 0..w.len() {
            let b = (m * buf[i] + g[i]) + wd * w[i];
            buf[i] = b;
            w[i] -= lr * b;
        }
    }
}

/// Hyperparameter leaves recorded on a graph: one scalar leaf per internal
/// coordinate plus the natural-space nodes the update rule reads.
#[derive(Debug, Clone)]
pub struct AttachedHypers {
    /// Every internal coordinate as a scalar leaf, in entry order.
    pub leaves: Vec<NodeId>,
    lr_natural: Vec<NodeId>,
    wd_natural: NodeId,
    m_natural: NodeId,
}

impl AttachedHypers {
    /// Natural learning rate node for parameter tensor `k`.
    pub fn lr_node(&self, k: usize) -> NodeId {
        if self.lr_natural.len() == 1 {
            self.lr_natural[0]
        } else {
            self.lr_natural[k]
        }
    }

    pub fn wd_node(&self) -> NodeId {
        self.wd_natural
    }

    pub fn momentum_node(&self) -> NodeId {
        self.m_natural
    }

    /// Collapse per-leaf gradient tensors (aligned with `leaves`) into the
    /// flat coordinate order used by [`HyperVector::internal_flat`].
    pub fn grads_to_flat(&self, grads: &[Tensor]) -> Vec<f64> {
        assert_eq!(grads.len(), self.leaves.len());
        grads.iter().map(Tensor::item).collect()
    }
}

/// Record one scalar leaf per internal coordinate plus the transforms.
pub fn attach_hypers(g: &mut Graph, hv: &HyperVector) -> Result<AttachedHypers, AdError> {
    let mut leaves = Vec::with_capacity(hv.dims());
    let mut naturals: Vec<Vec<NodeId>> = Vec::with_capacity(3);
    for e in hv.entries() {
        let mut nat = Vec::with_capacity(e.internal.len());
        for &x in &e.internal {
            let leaf = g.leaf(Tensor::scalar(x));
            leaves.push(leaf);
            nat.push(e.transform.attach(g, leaf)?);
        }
        naturals.push(nat);
    }
    let m_natural = naturals.pop().expect("three entries")[0];
    let wd_natural = naturals.pop().expect("three entries")[0];
    let lr_natural = naturals.pop().expect("three entries");
    Ok(AttachedHypers { leaves, lr_natural, wd_natural, m_natural })
}

/// Nodes produced by recording one SGD step.
#[derive(Debug, Clone)]
pub struct UpdateParts {
    /// Training-loss gradients with respect to each weight tensor.
    pub grads: Vec<NodeId>,
    /// Post-step velocity `m * buf + g + wd * w` per tensor.
    pub velocity_next: Vec<NodeId>,
    /// The step `u = lr * velocity_next` per tensor; the new weights are
    /// `w - u`.
    pub updates: Vec<NodeId>,
}

/// Record the SGD update on `g`. `weights` are the pre-step weight nodes,
/// `velocity` the incoming per-tensor buffers (constants for a single step,
/// or the previous step's `velocity_next` when chaining), and `hypers` the
/// attached hyperparameter nodes shared across every step recorded on `g`.
pub fn attach_update(
    g: &mut Graph,
    loss: NodeId,
    weights: &[NodeId],
    velocity: &[NodeId],
    hypers: &AttachedHypers,
) -> Result<UpdateParts, UpdateError> {
    assert_eq!(weights.len(), velocity.len());
    let width = hypers.lr_natural.len();
    if width != 1 && width != weights.len() {
        return Err(UpdateError::LearningRateWidth { expected: weights.len(), got: width });
    }
    let grads = g.grad_recorded(loss, weights)?;
    let mut velocity_next = Vec::with_capacity(weights.len());
    let mut updates = Vec::with_capacity(weights.len());
    for k in 0..weights.len() {
        let scaled_buf = g.scale_by_scalar(velocity[k], hypers.momentum_node())?;
        let with_grad = g.add(scaled_buf, grads[k])?;
        let decay = g.scale_by_scalar(weights[k], hypers.wd_node())?;
        let buf_next = g.add(with_grad, decay)?;
        let u = g.scale_by_scalar(buf_next, hypers.lr_node(k))?;
        velocity_next.push(buf_next);
        updates.push(u);
    }
    Ok(UpdateParts { grads, velocity_next, updates })
}

/// Adam on the internal hyperparameter coordinates. Moment estimates are
/// touched only where the mask is set, so a disabled coordinate carries no
/// stale state if it is enabled later.
#[derive(Debug, Clone)]
pub struct MetaOptimiser {
    kappa: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl MetaOptimiser {
    pub fn new(dims: usize) -> Self {
        Self::with_step_size(dims, 0.05)
    }

    pub fn with_step_size(dims: usize, kappa: f64) -> Self {
        Self {
            kappa,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; dims],
            v: vec![0.0; dims],
            t: 0,
        }
    }

    /// Apply one masked Adam step to `hv` given a flat hypergradient.
    pub fn step(&mut self, hv: &mut HyperVector, grad: &[f64], mask: &[bool]) {
        assert_eq!(grad.len(), self.m.len());
        assert_eq!(mask.len(), self.m.len());
        assert_eq!(hv.dims(), self.m.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, x) in hv.internal_mut().enumerate() {
            if !mask[i] {
                continue;
            }
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            *x -= self.kappa * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}
