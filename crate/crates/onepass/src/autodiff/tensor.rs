//! Dense row-major `f64` tensors and the numeric kernels behind the graph ops.
//!
//! Shapes are explicit: `[]` is a scalar, `[n]` a vector, `[r, c]` a matrix.
//! Every kernel is plain sequential code so results are bitwise reproducible
//! across runs. Allocation is tracked per thread (see [`mem`]) so tests can
//! assert that iterative algorithms run in constant memory.

use std::cell::Cell;

/// Thread-local accounting of live tensor bytes.
///
/// Each [`Tensor`] registers its buffer size on creation and deregisters on
/// drop. `peak` is a high-water mark that callers can reset before a region
/// of interest and read afterwards.
pub mod mem {
    use super::Cell;

    thread_local! {
        static LIVE: Cell<usize> = const { Cell::new(0) };
        static PEAK: Cell<usize> = const { Cell::new(0) };
    }

    pub(super) fn register(bytes: usize) {
        LIVE.with(|l| {
            let now = l.get() + bytes;
            l.set(now);
            PEAK.with(|p| {
                if now > p.get() {
                    p.set(now);
                }
            });
        });
    }

    pub(super) fn deregister(bytes: usize) {
        LIVE.with(|l| l.set(l.get().saturating_sub(bytes)));
    }

    /// Bytes currently held by live tensors on this thread.
    pub fn live_bytes() -> usize {
        LIVE.with(Cell::get)
    }

    /// Highest value `live_bytes` has reached since the last reset.
    pub fn peak_bytes() -> usize {
        PEAK.with(Cell::get)
    }

    /// Set the high-water mark back to the current live figure.
    pub fn reset_peak() {
        let live = live_bytes();
        PEAK.with(|p| p.set(live));
    }
}

/// A dense tensor of `f64` values with row-major layout.
#[derive(Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Clone for Tensor {
    fn clone(&self) -> Self {
        Tensor::new(self.shape.clone(), self.data.clone())
    }
}

impl Drop for Tensor {
    fn drop(&mut self) {
        mem::deregister(self.data.capacity() * std::mem::size_of::<f64>());
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        mem::register(data.capacity() * std::mem::size_of::<f64>());
        Tensor { shape, data }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::new(vec![], vec![value])
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![0.0; numel])
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![value; numel])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Value of a scalar (or single-element) tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() requires exactly one element");
        self.data[0]
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1 && self.shape.len() <= 1
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rows of a matrix; a vector counts as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::new(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn binary(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape, other.shape, "shape mismatch in elementwise op");
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Tensor::new(self.shape.clone(), data)
    }

    /// `self = f(self, other)` elementwise, reusing this tensor's buffer.
    pub fn binary_in_place(&mut self, other: &Tensor, f: impl Fn(f64, f64) -> f64) {
        assert_eq!(self.shape, other.shape, "shape mismatch in elementwise op");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = f(*a, b);
        }
    }

    /// `self = c * self`, reusing this tensor's buffer.
    pub fn scale_in_place(&mut self, c: f64) {
        for v in self.data.iter_mut() {
            *v = c * *v;
        }
    }

    /// `self += other`.
    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "shape mismatch in add_assign");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// `self += c * other`.
    pub fn add_scaled_assign(&mut self, other: &Tensor, c: f64) {
        assert_eq!(self.shape, other.shape, "shape mismatch in add_scaled_assign");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| c * v)
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "shape mismatch in dot");
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Maximum element and the index of its first occurrence.
    pub fn max_with_index(&self) -> (f64, usize) {
        assert!(self.numel() > 0, "max of empty tensor");
        let mut best = self.data[0];
        let mut idx = 0;
        for (i, &v) in self.data.iter().enumerate().skip(1) {
            if v > best {
                best = v;
                idx = i;
            }
        }
        (best, idx)
    }
}

/// `a @ b` for 2-D operands: `[m, k] @ [k, n] -> [m, n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = mat_dims(a);
    let (k2, n) = mat_dims(b);
    assert_eq!(k, k2, "matmul inner dimensions differ: {k} vs {k2}");
    let mut out = vec![0.0; m * n];
    let ad = &a.data;
    let bd = &b.data;
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::matrix(m, n, out)
}

/// `a^T @ b`: `[k, m]^T @ [k, n] -> [m, n]`, without materialising the transpose.
pub fn matmul_at_b(a: &Tensor, b: &Tensor) -> Tensor {
    let (k, m) = mat_dims(a);
    let (k2, n) = mat_dims(b);
    assert_eq!(k, k2, "matmul_at_b inner dimensions differ: {k} vs {k2}");
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a.data[p * m..(p + 1) * m];
        let brow = &b.data[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::matrix(m, n, out)
}

/// `a @ b^T`: `[m, k] @ [n, k]^T -> [m, n]`, without materialising the transpose.
pub fn matmul_a_bt(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = mat_dims(a);
    let (n, k2) = mat_dims(b);
    assert_eq!(k, k2, "matmul_a_bt inner dimensions differ: {k} vs {k2}");
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b.data[j * k..(j + 1) * k];
            *o = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    Tensor::matrix(m, n, out)
}

pub fn transpose(a: &Tensor) -> Tensor {
    let (r, c) = mat_dims(a);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a.data[i * c + j];
        }
    }
    Tensor::matrix(c, r, out)
}

/// Column sums of a matrix: `[r, c] -> [c]`.
pub fn col_sums(a: &Tensor) -> Tensor {
    let (r, c) = mat_dims(a);
    let mut out = vec![0.0; c];
    for i in 0..r {
        let row = &a.data[i * c..(i + 1) * c];
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    Tensor::vector(out)
}

/// Repeat a vector as the rows of a matrix: `[c] -> [rows, c]`.
pub fn broadcast_rows(v: &Tensor, rows: usize) -> Tensor {
    assert_eq!(v.shape.len(), 1, "broadcast_rows expects a vector");
    let c = v.numel();
    let mut out = Vec::with_capacity(rows * c);
    for _ in 0..rows {
        out.extend_from_slice(&v.data);
    }
    Tensor::matrix(rows, c, out)
}

/// Add a vector to every row of a matrix: `[r, c] + [c]`.
pub fn add_row_broadcast(m: &Tensor, b: &Tensor) -> Tensor {
    let (r, c) = mat_dims(m);
    assert_eq!(b.shape, vec![c], "bias shape {:?} does not match {c} columns", b.shape);
    let mut out = m.data.clone();
    for i in 0..r {
        let row = &mut out[i * c..(i + 1) * c];
        for (o, &bv) in row.iter_mut().zip(&b.data) {
            *o += bv;
        }
    }
    Tensor::matrix(r, c, out)
}

/// Mean softmax cross-entropy over a batch of logit rows.
///
/// `targets` holds one class index per row, stored as `f64` values that must
/// be non-negative integers below the column count. Returns the scalar loss.
pub fn softmax_cross_entropy(logits: &Tensor, targets: &Tensor) -> f64 {
    let (r, c) = mat_dims(logits);
    assert_eq!(targets.numel(), r, "one target per logit row required");
    let mut total = 0.0;
    for i in 0..r {
        let row = &logits.data[i * c..(i + 1) * c];
        let y = class_index(targets.data[i], c);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    total / r as f64
}

/// Gradient of [`softmax_cross_entropy`] with respect to the logits:
/// `(softmax(row) - onehot(target)) / rows`.
pub fn softmax_ce_grad_logits(logits: &Tensor, targets: &Tensor) -> Tensor {
    let (r, c) = mat_dims(logits);
    assert_eq!(targets.numel(), r, "one target per logit row required");
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = &logits.data[i * c..(i + 1) * c];
        let y = class_index(targets.data[i], c);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|&z| (z - m).exp()).sum();
        let orow = &mut out[i * c..(i + 1) * c];
        for (o, &z) in orow.iter_mut().zip(row) {
            *o = (z - m).exp() / denom / r as f64;
        }
        orow[y] -= 1.0 / r as f64;
    }
    Tensor::matrix(r, c, out)
}

pub(crate) fn class_index(value: f64, classes: usize) -> usize {
    assert!(
        value.fract() == 0.0 && value >= 0.0 && (value as usize) < classes,
        "target {value} is not a class index below {classes}"
    );
    value as usize
}

fn mat_dims(t: &Tensor) -> (usize, usize) {
    assert_eq!(t.shape.len(), 2, "expected a matrix, got shape {:?}", t.shape);
    (t.shape[0], t.shape[1])
}
