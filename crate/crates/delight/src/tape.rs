//! Dense f64 tensors recorded on a reverse-mode tape.
//!
//! A [`Tape`] owns every tensor produced during one forward pass, in the
//! order it was produced. Each non-leaf tensor carries a backward rule;
//! [`Tape::backward`] replays the rules in reverse, accumulating gradients
//! into every tensor that requires them. Replay is deterministic: the same
//! inputs give bit-identical values and gradients.
//!
//! The tape also counts fused multiply-add operations (MACs) performed by
//! matrix products, which is the cost model used by the accounting module.
//! Elementwise ops, normalization, softmax, and bias adds do not count.

use crate::error::{Error, Result};

/// Handle to a tensor stored on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct TensorId(pub(crate) usize);

/// Backward rule: given all tape nodes and the upstream gradient of this
/// node, accumulate into the gradient slots of its inputs.
pub(crate) type BackwardFn = Box<dyn Fn(&[Tensor], &[f64], &mut [Option<Vec<f64>>]) + Send>;

/// A dense tensor: row-major f64 data plus shape, living on a tape.
pub struct Tensor {
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<f64>,
    pub(crate) requires_grad: bool,
    pub(crate) grad: Option<Vec<f64>>,
    pub(crate) backward: Option<BackwardFn>,
}

impl Tensor {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Gradient accumulated by [`Tape::backward`], if any.
    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }
}

/// Recorded forward computation with a MAC counter.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Tensor>,
    pub(crate) macs: u64,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of tensors recorded so far.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Fused multiply-add count of all matrix products recorded so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn reset_macs(&mut self) {
        self.macs = 0;
    }

    /// Record an input tensor. `requires_grad` marks it as a gradient target.
    pub fn leaf(&mut self, data: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!(
                "leaf data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(self.push(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad,
            grad: None,
            backward: None,
        }))
    }

    /// Record a constant (no gradient).
    pub fn constant(&mut self, data: Vec<f64>, shape: &[usize]) -> Result<TensorId> {
        self.leaf(data, shape, false)
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub(crate) fn push(&mut self, t: Tensor) -> TensorId {
        debug_assert_eq!(t.shape.iter().product::<usize>(), t.data.len());
        self.nodes.push(t);
        TensorId(self.nodes.len() - 1)
    }

    pub(crate) fn push_op(
        &mut self,
        data: Vec<f64>,
        shape: Vec<usize>,
        requires_grad: bool,
        backward: BackwardFn,
    ) -> TensorId {
        self.push(Tensor {
            shape,
            data,
            requires_grad,
            grad: None,
            backward: if requires_grad { Some(backward) } else { None },
        })
    }

    pub(crate) fn any_requires_grad(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Run reverse-mode accumulation from a scalar root. Gradients land in
    /// the `grad` slot of every tensor with `requires_grad`, adding to any
    /// gradient already present.
    pub fn backward(&mut self, root: TensorId) -> Result<()> {
        let rid = root.0;
        if self.nodes[rid].data.len() != 1 {
            return Err(Error::invalid(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[rid].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[rid] = Some(vec![1.0]);
        for i in (0..=rid).rev() {
            let Some(dy) = grads[i].take() else { continue };
            if let Some(bwd) = &self.nodes[i].backward {
                bwd(&self.nodes, &dy, &mut grads);
            }
            if self.nodes[i].requires_grad {
                match &mut self.nodes[i].grad {
                    Some(acc) => acc.iter_mut().zip(&dy).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(dy),
                }
            }
        }
        Ok(())
    }
}

/// Get-or-create the gradient buffer for node `id`.
pub(crate) fn grad_slot<'a>(
    grads: &'a mut [Option<Vec<f64>>],
    nodes: &[Tensor],
    id: usize,
) -> &'a mut [f64] {
    grads[id].get_or_insert_with(|| vec![0.0; nodes[id].data.len()])
}

// ── Matrix kernels ───────────────────────────────────────────────────
//
// All kernels accumulate into `out`. Loop orders keep the innermost
// traversal contiguous for both operands.

/// out[m,n] += a[m,k] · b[k,n]
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[m,k] += dy[m,n] · b[k,n]ᵀ
pub(crate) fn matmul_nt_acc(dy: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let dyrow = &dy[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for kk in 0..k {
            let brow = &b[kk * n..(kk + 1) * n];
            let mut s = 0.0;
            for (dv, bv) in dyrow.iter().zip(brow) {
                s += dv * bv;
            }
            orow[kk] += s;
        }
    }
}

/// out[k,n] += a[m,k]ᵀ · dy[m,n]
pub(crate) fn matmul_tn_acc(a: &[f64], dy: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let dyrow = &dy[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[kk * n..(kk + 1) * n];
            for (o, &dv) in orow.iter_mut().zip(dyrow) {
                *o += av * dv;
            }
        }
    }
}
