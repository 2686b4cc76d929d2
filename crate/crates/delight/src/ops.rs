//! Differentiable tensor operations.
//!
//! Each op validates shapes, computes its value, and records a backward
//! rule on the tape. Matrix products are the only ops that advance the
//! MAC counter. Batched matmul broadcasts leading dimensions, so one
//! weight matrix can serve every sequence in a batch.

use crate::error::{Error, Result};
use crate::tape::{
    grad_slot, matmul_acc, matmul_nt_acc, matmul_tn_acc, BackwardFn, Tape, TensorId,
};
use rand::Rng;

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// Broadcast two sets of leading (batch) dimensions and return the
/// broadcast shape plus, for each flat output batch index, the source
/// batch offset into each operand.
fn broadcast_batches(
    op: &'static str,
    a: &[usize],
    b: &[usize],
) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let rank = a.len().max(b.len());
    let dim = |s: &[usize], i: usize| {
        let lead = rank - s.len();
        if i >= lead {
            s[i - lead]
        } else {
            1
        }
    };
    let mut out = Vec::with_capacity(rank);
    for i in 0..rank {
        let (da, db) = (dim(a, i), dim(b, i));
        out.push(match (da, db) {
            _ if da == db => da,
            (1, _) => db,
            (_, 1) => da,
            _ => return Err(shape_err(op, a, b)),
        });
    }
    let aoffs = batch_offsets(a, &out);
    let boffs = batch_offsets(b, &out);
    Ok((out, aoffs, boffs))
}

/// Flat source offsets of `shape` under the broadcast iteration order of
/// `out`. Broadcast dimensions get stride zero.
fn batch_offsets(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let lead = rank - shape.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        strides[lead + i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    let count: usize = out.iter().product();
    let mut offs = Vec::with_capacity(count);
    for idx in 0..count {
        let (mut rem, mut off) = (idx, 0);
        for i in (0..rank).rev() {
            off += (rem % out[i]) * strides[i];
            rem /= out[i];
        }
        offs.push(off);
    }
    offs
}

impl Tape {
    /// Matrix product over the last two axes, broadcasting leading axes.
    /// Adds `batches * m * k * n` to the MAC counter.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let ash = self.shape(a).to_vec();
        let bsh = self.shape(b).to_vec();
        if ash.len() < 2 || bsh.len() < 2 || ash[ash.len() - 1] != bsh[bsh.len() - 2] {
            return Err(shape_err("matmul", &ash, &bsh));
        }
        let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let n = bsh[bsh.len() - 1];
        let (mut oshape, aoffs, boffs) =
            broadcast_batches("matmul", &ash[..ash.len() - 2], &bsh[..bsh.len() - 2])?;
        let bcount = aoffs.len();
        let mut out = vec![0.0; bcount * m * n];
        {
            let ad = self.value(a);
            let bd = self.value(b);
            for i in 0..bcount {
                matmul_acc(
                    &ad[aoffs[i] * m * k..][..m * k],
                    &bd[boffs[i] * k * n..][..k * n],
                    m,
                    k,
                    n,
                    &mut out[i * m * n..][..m * n],
                );
            }
        }
        self.macs += (bcount * m * k * n) as u64;
        oshape.push(m);
        oshape.push(n);
        let req = self.any_requires_grad(&[a, b]);
        let (ai, bi) = (a.0, b.0);
        let bwd: BackwardFn = Box::new(move |nodes, dy, grads| {
            if nodes[ai].requires_grad {
                let bd = &nodes[bi].data;
                let ga = grad_slot(grads, nodes, ai);
                for i in 0..bcount {
                    matmul_nt_acc(
                        &dy[i * m * n..][..m * n],
                        &bd[boffs[i] * k * n..][..k * n],
                        m,
                        k,
                        n,
                        &mut ga[aoffs[i] * m * k..][..m * k],
                    );
                }
            }
            if nodes[bi].requires_grad {
                let ad = &nodes[ai].data;
                let gb = grad_slot(grads, nodes, bi);
                for i in 0..bcount {
                    matmul_tn_acc(
                        &ad[aoffs[i] * m * k..][..m * k],
                        &dy[i * m * n..][..m * n],
                        m,
                        k,
                        n,
                        &mut gb[boffs[i] * k * n..][..k * n],
                    );
                }
            }
        });
        Ok(self.push_op(out, oshape, req, bwd))
    }

    /// Swap the last two axes.
    pub fn transpose_last(&mut self, x: TensorId) -> Result<TensorId> {
        let sh = self.shape(x).to_vec();
        if sh.len() < 2 {
            return Err(Error::invalid(format!(
                "transpose_last needs rank >= 2, got {sh:?}"
            )));
        }
        let (r, c) = (sh[sh.len() - 2], sh[sh.len() - 1]);
        let batch: usize = sh[..sh.len() - 2].iter().product();
        let xd = self.value(x);
        let mut out = vec![0.0; xd.len()];
        for bi in 0..batch {
            let src = &xd[bi * r * c..][..r * c];
            let dst = &mut out[bi * r * c..][..r * c];
            for i in 0..r {
                for j in 0..c {
                    dst[j * r + i] = src[i * c + j];
                }
            }
        }
        let mut oshape = sh.clone();
        let l = oshape.len();
        oshape.swap(l - 2, l - 1);
        let req = self.nodes[x.0].requires_grad;
        let xi = x.0;
        let bwd: BackwardFn = Box::new(move |nodes, dy, grads| {
            if !nodes[xi].requires_grad {
                return;
            }
            let g = grad_slot(grads, nodes, xi);
            for bi in 0..batch {
                let d = &dy[bi * r * c..][..r * c];
                let gs = &mut g[bi * r * c..][..r * c];
                for i in 0..r {
                    for j in 0..c {
                        gs[i * c + j] += d[j * r + i];
                    }
                }
            }
        });
        Ok(self.push_op(out, oshape, req, bwd))
    }

    /// Reinterpret the data with a new shape of equal element count.
    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).len() || shape.iter().any(|&d| d == 0) {
            return Err(shape_err("reshape", self.shape(x), shape));
        }
        let out = self.value(x).to_vec();
        let req = self.nodes[x.0].requires_grad;
        let xi = x.0;
        let bwd: BackwardFn = Box::new(move |nodes, dy, grads| {
            if !nodes[xi].requires_grad {
                return;
            }
            let g = grad_slot(grads, nodes, xi);
            g.iter_mut().zip(dy).for_each(|(a, b)| *a += b);
        });
        Ok(self.push_op(out, shape.to_vec(), req, bwd))
    }

    /// Elementwise sum. `b` may have any trailing suffix of `a`'s shape
    /// (a `[d]` bias against a `[batch, seq, d]` activation, for example)
    /// and is repeated over the leading axes.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let ash = self.shape(a).to_vec();
        let bsh = self.shape(b).to_vec();
        if bsh.len() > ash.len() || ash[ash.len() - bsh.len()..] != bsh[..] {
            return Err(shape_err("add", &ash, &bsh));
        }
        let bn = self.value(b).len();
        let mut out = self.value(a).to_vec();
        let bd = self.value(b);
        for chunk in out.chunks_mut(bn) {
            chunk.iter_mut().zip(bd).for_each(|(o, v)| *o += v);
        }
        let req = self.any_requires_grad(&[a, b]);
        let (ai, bi) = (a.0, b.0);
        let bwd: BackwardFn = Box::new(move |nodes, dy, grads| {
            if nodes[ai].requires_grad {
                let g = grad_slot(grads, nodes, ai);
                g.iter_mut().zip(dy).for_each(|(x, y)| *x += y);
            }
            if nodes[bi].requires_grad {
                let g = grad_slot(grads, nodes, bi);
                for chunk in dy.chunks(bn) {
                    g.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                }
            }
        });
        Ok(self.push_op(out, ash, req, bwd))
    }

    /// Multiply every element by a constant.
    pub fn scale(&mut self, x: TensorId, c: f64) -> Result<TensorId> {
        let out: Vec<f64> = self.value(x).iter().map(|&v| c * v).collect();
        let sh = self.shape(x).to_vec();
        let req = self.nodes[x.0].requires_grad;
        let xi = x.0;
        let bwd: BackwardFn = Box::new(move |nodes, dy, grads| {
            if !nodes[xi].requires_grad {
                return;
            }
            let g = grad_slot(grads, nodes, xi);
            g.iter_mut().zip(dy).for_each(|(a, b)| *a += c * b);
        });
        Ok(self.push_op(out, sh, req, bwd))
    }

    /// Elementwise product of two tensors of identical shape.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mul", self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let sh = self.shape(a).to_vec();
        let req = self.any_requires_grad(&[a, b]);
        let (ai, bi) = (a.0, b.0);
        let bwd: BackwardFn = Box::new(move |nodes, dy, grads| {
            if nodes[ai].requires_grad {
                let bd = &nodes[bi].data;
                let g = grad_slot(grads, nodes, ai);
                for i in 0..g.len() {
                    g[i] += dy[i] * bd[i];
                }
            }
            if nodes[bi].requires_grad {
                let ad = &nodes[ai].data;
                let g = grad_slot(grads, nodes, bi);
                for i in 0..g.len() {
                    g[i] += dy[i] * ad[i];
                }
            }
        });
        Ok(self.push_op(out, sh, req, bwd))
    }

    /// Concatenate tensors along `axis`. All other axes must agree.
    pub fn concat(&mut self, axis: usize, parts: &[TensorId]) -> Result<TensorId> {
        let Some((&head, _)) = parts.split_first() else {
            return Err(Error::invalid("concat needs at least one input"));
        };
        let first = self.shape(head).to_vec();
        if axis >= first.len() {
            return Err(Error::invalid(format!(
                "concat axis {axis} out of range for rank {}",
                first.len()
            )));
        }
        let mut axis_sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let sh = self.shape(p);
            let compatible = sh.len() == first.len()
                && sh
                    .iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(shape_err("concat", &first, sh));
            }
            axis_sizes.push(sh[axis]);
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let total: usize = axis_sizes.iter().sum();
        let mut oshape = first;
        oshape[axis] = total;
        let mut out = vec![0.0; outer * total * inner];
        for o in 0..outer {
            let mut dst = o * total * inner;
            for (pi, &p) in parts.iter().enumerate() {
                let s = axis_sizes[pi] * inner;
                out[dst..dst + s].copy_from_slice(&self.value(p)[o * s..][..s]);
                dst += s;
            }
        }
        let req = self.any_requires_grad(parts);
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let bwd: BackwardFn = Box::new(move |nodes, dy, grads| {
            let mut start = 0usize;
            for (pi, &id) in ids.iter().enumerate() {
                let s = axis_sizes[pi] * inner;
                if nodes[id].requires_grad {
                    let g = grad_slot(grads, nodes, id);
                    for o in 0..outer {
                        let src = &dy[o * total * inner + start..][..s];
                        g[o * s..][..s].iter_mut().zip(src).for_each(|(a, b)| *a += b);
                    }
                }
                start += s;
            }
        });
        Ok(self.push_op(out, oshape, req, bwd))
    }

    /// Partition `axis` into consecutive chunks of the given sizes.
    pub fn split(&mut self, x: TensorId, axis: usize, sizes: &[usize]) -> Result<Vec<TensorId>> {
        let sh = self.shape(x).to_vec();
        if axis >= sh.len()
            || sizes.is_empty()
            || sizes.iter().any(|&s| s == 0)
            || sizes.iter().sum::<usize>() != sh[axis]
        {
            return Err(Error::invalid(format!(
                "split sizes {sizes:?} invalid for axis {axis} of shape {sh:?}"
            )));
        }
        let outer: usize = sh[..axis].iter().product();
        let inner: usize = sh[axis + 1..].iter().product();
        let total = sh[axis];
        let req = self.nodes[x.0].requires_grad;
        let xi = x.0;
        let mut outs = Vec::with_capacity(sizes.len());
        let mut start = 0usize;
        for &s in sizes {
            let blk = s * inner;
            let mut data = vec![0.0; outer * blk];
            {
                let xd = self.value(x);
                for o in 0..outer {
                    data[o * blk..][..blk]
                        .copy_from_slice(&xd[(o * total + start) * inner..][..blk]);
                }
            }
            let mut oshape = sh.clone();
            oshape[axis] = s;
            let st = start;
            let bwd: BackwardFn = Box::new(move |nodes, dy, grads| {
                if !nodes[xi].requires_grad {
                    return;
                }
                let g = grad_slot(grads, nodes, xi);
                for o in 0..outer {
                    let dst = &mut g[(o * total + st) * inner..][..blk];
                    dst.iter_mut()
                        .zip(&dy[o * blk..][..blk])
                        .for_each(|(a, b)| *a += b);
                }
            });
            outs.push(self.push_op(data, oshape, req, bwd));
            start += s;
        }
        Ok(outs)
    }

    /// Reorder the last axis: `out[..., j] = x[..., perm[j]]`.
    pub fn permute_features(&mut self, x: TensorId, perm: &[usize]) -> Result<TensorId> {
        let sh = self.shape(x).to_vec();
        let Some(&d) = sh.last() else {
            return Err(Error::invalid("permute_features needs rank >= 1"));
        };
        let mut seen = vec![false; d];
        let valid = perm.len() == d
            && perm.iter().all(|&p| {
                p < d && !std::mem::replace(&mut seen[p], true)
            });
        if !valid {
            return Err(Error::invalid(format!(
                "perm {perm:?} is not a permutation of 0..{d}"
            )));
        }
        let xd = self.value(x);
        let rows = xd.len() / d;
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let src = &xd[r * d..][..d];
            let dst = &mut out[r * d..][..d];
            for (j, &p) in perm.iter().enumerate() {
                dst[j] = src[p];
            }
        }
        let req = self.nodes[x.0].requires_grad;
        let xi = x.0;
        let perm = perm.to_vec();
        let bwd: BackwardFn = Box::new(move |nodes, dy, grads| {
            if !nodes[xi].requires_grad {
                return;
            }
            let g = grad_slot(grads, nodes, xi);
            for r in 0..rows {
                let d_row = &dy[r * d..][..d];
                let g_row = &mut g[r * d..][..d];
                for (j, &p) in perm.iter().enumerate() {
                    g_row[p] += d_row[j];
                }
            }
        });
        Ok(self.push_op(out, sh, req, bwd))
    }

    /// GELU activation, tanh approximation.
    pub fn gelu(&mut self, x: TensorId) -> Result<TensorId> {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const A: f64 = 0.044_715;
        let out: Vec<f64> = self
            .value(x)
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (C * (v + A * v * v * v)).tanh()))
            .collect();
        let sh = self.shape(x).to_vec();
        let req = self.nodes[x.0].requires_grad;
        let xi = x.0;
        let bwd: BackwardFn = Box::new(move |nodes, dy, grads| {
            if !nodes[xi].requires_grad {
                return;
            }
            let xd = &nodes[xi].data;
            let g = grad_slot(grads, nodes, xi);
            for i in 0..g.len() {
                let v = xd[i];
                let t = (C * (v + A * v * v * v)).tanh();
                let sech2 = 1.0 - t * t;
                let slope = 0.5 * (1.0 + t) + 0.5 * v * sech2 * C * (1.0 + 3.0 * A * v * v);
                g[i] += dy[i] * slope;
            }
        });
        Ok(self.push_op(out, sh, req, bwd))
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        let sh = self.shape(x).to_vec();
        let Some(&d) = sh.last() else {
            return Err(Error::invalid("layer_norm needs rank >= 1"));
        };
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(shape_err("layer_norm", &sh, self.shape(gain)));
        }
        let xd = self.value(x);
        let rows = xd.len() / d;
        let mut xhat = vec![0.0; xd.len()];
        let mut inv = vec![0.0; rows];
        for r in 0..rows {
            let row = &xd[r * d..][..d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let iv = 1.0 / (var + eps).sqrt();
            inv[r] = iv;
            for j in 0..d {
                xhat[r * d + j] = (row[j] - mean) * iv;
            }
        }
        let gd = self.value(gain);
        let bd = self.value(bias);
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            for j in 0..d {
                out[r * d + j] = gd[j] * xhat[r * d + j] + bd[j];
            }
        }
        let req = self.any_requires_grad(&[x, gain, bias]);
        let (xi, gi, bi) = (x.0, gain.0, bias.0);
        let bwd: BackwardFn = Box::new(move |nodes, dy, grads| {
            if nodes[gi].requires_grad {
                let g = grad_slot(grads, nodes, gi);
                for r in 0..rows {
                    for j in 0..d {
                        g[j] += dy[r * d + j] * xhat[r * d + j];
                    }
                }
            }
            if nodes[bi].requires_grad {
                let g = grad_slot(grads, nodes, bi);
                for r in 0..rows {
                    for j in 0..d {
                        g[j] += dy[r * d + j];
                    }
                }
            }
            if nodes[xi].requires_grad {
                let gd = &nodes[gi].data;
                let g = grad_slot(grads, nodes, xi);
                let mut dxh = vec![0.0; d];
                for r in 0..rows {
                    let xh = &xhat[r * d..][..d];
                    for j in 0..d {
                        dxh[j] = dy[r * d + j] * gd[j];
                    }
                    let m1 = dxh.iter().sum::<f64>() / d as f64;
                    let m2 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        g[r * d + j] += inv[r] * (dxh[j] - m1 - xh[j] * m2);
                    }
                }
            }
        });
        Ok(self.push_op(out, sh, req, bwd))
    }

    /// Inverted dropout. Identity when not training or `p == 0`; otherwise
    /// zeroes each element with probability `p` and scales survivors by
    /// `1/(1-p)`.
    pub fn dropout<R: Rng>(
        &mut self,
        x: TensorId,
        p: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<TensorId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("dropout rate {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - p;
        let factors: Vec<f64> = self
            .value(x)
            .iter()
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let out: Vec<f64> = self
            .value(x)
            .iter()
            .zip(&factors)
            .map(|(v, f)| v * f)
            .collect();
        let sh = self.shape(x).to_vec();
        let req = self.nodes[x.0].requires_grad;
        let xi = x.0;
        let bwd: BackwardFn = Box::new(move |nodes, dy, grads| {
            if !nodes[xi].requires_grad {
                return;
            }
            let g = grad_slot(grads, nodes, xi);
            for i in 0..g.len() {
                g[i] += dy[i] * factors[i];
            }
        });
        Ok(self.push_op(out, sh, req, bwd))
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, x: TensorId) -> Result<TensorId> {
        let sh = self.shape(x).to_vec();
        let Some(&d) = sh.last() else {
            return Err(Error::invalid("softmax needs rank >= 1"));
        };
        let xd = self.value(x);
        let rows = xd.len() / d;
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..][..d];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let dst = &mut out[r * d..][..d];
            let mut sum = 0.0;
            for j in 0..d {
                dst[j] = (row[j] - max).exp();
                sum += dst[j];
            }
            dst.iter_mut().for_each(|v| *v /= sum);
        }
        let req = self.nodes[x.0].requires_grad;
        let xi = x.0;
        let oid = self.nodes.len();
        let bwd: BackwardFn = Box::new(move |nodes, dy, grads| {
            if !nodes[xi].requires_grad {
                return;
            }
            let y = &nodes[oid].data;
            let g = grad_slot(grads, nodes, xi);
            for r in 0..rows {
                let yr = &y[r * d..][..d];
                let dr = &dy[r * d..][..d];
                let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                let gr = &mut g[r * d..][..d];
                for j in 0..d {
                    gr[j] += yr[j] * (dr[j] - dot);
                }
            }
        });
        Ok(self.push_op(out, sh, req, bwd))
    }

    /// Look up rows of a `[vocab, d]` table, producing `batch_shape + [d]`.
    /// The backward pass scatter-adds into the table gradient.
    pub fn gather_rows(
        &mut self,
        table: TensorId,
        indices: &[usize],
        batch_shape: &[usize],
    ) -> Result<TensorId> {
        let tsh = self.shape(table).to_vec();
        if tsh.len() != 2 {
            return Err(Error::invalid(format!(
                "gather_rows table must be rank 2, got {tsh:?}"
            )));
        }
        let (v, d) = (tsh[0], tsh[1]);
        if indices.len() != batch_shape.iter().product::<usize>() {
            return Err(Error::invalid(format!(
                "{} indices do not fill batch shape {batch_shape:?}",
                indices.len()
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(Error::invalid(format!(
                "index {bad} out of range for table with {v} rows"
            )));
        }
        let td = self.value(table);
        let mut out = vec![0.0; indices.len() * d];
        for (r, &idx) in indices.iter().enumerate() {
            out[r * d..][..d].copy_from_slice(&td[idx * d..][..d]);
        }
        let mut oshape = batch_shape.to_vec();
        oshape.push(d);
        let req = self.nodes[table.0].requires_grad;
        let ti = table.0;
        let indices = indices.to_vec();
        let bwd: BackwardFn = Box::new(move |nodes, dy, grads| {
            if !nodes[ti].requires_grad {
                return;
            }
            let g = grad_slot(grads, nodes, ti);
            for (r, &idx) in indices.iter().enumerate() {
                let dst = &mut g[idx * d..][..d];
                dst.iter_mut()
                    .zip(&dy[r * d..][..d])
                    .for_each(|(a, b)| *a += b);
            }
        });
        Ok(self.push_op(out, oshape, req, bwd))
    }

    /// Label-smoothed cross entropy, averaged over non-pad rows.
    ///
    /// `logits` must be `[rows, vocab]`. Each smoothed target puts mass
    /// `1 - eps` on the gold class and spreads `eps` uniformly over the
    /// remaining `vocab - 1` classes. Rows whose target equals `pad` are
    /// excluded from both loss and gradient.
    pub fn cross_entropy_smoothed(
        &mut self,
        logits: TensorId,
        targets: &[usize],
        eps: f64,
        pad: Option<usize>,
    ) -> Result<TensorId> {
        let sh = self.shape(logits).to_vec();
        if sh.len() != 2 {
            return Err(Error::invalid(format!(
                "cross entropy expects [rows, vocab] logits, got {sh:?}"
            )));
        }
        let (rows, v) = (sh[0], sh[1]);
        if targets.len() != rows {
            return Err(Error::invalid(format!(
                "{} targets for {rows} logit rows",
                targets.len()
            )));
        }
        if !(0.0..1.0).contains(&eps) {
            return Err(Error::invalid(format!("smoothing {eps} outside [0, 1)")));
        }
        if eps > 0.0 && v < 2 {
            return Err(Error::invalid("label smoothing needs vocab >= 2"));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::invalid(format!(
                "target {bad} out of range for vocab {v}"
            )));
        }
        let count = targets.iter().filter(|&&t| Some(t) != pad).count();
        if count == 0 {
            return Err(Error::invalid("all target rows are padding"));
        }
        let off = if eps > 0.0 { eps / (v - 1) as f64 } else { 0.0 };
        let xd = self.value(logits);
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if Some(t) == pad {
                continue;
            }
            let row = &xd[r * v..][..v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            let rowsum: f64 = row.iter().sum();
            loss += lse - (1.0 - eps) * row[t] - off * (rowsum - row[t]);
        }
        loss /= count as f64;
        let req = self.nodes[logits.0].requires_grad;
        let li = logits.0;
        let targets = targets.to_vec();
        let bwd: BackwardFn = Box::new(move |nodes, dy, grads| {
            if !nodes[li].requires_grad {
                return;
            }
            let xd = &nodes[li].data;
            let g = grad_slot(grads, nodes, li);
            let scale = dy[0] / count as f64;
            for (r, &t) in targets.iter().enumerate() {
                if Some(t) == pad {
                    continue;
                }
                let row = &xd[r * v..][..v];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = row.iter().map(|&x| (x - max).exp()).sum();
                let gr = &mut g[r * v..][..v];
                for j in 0..v {
                    let p = (row[j] - max).exp() / sum;
                    let q = if j == t { 1.0 - eps } else { off };
                    gr[j] += scale * (p - q);
                }
            }
        });
        Ok(self.push_op(vec![loss], vec![1], req, bwd))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum_all(&mut self, x: TensorId) -> Result<TensorId> {
        let s: f64 = self.value(x).iter().sum();
        let req = self.nodes[x.0].requires_grad;
        let xi = x.0;
        let bwd: BackwardFn = Box::new(move |nodes, dy, grads| {
            if !nodes[xi].requires_grad {
                return;
            }
            let g = grad_slot(grads, nodes, xi);
            g.iter_mut().for_each(|v| *v += dy[0]);
        });
        Ok(self.push_op(vec![s], vec![1], req, bwd))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
    }

    /// Central-difference gradient of `f` at `x`, coordinate `i`.
    fn fd(f: &dyn Fn(&[f64]) -> f64, x: &[f64], i: usize) -> f64 {
        let h = 1e-5;
        let mut xp = x.to_vec();
        xp[i] += h;
        let mut xm = x.to_vec();
        xm[i] -= h;
        (f(&xp) - f(&xm)) / (2.0 * h)
    }

    /// Weighted sum of the op output, so every coordinate influences the
    /// scalar loss differently.
    fn weights(n: usize) -> Vec<f64> {
        (0..n).map(|i| 0.3 + 0.7 * ((i * 2654435761) % 97) as f64 / 97.0).collect()
    }

    fn weighted_sum(t: &mut Tape, y: TensorId) -> TensorId {
        let w_data = weights(t.value(y).len());
        let w_shape = t.shape(y).to_vec();
        let w = t.constant(w_data, &w_shape).unwrap();
        let p = t.mul(y, w).unwrap();
        t.sum_all(p).unwrap()
    }

    fn check_input_grad(build: &dyn Fn(&mut Tape, TensorId) -> TensorId, x: &[f64], shape: &[usize]) {
        let f = |v: &[f64]| {
            let mut t = Tape::new();
            let xi = t.leaf(v.to_vec(), shape, true).unwrap();
            let y = build(&mut t, xi);
            let s = weighted_sum(&mut t, y);
            t.value(s)[0]
        };
        let mut t = Tape::new();
        let xi = t.leaf(x.to_vec(), shape, true).unwrap();
        let y = build(&mut t, xi);
        let s = weighted_sum(&mut t, y);
        t.backward(s).unwrap();
        let grad = t.grad(xi).unwrap().to_vec();
        for i in 0..x.len() {
            let n = fd(&f, x, i);
            assert!(
                close(grad[i], n, 1e-6),
                "coordinate {i}: analytic {} vs numeric {n}",
                grad[i]
            );
        }
    }

    #[test]
    fn matmul_known_product_and_grads() {
        let mut t = Tape::new();
        let a = t.leaf(vec![1.0, 2.0], &[1, 2], true).unwrap();
        let b = t.leaf(vec![3.0, 4.0], &[2, 1], true).unwrap();
        let y = t.matmul(a, b).unwrap();
        assert_eq!(t.value(y), &[11.0]);
        assert_eq!(t.shape(y), &[1, 1]);
        let s = t.sum_all(y).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(a).unwrap(), &[3.0, 4.0]);
        assert_eq!(t.grad(b).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn matmul_counts_macs() {
        let mut t = Tape::new();
        let a = t.leaf(vec![0.5; 15], &[5, 3], false).unwrap();
        let b = t.leaf(vec![0.25; 21], &[3, 7], false).unwrap();
        t.matmul(a, b).unwrap();
        assert_eq!(t.macs(), 105);
        let c = t.leaf(vec![1.0; 30], &[2, 5, 3], false).unwrap();
        t.matmul(c, b).unwrap();
        assert_eq!(t.macs(), 105 + 210);
    }

    #[test]
    fn matmul_broadcasts_weight_over_batch() {
        let a_data: Vec<f64> = (0..12).map(|i| i as f64 * 0.5 - 2.0).collect();
        let b_data: Vec<f64> = (0..6).map(|i| 0.3 * i as f64 - 1.0).collect();
        let mut t = Tape::new();
        let a = t.leaf(a_data.clone(), &[2, 2, 3], true).unwrap();
        let b = t.leaf(b_data.clone(), &[3, 2], true).unwrap();
        let y = t.matmul(a, b).unwrap();
        assert_eq!(t.shape(y), &[2, 2, 2]);
        for batch in 0..2 {
            let mut expect = [0.0; 4];
            matmul_acc(&a_data[batch * 6..][..6], &b_data, 2, 3, 2, &mut expect);
            assert_eq!(&t.value(y)[batch * 4..][..4], &expect);
        }
        let s = t.sum_all(y).unwrap();
        t.backward(s).unwrap();
        let f = |v: &[f64]| {
            let mut t = Tape::new();
            let a = t.leaf(a_data.clone(), &[2, 2, 3], false).unwrap();
            let b = t.leaf(v.to_vec(), &[3, 2], false).unwrap();
            let y = t.matmul(a, b).unwrap();
            t.value(y).iter().sum()
        };
        let gb = t.grad(b).unwrap();
        for i in 0..6 {
            assert!(close(gb[i], fd(&f, &b_data, i), 1e-6));
        }
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut t = Tape::new();
        let a = t.leaf(vec![0.0; 6], &[2, 3], false).unwrap();
        let b = t.leaf(vec![0.0; 6], &[2, 3], false).unwrap();
        assert!(t.matmul(a, b).is_err());
    }

    #[test]
    fn softmax_matches_hand_value() {
        let mut t = Tape::new();
        let x = t
            .leaf(vec![1.0_f64.ln(), 3.0_f64.ln()], &[2], true)
            .unwrap();
        let y = t.softmax_last(x).unwrap();
        assert!(close(t.value(y)[0], 0.25, 1e-12));
        assert!(close(t.value(y)[1], 0.75, 1e-12));
    }

    #[test]
    fn softmax_grad_matches_finite_difference() {
        check_input_grad(
            &|t, x| t.softmax_last(x).unwrap(),
            &[0.2, -1.4, 3.0, 0.7, 0.7, -0.1],
            &[2, 3],
        );
    }

    #[test]
    fn gelu_grad_matches_finite_difference() {
        check_input_grad(
            &|t, x| t.gelu(x).unwrap(),
            &[-3.0, -1.0, -0.1, 0.0, 0.1, 1.0, 3.0],
            &[7],
        );
    }

    #[test]
    fn layer_norm_grads_match_finite_difference() {
        let x = [0.4, -1.2, 2.2, 0.0, 0.6, -0.5];
        check_input_grad(
            &|t, xi| {
                let gain = t.constant(vec![1.2, 0.8, -0.4], &[3]).unwrap();
                let bias = t.constant(vec![0.1, -0.2, 0.3], &[3]).unwrap();
                t.layer_norm(xi, gain, bias, 1e-5).unwrap()
            },
            &x,
            &[2, 3],
        );
        // Gain and bias gradients.
        let gvals = [1.2, 0.8, -0.4];
        let f = |v: &[f64]| {
            let mut t = Tape::new();
            let xi = t.constant(x.to_vec(), &[2, 3]).unwrap();
            let gain = t.leaf(v.to_vec(), &[3], false).unwrap();
            let bias = t.constant(vec![0.1, -0.2, 0.3], &[3]).unwrap();
            let y = t.layer_norm(xi, gain, bias, 1e-5).unwrap();
            let w = t.constant(weights(6), &[2, 3]).unwrap();
            let p = t.mul(y, w).unwrap();
            let s = t.sum_all(p).unwrap();
            t.value(s)[0]
        };
        let mut t = Tape::new();
        let xi = t.constant(x.to_vec(), &[2, 3]).unwrap();
        let gain = t.leaf(gvals.to_vec(), &[3], true).unwrap();
        let bias = t.leaf(vec![0.1, -0.2, 0.3], &[3], true).unwrap();
        let y = t.layer_norm(xi, gain, bias, 1e-5).unwrap();
        let w = t.constant(weights(6), &[2, 3]).unwrap();
        let p = t.mul(y, w).unwrap();
        let s = t.sum_all(p).unwrap();
        t.backward(s).unwrap();
        let gg = t.grad(gain).unwrap();
        for i in 0..3 {
            assert!(close(gg[i], fd(&f, &gvals, i), 1e-6));
        }
        assert!(t.grad(bias).is_some());
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln2() {
        let mut t = Tape::new();
        let logits = t.leaf(vec![0.0, 0.0], &[1, 2], true).unwrap();
        let loss = t
            .cross_entropy_smoothed(logits, &[0], 0.1, None)
            .unwrap();
        assert!(close(t.value(loss)[0], 2.0_f64.ln(), 1e-12));
    }

    #[test]
    fn cross_entropy_skips_pad_rows() {
        let mut t = Tape::new();
        let logits = t
            .leaf(vec![2.0, -1.0, 0.5, 9.0, -9.0, 3.0], &[2, 3], true)
            .unwrap();
        let loss = t
            .cross_entropy_smoothed(logits, &[2, 0], 0.1, Some(0))
            .unwrap();
        // Only the first row contributes.
        let row = [2.0, -1.0, 0.5];
        let max: f64 = 2.0;
        let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
        let expect = lse - 0.9 * row[2] - 0.05 * (row[0] + row[1]);
        assert!(close(t.value(loss)[0], expect, 1e-12));
        t.backward(loss).unwrap();
        let g = t.grad(logits).unwrap();
        assert!(g[3..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cross_entropy_grad_matches_finite_difference() {
        check_input_grad(
            &|t, x| t.cross_entropy_smoothed(x, &[1, 3], 0.1, None).unwrap(),
            &[0.2, 1.4, -0.3, 0.8, 2.0, -1.0, 0.0, 0.5],
            &[2, 4],
        );
    }

    #[test]
    fn cross_entropy_rejects_all_pad() {
        let mut t = Tape::new();
        let logits = t.leaf(vec![0.0; 4], &[2, 2], true).unwrap();
        assert!(t.cross_entropy_smoothed(logits, &[0, 0], 0.1, Some(0)).is_err());
    }

    #[test]
    fn permute_features_reorders_and_inverts() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0, 2.0, 3.0, 4.0], &[4], true).unwrap();
        let y = t.permute_features(x, &[0, 2, 1, 3]).unwrap();
        assert_eq!(t.value(y), &[1.0, 3.0, 2.0, 4.0]);
        check_input_grad(
            &|t, x| t.permute_features(x, &[2, 0, 3, 1]).unwrap(),
            &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0],
            &[2, 4],
        );
        let mut t = Tape::new();
        let x = t.leaf(vec![0.0; 4], &[4], true).unwrap();
        assert!(t.permute_features(x, &[0, 0, 1, 2]).is_err());
        assert!(t.permute_features(x, &[0, 1]).is_err());
    }

    #[test]
    fn concat_then_split_round_trips() {
        let mut t = Tape::new();
        let a = t.leaf(vec![1.0, 2.0, 5.0, 6.0], &[2, 2], true).unwrap();
        let b = t.leaf(vec![3.0, 7.0], &[2, 1], true).unwrap();
        let y = t.concat(1, &[a, b]).unwrap();
        assert_eq!(t.value(y), &[1.0, 2.0, 3.0, 5.0, 6.0, 7.0]);
        let parts = t.split(y, 1, &[2, 1]).unwrap();
        assert_eq!(t.value(parts[0]), t.value(a));
        assert_eq!(t.value(parts[1]), t.value(b));
        let s = t.sum_all(parts[1]).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(a).unwrap(), &[0.0; 4]);
        assert_eq!(t.grad(b).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn concat_axis_zero_stacks_rows() {
        let mut t = Tape::new();
        let a = t.leaf(vec![1.0, 2.0], &[1, 2], false).unwrap();
        let b = t.leaf(vec![3.0, 4.0], &[1, 2], false).unwrap();
        let y = t.concat(0, &[a, b]).unwrap();
        assert_eq!(t.shape(y), &[2, 2]);
        assert_eq!(t.value(y), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn add_broadcasts_suffix() {
        let mut t = Tape::new();
        let a = t.leaf(vec![1.0, 2.0, 3.0, 4.0], &[2, 2], true).unwrap();
        let b = t.leaf(vec![10.0, 20.0], &[2], true).unwrap();
        let y = t.add(a, b).unwrap();
        assert_eq!(t.value(y), &[11.0, 22.0, 13.0, 24.0]);
        let s = t.sum_all(y).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(a).unwrap(), &[1.0; 4]);
        assert_eq!(t.grad(b).unwrap(), &[2.0, 2.0]);
        let c = t.leaf(vec![0.0; 3], &[3], false).unwrap();
        assert!(t.add(a, c).is_err());
    }

    #[test]
    fn transpose_and_reshape_invert() {
        check_input_grad(
            &|t, x| {
                let y = t.transpose_last(x).unwrap();
                t.reshape(y, &[6]).unwrap()
            },
            &[1.0, -2.0, 3.0, 0.5, 0.0, 4.0],
            &[2, 3],
        );
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3], false).unwrap();
        let y = t.transpose_last(x).unwrap();
        assert_eq!(t.value(y), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn gather_rows_looks_up_and_scatters() {
        let mut t = Tape::new();
        let table = t
            .leaf(vec![0.0, 1.0, 10.0, 11.0, 20.0, 21.0], &[3, 2], true)
            .unwrap();
        let y = t.gather_rows(table, &[2, 0, 2], &[3]).unwrap();
        assert_eq!(t.value(y), &[20.0, 21.0, 0.0, 1.0, 20.0, 21.0]);
        let s = t.sum_all(y).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(table).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
        assert!(t.gather_rows(table, &[3], &[1]).is_err());
    }

    #[test]
    fn dropout_is_identity_when_disabled() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0, 2.0], &[2], true).unwrap();
        assert_eq!(t.dropout(x, 0.5, false, &mut rng).unwrap(), x);
        assert_eq!(t.dropout(x, 0.0, true, &mut rng).unwrap(), x);
    }

    #[test]
    fn dropout_scales_survivors() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0; 1000], &[1000], true).unwrap();
        let y = t.dropout(x, 0.25, true, &mut rng).unwrap();
        let vals = t.value(y).to_vec();
        assert!(vals.iter().all(|&v| v == 0.0 || close(v, 4.0 / 3.0, 1e-12)));
        let kept = vals.iter().filter(|&&v| v != 0.0).count();
        assert!((650..850).contains(&kept), "kept {kept} of 1000 at p=0.25");
        let s = t.sum_all(y).unwrap();
        t.backward(s).unwrap();
        let g = t.grad(x).unwrap();
        for (gv, yv) in g.iter().zip(&vals) {
            assert_eq!(gv, yv);
        }
    }
}
