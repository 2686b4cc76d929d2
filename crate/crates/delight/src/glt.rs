//! Group linear transformation: `g` independent linear maps over a
//! feature split.
//!
//! The input's last axis is split into `g` equal groups; group `i` is
//! multiplied by its own `[d_in/g, d_out/g]` weight matrix, and the group
//! outputs are concatenated. With `g = 1` this is an ordinary dense
//! layer. The whole transformation equals multiplication by one
//! block-diagonal `[d_in, d_out]` matrix, at `1/g` of the parameters
//! and MACs.

use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tape::{Tape, TensorId};
use rand::Rng;

pub struct GroupLinear {
    d_in: usize,
    d_out: usize,
    groups: usize,
    weights: Vec<ParamId>,
    biases: Vec<ParamId>,
}

impl GroupLinear {
    /// Register weights (fan-in uniform init) and optional zero biases
    /// under `name.w{i}` / `name.b{i}`.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d_in: usize,
        d_out: usize,
        groups: usize,
        use_bias: bool,
    ) -> Result<Self> {
        if groups == 0 || d_in == 0 || d_out == 0 {
            return Err(Error::config(format!(
                "group linear {name}: dimensions ({d_in}, {d_out}, {groups}) must be positive"
            )));
        }
        if d_in % groups != 0 || d_out % groups != 0 {
            return Err(Error::config(format!(
                "group linear {name}: groups {groups} must divide d_in {d_in} and d_out {d_out}"
            )));
        }
        let (gi, go) = (d_in / groups, d_out / groups);
        let bound = (1.0 / gi as f64).sqrt();
        let mut weights = Vec::with_capacity(groups);
        let mut biases = Vec::new();
        for g in 0..groups {
            weights.push(store.register_uniform(format!("{name}.w{g}"), &[gi, go], bound, rng)?);
        }
        if use_bias {
            for g in 0..groups {
                biases.push(store.register_const(format!("{name}.b{g}"), &[go], 0.0)?);
            }
        }
        Ok(Self {
            d_in,
            d_out,
            groups,
            weights,
            biases,
        })
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    /// Handles of the per-group weight matrices, for tests that pin
    /// explicit values.
    pub fn weight_ids(&self) -> &[ParamId] {
        &self.weights
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: TensorId) -> Result<TensorId> {
        let sh = tape.shape(x);
        if sh.last() != Some(&self.d_in) {
            return Err(Error::ShapeMismatch {
                op: "group_linear",
                lhs: sh.to_vec(),
                rhs: vec![self.d_in],
            });
        }
        let axis = sh.len() - 1;
        if self.groups == 1 {
            let y = tape.matmul(x, bound.id(self.weights[0]))?;
            return match self.biases.first() {
                Some(&b) => tape.add(y, bound.id(b)),
                None => Ok(y),
            };
        }
        let gi = self.d_in / self.groups;
        let parts = tape.split(x, axis, &vec![gi; self.groups])?;
        let mut outs = Vec::with_capacity(self.groups);
        for (g, part) in parts.into_iter().enumerate() {
            let mut y = tape.matmul(part, bound.id(self.weights[g]))?;
            if let Some(&b) = self.biases.get(g) {
                y = tape.add(y, bound.id(b))?;
            }
            outs.push(y);
        }
        tape.concat(axis, &outs)
    }

    /// Learned scalars: `d_in·d_out/g`, plus `d_out` when biased.
    pub fn param_count(&self) -> u64 {
        self.weight_param_count() + if self.biases.is_empty() { 0 } else { self.d_out as u64 }
    }

    pub fn weight_param_count(&self) -> u64 {
        (self.d_in * self.d_out / self.groups) as u64
    }

    /// Fused multiply-adds per input token.
    pub fn macs_per_token(&self) -> u64 {
        (self.d_in * self.d_out / self.groups) as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::matmul_acc;
    use proptest::{prop_assert, proptest};
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(
        d_in: usize,
        d_out: usize,
        groups: usize,
        bias: bool,
        seed: u64,
    ) -> (ParamStore, GroupLinear) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let glt = GroupLinear::new(&mut store, &mut rng, "glt", d_in, d_out, groups, bias).unwrap();
        (store, glt)
    }

    #[test]
    fn groups_act_independently() {
        let (mut store, glt) = build(4, 4, 2, true, 0);
        store
            .set_data(glt.weights[0], vec![1.0, 0.0, 0.0, 1.0])
            .unwrap();
        store
            .set_data(glt.weights[1], vec![2.0, 0.0, 0.0, 2.0])
            .unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let x = tape.constant(vec![1.0, 2.0, 3.0, 4.0], &[1, 4]).unwrap();
        let y = glt.forward(&mut tape, &bound, x).unwrap();
        assert_eq!(tape.value(y), &[1.0, 2.0, 6.0, 8.0]);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(GroupLinear::new(&mut store, &mut rng, "a", 6, 4, 4, true).is_err());
        assert!(GroupLinear::new(&mut store, &mut rng, "b", 8, 6, 4, true).is_err());
        assert!(GroupLinear::new(&mut store, &mut rng, "c", 8, 8, 0, true).is_err());
        let (_, glt) = build(8, 8, 2, true, 0);
        let mut tape = Tape::new();
        let store2 = ParamStore::new();
        let bound = store2.bind(&mut tape, false);
        let x = tape.constant(vec![0.0; 6], &[1, 6]).unwrap();
        assert!(glt.forward(&mut tape, &bound, x).is_err());
    }

    #[test]
    fn param_count_matches_store_enumeration() {
        for &(d_in, d_out, g, bias) in
            &[(8, 8, 4, true), (16, 4, 2, false), (6, 9, 3, true), (5, 7, 1, true)]
        {
            let (store, glt) = build(d_in, d_out, g, bias, 1);
            assert_eq!(glt.param_count(), store.numel());
            assert_eq!(
                glt.param_count(),
                (d_in * d_out / g + if bias { d_out } else { 0 }) as u64
            );
        }
    }

    #[test]
    fn macs_match_tape_counter() {
        let (store, glt) = build(16, 8, 4, true, 2);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let tokens = 6;
        let x = tape.constant(vec![0.5; 16 * tokens], &[tokens, 16]).unwrap();
        glt.forward(&mut tape, &bound, x).unwrap();
        assert_eq!(tape.macs(), glt.macs_per_token() * tokens as u64);
    }

    /// Dense oracle: multiply by the block-diagonal matrix the GLT is
    /// supposed to implement.
    fn block_diagonal_oracle(
        store: &ParamStore,
        glt: &GroupLinear,
        x: &[f64],
        rows: usize,
    ) -> Vec<f64> {
        let (d_in, d_out, g) = (glt.d_in, glt.d_out, glt.groups);
        let (gi, go) = (d_in / g, d_out / g);
        let mut dense = vec![0.0; d_in * d_out];
        for a in 0..g {
            let w = store.data(glt.weights[a]);
            for i in 0..gi {
                for j in 0..go {
                    dense[(a * gi + i) * d_out + (a * go + j)] = w[i * go + j];
                }
            }
        }
        let mut y = vec![0.0; rows * d_out];
        matmul_acc(x, &dense, rows, d_in, d_out, &mut y);
        for row in y.chunks_mut(d_out) {
            for a in 0..g {
                if let Some(&b) = glt.biases.get(a) {
                    let bias = store.data(b);
                    for j in 0..go {
                        row[a * go + j] += bias[j];
                    }
                }
            }
        }
        y
    }

    proptest! {
        #[test]
        fn equals_block_diagonal_dense(
            gi in 1usize..5,
            go in 1usize..5,
            g in 1usize..5,
            rows in 1usize..4,
            seed in 0u64..1000,
        ) {
            let (d_in, d_out) = (gi * g, go * g);
            let (mut store, glt) = build(d_in, d_out, g, true, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb10c);
            for &b in &glt.biases {
                let n = store.data(b).len();
                let vals: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
                store.set_data(b, vals).unwrap();
            }
            let x: Vec<f64> = (0..rows * d_in).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape, false);
            let xi = tape.constant(x.clone(), &[rows, d_in]).unwrap();
            let y = glt.forward(&mut tape, &bound, xi).unwrap();
            let oracle = block_diagonal_oracle(&store, &glt, &x, rows);
            for (a, b) in tape.value(y).iter().zip(&oracle) {
                let tol = 1e-12 * a.abs().max(b.abs()).max(1.0);
                prop_assert!((a - b).abs() <= tol, "{a} vs {b}");
            }
        }
    }
}
