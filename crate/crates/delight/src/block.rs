//! DeLighT blocks: DExTra feeding single-head attention, then a
//! light-weight FFN.
//!
//! The attention sublayer normalizes its input, runs DExTra to produce
//! `d_o`-dimensional features (`d_o < d_m`), projects those to queries,
//! keys, and values with three dense layers, applies scaled dot-product
//! attention, and projects back to `d_m` for the residual. Because the
//! attention core runs at `d_o` instead of `d_m`, its cost drops by the
//! factor `d_m/d_o`. The FFN sublayer inverts the usual transformer
//! shape: it narrows `d_m` by the reduction factor `r` before restoring
//! it. Decoder blocks insert a source-target attention sublayer between
//! self-attention and the FFN.
//!
//! Normalization is pre-norm and affine-free (unit gain, zero bias), so
//! a block's learned parameters are exactly its linear layers.

use crate::dextra::{default_g_max, Dextra, DextraConfig};
use crate::error::{Error, Result};
use crate::glt::GroupLinear;
use crate::params::{Bound, ParamStore};
use crate::tape::{Tape, TensorId};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const LN_EPS: f64 = 1e-5;

/// Everything a forward pass threads through the layer stack.
pub struct Fwd<'a> {
    pub tape: &'a mut Tape,
    pub bound: &'a Bound,
    pub training: bool,
    pub rng: &'a mut ChaCha8Rng,
}

#[derive(Clone, Debug)]
pub struct BlockConfig {
    pub d_m: usize,
    /// Attention width, strictly below `d_m`.
    pub d_o: usize,
    /// DExTra depth for this block.
    pub depth: usize,
    /// DExTra width multiplier for this block.
    pub width_mult: f64,
    /// FFN reduction factor; values below 1 expand instead (0.25 gives
    /// the standard transformer FFN shape).
    pub ffn_reduction: f64,
    pub dropout: f64,
    pub g_max: usize,
    pub shuffle: bool,
}

impl BlockConfig {
    pub fn new(d_m: usize, depth: usize, width_mult: f64) -> Self {
        Self {
            d_m,
            d_o: d_m / 2,
            depth,
            width_mult,
            ffn_reduction: 4.0,
            dropout: 0.0,
            g_max: default_g_max(d_m),
            shuffle: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_o == 0 || self.d_o >= self.d_m {
            return Err(Error::config(format!(
                "attention width d_o={} must be in [1, d_m={})",
                self.d_o, self.d_m
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        self.ffn_inner().map(|_| ())
    }

    /// Hidden width of the light FFN: `d_m/r`, floored when inexact.
    pub fn ffn_inner(&self) -> Result<usize> {
        if !self.ffn_reduction.is_finite() || self.ffn_reduction <= 0.0 {
            return Err(Error::config(format!(
                "FFN reduction factor must be positive, got {}",
                self.ffn_reduction
            )));
        }
        let exact = self.d_m as f64 / self.ffn_reduction;
        let inner = exact.floor();
        if inner < 1.0 {
            return Err(Error::config(format!(
                "FFN inner width d_m/r = {}/{} is below 1",
                self.d_m, self.ffn_reduction
            )));
        }
        if (exact - inner).abs() > 1e-9 {
            log::warn!(
                "FFN reduction {} does not divide d_m {} exactly; flooring inner width to {}",
                self.ffn_reduction,
                self.d_m,
                inner
            );
        }
        Ok(inner as usize)
    }

    pub fn dextra_config(&self) -> DextraConfig {
        DextraConfig {
            d_m: self.d_m,
            d_o: self.d_o,
            depth: self.depth,
            width_mult: self.width_mult,
            g_max: self.g_max,
            shuffle: self.shuffle,
        }
    }
}

/// Affine-free layer norm over the last axis.
pub fn pre_norm(tape: &mut Tape, x: TensorId) -> Result<TensorId> {
    let Some(&d) = tape.shape(x).last() else {
        return Err(Error::invalid("layer norm needs rank >= 1"));
    };
    let gain = tape.constant(vec![1.0; d], &[d])?;
    let bias = tape.constant(vec![0.0; d], &[d])?;
    tape.layer_norm(x, gain, bias, LN_EPS)
}

/// Scaled dot-product attention with one head.
///
/// `q` is `[..., m, d]`, `k` and `v` are `[..., n, d]`. The causal mask
/// requires `m == n` and blocks position `i` from attending past itself.
/// Dropout, when active, is applied to the attention weights.
pub fn single_head_attention(
    fw: &mut Fwd,
    q: TensorId,
    k: TensorId,
    v: TensorId,
    causal: bool,
    dropout_p: f64,
) -> Result<TensorId> {
    let qsh = fw.tape.shape(q).to_vec();
    let ksh = fw.tape.shape(k).to_vec();
    if qsh.len() < 2 || ksh.len() < 2 || qsh.last() != ksh.last() {
        return Err(Error::ShapeMismatch {
            op: "attention",
            lhs: qsh,
            rhs: ksh,
        });
    }
    let vsh = fw.tape.shape(v).to_vec();
    if vsh.len() != ksh.len() || vsh[..vsh.len() - 1] != ksh[..ksh.len() - 1] {
        return Err(Error::ShapeMismatch {
            op: "attention",
            lhs: ksh,
            rhs: vsh,
        });
    }
    let d = *qsh.last().unwrap();
    let kt = fw.tape.transpose_last(k)?;
    let scores = fw.tape.matmul(q, kt)?;
    let scaled = fw.tape.scale(scores, 1.0 / (d as f64).sqrt())?;
    let masked = if causal {
        let m = qsh[qsh.len() - 2];
        let n = ksh[ksh.len() - 2];
        if m != n {
            return Err(Error::invalid(format!(
                "causal attention needs square scores, got {m} queries over {n} keys"
            )));
        }
        let mut mask = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                mask[i * n + j] = -1e30;
            }
        }
        let mask = fw.tape.constant(mask, &[n, n])?;
        fw.tape.add(scaled, mask)?
    } else {
        scaled
    };
    let weights = fw.tape.softmax_last(masked)?;
    let weights = fw.tape.dropout(weights, dropout_p, fw.training, fw.rng)?;
    fw.tape.matmul(weights, v)
}

/// Self-attention sublayer: residual around
/// OutProj(Attention(QKV over DExTra(norm(x)))).
struct AttnSublayer {
    dextra: Dextra,
    wq: GroupLinear,
    wk: GroupLinear,
    wv: GroupLinear,
    wo: GroupLinear,
    dropout: f64,
}

impl AttnSublayer {
    fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        cfg: &BlockConfig,
    ) -> Result<Self> {
        let dextra = Dextra::new(store, rng, &format!("{name}.dex"), &cfg.dextra_config())?;
        let d_o = cfg.d_o;
        let dense = |store: &mut ParamStore, rng: &mut R, which: &str, d_in: usize, d_out: usize| {
            GroupLinear::new(store, rng, &format!("{name}.{which}"), d_in, d_out, 1, true)
        };
        Ok(Self {
            dextra,
            wq: dense(store, rng, "wq", d_o, d_o)?,
            wk: dense(store, rng, "wk", d_o, d_o)?,
            wv: dense(store, rng, "wv", d_o, d_o)?,
            wo: dense(store, rng, "wo", d_o, cfg.d_m)?,
            dropout: cfg.dropout,
        })
    }

    fn forward(&self, fw: &mut Fwd, x: TensorId, causal: bool) -> Result<TensorId> {
        let h = pre_norm(fw.tape, x)?;
        let dex = self.dextra.forward(fw.tape, fw.bound, h)?;
        let q = self.wq.forward(fw.tape, fw.bound, dex)?;
        let k = self.wk.forward(fw.tape, fw.bound, dex)?;
        let v = self.wv.forward(fw.tape, fw.bound, dex)?;
        let att = single_head_attention(fw, q, k, v, causal, self.dropout)?;
        let proj = self.wo.forward(fw.tape, fw.bound, att)?;
        fw.tape.add(proj, x)
    }

    fn param_count(&self) -> u64 {
        self.dextra.param_count()
            + self.wq.param_count()
            + self.wk.param_count()
            + self.wv.param_count()
            + self.wo.param_count()
    }
}

/// Light-weight FFN: dense `d_m -> d_m/r`, GELU, dense back to `d_m`.
pub struct LightFfn {
    w1: GroupLinear,
    w2: GroupLinear,
    dropout: f64,
}

impl LightFfn {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        cfg: &BlockConfig,
    ) -> Result<Self> {
        let inner = cfg.ffn_inner()?;
        Ok(Self {
            w1: GroupLinear::new(store, rng, &format!("{name}.w1"), cfg.d_m, inner, 1, true)?,
            w2: GroupLinear::new(store, rng, &format!("{name}.w2"), inner, cfg.d_m, 1, true)?,
            dropout: cfg.dropout,
        })
    }

    pub fn forward(&self, fw: &mut Fwd, x: TensorId) -> Result<TensorId> {
        let h = self.w1.forward(fw.tape, fw.bound, x)?;
        let h = fw.tape.gelu(h)?;
        let h = fw.tape.dropout(h, self.dropout, fw.training, fw.rng)?;
        self.w2.forward(fw.tape, fw.bound, h)
    }

    pub fn param_count(&self) -> u64 {
        self.w1.param_count() + self.w2.param_count()
    }

    pub fn weight_param_count(&self) -> u64 {
        self.w1.weight_param_count() + self.w2.weight_param_count()
    }

    pub fn macs_per_token(&self) -> u64 {
        self.w1.macs_per_token() + self.w2.macs_per_token()
    }
}

pub struct EncoderBlock {
    attn: AttnSublayer,
    ffn: LightFfn,
}

impl EncoderBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        cfg: &BlockConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            attn: AttnSublayer::new(store, rng, name, cfg)?,
            ffn: LightFfn::new(store, rng, &format!("{name}.ffn"), cfg)?,
        })
    }

    /// `causal = true` turns the block into a decoder-style block without
    /// cross-attention, as used by language models.
    pub fn forward(&self, fw: &mut Fwd, x: TensorId, causal: bool) -> Result<TensorId> {
        let z = self.attn.forward(fw, x, causal)?;
        let h = pre_norm(fw.tape, z)?;
        let f = self.ffn.forward(fw, h)?;
        fw.tape.add(f, z)
    }

    pub fn param_count(&self) -> u64 {
        self.attn.param_count() + self.ffn.param_count()
    }

    pub fn dextra(&self) -> &Dextra {
        &self.attn.dextra
    }

    pub fn ffn(&self) -> &LightFfn {
        &self.ffn
    }
}

pub struct DecoderBlock {
    attn: AttnSublayer,
    q_st: GroupLinear,
    k_st: GroupLinear,
    v_st: GroupLinear,
    o_st: GroupLinear,
    ffn: LightFfn,
    dropout: f64,
}

impl DecoderBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        cfg: &BlockConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let attn = AttnSublayer::new(store, rng, name, cfg)?;
        let (d_m, d_o) = (cfg.d_m, cfg.d_o);
        let dense = |store: &mut ParamStore, rng: &mut R, which: &str, d_in: usize, d_out: usize| {
            GroupLinear::new(store, rng, &format!("{name}.{which}"), d_in, d_out, 1, true)
        };
        Ok(Self {
            attn,
            q_st: dense(store, rng, "q_st", d_m, d_o)?,
            k_st: dense(store, rng, "k_st", d_m, d_o)?,
            v_st: dense(store, rng, "v_st", d_m, d_o)?,
            o_st: dense(store, rng, "o_st", d_o, d_m)?,
            ffn: LightFfn::new(store, rng, &format!("{name}.ffn"), cfg)?,
            dropout: cfg.dropout,
        })
    }

    /// Causal self-attention, then source-target attention over
    /// `enc_out`, then the FFN.
    pub fn forward(&self, fw: &mut Fwd, x: TensorId, enc_out: TensorId) -> Result<TensorId> {
        let z = self.attn.forward(fw, x, true)?;
        let h = pre_norm(fw.tape, z)?;
        let q = self.q_st.forward(fw.tape, fw.bound, h)?;
        let k = self.k_st.forward(fw.tape, fw.bound, enc_out)?;
        let v = self.v_st.forward(fw.tape, fw.bound, enc_out)?;
        let att = single_head_attention(fw, q, k, v, false, self.dropout)?;
        let proj = self.o_st.forward(fw.tape, fw.bound, att)?;
        let z = fw.tape.add(proj, z)?;
        let h = pre_norm(fw.tape, z)?;
        let f = self.ffn.forward(fw, h)?;
        fw.tape.add(f, z)
    }

    pub fn param_count(&self) -> u64 {
        self.attn.param_count()
            + self.q_st.param_count()
            + self.k_st.param_count()
            + self.v_st.param_count()
            + self.o_st.param_count()
            + self.ffn.param_count()
    }

    pub fn dextra(&self) -> &Dextra {
        &self.attn.dextra
    }

    pub fn ffn(&self) -> &LightFfn {
        &self.ffn
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;

    fn fwd_parts() -> (Tape, ChaCha8Rng) {
        (Tape::new(), ChaCha8Rng::seed_from_u64(0))
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()
    }

    #[test]
    fn single_position_attention_returns_value() {
        let (mut tape, mut rng) = fwd_parts();
        let store = ParamStore::new();
        let bound = store.bind(&mut tape, false);
        let q = tape.constant(vec![0.3, -0.7], &[1, 2]).unwrap();
        let k = tape.constant(vec![1.1, 0.4], &[1, 2]).unwrap();
        let v = tape.constant(vec![5.0, -3.0], &[1, 2]).unwrap();
        let mut fw = Fwd { tape: &mut tape, bound: &bound, training: false, rng: &mut rng };
        let out = single_head_attention(&mut fw, q, k, v, false, 0.0).unwrap();
        assert_eq!(tape.value(out), &[5.0, -3.0]);
    }

    #[test]
    fn identical_keys_average_values() {
        let (mut tape, mut rng) = fwd_parts();
        let store = ParamStore::new();
        let bound = store.bind(&mut tape, false);
        let q = tape.constant(rand_vec(&mut rng, 6), &[3, 2]).unwrap();
        let k = tape
            .constant(vec![0.8, -0.2, 0.8, -0.2, 0.8, -0.2], &[3, 2])
            .unwrap();
        let v = tape
            .constant(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[3, 2])
            .unwrap();
        let mut fw = Fwd { tape: &mut tape, bound: &bound, training: false, rng: &mut rng };
        let out = single_head_attention(&mut fw, q, k, v, false, 0.0).unwrap();
        for row in tape.value(out).chunks(2) {
            assert!((row[0] - 3.0).abs() < 1e-12);
            assert!((row[1] - 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_are_normalized() {
        let (mut tape, mut rng) = fwd_parts();
        let store = ParamStore::new();
        let bound = store.bind(&mut tape, false);
        let q = tape.constant(rand_vec(&mut rng, 12), &[4, 3]).unwrap();
        let k = tape.constant(rand_vec(&mut rng, 12), &[4, 3]).unwrap();
        let v = tape.constant(vec![1.0; 4], &[4, 1]).unwrap();
        let mut fw = Fwd { tape: &mut tape, bound: &bound, training: false, rng: &mut rng };
        let out = single_head_attention(&mut fw, q, k, v, true, 0.0).unwrap();
        for &x in tape.value(out) {
            assert!((x - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn causal_mask_blocks_future_positions() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let qd = rand_vec(&mut rng, 6);
        let kd = rand_vec(&mut rng, 6);
        let vd = rand_vec(&mut rng, 6);
        let run = |v3: &[f64], k3: &[f64]| -> Vec<f64> {
            let mut tape = Tape::new();
            let store = ParamStore::new();
            let bound = store.bind(&mut tape, false);
            let mut kd = kd.clone();
            kd[4..6].copy_from_slice(k3);
            let mut vd = vd.clone();
            vd[4..6].copy_from_slice(v3);
            let q = tape.constant(qd.clone(), &[3, 2]).unwrap();
            let k = tape.constant(kd, &[3, 2]).unwrap();
            let v = tape.constant(vd, &[3, 2]).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut fw = Fwd { tape: &mut tape, bound: &bound, training: false, rng: &mut rng };
            let out = single_head_attention(&mut fw, q, k, v, true, 0.0).unwrap();
            tape.value(out).to_vec()
        };
        let base = run(&vd[4..6].to_vec(), &kd[4..6].to_vec());
        let poked = run(&[9.0, -9.0], &[4.0, 4.0]);
        assert_eq!(&base[..4], &poked[..4], "positions 1-2 must ignore position 3");
        assert_ne!(&base[4..], &poked[4..]);
    }

    #[test]
    fn attention_rejects_mismatched_shapes() {
        let (mut tape, mut rng) = fwd_parts();
        let store = ParamStore::new();
        let bound = store.bind(&mut tape, false);
        let q = tape.constant(vec![0.0; 6], &[3, 2]).unwrap();
        let k = tape.constant(vec![0.0; 9], &[3, 3]).unwrap();
        let v = tape.constant(vec![0.0; 9], &[3, 3]).unwrap();
        let k2 = tape.constant(vec![0.0; 4], &[2, 2]).unwrap();
        let v2 = tape.constant(vec![0.0; 6], &[3, 2]).unwrap();
        let mut fw = Fwd { tape: &mut tape, bound: &bound, training: false, rng: &mut rng };
        assert!(single_head_attention(&mut fw, q, k, v, false, 0.0).is_err());
        assert!(single_head_attention(&mut fw, q, k2, v2, false, 0.0).is_err());
        // Causal cross-shape: 3 queries over 2 keys.
        assert!(single_head_attention(&mut fw, q, k2, k2, true, 0.0).is_err());
    }

    fn toy_block_config() -> BlockConfig {
        BlockConfig {
            d_m: 16,
            d_o: 8,
            depth: 4,
            width_mult: 2.0,
            ffn_reduction: 4.0,
            dropout: 0.0,
            g_max: 2,
            shuffle: true,
        }
    }

    #[test]
    fn zeroed_encoder_block_is_identity() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let block =
            EncoderBlock::new(&mut store, &mut rng, "blk", &toy_block_config()).unwrap();
        for i in 0..store.len() {
            let (data, _) = store.data_and_grad_mut(i);
            data.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let x_data = rand_vec(&mut rng, 5 * 16);
        let x = tape.constant(x_data.clone(), &[5, 16]).unwrap();
        let mut fw = Fwd { tape: &mut tape, bound: &bound, training: false, rng: &mut rng };
        let y = block.forward(&mut fw, x, false).unwrap();
        assert_eq!(tape.value(y), &x_data[..]);
    }

    #[test]
    fn encoder_block_preserves_shape_and_counts_macs() {
        let cfg = toy_block_config();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let block = EncoderBlock::new(&mut store, &mut rng, "blk", &cfg).unwrap();
        assert_eq!(block.param_count(), store.numel());
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let n = 7;
        let x_data = rand_vec(&mut rng, 2 * n * 16);
        let x = tape.constant(x_data, &[2, n, 16]).unwrap();
        let mut fw = Fwd { tape: &mut tape, bound: &bound, training: false, rng: &mut rng };
        let y = block.forward(&mut fw, x, false).unwrap();
        assert_eq!(tape.shape(y), &[2, n, 16]);
        let per_token = block.dextra().macs_per_token()
            + 3 * (cfg.d_o * cfg.d_o) as u64
            + (cfg.d_o * cfg.d_m) as u64
            + block.ffn().macs_per_token();
        let core = 2 * cfg.d_o as u64 * (n * n) as u64;
        assert_eq!(tape.macs(), 2 * (n as u64 * per_token + core));
    }

    #[test]
    fn light_ffn_matches_reduction_formulas() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = BlockConfig::new(256, 4, 2.0);
        let ffn = LightFfn::new(&mut store, &mut rng, "ffn", &cfg).unwrap();
        assert_eq!(ffn.weight_param_count(), 2 * 256 * 256 / 4);
        assert_eq!(ffn.weight_param_count(), 32768);
        assert_eq!(ffn.param_count(), 33088);
        let baseline_weights = 8u64 * 256 * 256;
        assert_eq!(baseline_weights / ffn.weight_param_count(), 16);

        let mut expand = BlockConfig::new(8, 4, 2.0);
        expand.ffn_reduction = 0.25;
        assert_eq!(expand.ffn_inner().unwrap(), 32);
        let mut too_small = BlockConfig::new(2, 4, 2.0);
        too_small.ffn_reduction = 4.0;
        assert!(too_small.ffn_inner().is_err());
    }

    #[test]
    fn zeroed_cross_attention_ignores_encoder_output() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let block =
            DecoderBlock::new(&mut store, &mut rng, "dec", &toy_block_config()).unwrap();
        assert_eq!(block.param_count(), store.numel());
        for &w in block.o_st.weight_ids() {
            let n = store.data(w).len();
            store.set_data(w, vec![0.0; n]).unwrap();
        }
        let mut rng2 = ChaCha8Rng::seed_from_u64(9);
        let x_data = rand_vec(&mut rng2, 4 * 16);
        let run = |enc: Vec<f64>| -> Vec<f64> {
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape, false);
            let x = tape.constant(x_data.clone(), &[4, 16]).unwrap();
            let e = tape.constant(enc, &[3, 16]).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut fw = Fwd { tape: &mut tape, bound: &bound, training: false, rng: &mut rng };
            let y = block.forward(&mut fw, x, e).unwrap();
            tape.value(y).to_vec()
        };
        let a = run(rand_vec(&mut rng2, 3 * 16));
        let b = run(rand_vec(&mut rng2, 3 * 16));
        assert_eq!(a, b);
    }

    #[test]
    fn decoder_causality_in_target_stream() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let block =
            DecoderBlock::new(&mut store, &mut rng, "dec", &toy_block_config()).unwrap();
        let mut rng2 = ChaCha8Rng::seed_from_u64(10);
        let x_data = rand_vec(&mut rng2, 4 * 16);
        let enc = rand_vec(&mut rng2, 3 * 16);
        let run = |x: Vec<f64>| -> Vec<f64> {
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape, false);
            let xi = tape.constant(x, &[4, 16]).unwrap();
            let e = tape.constant(enc.clone(), &[3, 16]).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut fw = Fwd { tape: &mut tape, bound: &bound, training: false, rng: &mut rng };
            let y = block.forward(&mut fw, xi, e).unwrap();
            tape.value(y).to_vec()
        };
        let base = run(x_data.clone());
        let mut poked = x_data.clone();
        for v in &mut poked[3 * 16..] {
            *v += 1.0;
        }
        let out = run(poked);
        assert_eq!(
            &base[..3 * 16],
            &out[..3 * 16],
            "positions 1-3 must ignore position 4"
        );
        assert_ne!(&base[3 * 16..], &out[3 * 16..]);
    }
}
