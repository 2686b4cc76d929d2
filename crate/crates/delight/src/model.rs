//! Full model assembly: token embeddings with sinusoidal positions, a
//! block-wise scaled stack of DeLighT blocks, and a dense classifier.
//!
//! Two shapes are supported. A language model is a single causal block
//! stack. A sequence-to-sequence model pairs an encoder stack with a
//! decoder stack whose blocks attend over the encoder output. Both scale
//! token embeddings by `sqrt(d_m)`, add sinusoidal positions, and finish
//! with an affine-free layer norm before the classifier.

use crate::block::{pre_norm, BlockConfig, DecoderBlock, EncoderBlock, Fwd};
use crate::dextra::default_g_max;
use crate::error::{Error, Result};
use crate::glt::GroupLinear;
use crate::params::{ParamId, ParamStore};
use crate::scaling::{blockwise_plan, ScalingConfig};
use crate::tape::{Tape, TensorId};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
/// Lowest token id available to task content.
pub const FIRST_CONTENT_TOKEN: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Seq2seq,
    Lm,
}

fn default_ffn_reduction() -> f64 {
    4.0
}

fn default_shuffle() -> bool {
    true
}

fn default_max_positions() -> usize {
    512
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab: usize,
    pub embed_dim: usize,
    pub d_m: usize,
    pub scaling: ScalingConfig,
    /// Attention width; defaults to `d_m / 2`.
    #[serde(default)]
    pub d_o: Option<usize>,
    #[serde(rename = "r", default = "default_ffn_reduction")]
    pub ffn_reduction: f64,
    #[serde(default)]
    pub dropout: f64,
    /// Group cap; defaults to `ceil(d_m / 32)`.
    #[serde(default)]
    pub g_max: Option<usize>,
    #[serde(default = "default_shuffle")]
    pub shuffle: bool,
    pub task: TaskKind,
    #[serde(default = "default_max_positions")]
    pub max_positions: usize,
}

impl ModelConfig {
    pub fn toy(vocab: usize, d_m: usize, scaling: ScalingConfig, task: TaskKind) -> Self {
        Self {
            vocab,
            embed_dim: d_m,
            d_m,
            scaling,
            d_o: None,
            ffn_reduction: 4.0,
            dropout: 0.0,
            g_max: None,
            shuffle: true,
            task,
            max_positions: 512,
        }
    }

    pub fn attention_dim(&self) -> usize {
        self.d_o.unwrap_or(self.d_m / 2)
    }

    pub fn max_groups(&self) -> usize {
        self.g_max.unwrap_or_else(|| default_g_max(self.d_m))
    }

    /// One block configuration per entry of the block-wise plan.
    pub fn block_configs(&self) -> Result<Vec<BlockConfig>> {
        let plan = blockwise_plan(&self.scaling)?;
        Ok(plan
            .iter()
            .map(|b| BlockConfig {
                d_m: self.d_m,
                d_o: self.attention_dim(),
                depth: b.depth,
                width_mult: b.width_mult,
                ffn_reduction: self.ffn_reduction,
                dropout: self.dropout,
                g_max: self.max_groups(),
                shuffle: self.shuffle,
            })
            .collect())
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab < FIRST_CONTENT_TOKEN + 1 {
            return Err(Error::config(format!(
                "vocab must leave room for content beyond pad/BOS/EOS, got {}",
                self.vocab
            )));
        }
        if self.embed_dim == 0 {
            return Err(Error::config("embed_dim must be positive"));
        }
        if self.max_positions == 0 {
            return Err(Error::config("max_positions must be positive"));
        }
        if self.d_m % 2 != 0 {
            return Err(Error::config(format!(
                "d_m must be even for sinusoidal positions, got {}",
                self.d_m
            )));
        }
        for cfg in self.block_configs()? {
            cfg.validate()?;
            cfg.dextra_config().validate()?;
        }
        Ok(())
    }
}

/// Sinusoidal position table, row-major `[max_len, d]`.
///
/// `PE[pos, 2i] = sin(pos / 10000^(2i/d))` and `PE[pos, 2i+1]` is the
/// matching cosine, so position 0 is `[0, 1, 0, 1, ...]`.
pub fn sinusoidal_positions(max_len: usize, d: usize) -> Result<Vec<f64>> {
    if d == 0 || d % 2 != 0 {
        return Err(Error::invalid(format!(
            "position dimension must be even and positive, got {d}"
        )));
    }
    let mut pe = vec![0.0; max_len * d];
    for pos in 0..max_len {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            pe[pos * d + 2 * i] = angle.sin();
            pe[pos * d + 2 * i + 1] = angle.cos();
        }
    }
    Ok(pe)
}

/// Greedy decode output.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub tokens: Vec<usize>,
    /// True when decoding hit `max_len` without emitting EOS.
    pub truncated: bool,
    /// Fused multiply-add count across the encoder pass and all steps.
    pub macs: u64,
}

pub struct Model {
    cfg: ModelConfig,
    embed: ParamId,
    proj: Option<GroupLinear>,
    /// Encoder stack for seq2seq; the causal stack for language models.
    encoder: Vec<EncoderBlock>,
    decoder: Vec<DecoderBlock>,
    classifier: GroupLinear,
    positions: Vec<f64>,
}

/// Build a model and its parameter store. Parameter registration order is
/// fixed (embedding, projection, blocks input to output, classifier), so a
/// seeded RNG yields identical initializations across runs.
pub fn build_model<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Result<(Model, ParamStore)> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let bound = (1.0 / cfg.embed_dim as f64).sqrt();
    let embed = store.register_uniform("embed", &[cfg.vocab, cfg.embed_dim], bound, rng)?;
    let proj = if cfg.embed_dim == cfg.d_m {
        None
    } else {
        Some(GroupLinear::new(
            &mut store,
            rng,
            "embed_proj",
            cfg.embed_dim,
            cfg.d_m,
            1,
            true,
        )?)
    };
    let block_cfgs = cfg.block_configs()?;
    let mut encoder = Vec::new();
    let mut decoder = Vec::new();
    for (b, bc) in block_cfgs.iter().enumerate() {
        encoder.push(EncoderBlock::new(&mut store, rng, &format!("enc{b}"), bc)?);
    }
    if cfg.task == TaskKind::Seq2seq {
        for (b, bc) in block_cfgs.iter().enumerate() {
            decoder.push(DecoderBlock::new(&mut store, rng, &format!("dec{b}"), bc)?);
        }
    }
    let classifier = GroupLinear::new(&mut store, rng, "classifier", cfg.d_m, cfg.vocab, 1, true)?;
    let positions = sinusoidal_positions(cfg.max_positions, cfg.d_m)?;
    Ok((
        Model { cfg: cfg.clone(), embed, proj, encoder, decoder, classifier, positions },
        store,
    ))
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn encoder_blocks(&self) -> &[EncoderBlock] {
        &self.encoder
    }

    pub fn decoder_blocks(&self) -> &[DecoderBlock] {
        &self.decoder
    }

    pub fn param_count(&self) -> u64 {
        let mut total = (self.cfg.vocab * self.cfg.embed_dim) as u64;
        if let Some(p) = &self.proj {
            total += p.param_count();
        }
        total += self.encoder.iter().map(|b| b.param_count()).sum::<u64>();
        total += self.decoder.iter().map(|b| b.param_count()).sum::<u64>();
        total + self.classifier.param_count()
    }

    /// Embed `tokens`, project to `d_m` when needed, scale by
    /// `sqrt(d_m)`, and add positions: the shared stream entry.
    fn embed_stream(
        &self,
        fw: &mut Fwd,
        tokens: &[usize],
        batch: usize,
        seq: usize,
    ) -> Result<TensorId> {
        if tokens.len() != batch * seq || seq == 0 {
            return Err(Error::invalid(format!(
                "{} tokens do not fill a {batch} x {seq} batch",
                tokens.len()
            )));
        }
        if seq > self.cfg.max_positions {
            return Err(Error::invalid(format!(
                "sequence length {seq} exceeds max_positions {}",
                self.cfg.max_positions
            )));
        }
        let table = fw.bound.id(self.embed);
        let emb = fw.tape.gather_rows(table, tokens, &[batch, seq])?;
        let h = match &self.proj {
            Some(p) => p.forward(fw.tape, fw.bound, emb)?,
            None => emb,
        };
        let h = fw.tape.scale(h, (self.cfg.d_m as f64).sqrt())?;
        let d = self.cfg.d_m;
        let pos = fw
            .tape
            .constant(self.positions[..seq * d].to_vec(), &[seq, d])?;
        fw.tape.add(h, pos)
    }

    /// Encoder stack over source tokens, ending in the final norm.
    pub fn encode(
        &self,
        fw: &mut Fwd,
        src: &[usize],
        batch: usize,
        seq: usize,
    ) -> Result<TensorId> {
        if self.cfg.task != TaskKind::Seq2seq {
            return Err(Error::invalid("encode requires a seq2seq model"));
        }
        let mut h = self.embed_stream(fw, src, batch, seq)?;
        for block in &self.encoder {
            h = block.forward(fw, h, false)?;
        }
        pre_norm(fw.tape, h)
    }

    /// Causal language-model forward; returns `[batch, seq, vocab]` logits.
    pub fn forward_lm(
        &self,
        fw: &mut Fwd,
        tokens: &[usize],
        batch: usize,
        seq: usize,
    ) -> Result<TensorId> {
        if self.cfg.task != TaskKind::Lm {
            return Err(Error::invalid("forward_lm requires a language model"));
        }
        let mut h = self.embed_stream(fw, tokens, batch, seq)?;
        for block in &self.encoder {
            h = block.forward(fw, h, true)?;
        }
        let h = pre_norm(fw.tape, h)?;
        self.classifier.forward(fw.tape, fw.bound, h)
    }

    /// Teacher-forced seq2seq forward; returns `[batch, m, vocab]` logits
    /// over the shifted target stream.
    pub fn forward_seq2seq(
        &self,
        fw: &mut Fwd,
        src: &[usize],
        tgt_in: &[usize],
        batch: usize,
        n: usize,
        m: usize,
    ) -> Result<TensorId> {
        let enc = self.encode(fw, src, batch, n)?;
        self.decode_stream(fw, tgt_in, enc, batch, m)
    }

    fn decode_stream(
        &self,
        fw: &mut Fwd,
        tgt_in: &[usize],
        enc: TensorId,
        batch: usize,
        m: usize,
    ) -> Result<TensorId> {
        let mut h = self.embed_stream(fw, tgt_in, batch, m)?;
        for block in &self.decoder {
            h = block.forward(fw, h, enc)?;
        }
        let h = pre_norm(fw.tape, h)?;
        self.classifier.forward(fw.tape, fw.bound, h)
    }

    /// Greedy decoding: start from BOS, take the argmax token each step
    /// (ties break toward the lowest index), stop at EOS or `max_len`.
    /// Every step re-runs the decoder over the whole prefix, so the
    /// source-target attention cost follows the incremental-decode sum.
    pub fn greedy_decode(
        &self,
        store: &ParamStore,
        src: &[usize],
        max_len: usize,
    ) -> Result<Decoded> {
        if self.cfg.task != TaskKind::Seq2seq {
            return Err(Error::invalid("greedy_decode requires a seq2seq model"));
        }
        let n = src.len();
        let d = self.cfg.d_m;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut macs = 0u64;

        let mut enc_tape = Tape::new();
        let enc_bound = store.bind(&mut enc_tape, false);
        let mut fw = Fwd {
            tape: &mut enc_tape,
            bound: &enc_bound,
            training: false,
            rng: &mut rng,
        };
        let enc = self.encode(&mut fw, src, 1, n)?;
        let enc_vals = enc_tape.value(enc).to_vec();
        macs += enc_tape.macs();

        let mut prefix = vec![BOS];
        let mut tokens = Vec::new();
        let mut truncated = true;
        for _ in 0..max_len {
            let k = prefix.len();
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape, false);
            let enc_c = tape.constant(enc_vals.clone(), &[1, n, d])?;
            let mut fw = Fwd { tape: &mut tape, bound: &bound, training: false, rng: &mut rng };
            let logits = self.decode_stream(&mut fw, &prefix, enc_c, 1, k)?;
            macs += tape.macs();
            let row = &tape.value(logits)[(k - 1) * self.cfg.vocab..][..self.cfg.vocab];
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            if best == EOS {
                truncated = false;
                break;
            }
            tokens.push(best);
            prefix.push(best);
        }
        Ok(Decoded { tokens, truncated, macs })
    }
}
