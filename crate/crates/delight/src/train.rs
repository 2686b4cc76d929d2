//! Training harness: Adam with inverse-sqrt warmup, label-smoothed
//! cross entropy, deterministic metrics, and JSON checkpoints.
//!
//! Everything downstream of the seed is deterministic: parameter
//! initialization, batch order, dropout masks, metric lines, and
//! checkpoint bytes are identical across runs with the same inputs.
//! Metric records therefore carry a cumulative token count rather than
//! wall-clock throughput.

use crate::block::Fwd;
use crate::error::{Error, Result};
use crate::model::{build_model, Model, ModelConfig, PAD};
use crate::params::{ParamStore, SavedParam};
use crate::tape::Tape;
use crate::tasks::{lm_batch, Batch};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.98;
pub const ADAM_EPS: f64 = 1e-9;

fn default_steps() -> usize {
    2000
}

fn default_batch_size() -> usize {
    32
}

fn default_peak_lr() -> f64 {
    3e-3
}

fn default_warmup() -> usize {
    400
}

fn default_label_smoothing() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_peak_lr")]
    pub peak_lr: f64,
    #[serde(default = "default_warmup")]
    pub warmup_steps: usize,
    #[serde(default = "default_label_smoothing")]
    pub label_smoothing: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: default_steps(),
            batch_size: default_batch_size(),
            peak_lr: default_peak_lr(),
            warmup_steps: default_warmup(),
            label_smoothing: default_label_smoothing(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.warmup_steps == 0 {
            return Err(Error::config(
                "steps, batch_size, and warmup_steps must be positive",
            ));
        }
        if !(self.peak_lr.is_finite() && self.peak_lr > 0.0) {
            return Err(Error::config(format!("peak_lr must be positive, got {}", self.peak_lr)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::config(format!(
                "label_smoothing {} outside [0, 1)",
                self.label_smoothing
            )));
        }
        Ok(())
    }
}

/// Inverse-sqrt warmup: `peak * min(step/warmup, sqrt(warmup/step))`.
pub fn lr_schedule(step: usize, warmup_steps: usize, peak_lr: f64) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup_steps.max(1) as f64;
    peak_lr * (s / w).min((w / s).sqrt())
}

/// Adam with bias correction; moments mirror the parameter store.
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let m = (0..store.len()).map(|i| vec![0.0; store.numel_at(i)]).collect();
        let v = (0..store.len()).map(|i| vec![0.0; store.numel_at(i)]).collect();
        Self { m, v, t: 0 }
    }

    /// One update from the gradients currently held in the store.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for i in 0..store.len() {
            let (data, grad) = store.data_and_grad_mut(i);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..data.len() {
                let g = grad[j];
                m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g;
                v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                data[j] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
    }
}

/// One metrics-log record; serialized as a single JSON line per step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    /// Cumulative non-pad target tokens processed so far.
    pub tokens: u64,
}

impl StepMetrics {
    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

pub struct Trainer {
    model: Model,
    store: ParamStore,
    opt: Adam,
    cfg: TrainConfig,
    rng: ChaCha8Rng,
    step: usize,
    tokens: u64,
}

impl Trainer {
    pub fn new(model: Model, store: ParamStore, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let opt = Adam::new(&store);
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261696e);
        Ok(Self { model, store, opt, cfg, rng, step: 0, tokens: 0 })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Forward, smoothed cross entropy, backward, Adam update.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepMetrics> {
        let step = self.step + 1;
        let lr = lr_schedule(step, self.cfg.warmup_steps, self.cfg.peak_lr);
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape, true);
        let (logits, targets, rows) = {
            let mut fw =
                Fwd { tape: &mut tape, bound: &bound, training: true, rng: &mut self.rng };
            match batch {
                Batch::Seq2seq { src, tgt_in, tgt_out, batch, src_len, tgt_len } => {
                    let l = self
                        .model
                        .forward_seq2seq(&mut fw, src, tgt_in, *batch, *src_len, *tgt_len)?;
                    (l, tgt_out.as_slice(), batch * tgt_len)
                }
                Batch::Lm { tokens, targets, batch, seq } => {
                    let l = self.model.forward_lm(&mut fw, tokens, *batch, *seq)?;
                    (l, targets.as_slice(), batch * seq)
                }
            }
        };
        let vocab = self.model.config().vocab;
        let flat = tape.reshape(logits, &[rows, vocab])?;
        let loss = tape.cross_entropy_smoothed(flat, targets, self.cfg.label_smoothing, Some(PAD))?;
        let loss_val = tape.value(loss)[0];
        if !loss_val.is_finite() {
            return Err(Error::NonFiniteLoss { step, value: loss_val });
        }
        tape.backward(loss)?;
        self.store.zero_grads();
        self.store.accumulate_grads(&tape, &bound);
        self.opt.step(&mut self.store, lr);
        self.step = step;
        self.tokens += batch.target_tokens();
        Ok(StepMetrics { step, lr, loss: loss_val, tokens: self.tokens })
    }
}

/// Greedy-decode token accuracy on copy sources (target = source).
/// Positions past either sequence's end count as wrong.
pub fn copy_token_accuracy(
    model: &Model,
    store: &ParamStore,
    sources: &[Vec<usize>],
) -> Result<f64> {
    if sources.is_empty() {
        return Err(Error::invalid("accuracy needs at least one example"));
    }
    let mut correct = 0u64;
    let mut total = 0u64;
    for src in sources {
        let out = model.greedy_decode(store, src, src.len() + 4)?;
        total += src.len().max(out.tokens.len()) as u64;
        correct += out.tokens.iter().zip(src).filter(|(a, b)| a == b).count() as u64;
    }
    Ok(correct as f64 / total as f64)
}

/// Mean per-token cross entropy (no smoothing) over evaluation batches,
/// weighted by non-pad token counts.
pub fn validation_loss(model: &Model, store: &ParamStore, batches: &[Batch]) -> Result<f64> {
    if batches.is_empty() {
        return Err(Error::invalid("validation needs at least one batch"));
    }
    let vocab = model.config().vocab;
    let mut nll = 0.0;
    let mut count = 0u64;
    for batch in batches {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (logits, targets, rows) = {
            let mut fw = Fwd { tape: &mut tape, bound: &bound, training: false, rng: &mut rng };
            match batch {
                Batch::Seq2seq { src, tgt_in, tgt_out, batch, src_len, tgt_len } => {
                    let l =
                        model.forward_seq2seq(&mut fw, src, tgt_in, *batch, *src_len, *tgt_len)?;
                    (l, tgt_out.as_slice(), batch * tgt_len)
                }
                Batch::Lm { tokens, targets, batch, seq } => {
                    let l = model.forward_lm(&mut fw, tokens, *batch, *seq)?;
                    (l, targets.as_slice(), batch * seq)
                }
            }
        };
        let flat = tape.reshape(logits, &[rows, vocab])?;
        let loss = tape.cross_entropy_smoothed(flat, targets, 0.0, Some(PAD))?;
        let n = batch.target_tokens();
        nll += tape.value(loss)[0] * n as f64;
        count += n;
    }
    Ok(nll / count as f64)
}

/// Perplexity (plain cross entropy, no smoothing) over LM windows.
pub fn lm_perplexity(
    model: &Model,
    store: &ParamStore,
    windows: &[Vec<usize>],
    batch_size: usize,
) -> Result<f64> {
    if windows.is_empty() || batch_size == 0 {
        return Err(Error::invalid("perplexity needs windows and a positive batch size"));
    }
    let mut batches = Vec::new();
    for chunk in windows.chunks(batch_size) {
        let refs: Vec<&[usize]> = chunk.iter().map(|w| w.as_slice()).collect();
        batches.push(lm_batch(&refs)?);
    }
    Ok(validation_loss(model, store, &batches)?.exp())
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Versioned JSON manifest of named parameter tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub step: usize,
    pub config_hash: String,
    pub config: ModelConfig,
    pub params: Vec<SavedParam>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Stable hash of the model config's canonical JSON form.
pub fn config_hash(cfg: &ModelConfig) -> Result<String> {
    Ok(format!("{:016x}", fnv1a(serde_json::to_string(cfg)?.as_bytes())))
}

pub fn save_checkpoint(
    path: &Path,
    cfg: &ModelConfig,
    store: &ParamStore,
    step: usize,
) -> Result<()> {
    let ck = Checkpoint {
        version: CHECKPOINT_VERSION,
        step,
        config_hash: config_hash(cfg)?,
        config: cfg.clone(),
        params: store.to_saved(),
    };
    fs::write(path, serde_json::to_string(&ck)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let ck: Checkpoint = serde_json::from_str(&fs::read_to_string(path)?)?;
    if ck.version != CHECKPOINT_VERSION {
        return Err(Error::config(format!(
            "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
            ck.version
        )));
    }
    if ck.config_hash != config_hash(&ck.config)? {
        return Err(Error::config("checkpoint config hash does not match its config"));
    }
    Ok(ck)
}

/// Rebuild the model a checkpoint describes and load its weights.
pub fn restore_model(ck: &Checkpoint) -> Result<(Model, ParamStore)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (model, mut store) = build_model(&ck.config, &mut rng)?;
    store.load_saved(&ck.params)?;
    Ok((model, store))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, TaskKind};
    use crate::scaling::ScalingConfig;
    use crate::tasks::CopySampler;

    #[test]
    fn warmup_schedule_has_peak_and_inverse_sqrt_tail() {
        assert_eq!(lr_schedule(400, 400, 0.5), 0.5);
        assert!((lr_schedule(1600, 400, 0.5) - 0.25).abs() < 1e-15);
        for s in 2..400 {
            assert!(lr_schedule(s, 400, 0.5) > lr_schedule(s - 1, 400, 0.5));
        }
        for s in 401..800 {
            assert!(lr_schedule(s, 400, 0.5) < lr_schedule(s - 1, 400, 0.5));
        }
    }

    #[test]
    fn first_adam_step_moves_by_the_learning_rate() {
        let mut store = ParamStore::new();
        let p = store.register("w", &[1], vec![0.0]).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, true);
        let scaled = tape.scale(bound.id(p), 2.5).unwrap();
        let loss = tape.sum_all(scaled).unwrap();
        tape.backward(loss).unwrap();
        store.accumulate_grads(&tape, &bound);
        let mut opt = Adam::new(&store);
        opt.step(&mut store, 0.125);
        assert!((store.data(p)[0] + 0.125).abs() < 1e-9);
    }

    fn toy_model() -> (Model, ParamStore) {
        let mut scaling = ScalingConfig::new(2, 2, 2.0);
        scaling.blocks = Some(2);
        let mut cfg = ModelConfig::toy(10, 16, scaling, TaskKind::Seq2seq);
        cfg.max_positions = 32;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        build_model(&cfg, &mut rng).unwrap()
    }

    #[test]
    fn repeated_batch_loss_strictly_decreases() {
        let (model, store) = toy_model();
        let cfg = TrainConfig { batch_size: 4, peak_lr: 1e-3, warmup_steps: 50, ..Default::default() };
        let mut trainer = Trainer::new(model, store, cfg).unwrap();
        let mut sampler = CopySampler::new(10, 4..=4, 0).unwrap();
        let batch = sampler.next_batch(4);
        let mut last = f64::INFINITY;
        for _ in 0..10 {
            let m = trainer.train_step(&batch).unwrap();
            assert!(m.loss < last, "loss {} did not decrease from {last}", m.loss);
            last = m.loss;
        }
    }

    #[test]
    fn seeded_runs_are_bit_identical() {
        let run = || -> Vec<String> {
            let (model, store) = toy_model();
            let cfg = TrainConfig { batch_size: 4, ..Default::default() };
            let mut trainer = Trainer::new(model, store, cfg).unwrap();
            let mut sampler = CopySampler::new(10, 3..=6, 1).unwrap();
            (0..5)
                .map(|_| {
                    let batch = sampler.next_batch(4);
                    trainer.train_step(&batch).unwrap().to_json_line().unwrap()
                })
                .collect()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_loss_is_reported_with_step() {
        let (model, mut store) = toy_model();
        let nel = store.numel_at(0);
        let (data, _) = store.data_and_grad_mut(0);
        data.copy_from_slice(&vec![f64::NAN; nel]);
        let mut trainer =
            Trainer::new(model, store, TrainConfig { batch_size: 2, ..Default::default() })
                .unwrap();
        let mut sampler = CopySampler::new(10, 3..=3, 0).unwrap();
        let err = trainer.train_step(&sampler.next_batch(2)).unwrap_err();
        match err {
            Error::NonFiniteLoss { step, value } => {
                assert_eq!(step, 1);
                assert!(value.is_nan());
            }
            other => panic!("expected NonFiniteLoss, got {other}"),
        }
    }

    #[test]
    fn smoothed_loss_is_at_least_target_entropy() {
        let (model, store) = toy_model();
        let eps = 0.1f64;
        let v = 10.0f64;
        let entropy = -(0.9 * 0.9f64.ln() + eps * (eps / (v - 1.0)).ln());
        let mut trainer = Trainer::new(
            model,
            store,
            TrainConfig { batch_size: 4, ..Default::default() },
        )
        .unwrap();
        let mut sampler = CopySampler::new(10, 4..=6, 3).unwrap();
        for _ in 0..3 {
            let m = trainer.train_step(&sampler.next_batch(4)).unwrap();
            assert!(m.loss >= entropy - 1e-12);
        }
    }

    #[test]
    fn fresh_lm_perplexity_is_near_vocab_size() {
        let mut scaling = ScalingConfig::new(2, 3, 2.0);
        scaling.blocks = Some(2);
        let cfg = ModelConfig::toy(12, 32, scaling, TaskKind::Lm);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (model, store) = build_model(&cfg, &mut rng).unwrap();
        let windows: Vec<Vec<usize>> = (0..8).map(|i| vec![3 + i % 9, 4, 5, 6, 7]).collect();
        let ppl = lm_perplexity(&model, &store, &windows, 4).unwrap();
        assert!((ppl - 12.0).abs() / 12.0 < 0.25, "perplexity {ppl} not near vocab 12");
    }

    #[test]
    fn checkpoint_round_trip_is_lossless_and_validated() {
        let dir = std::env::temp_dir().join("delight_ck_test");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ckpt.json");
        let (model, store) = toy_model();
        save_checkpoint(&path, model.config(), &store, 17).unwrap();
        let first = fs::read(&path).unwrap();
        save_checkpoint(&path, model.config(), &store, 17).unwrap();
        assert_eq!(first, fs::read(&path).unwrap());

        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.step, 17);
        let (_restored, rstore) = restore_model(&ck).unwrap();
        for i in 0..store.len() {
            assert_eq!(store.data_at(i), rstore.data_at(i));
        }

        let mut bad = ck.clone();
        bad.config.vocab += 1;
        let bad_path = dir.join("tampered.ckpt.json");
        fs::write(&bad_path, serde_json::to_string(&bad).unwrap()).unwrap();
        assert!(load_checkpoint(&bad_path).is_err());
        fs::remove_dir_all(&dir).unwrap();
    }
}
