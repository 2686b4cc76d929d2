//! Finite-difference verification of the backward pass.
//!
//! Each named component builds a small instance of one layer type, runs
//! a scalar loss through it, and compares tape gradients against central
//! differences at randomly sampled parameter coordinates. The relative
//! error uses an absolute floor so coordinates with near-zero gradients
//! do not dominate.

use crate::block::{
    single_head_attention, BlockConfig, DecoderBlock, EncoderBlock, Fwd, LightFfn,
};
use crate::dextra::{input_mixer, shuffle_perm, Dextra, DextraConfig};
use crate::error::{Error, Result};
use crate::glt::GroupLinear;
use crate::model::{build_model, ModelConfig, TaskKind, FIRST_CONTENT_TOKEN, PAD};
use crate::params::{Bound, ParamStore};
use crate::scaling::ScalingConfig;
use crate::tape::{Tape, TensorId};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Central-difference step size.
pub const FD_STEP: f64 = 1e-5;
/// Default relative-error tolerance.
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Denominator floor for the relative error.
pub const REL_ERR_FLOOR: f64 = 1e-3;

/// Component names accepted by [`check_component`].
pub const COMPONENTS: &[&str] = &[
    "glt",
    "shuffle_mixer",
    "dextra",
    "attention",
    "light_ffn",
    "encoder_block",
    "decoder_block",
    "full_model",
];

/// Outcome of one gradient check.
#[derive(Clone, Debug)]
pub struct GradReport {
    pub component: String,
    pub coords_checked: usize,
    pub max_rel_err: f64,
    /// `name[index]` of the worst coordinate.
    pub worst_param: Option<String>,
    pub tolerance: f64,
}

impl GradReport {
    /// A model with nothing to train passes vacuously.
    pub fn passed(&self) -> bool {
        self.coords_checked == 0 || self.max_rel_err <= self.tolerance
    }

    pub fn summary_line(&self) -> String {
        if self.coords_checked == 0 {
            return format!("{}: no trainable coordinates, vacuously ok", self.component);
        }
        format!(
            "{}: max rel err {:.3e} over {} coords (worst at {}) {}",
            self.component,
            self.max_rel_err,
            self.coords_checked,
            self.worst_param.as_deref().unwrap_or("?"),
            if self.passed() { "ok" } else { "FAIL" }
        )
    }
}

fn eval_loss<F>(store: &ParamStore, loss_fn: &mut F) -> Result<f64>
where
    F: FnMut(&mut Tape, &Bound) -> Result<TensorId>,
{
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, false);
    let id = loss_fn(&mut tape, &bound)?;
    if tape.value(id).len() != 1 {
        return Err(Error::invalid("gradient check needs a scalar loss"));
    }
    Ok(tape.value(id)[0])
}

/// Compare tape gradients of `loss_fn` against central differences at up
/// to `coords_per_param` sampled coordinates of every parameter tensor.
/// The loss closure must be a pure function of the bound parameters.
pub fn check_gradients<F>(
    component: &str,
    store: &mut ParamStore,
    mut loss_fn: F,
    coords_per_param: usize,
    tolerance: f64,
    seed: u64,
) -> Result<GradReport>
where
    F: FnMut(&mut Tape, &Bound) -> Result<TensorId>,
{
    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, true);
        let loss = loss_fn(&mut tape, &bound)?;
        if tape.value(loss).len() != 1 {
            return Err(Error::invalid("gradient check needs a scalar loss"));
        }
        tape.backward(loss)?;
        store.zero_grads();
        store.accumulate_grads(&tape, &bound);
        (0..store.len()).map(|i| store.grad_at(i).to_vec()).collect()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradReport {
        component: component.to_string(),
        coords_checked: 0,
        max_rel_err: 0.0,
        worst_param: None,
        tolerance,
    };
    for i in 0..store.len() {
        let numel = store.numel_at(i);
        let picks = rand::seq::index::sample(&mut rng, numel, coords_per_param.min(numel));
        for j in picks {
            let orig = store.data_at(i)[j];
            store.data_and_grad_mut(i).0[j] = orig + FD_STEP;
            let plus = eval_loss(store, &mut loss_fn)?;
            store.data_and_grad_mut(i).0[j] = orig - FD_STEP;
            let minus = eval_loss(store, &mut loss_fn)?;
            store.data_and_grad_mut(i).0[j] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let exact = analytic[i][j];
            let rel = (exact - numeric).abs() / exact.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
            report.coords_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = Some(format!("{}[{}]", store.name_at(i), j));
            }
        }
    }
    Ok(report)
}

fn sample_input<R: Rng>(rng: &mut R, numel: usize) -> Vec<f64> {
    (0..numel).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn squared_sum(tape: &mut Tape, x: TensorId) -> Result<TensorId> {
    let sq = tape.mul(x, x)?;
    tape.sum_all(sq)
}

/// Build a named component at toy scale and gradient-check it.
pub fn check_component(
    component: &str,
    coords_per_param: usize,
    tol: f64,
    seed: u64,
) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    match component {
        "glt" => {
            let layer = GroupLinear::new(&mut store, &mut rng, "glt", 8, 8, 4, true)?;
            let x = sample_input(&mut rng, 2 * 8);
            check_gradients(
                component,
                &mut store,
                move |tape, bound| {
                    let xt = tape.constant(x.clone(), &[2, 8])?;
                    let y = layer.forward(tape, bound, xt)?;
                    squared_sum(tape, y)
                },
                coords_per_param,
                tol,
                seed,
            )
        }
        "shuffle_mixer" => {
            let l1 = GroupLinear::new(&mut store, &mut rng, "mix.l1", 12, 12, 3, true)?;
            let l2 = GroupLinear::new(&mut store, &mut rng, "mix.l2", 24, 6, 2, true)?;
            let x = sample_input(&mut rng, 2 * 12);
            check_gradients(
                component,
                &mut store,
                move |tape, bound| {
                    let xt = tape.constant(x.clone(), &[2, 12])?;
                    let y = l1.forward(tape, bound, xt)?;
                    let y = tape.gelu(y)?;
                    let shuffled = tape.permute_features(y, &shuffle_perm(12, 3)?)?;
                    let mixed = input_mixer(tape, xt, shuffled, 2)?;
                    let out = l2.forward(tape, bound, mixed)?;
                    squared_sum(tape, out)
                },
                coords_per_param,
                tol,
                seed,
            )
        }
        "dextra" => {
            let mut cfg = DextraConfig::new(16, 8, 4, 2.0);
            cfg.g_max = 4;
            let dex = Dextra::new(&mut store, &mut rng, "dex", &cfg)?;
            let x = sample_input(&mut rng, 2 * 16);
            check_gradients(
                component,
                &mut store,
                move |tape, bound| {
                    let xt = tape.constant(x.clone(), &[2, 16])?;
                    let y = dex.forward(tape, bound, xt)?;
                    squared_sum(tape, y)
                },
                coords_per_param,
                tol,
                seed,
            )
        }
        "attention" => {
            let wq = GroupLinear::new(&mut store, &mut rng, "attn.wq", 8, 6, 1, true)?;
            let wk = GroupLinear::new(&mut store, &mut rng, "attn.wk", 8, 6, 1, true)?;
            let wv = GroupLinear::new(&mut store, &mut rng, "attn.wv", 8, 6, 1, true)?;
            let x = sample_input(&mut rng, 3 * 8);
            check_gradients(
                component,
                &mut store,
                move |tape, bound| {
                    let xt = tape.constant(x.clone(), &[1, 3, 8])?;
                    let q = wq.forward(tape, bound, xt)?;
                    let k = wk.forward(tape, bound, xt)?;
                    let v = wv.forward(tape, bound, xt)?;
                    let mut step_rng = ChaCha8Rng::seed_from_u64(0);
                    let y = {
                        let mut fw = Fwd {
                            tape: &mut *tape,
                            bound,
                            training: false,
                            rng: &mut step_rng,
                        };
                        single_head_attention(&mut fw, q, k, v, true, 0.0)?
                    };
                    squared_sum(tape, y)
                },
                coords_per_param,
                tol,
                seed,
            )
        }
        "light_ffn" => {
            let cfg = BlockConfig::new(16, 3, 2.0);
            let ffn = LightFfn::new(&mut store, &mut rng, "ffn", &cfg)?;
            let x = sample_input(&mut rng, 2 * 16);
            check_gradients(
                component,
                &mut store,
                move |tape, bound| {
                    let xt = tape.constant(x.clone(), &[2, 16])?;
                    let mut step_rng = ChaCha8Rng::seed_from_u64(0);
                    let y = {
                        let mut fw = Fwd {
                            tape: &mut *tape,
                            bound,
                            training: false,
                            rng: &mut step_rng,
                        };
                        ffn.forward(&mut fw, xt)?
                    };
                    squared_sum(tape, y)
                },
                coords_per_param,
                tol,
                seed,
            )
        }
        "encoder_block" => {
            let mut cfg = BlockConfig::new(16, 3, 2.0);
            cfg.g_max = 2;
            let block = EncoderBlock::new(&mut store, &mut rng, "enc", &cfg)?;
            let x = sample_input(&mut rng, 2 * 3 * 16);
            check_gradients(
                component,
                &mut store,
                move |tape, bound| {
                    let xt = tape.constant(x.clone(), &[2, 3, 16])?;
                    let mut step_rng = ChaCha8Rng::seed_from_u64(0);
                    let y = {
                        let mut fw = Fwd {
                            tape: &mut *tape,
                            bound,
                            training: false,
                            rng: &mut step_rng,
                        };
                        block.forward(&mut fw, xt, true)?
                    };
                    squared_sum(tape, y)
                },
                coords_per_param,
                tol,
                seed,
            )
        }
        "decoder_block" => {
            let mut cfg = BlockConfig::new(16, 3, 2.0);
            cfg.g_max = 2;
            let block = DecoderBlock::new(&mut store, &mut rng, "dec", &cfg)?;
            let x = sample_input(&mut rng, 3 * 16);
            let enc = sample_input(&mut rng, 4 * 16);
            check_gradients(
                component,
                &mut store,
                move |tape, bound| {
                    let xt = tape.constant(x.clone(), &[1, 3, 16])?;
                    let et = tape.constant(enc.clone(), &[1, 4, 16])?;
                    let mut step_rng = ChaCha8Rng::seed_from_u64(0);
                    let y = {
                        let mut fw = Fwd {
                            tape: &mut *tape,
                            bound,
                            training: false,
                            rng: &mut step_rng,
                        };
                        block.forward(&mut fw, xt, et)?
                    };
                    squared_sum(tape, y)
                },
                coords_per_param,
                tol,
                seed,
            )
        }
        "full_model" => {
            let mut scaling = ScalingConfig::new(2, 2, 2.0);
            scaling.blocks = Some(2);
            let mut cfg = ModelConfig::toy(8, 32, scaling, TaskKind::Lm);
            cfg.max_positions = 16;
            let (model, mut model_store) = build_model(&cfg, &mut rng)?;
            let (batch, seq) = (2, 4);
            let tokens: Vec<usize> = (0..batch * seq)
                .map(|_| rng.gen_range(FIRST_CONTENT_TOKEN..cfg.vocab))
                .collect();
            let targets: Vec<usize> = (0..batch * seq)
                .map(|_| rng.gen_range(FIRST_CONTENT_TOKEN..cfg.vocab))
                .collect();
            let vocab = cfg.vocab;
            check_gradients(
                component,
                &mut model_store,
                move |tape, bound| {
                    let mut step_rng = ChaCha8Rng::seed_from_u64(0);
                    let logits = {
                        let mut fw = Fwd {
                            tape: &mut *tape,
                            bound,
                            training: false,
                            rng: &mut step_rng,
                        };
                        model.forward_lm(&mut fw, &tokens, batch, seq)?
                    };
                    let flat = tape.reshape(logits, &[batch * seq, vocab])?;
                    tape.cross_entropy_smoothed(flat, &targets, 0.1, Some(PAD))
                },
                coords_per_param,
                tol,
                seed,
            )
        }
        other => Err(Error::invalid(format!(
            "unknown gradcheck component {other}; expected one of {COMPONENTS:?}"
        ))),
    }
}
