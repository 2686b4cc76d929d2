//! Training and evaluation drivers behind the `train` and `eval`
//! commands: batch sampling per task, the step loop with a JSONL metrics
//! log, final checkpointing, and held-out metric computation.

use crate::config::{ResolvedRun, ResolvedTask, RunConfig};
use delight::error::{Error, Result};
use delight::model::{build_model, Model, TaskKind};
use delight::params::ParamStore;
use delight::tasks::{copy_teacher_pair, make_copy_dataset, Batch, CopySampler, LmSampler};
use delight::train::{
    copy_token_accuracy, lm_perplexity, load_checkpoint, restore_model, save_checkpoint,
    validation_loss, Trainer,
};
use rand_chacha::rand_core::SeedableRng;
use serde::Serialize;
use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

/// Separates the held-out stream from the training stream.
const HOLDOUT_SEED_SALT: u64 = 0x9e3779b97f4a7c15;

#[derive(Clone, Debug, Serialize)]
pub struct EvalOutcome {
    pub task: String,
    pub metric: String,
    pub value: f64,
    pub validation_loss: f64,
}

#[derive(Serialize)]
pub struct TrainOutcome {
    pub steps: usize,
    pub final_loss: f64,
    pub eval: EvalOutcome,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics_path: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint_path: Option<PathBuf>,
}

/// Train per the resolved run; with an output directory this writes
/// `metrics.jsonl`, `model.ckpt.json`, and `eval.json` into it.
pub fn run_training(run: &ResolvedRun, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(run.train.seed);
    let (model, store) = build_model(&run.model, &mut rng)?;
    let mut trainer = Trainer::new(model, store, run.train.clone())?;

    let mut writer = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(BufWriter::new(fs::File::create(dir.join("metrics.jsonl"))?))
        }
        None => None,
    };
    let batch_size = run.train.batch_size;
    let mut next_batch: Box<dyn FnMut() -> Result<Batch>> = match &run.task {
        ResolvedTask::Copy { vocab, min_len, max_len, .. } => {
            let mut s = CopySampler::new(*vocab, *min_len..=*max_len, run.train.seed)?;
            Box::new(move || Ok(s.next_batch(batch_size)))
        }
        ResolvedTask::CharLm { data, .. } => {
            let mut s = LmSampler::new(&data.train, run.train.seed)?;
            Box::new(move || s.next_batch(batch_size))
        }
    };

    let mut final_loss = f64::NAN;
    for _ in 0..run.train.steps {
        let batch = next_batch()?;
        let metrics = trainer.train_step(&batch)?;
        if let Some(w) = writer.as_mut() {
            writeln!(w, "{}", metrics.to_json_line()?)?;
        }
        if metrics.step % 100 == 0 || metrics.step == run.train.steps {
            log::info!(
                "step {} loss {:.4} lr {:.3e}",
                metrics.step,
                metrics.loss,
                metrics.lr
            );
        }
        final_loss = metrics.loss;
    }
    if let Some(w) = writer.as_mut() {
        w.flush()?;
    }

    let eval = evaluate(&run.task, run.train.seed, trainer.model(), trainer.store())?;
    let (metrics_path, checkpoint_path) = match out_dir {
        Some(dir) => {
            let ckpt = dir.join("model.ckpt.json");
            save_checkpoint(&ckpt, &run.model, trainer.store(), trainer.step_count())?;
            fs::write(dir.join("eval.json"), serde_json::to_string_pretty(&eval)?)?;
            (Some(dir.join("metrics.jsonl")), Some(ckpt))
        }
        None => (None, None),
    };
    Ok(TrainOutcome {
        steps: trainer.step_count(),
        final_loss,
        eval,
        metrics_path,
        checkpoint_path,
    })
}

/// Teacher-forced batches over the held-out copy sources, grouped by
/// length so each batch stays homogeneous.
fn copy_eval_batches(sources: &[Vec<usize>]) -> Vec<Batch> {
    let mut by_len: BTreeMap<usize, Vec<&Vec<usize>>> = BTreeMap::new();
    for s in sources {
        by_len.entry(s.len()).or_default().push(s);
    }
    by_len
        .into_iter()
        .map(|(len, group)| {
            let mut src = Vec::new();
            let mut tgt_in = Vec::new();
            let mut tgt_out = Vec::new();
            for s in &group {
                let (tin, tout) = copy_teacher_pair(s);
                src.extend_from_slice(s);
                tgt_in.extend(tin);
                tgt_out.extend(tout);
            }
            Batch::Seq2seq {
                src,
                tgt_in,
                tgt_out,
                batch: group.len(),
                src_len: len,
                tgt_len: len + 1,
            }
        })
        .collect()
}

/// Held-out metric for a trained model: greedy-decode token accuracy on
/// the copy task, validation perplexity on the char LM.
pub fn evaluate(
    task: &ResolvedTask,
    seed: u64,
    model: &Model,
    store: &ParamStore,
) -> Result<EvalOutcome> {
    match task {
        ResolvedTask::Copy { vocab, min_len, max_len, holdout } => {
            let sources = make_copy_dataset(
                *vocab,
                *min_len..=*max_len,
                *holdout,
                seed ^ HOLDOUT_SEED_SALT,
            )?;
            let value = copy_token_accuracy(model, store, &sources)?;
            let loss = validation_loss(model, store, &copy_eval_batches(&sources))?;
            Ok(EvalOutcome {
                task: "copy".into(),
                metric: "token_accuracy".into(),
                value,
                validation_loss: loss,
            })
        }
        ResolvedTask::CharLm { data, .. } => {
            let ppl = lm_perplexity(model, store, &data.valid, 32)?;
            Ok(EvalOutcome {
                task: "char_lm".into(),
                metric: "perplexity".into(),
                value: ppl,
                validation_loss: ppl.ln(),
            })
        }
    }
}

/// Evaluate a checkpoint. Without a run config the task is rebuilt from
/// defaults matching the checkpoint's task kind and vocabulary.
pub fn run_eval(
    checkpoint: &Path,
    config: Option<&Path>,
    seed_override: Option<u64>,
) -> Result<EvalOutcome> {
    let ck = load_checkpoint(checkpoint)?;
    let (model, store) = restore_model(&ck)?;
    let mut run_cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => match ck.config.task {
            TaskKind::Seq2seq => {
                let mut c = RunConfig::toy_copy();
                c.model.vocab = Some(ck.config.vocab);
                c
            }
            TaskKind::Lm => RunConfig::toy_char_lm(),
        },
    };
    if let Some(seed) = seed_override {
        run_cfg.train.seed = seed;
    }
    if run_cfg.task_kind() != ck.config.task {
        return Err(Error::Config(format!(
            "config task {:?} does not match checkpoint task {:?}",
            run_cfg.task_kind(),
            ck.config.task
        )));
    }
    let resolved = run_cfg.resolve()?;
    let task_vocab = match &resolved.task {
        ResolvedTask::Copy { vocab, .. } => *vocab,
        ResolvedTask::CharLm { data, .. } => data.vocab,
    };
    if task_vocab != ck.config.vocab {
        return Err(Error::Config(format!(
            "task vocabulary {task_vocab} does not match checkpoint vocabulary {}",
            ck.config.vocab
        )));
    }
    evaluate(&resolved.task, resolved.train.seed, &model, &store)
}
