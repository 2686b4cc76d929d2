//! Deterministic toy tasks: sequence copying and character-level
//! language modeling over a bundled text.
//!
//! Both tasks reserve token 0 for padding, 1 for BOS, and 2 for EOS;
//! content starts at 3. Copy batches are length-homogeneous (one length
//! drawn per batch), so no padding or attention masks are needed at toy
//! scale. The char LM slides a window of `context + 1` tokens over the
//! text with stride 1 and splits the shuffled windows 90/10 into train
//! and validation sets.

use crate::error::{Error, Result};
use crate::model::{BOS, EOS, FIRST_CONTENT_TOKEN, PAD};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::ops::RangeInclusive;

/// Public-domain snippet bundled for the char LM task.
pub const BUNDLED_TEXT: &str = include_str!("../data/text.txt");

/// One training batch, already laid out for the model's forward call.
#[derive(Clone, Debug, PartialEq)]
pub enum Batch {
    Seq2seq {
        src: Vec<usize>,
        tgt_in: Vec<usize>,
        tgt_out: Vec<usize>,
        batch: usize,
        src_len: usize,
        tgt_len: usize,
    },
    Lm {
        tokens: Vec<usize>,
        targets: Vec<usize>,
        batch: usize,
        seq: usize,
    },
}

impl Batch {
    /// Number of non-pad target positions, the denominator of the loss.
    pub fn target_tokens(&self) -> u64 {
        let targets = match self {
            Batch::Seq2seq { tgt_out, .. } => tgt_out,
            Batch::Lm { targets, .. } => targets,
        };
        targets.iter().filter(|&&t| t != PAD).count() as u64
    }
}

fn validate_copy_args(vocab: usize, len_range: &RangeInclusive<usize>) -> Result<()> {
    if vocab <= FIRST_CONTENT_TOKEN {
        return Err(Error::invalid(format!(
            "copy task needs vocab > {FIRST_CONTENT_TOKEN}, got {vocab}"
        )));
    }
    if len_range.is_empty() || *len_range.start() == 0 {
        return Err(Error::invalid(format!(
            "copy length range {len_range:?} must be nonempty and positive"
        )));
    }
    Ok(())
}

/// Deterministic held-out copy sources: `size` sequences of content
/// tokens in `[3, vocab)` with lengths drawn from `len_range`.
pub fn make_copy_dataset(
    vocab: usize,
    len_range: RangeInclusive<usize>,
    size: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    validate_copy_args(vocab, &len_range)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..size)
        .map(|_| {
            let len = rng.gen_range(len_range.clone());
            (0..len)
                .map(|_| rng.gen_range(FIRST_CONTENT_TOKEN..vocab))
                .collect()
        })
        .collect())
}

/// Teacher-forcing layout for one copy example: input is BOS followed by
/// the source, output is the source followed by EOS.
pub fn copy_teacher_pair(src: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut tgt_in = Vec::with_capacity(src.len() + 1);
    tgt_in.push(BOS);
    tgt_in.extend_from_slice(src);
    let mut tgt_out = Vec::with_capacity(src.len() + 1);
    tgt_out.extend_from_slice(src);
    tgt_out.push(EOS);
    (tgt_in, tgt_out)
}

/// Streaming sampler of length-homogeneous copy batches.
pub struct CopySampler {
    vocab: usize,
    len_range: RangeInclusive<usize>,
    rng: ChaCha8Rng,
}

impl CopySampler {
    pub fn new(vocab: usize, len_range: RangeInclusive<usize>, seed: u64) -> Result<Self> {
        validate_copy_args(vocab, &len_range)?;
        Ok(Self { vocab, len_range, rng: ChaCha8Rng::seed_from_u64(seed) })
    }

    pub fn next_batch(&mut self, batch_size: usize) -> Batch {
        let len = self.rng.gen_range(self.len_range.clone());
        let mut src = Vec::with_capacity(batch_size * len);
        let mut tgt_in = Vec::with_capacity(batch_size * (len + 1));
        let mut tgt_out = Vec::with_capacity(batch_size * (len + 1));
        for _ in 0..batch_size {
            let row: Vec<usize> = (0..len)
                .map(|_| self.rng.gen_range(FIRST_CONTENT_TOKEN..self.vocab))
                .collect();
            let (ti, to) = copy_teacher_pair(&row);
            src.extend_from_slice(&row);
            tgt_in.extend(ti);
            tgt_out.extend(to);
        }
        Batch::Seq2seq { src, tgt_in, tgt_out, batch: batch_size, src_len: len, tgt_len: len + 1 }
    }
}

/// Tokenized char LM corpus with a fixed train/validation window split.
#[derive(Clone, Debug)]
pub struct CharLmData {
    pub vocab: usize,
    pub charset: Vec<char>,
    /// Windows of `context + 1` token ids each.
    pub train: Vec<Vec<usize>>,
    pub valid: Vec<Vec<usize>>,
}

/// Slice `text` into next-char prediction windows.
pub fn make_char_lm_dataset(text: &str, context: usize, seed: u64) -> Result<CharLmData> {
    if context == 0 {
        return Err(Error::invalid("char LM context must be positive"));
    }
    let mut charset: Vec<char> = text.chars().collect();
    charset.sort_unstable();
    charset.dedup();
    if charset.is_empty() {
        return Err(Error::invalid("char LM text is empty"));
    }
    let lookup = |c: char| -> usize {
        FIRST_CONTENT_TOKEN + charset.binary_search(&c).unwrap()
    };
    let tokens: Vec<usize> = text.chars().map(lookup).collect();
    if tokens.len() < context + 2 {
        return Err(Error::invalid(format!(
            "text with {} chars is too short for context {context}",
            tokens.len()
        )));
    }
    let mut windows: Vec<Vec<usize>> = (0..tokens.len() - context)
        .map(|i| tokens[i..i + context + 1].to_vec())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..windows.len()).rev() {
        windows.swap(i, rng.gen_range(0..=i));
    }
    let valid_len = (windows.len() / 10).max(1);
    let train = windows.split_off(valid_len);
    Ok(CharLmData {
        vocab: FIRST_CONTENT_TOKEN + charset.len(),
        charset,
        train,
        valid: windows,
    })
}

/// Assemble an LM batch from windows: inputs are the first `context`
/// tokens, targets the last `context`.
pub fn lm_batch(windows: &[&[usize]]) -> Result<Batch> {
    let Some(first) = windows.first() else {
        return Err(Error::invalid("LM batch needs at least one window"));
    };
    let seq = first.len() - 1;
    let mut tokens = Vec::with_capacity(windows.len() * seq);
    let mut targets = Vec::with_capacity(windows.len() * seq);
    for w in windows {
        if w.len() != seq + 1 {
            return Err(Error::invalid("LM windows must share one length"));
        }
        tokens.extend_from_slice(&w[..seq]);
        targets.extend_from_slice(&w[1..]);
    }
    Ok(Batch::Lm { tokens, targets, batch: windows.len(), seq })
}

/// Sampler of LM batches drawn with replacement from a window set.
pub struct LmSampler<'a> {
    windows: &'a [Vec<usize>],
    rng: ChaCha8Rng,
}

impl<'a> LmSampler<'a> {
    pub fn new(windows: &'a [Vec<usize>], seed: u64) -> Result<Self> {
        if windows.is_empty() {
            return Err(Error::invalid("LM sampler needs a nonempty window set"));
        }
        Ok(Self { windows, rng: ChaCha8Rng::seed_from_u64(seed) })
    }

    pub fn next_batch(&mut self, batch_size: usize) -> Result<Batch> {
        let picks: Vec<&[usize]> = (0..batch_size)
            .map(|_| self.windows[self.rng.gen_range(0..self.windows.len())].as_slice())
            .collect();
        lm_batch(&picks)
    }
}

/// Perplexity of an add-one-smoothed unigram model fit on the training
/// windows' target positions and scored on the validation targets.
pub fn unigram_perplexity(train: &[Vec<usize>], valid: &[Vec<usize>], vocab: usize) -> f64 {
    let mut counts = vec![0u64; vocab];
    let mut total = 0u64;
    for w in train {
        for &t in &w[1..] {
            counts[t] += 1;
            total += 1;
        }
    }
    let denom = (total + vocab as u64) as f64;
    let mut nll = 0.0;
    let mut scored = 0u64;
    for w in valid {
        for &t in &w[1..] {
            let p = (counts[t] + 1) as f64 / denom;
            nll -= p.ln();
            scored += 1;
        }
    }
    (nll / scored as f64).exp()
}
