//! Seeded MLM pretraining of all parameters, standing in for a pretrained
//! base model.

use log::debug;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::optim::{adamw_step, AdamWConfig, OptimizerState};
use super::params::{LayerSelection, ParameterStore};
use super::transformer::{batch_loss, batch_loss_and_gradients};
use crate::error::{Error, Result};
use crate::masking::MaskedInput;
use crate::tokenizer::{chunk_text, Chunk, TokenId, Vocabulary, SPECIAL_TOKENS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Fraction of positions selected as targets; of those, 80% become
    /// `[MASK]`, 10% a random token and 10% stay unchanged.
    pub mask_prob: f64,
    /// Fraction of chunks held out for evaluation.
    pub heldout_fraction: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 400,
            batch_size: 16,
            lr: 2e-3,
            weight_decay: 0.01,
            mask_prob: 0.15,
            heldout_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub initial_heldout_loss: f64,
    pub final_heldout_loss: f64,
    pub final_train_loss: f64,
    pub train_chunks: usize,
    pub heldout_chunks: usize,
}

fn random_mask(
    chunk: &Chunk,
    vocab_size: usize,
    mask_id: TokenId,
    mask_prob: f64,
    rng: &mut impl Rng,
) -> MaskedInput {
    let n = chunk.len();
    let mut input_ids = chunk.token_ids.clone();
    let mut labels = vec![None; n];
    let mut targets: Vec<usize> = (0..n).filter(|_| rng.random_bool(mask_prob)).collect();
    if targets.is_empty() {
        targets.push(rng.random_range(0..n));
    }
    for j in targets {
        labels[j] = Some(input_ids[j]);
        let r: f64 = rng.random();
        if r < 0.8 {
            input_ids[j] = mask_id;
        } else if r < 0.9 && vocab_size > SPECIAL_TOKENS.len() {
            input_ids[j] = rng.random_range(SPECIAL_TOKENS.len()..vocab_size) as TokenId;
        }
    }
    MaskedInput { input_ids, labels }
}

/// Trains every parameter from `ParameterStore::init(config, seed)` for
/// `pcfg.steps` AdamW steps on randomly masked corpus chunks.
pub fn pretrain<S: AsRef<str>>(
    corpus: &[S],
    vocab: &Vocabulary,
    config: ModelConfig,
    pcfg: &PretrainConfig,
) -> Result<(ParameterStore, PretrainReport)> {
    if pcfg.batch_size == 0 || !(pcfg.mask_prob > 0.0 && pcfg.mask_prob <= 1.0) {
        return Err(Error::InvalidConfig(
            "pretraining needs batch_size >= 1 and 0 < mask_prob <= 1".into(),
        ));
    }
    let chunks: Vec<Chunk> = corpus
        .iter()
        .flat_map(|t| chunk_text(t.as_ref(), vocab, config.max_input_len))
        .collect();
    if chunks.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut params = ParameterStore::init(config, pcfg.seed)?;
    let held = if chunks.len() >= 2 {
        ((chunks.len() as f64 * pcfg.heldout_fraction).round() as usize).clamp(1, chunks.len() - 1)
    } else {
        0
    };
    let (train, heldout) = chunks.split_at(chunks.len() - held);
    let heldout = if heldout.is_empty() { train } else { heldout };

    let mut eval_rng = ChaCha8Rng::seed_from_u64(pcfg.seed ^ 0x5e_ed0f_e7a1);
    let heldout_set: Vec<MaskedInput> = heldout
        .iter()
        .map(|c| {
            random_mask(
                c,
                config.vocab_size,
                vocab.mask_id(),
                pcfg.mask_prob,
                &mut eval_rng,
            )
        })
        .collect();
    let initial_heldout_loss = batch_loss(&params, &heldout_set)?;

    let selection = LayerSelection::all(&params);
    let opt_cfg = AdamWConfig {
        lr: pcfg.lr,
        weight_decay: pcfg.weight_decay,
        ..AdamWConfig::default()
    };
    let mut state = OptimizerState::new(opt_cfg, &params, &selection)?;
    let mut rng = ChaCha8Rng::seed_from_u64(pcfg.seed.wrapping_add(1));
    let mut final_train_loss = f64::NAN;
    for step in 0..pcfg.steps {
        let batch: Vec<MaskedInput> = (0..pcfg.batch_size)
            .map(|_| {
                let c = &train[rng.random_range(0..train.len())];
                random_mask(
                    c,
                    config.vocab_size,
                    vocab.mask_id(),
                    pcfg.mask_prob,
                    &mut rng,
                )
            })
            .collect();
        let (loss, grads) = batch_loss_and_gradients(&params, &batch, &selection)?;
        adamw_step(&mut params, &grads, &mut state)?;
        final_train_loss = loss;
        if step % 50 == 0 {
            debug!("pretrain step {step}: loss {loss:.4}");
        }
    }
    let final_heldout_loss = batch_loss(&params, &heldout_set)?;
    Ok((
        params,
        PretrainReport {
            initial_heldout_loss,
            final_heldout_loss,
            final_train_loss,
            train_chunks: train.len(),
            heldout_chunks: heldout.len(),
        },
    ))
}
