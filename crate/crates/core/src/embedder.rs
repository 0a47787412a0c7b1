//! Micro-tuning: tune the selected layers on one text, read the weight
//! deltas, then put the original weights back.
//!
//! The embedding is built from the per-layer deltas `D_j = W'_j - W_j`,
//! each flattened row-major and scaled to unit length, concatenated in
//! selection order, and the concatenation scaled to unit length again.

use std::fmt;

use log::debug;
use ndarray::ArrayD;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::masking::{build_training_set, BlueprintSet, MaskedInput};
use crate::model::{
    adamw_step, batch_loss_and_gradients, restore, snapshot, AdamWConfig, LayerSelection,
    OptimizerState, ParameterStore,
};
use crate::tokenizer::{chunk_text, Vocabulary};

/// Delta norms below this make the per-layer normalization undefined.
pub const DEGENERATE_DELTA_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct MicroTuneConfig {
    pub blueprints: BlueprintSet,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub selection: LayerSelection,
}

impl MicroTuneConfig {
    /// Default blueprints, 20 epochs, lr 5e-5, batch size 30, weight decay 0.01.
    pub fn new(selection: LayerSelection) -> Self {
        Self {
            blueprints: BlueprintSet::default(),
            epochs: 20,
            lr: 5e-5,
            batch_size: 30,
            weight_decay: 0.01,
            seed: 0,
            selection,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::InvalidConfig(
                "micro-tuning needs epochs >= 1, batch_size >= 1 and lr > 0".into(),
            ));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig("weight_decay must be >= 0".into()));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

impl fmt::Display for MicroTuneConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "blueprints={};epochs={};lr={:e};batch_size={};weight_decay={:e};seed={};layers={}",
            self.blueprints,
            self.epochs,
            self.lr,
            self.batch_size,
            self.weight_decay,
            self.seed,
            self.selection
        )
    }
}

/// SHA-256 of the tuning config and the base-model fingerprint.
pub fn embedding_fingerprint(cfg: &MicroTuneConfig, base_fingerprint: &str) -> String {
    let mut h = Sha256::new();
    h.update(cfg.to_string().as_bytes());
    h.update(b"\0");
    h.update(base_fingerprint.as_bytes());
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuralEmbedding {
    pub values: Vec<f64>,
    pub layout: Vec<Segment>,
    pub fingerprint: String,
}

impl NeuralEmbedding {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn segment(&self, i: usize) -> &[f64] {
        let s = &self.layout[i];
        &self.values[s.offset..s.offset + s.len]
    }

    pub fn norm(&self) -> f64 {
        l2(&self.values)
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Combines per-layer deltas into a unit-norm embedding whose segments each
/// have norm `1/sqrt(m)`.
pub fn delta_embedding(
    selection: &LayerSelection,
    original: &[ArrayD<f64>],
    tuned: &[ArrayD<f64>],
) -> Result<NeuralEmbedding> {
    if original.len() != selection.len() || tuned.len() != selection.len() {
        return Err(Error::SelectionMismatch(format!(
            "{} original and {} tuned tensors for {} layers",
            original.len(),
            tuned.len(),
            selection.len()
        )));
    }
    let mut values = Vec::new();
    let mut layout = Vec::with_capacity(selection.len());
    for ((name, w0), w1) in selection.names().iter().zip(original).zip(tuned) {
        if w0.shape() != w1.shape() {
            return Err(Error::ShapeMismatch {
                name: name.clone(),
                expected: w0.shape().to_vec(),
                actual: w1.shape().to_vec(),
            });
        }
        let delta: Vec<f64> = w1.iter().zip(w0.iter()).map(|(a, b)| a - b).collect();
        let norm = l2(&delta);
        if !(norm >= DEGENERATE_DELTA_NORM) {
            return Err(Error::DegenerateDelta(name.clone()));
        }
        layout.push(Segment {
            name: name.clone(),
            offset: values.len(),
            len: delta.len(),
        });
        values.extend(delta.iter().map(|d| d / norm));
    }
    let total = l2(&values);
    values.iter_mut().for_each(|v| *v /= total);
    Ok(NeuralEmbedding {
        values,
        layout,
        fingerprint: String::new(),
    })
}

fn train_on(
    params: &mut ParameterStore,
    inputs: &[MaskedInput],
    cfg: &MicroTuneConfig,
) -> Result<()> {
    let mut state = OptimizerState::new(cfg.optimizer(), params, &cfg.selection)?;
    for _ in 0..cfg.epochs {
        for batch in inputs.chunks(cfg.batch_size) {
            if batch.iter().all(|b| b.labeled_count() == 0) {
                continue;
            }
            let (_, grads) = batch_loss_and_gradients(params, batch, &cfg.selection)?;
            adamw_step(params, &grads, &mut state)?;
        }
    }
    Ok(())
}

fn embed_with_fingerprint(
    params: &mut ParameterStore,
    text: &str,
    vocab: &Vocabulary,
    cfg: &MicroTuneConfig,
    base_fingerprint: &str,
) -> Result<NeuralEmbedding> {
    cfg.validate()?;
    cfg.selection.validate(params)?;
    let chunks = chunk_text(text, vocab, params.config().max_input_len);
    if chunks.is_empty() {
        return Err(Error::EmptyText);
    }
    let inputs = build_training_set(&chunks, &cfg.blueprints, vocab.mask_id(), cfg.seed)?;

    let original = snapshot(params, &cfg.selection)?;
    let trained = train_on(params, &inputs, cfg);
    let tuned = snapshot(params, &cfg.selection);
    restore(params, &cfg.selection, &original)?;
    trained?;

    let mut emb = delta_embedding(&cfg.selection, &original, &tuned?)?;
    emb.fingerprint = embedding_fingerprint(cfg, base_fingerprint);
    debug!(
        "embedded text of {} chunks / {} inputs",
        chunks.len(),
        inputs.len()
    );
    Ok(emb)
}

/// Micro-tunes a copy of the selected layers on `text` and returns the delta
/// embedding. `params` is bitwise unchanged afterwards, including on error.
pub fn embed_text(
    params: &mut ParameterStore,
    text: &str,
    vocab: &Vocabulary,
    cfg: &MicroTuneConfig,
) -> Result<NeuralEmbedding> {
    let fp = params.fingerprint();
    embed_with_fingerprint(params, text, vocab, cfg, &fp)
}

/// Embeds every text independently on `workers` threads, each with its own
/// copy of `params`. Element `i` corresponds to `texts[i]`.
pub fn embed_corpus<S: AsRef<str> + Sync>(
    params: &ParameterStore,
    texts: &[S],
    vocab: &Vocabulary,
    cfg: &MicroTuneConfig,
    workers: usize,
) -> Vec<Result<NeuralEmbedding>> {
    let fp = params.fingerprint();
    let run = || {
        texts
            .par_iter()
            .map_init(
                || params.clone(),
                |local, text| embed_with_fingerprint(local, text.as_ref(), vocab, cfg, &fp),
            )
            .collect()
    };
    match rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
    {
        Ok(pool) => pool.install(run),
        Err(e) => {
            log::warn!("could not build a {workers}-thread pool ({e}); using the global pool");
            run()
        }
    }
}
