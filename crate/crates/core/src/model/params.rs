//! Named parameter storage, layer selection and snapshot/restore.
//!
//! Names follow the BERT layout without the leading `bert.`. Store order:
//!
//! ```text
//! embeddings.{word_embeddings,position_embeddings}.weight
//! embeddings.LayerNorm.{weight,bias}
//! encoder.layer.<i>.attention.self.{query,key,value}.{weight,bias}
//! encoder.layer.<i>.attention.output.dense.{weight,bias}
//! encoder.layer.<i>.attention.output.LayerNorm.{weight,bias}
//! encoder.layer.<i>.intermediate.dense.{weight,bias}
//! encoder.layer.<i>.output.dense.{weight,bias}
//! encoder.layer.<i>.output.LayerNorm.{weight,bias}
//! cls.predictions.transform.dense.{weight,bias}
//! cls.predictions.transform.LayerNorm.{weight,bias}
//! cls.predictions.decoder.weight
//! cls.predictions.bias
//! ```
//!
//! Dense weights are stored `[out, in]`.

use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use ndarray::{ArrayD, ArrayView1, ArrayView2, Ix1, Ix2, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use crate::error::{Error, Result};

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterStore {
    config: ModelConfig,
    tensors: IndexMap<String, ArrayD<f64>>,
}

pub(crate) fn block_prefix(i: usize) -> String {
    format!("encoder.layer.{i}")
}

/// Every parameter name and shape for `config`, in store order.
pub fn parameter_layout(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (v, d, f, l) = (
        config.vocab_size,
        config.hidden_dim,
        config.ffn_dim,
        config.max_input_len,
    );
    let mut out = vec![
        ("embeddings.word_embeddings.weight".to_owned(), vec![v, d]),
        (
            "embeddings.position_embeddings.weight".to_owned(),
            vec![l, d],
        ),
        ("embeddings.LayerNorm.weight".to_owned(), vec![d]),
        ("embeddings.LayerNorm.bias".to_owned(), vec![d]),
    ];
    for i in 0..config.num_blocks {
        let p = block_prefix(i);
        for (sub, out_dim, in_dim) in [
            ("attention.self.query", d, d),
            ("attention.self.key", d, d),
            ("attention.self.value", d, d),
            ("attention.output.dense", d, d),
            ("attention.output.LayerNorm", d, 0),
            ("intermediate.dense", f, d),
            ("output.dense", d, f),
            ("output.LayerNorm", d, 0),
        ] {
            if in_dim == 0 {
                out.push((format!("{p}.{sub}.weight"), vec![out_dim]));
            } else {
                out.push((format!("{p}.{sub}.weight"), vec![out_dim, in_dim]));
            }
            out.push((format!("{p}.{sub}.bias"), vec![out_dim]));
        }
    }
    out.extend([
        (
            "cls.predictions.transform.dense.weight".to_owned(),
            vec![d, d],
        ),
        ("cls.predictions.transform.dense.bias".to_owned(), vec![d]),
        (
            "cls.predictions.transform.LayerNorm.weight".to_owned(),
            vec![d],
        ),
        (
            "cls.predictions.transform.LayerNorm.bias".to_owned(),
            vec![d],
        ),
        ("cls.predictions.decoder.weight".to_owned(), vec![v, d]),
        ("cls.predictions.bias".to_owned(), vec![v]),
    ]);
    out
}

impl ParameterStore {
    /// Seeded initialization: dense and embedding weights ~ N(0, 0.02),
    /// biases zero, LayerNorm scales one.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let tensors = parameter_layout(&config)
            .into_iter()
            .map(|(name, shape)| {
                let t = if name.ends_with("LayerNorm.weight") {
                    ArrayD::ones(IxDyn(&shape))
                } else if name.ends_with(".weight") {
                    ArrayD::from_shape_simple_fn(IxDyn(&shape), || normal.sample(&mut rng))
                } else {
                    ArrayD::zeros(IxDyn(&shape))
                };
                (name, t)
            })
            .collect();
        Ok(Self { config, tensors })
    }

    /// Builds a store from explicit tensors, checking names and shapes
    /// against the layout of `config`.
    pub fn from_tensors(
        config: ModelConfig,
        tensors: IndexMap<String, ArrayD<f64>>,
    ) -> Result<Self> {
        config.validate()?;
        let layout = parameter_layout(&config);
        if layout.len() != tensors.len() {
            return Err(Error::InvalidConfig(format!(
                "expected {} parameters, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        let mut ordered = IndexMap::with_capacity(layout.len());
        let mut tensors = tensors;
        for (name, shape) in layout {
            let t = tensors
                .swap_remove(&name)
                .ok_or_else(|| Error::UnknownParameter(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    name,
                    expected: shape,
                    actual: t.shape().to_vec(),
                });
            }
            ordered.insert(name, t.as_standard_layout().into_owned());
        }
        Ok(Self {
            config,
            tensors: ordered,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<f64>> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(ArrayD::len).sum()
    }

    pub(crate) fn matrix(&self, name: &str) -> ArrayView2<'_, f64> {
        self.tensors[name]
            .view()
            .into_dimensionality::<Ix2>()
            .expect("layout guarantees a matrix")
    }

    pub(crate) fn vector(&self, name: &str) -> ArrayView1<'_, f64> {
        self.tensors[name]
            .view()
            .into_dimensionality::<Ix1>()
            .expect("layout guarantees a vector")
    }

    /// SHA-256 over names, shapes and little-endian values, hex encoded.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update((name.len() as u32).to_le_bytes());
            h.update(name.as_bytes());
            for &dim in t.shape() {
                h.update((dim as u64).to_le_bytes());
            }
            for &x in t.iter() {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// True when every value is bitwise identical (NaN payloads included).
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((na, a), (nb, b))| {
                    na == nb
                        && a.shape() == b.shape()
                        && a.iter()
                            .zip(b.iter())
                            .all(|(x, y)| x.to_bits() == y.to_bits())
                })
    }
}

/// Ordered, duplicate-free list of parameter names that are tuned; every
/// other parameter stays frozen.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LayerSelection(Vec<String>);

impl LayerSelection {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(Error::InvalidConfig("layer selection is empty".into()));
        }
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(Error::InvalidConfig(format!(
                    "duplicate layer {n:?} in selection"
                )));
            }
        }
        Ok(Self(names))
    }

    /// Output dense bias and output LayerNorm of the last encoder block.
    pub fn last_block_default(config: &ModelConfig) -> Self {
        let p = block_prefix(config.num_blocks - 1);
        Self(vec![
            format!("{p}.output.dense.bias"),
            format!("{p}.output.LayerNorm.weight"),
            format!("{p}.output.LayerNorm.bias"),
        ])
    }

    /// Every parameter of the store, in store order.
    pub fn all(params: &ParameterStore) -> Self {
        Self(params.names().map(str::to_owned).collect())
    }

    pub fn validate(&self, params: &ParameterStore) -> Result<()> {
        match self.0.iter().find(|n| !params.contains(n)) {
            Some(n) => Err(Error::UnknownParameter(n.clone())),
            None => Ok(()),
        }
    }

    pub fn names(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.iter().any(|n| n == name)
    }
}

impl fmt::Display for LayerSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0.join(","))
    }
}

impl FromStr for LayerSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::new(s.split(',').map(str::trim).filter(|n| !n.is_empty()))
    }
}

/// Copies of the selected tensors, in selection order.
pub fn snapshot(params: &ParameterStore, selection: &LayerSelection) -> Result<Vec<ArrayD<f64>>> {
    selection
        .names()
        .iter()
        .map(|n| {
            params
                .get(n)
                .cloned()
                .ok_or_else(|| Error::UnknownParameter(n.clone()))
        })
        .collect()
}

/// Writes a snapshot back. All shapes are checked before anything is written.
pub fn restore(
    params: &mut ParameterStore,
    selection: &LayerSelection,
    saved: &[ArrayD<f64>],
) -> Result<()> {
    if saved.len() != selection.len() {
        return Err(Error::SelectionMismatch(format!(
            "{} tensors for {} selected layers",
            saved.len(),
            selection.len()
        )));
    }
    for (name, t) in selection.names().iter().zip(saved) {
        let cur = params
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.clone()))?;
        if cur.shape() != t.shape() {
            return Err(Error::ShapeMismatch {
                name: name.clone(),
                expected: cur.shape().to_vec(),
                actual: t.shape().to_vec(),
            });
        }
    }
    for (name, t) in selection.names().iter().zip(saved) {
        params.get_mut(name).expect("checked above").assign(t);
    }
    Ok(())
}
