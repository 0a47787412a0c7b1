//! Periodic masking blueprints and the micro-tuning inputs they generate.
//!
//! A blueprint `(k, m)` keeps `k` tokens and masks the next `m`, repeating
//! with period `P = k + m`. Each blueprint is applied at every shift
//! `s in 0..min(P, len)`, masking position `j` iff `(j - s) mod P >= k`.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tokenizer::{Chunk, TokenId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MaskingBlueprint {
    keep: usize,
    mask: usize,
}

impl MaskingBlueprint {
    pub fn new(keep: usize, mask: usize) -> Result<Self> {
        if keep == 0 || mask == 0 {
            return Err(Error::InvalidBlueprint(format!("{keep}:{mask}")));
        }
        Ok(Self { keep, mask })
    }

    pub fn keep(&self) -> usize {
        self.keep
    }

    pub fn mask(&self) -> usize {
        self.mask
    }

    pub fn period(&self) -> usize {
        self.keep + self.mask
    }

    /// Whether position `j` is masked at shift `s`.
    pub fn is_masked(&self, j: usize, shift: usize) -> bool {
        let p = self.period() as i64;
        (j as i64 - shift as i64).rem_euclid(p) as usize >= self.keep
    }
}

impl fmt::Display for MaskingBlueprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.keep, self.mask)
    }
}

/// Either an ordered list of blueprints or identity mode, where nothing is
/// masked and every position is a prediction target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BlueprintSet {
    Periodic(Vec<MaskingBlueprint>),
    Identity,
}

impl BlueprintSet {
    pub fn periodic(blueprints: Vec<MaskingBlueprint>) -> Result<Self> {
        if blueprints.is_empty() {
            return Err(Error::InvalidBlueprint(String::new()));
        }
        Ok(BlueprintSet::Periodic(blueprints))
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, BlueprintSet::Identity)
    }

    /// Number of inputs `generate_inputs` emits for a chunk of `len` tokens.
    pub fn input_count(&self, len: usize) -> usize {
        match self {
            BlueprintSet::Identity => usize::from(len > 0),
            BlueprintSet::Periodic(bps) => bps.iter().map(|b| b.period().min(len)).sum(),
        }
    }
}

impl Default for BlueprintSet {
    /// `[(2,1), (1,1), (1,2), (1,3)]`
    fn default() -> Self {
        BlueprintSet::Periodic(vec![
            MaskingBlueprint { keep: 2, mask: 1 },
            MaskingBlueprint { keep: 1, mask: 1 },
            MaskingBlueprint { keep: 1, mask: 2 },
            MaskingBlueprint { keep: 1, mask: 3 },
        ])
    }
}

impl fmt::Display for BlueprintSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BlueprintSet::Identity => f.write_str("identity"),
            BlueprintSet::Periodic(bps) => {
                for (i, b) in bps.iter().enumerate() {
                    if i > 0 {
                        f.write_str(",")?;
                    }
                    write!(f, "{b}")?;
                }
                Ok(())
            }
        }
    }
}

/// Parses `"2:1,1:1,1:2,1:3"` or `"identity"`.
impl FromStr for BlueprintSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("identity") {
            return Ok(BlueprintSet::Identity);
        }
        let bad = || Error::InvalidBlueprint(s.to_owned());
        let blueprints = s
            .split(',')
            .map(|pair| {
                let (k, m) = pair.trim().split_once(':').ok_or_else(bad)?;
                let k = k.trim().parse().map_err(|_| bad())?;
                let m = m.trim().parse().map_err(|_| bad())?;
                MaskingBlueprint::new(k, m).map_err(|_| bad())
            })
            .collect::<Result<Vec<_>>>()?;
        BlueprintSet::periodic(blueprints).map_err(|_| bad())
    }
}

/// One training pair. `labels[j]` is `Some(original)` for prediction targets
/// and `None` (ignored by the loss) elsewhere.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MaskedInput {
    pub input_ids: Vec<TokenId>,
    pub labels: Vec<Option<TokenId>>,
}

impl MaskedInput {
    pub fn len(&self) -> usize {
        self.input_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input_ids.is_empty()
    }

    pub fn labeled_count(&self) -> usize {
        self.labels.iter().filter(|l| l.is_some()).count()
    }
}

pub fn generate_inputs(
    chunk: &Chunk,
    bset: &BlueprintSet,
    mask_id: TokenId,
) -> Result<Vec<MaskedInput>> {
    let tokens = &chunk.token_ids;
    if tokens.is_empty() {
        return Err(Error::EmptyChunk);
    }
    let blueprints = match bset {
        BlueprintSet::Identity => {
            return Ok(vec![MaskedInput {
                input_ids: tokens.clone(),
                labels: tokens.iter().copied().map(Some).collect(),
            }]);
        }
        BlueprintSet::Periodic(bps) => bps,
    };

    let mut out = Vec::with_capacity(bset.input_count(tokens.len()));
    for bp in blueprints {
        for shift in 0..bp.period().min(tokens.len()) {
            let mut input_ids = tokens.clone();
            let mut labels = vec![None; tokens.len()];
            for (j, id) in input_ids.iter_mut().enumerate() {
                if bp.is_masked(j, shift) {
                    labels[j] = Some(*id);
                    *id = mask_id;
                }
            }
            out.push(MaskedInput { input_ids, labels });
        }
    }
    Ok(out)
}

/// Inputs of every non-empty chunk, in chunk order, then shuffled with a
/// seeded Fisher-Yates pass.
pub fn build_training_set(
    chunks: &[Chunk],
    bset: &BlueprintSet,
    mask_id: TokenId,
    seed: u64,
) -> Result<Vec<MaskedInput>> {
    let mut inputs = Vec::new();
    for chunk in chunks.iter().filter(|c| !c.is_empty()) {
        inputs.extend(generate_inputs(chunk, bset, mask_id)?);
    }
    if inputs.is_empty() {
        return Err(Error::NoTrainableContent);
    }
    inputs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(inputs)
}
