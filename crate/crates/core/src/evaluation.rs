//! Triplet evaluation of embeddings against group labels.
//!
//! For an anchor `A`, a same-group candidate `B` and a different-group
//! candidate `C`, the triplet is broken when `E_A·E_B <= E_A·E_C` (ties
//! count as broken). Counting is done per anchor: similarities to the
//! different-group candidates are sorted once and each same-group similarity
//! is located by binary search, so an anchor costs `O((nB + nC) log nC)`
//! instead of `O(nB · nC)`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    #[default]
    Both,
    AnchorOnly,
    CandidateOnly,
}

impl Role {
    pub fn is_anchor(self) -> bool {
        matches!(self, Role::Both | Role::AnchorOnly)
    }

    pub fn is_candidate(self) -> bool {
        matches!(self, Role::Both | Role::CandidateOnly)
    }
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "both" => Ok(Role::Both),
            "anchor_only" => Ok(Role::AnchorOnly),
            "candidate_only" => Ok(Role::CandidateOnly),
            _ => Err(format!("unknown role {s:?}")),
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Both => "both",
            Role::AnchorOnly => "anchor_only",
            Role::CandidateOnly => "candidate_only",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetItem {
    pub id: String,
    pub group: String,
    pub role: Role,
    pub text: Option<String>,
}

/// Group-labeled items with role restrictions. Group indices follow first
/// appearance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupedDataset {
    items: Vec<DatasetItem>,
    group_of: Vec<usize>,
    groups: Vec<String>,
}

impl GroupedDataset {
    pub fn new(items: Vec<DatasetItem>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(items.len());
        let mut group_ids: HashMap<&str, usize> = HashMap::new();
        let mut groups = Vec::new();
        let mut group_of = Vec::with_capacity(items.len());
        for item in &items {
            if item.id.is_empty() || item.group.is_empty() {
                return Err(Error::InvalidDataset("empty id or group".into()));
            }
            if !seen.insert(item.id.as_str()) {
                return Err(Error::InvalidDataset(format!("duplicate id {:?}", item.id)));
            }
            let next = group_ids.len();
            let g = *group_ids.entry(item.group.as_str()).or_insert_with(|| {
                groups.push(item.group.clone());
                next
            });
            group_of.push(g);
        }
        Ok(Self {
            items,
            group_of,
            groups,
        })
    }

    /// `groups` groups, each with `both` items of role BOTH, `anchors`
    /// ANCHOR_ONLY items and `candidates` CANDIDATE_ONLY items. Ids are
    /// `g<group>-<index>`.
    pub fn shaped(groups: usize, both: usize, anchors: usize, candidates: usize) -> Self {
        let mut items = Vec::with_capacity(groups * (both + anchors + candidates));
        for g in 0..groups {
            let roles = std::iter::repeat_n(Role::Both, both)
                .chain(std::iter::repeat_n(Role::AnchorOnly, anchors))
                .chain(std::iter::repeat_n(Role::CandidateOnly, candidates));
            for (i, role) in roles.enumerate() {
                items.push(DatasetItem {
                    id: format!("g{g}-{i}"),
                    group: format!("g{g}"),
                    role,
                    text: None,
                });
            }
        }
        Self::new(items).expect("generated ids are unique")
    }

    pub fn items(&self) -> &[DatasetItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn group_of(&self, item: usize) -> usize {
        self.group_of[item]
    }

    pub fn group_names(&self) -> &[String] {
        &self.groups
    }

    fn candidates_per_group(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.groups.len()];
        for (i, item) in self.items.iter().enumerate() {
            if item.role.is_candidate() {
                out[self.group_of[i]].push(i);
            }
        }
        out
    }
}

/// Sum over eligible anchors of (same-group candidates other than the
/// anchor) × (candidates in other groups).
pub fn count_triplets(ds: &GroupedDataset) -> u64 {
    let per_group: Vec<u64> = ds
        .candidates_per_group()
        .iter()
        .map(|c| c.len() as u64)
        .collect();
    let total: u64 = per_group.iter().sum();
    ds.items
        .iter()
        .enumerate()
        .filter(|(_, it)| it.role.is_anchor())
        .map(|(i, it)| {
            let g = per_group[ds.group_of[i]];
            let same = g - u64::from(it.role.is_candidate());
            same * (total - g)
        })
        .sum()
}

/// Unit-norm vectors keyed by id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    ids: Vec<String>,
    index: HashMap<String, usize>,
    dim: usize,
    data: Vec<f64>,
    fingerprint: String,
}

impl EmbeddingMatrix {
    /// Normalizes every row to unit length. Zero or non-finite rows, ragged
    /// dimensions and duplicate ids are rejected.
    pub fn from_rows(ids: Vec<String>, rows: Vec<Vec<f64>>) -> Result<Self> {
        let normalized = ids
            .iter()
            .zip(rows)
            .map(|(id, mut row)| {
                if row.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidDataset(format!(
                        "non-finite value in vector {id:?}"
                    )));
                }
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm == 0.0 {
                    return Err(Error::InvalidDataset(format!("zero vector for {id:?}")));
                }
                row.iter_mut().for_each(|v| *v /= norm);
                Ok(row)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_unit_rows(ids, normalized)
    }

    /// Takes rows as given, without renormalizing.
    pub fn from_unit_rows(ids: Vec<String>, rows: Vec<Vec<f64>>) -> Result<Self> {
        if ids.len() != rows.len() {
            return Err(Error::InvalidDataset(format!(
                "{} ids for {} rows",
                ids.len(),
                rows.len()
            )));
        }
        let dim = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(dim * rows.len());
        for row in &rows {
            if row.len() != dim {
                return Err(Error::InconsistentDimension {
                    expected: dim,
                    actual: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::InvalidDataset(format!(
                    "duplicate embedding id {id:?}"
                )));
            }
        }
        Ok(Self {
            ids,
            index,
            dim,
            data,
            fingerprint: String::new(),
        })
    }

    pub fn with_fingerprint(mut self, fingerprint: impl Into<String>) -> Self {
        self.fingerprint = fingerprint.into();
        self
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.index.get(id).map(|&i| self.row(i))
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// Returns a copy with `f` applied to every row.
    pub fn map_rows(&self, mut f: impl FnMut(&[f64]) -> Vec<f64>) -> Result<Self> {
        let rows = (0..self.len()).map(|i| f(self.row(i))).collect();
        Ok(
            Self::from_unit_rows(self.ids.clone(), rows)?
                .with_fingerprint(self.fingerprint.clone()),
        )
    }
}

/// Sequential dot product; every similarity in this module goes through it.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Concatenates the two unit vectors of each id and renormalizes, so the
/// ensemble similarity is the mean of the two component similarities.
/// Output rows follow `e1`'s id order.
pub fn concat_ensemble(e1: &EmbeddingMatrix, e2: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    if e1.len() != e2.len() {
        return Err(Error::IdSetMismatch(format!(
            "{} vs {} ids",
            e1.len(),
            e2.len()
        )));
    }
    let rows = e1
        .ids
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let other = e2.get(id).ok_or_else(|| {
                Error::IdSetMismatch(format!("{id:?} missing from second matrix"))
            })?;
            let mut row: Vec<f64> = e1.row(i).iter().chain(other).copied().collect();
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter_mut().for_each(|v| *v /= norm);
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    let fp = format!("concat({},{})", e1.fingerprint, e2.fingerprint);
    Ok(EmbeddingMatrix::from_unit_rows(e1.ids.clone(), rows)?.with_fingerprint(fp))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletReport {
    pub total_triplets: u64,
    pub broken_triplets: u64,
    /// Broken triplets with `E_A·E_B == E_A·E_C` exactly.
    pub tie_triplets: u64,
    /// Anchors contributing at least one triplet.
    pub anchors: u64,
    pub error_global: f64,
    pub error_per_anchor_avg: f64,
    /// Triplet-weighted mean of `E_A·E_B` (0 when there are no triplets).
    pub same_avg: f64,
    /// Triplet-weighted mean of `E_A·E_C` (0 when there are no triplets).
    pub diff_avg: f64,
}

impl TripletReport {
    /// `key=value` lines.
    pub fn to_kv(&self) -> String {
        format!(
            "total_triplets={}\nbroken_triplets={}\ntie_triplets={}\nanchors={}\nerror_global={}\nerror_per_anchor_avg={}\nsame_avg={}\ndiff_avg={}\n",
            self.total_triplets,
            self.broken_triplets,
            self.tie_triplets,
            self.anchors,
            self.error_global,
            self.error_per_anchor_avg,
            self.same_avg,
            self.diff_avg
        )
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct AnchorStats {
    total: u64,
    broken: u64,
    ties: u64,
    same_sum: f64,
    diff_sum: f64,
}

/// (similarity, dataset item) pairs.
type Scored = Vec<(f64, usize)>;

/// Dataset rows resolved against an embedding matrix.
struct Aligned<'a> {
    ds: &'a GroupedDataset,
    emb: &'a EmbeddingMatrix,
    rows: Vec<usize>,
    candidates: Vec<Vec<usize>>,
}

impl<'a> Aligned<'a> {
    fn new(emb: &'a EmbeddingMatrix, ds: &'a GroupedDataset) -> Result<Self> {
        let rows = ds
            .items
            .iter()
            .map(|it| {
                emb.position(&it.id)
                    .ok_or_else(|| Error::MissingId(it.id.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            ds,
            emb,
            rows,
            candidates: ds.candidates_per_group(),
        })
    }

    fn sim(&self, a: usize, b: usize) -> f64 {
        dot(self.emb.row(self.rows[a]), self.emb.row(self.rows[b]))
    }

    fn anchors(&self) -> Vec<usize> {
        (0..self.ds.len())
            .filter(|&i| self.ds.items[i].role.is_anchor())
            .collect()
    }

    /// Same-group similarities and ascending (similarity, item) pairs for
    /// the other groups.
    fn split(&self, a: usize) -> (Scored, Scored) {
        let g = self.ds.group_of[a];
        let same = self.candidates[g]
            .iter()
            .filter(|&&b| b != a)
            .map(|&b| (self.sim(a, b), b))
            .collect();
        let mut diff: Vec<(f64, usize)> = self
            .candidates
            .iter()
            .enumerate()
            .filter(|&(h, _)| h != g)
            .flat_map(|(_, members)| members.iter().map(|&c| (self.sim(a, c), c)))
            .collect();
        diff.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
        (same, diff)
    }

    fn anchor_stats(&self, a: usize) -> AnchorStats {
        let (same, diff) = self.split(a);
        let (nb, nc) = (same.len() as u64, diff.len() as u64);
        let mut st = AnchorStats {
            total: nb * nc,
            ..AnchorStats::default()
        };
        if st.total == 0 {
            return st;
        }
        for &(s, _) in &same {
            let below = diff.partition_point(|&(c, _)| c < s);
            let at_or_below = diff.partition_point(|&(c, _)| c <= s);
            st.broken += nc - below as u64;
            st.ties += (at_or_below - below) as u64;
            st.same_sum += s * nc as f64;
        }
        st.diff_sum = diff.iter().map(|&(c, _)| c).sum::<f64>() * nb as f64;
        st
    }

    fn dim_check(&self) -> Result<()> {
        if self.emb.dim() == 0 && !self.emb.is_empty() {
            return Err(Error::InvalidDataset("zero-dimensional embeddings".into()));
        }
        Ok(())
    }
}

pub fn evaluate(emb: &EmbeddingMatrix, ds: &GroupedDataset) -> Result<TripletReport> {
    let al = Aligned::new(emb, ds)?;
    al.dim_check()?;
    let stats: Vec<AnchorStats> = al
        .anchors()
        .par_iter()
        .map(|&a| al.anchor_stats(a))
        .collect();

    let mut total = 0u64;
    let mut broken = 0u64;
    let mut ties = 0u64;
    let mut same_sum = 0.0;
    let mut diff_sum = 0.0;
    let mut anchors = 0u64;
    // broken counts summed per distinct anchor triplet count
    let mut by_total: BTreeMap<u64, u64> = BTreeMap::new();
    for st in &stats {
        total += st.total;
        broken += st.broken;
        ties += st.ties;
        same_sum += st.same_sum;
        diff_sum += st.diff_sum;
        if st.total > 0 {
            anchors += 1;
            *by_total.entry(st.total).or_default() += st.broken;
        }
    }
    // With one distinct count t this is broken / (t * anchors), the same
    // expression as the global error.
    let per_anchor: f64 = by_total
        .iter()
        .map(|(&t, &b)| b as f64 / (t as f64 * anchors as f64))
        .sum();
    let ratio = |num: f64, den: u64| if den == 0 { 0.0 } else { num / den as f64 };
    Ok(TripletReport {
        total_triplets: total,
        broken_triplets: broken,
        tie_triplets: ties,
        anchors,
        error_global: ratio(broken as f64, total),
        error_per_anchor_avg: per_anchor,
        same_avg: ratio(same_sum, total),
        diff_avg: ratio(diff_sum, total),
    })
}

/// Broken triplets as sorted `[A, B, C]` dataset item indices.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BrokenSet {
    triplets: Vec<[u32; 3]>,
}

impl BrokenSet {
    pub fn from_triplets(mut triplets: Vec<[u32; 3]>) -> Self {
        triplets.sort_unstable();
        triplets.dedup();
        Self { triplets }
    }

    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    pub fn triplets(&self) -> &[[u32; 3]] {
        &self.triplets
    }

    pub fn contains(&self, t: &[u32; 3]) -> bool {
        self.triplets.binary_search(t).is_ok()
    }

    pub fn intersection_count(&self, other: &BrokenSet) -> usize {
        let (mut i, mut j, mut n) = (0, 0, 0);
        while i < self.triplets.len() && j < other.triplets.len() {
            match self.triplets[i].cmp(&other.triplets[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    n += 1;
                    i += 1;
                    j += 1;
                }
            }
        }
        n
    }

    /// Lines of `A-id\tB-id\tC-id`, sorted lexicographically.
    pub fn id_lines(&self, ds: &GroupedDataset) -> Vec<String> {
        let id = |i: u32| ds.items[i as usize].id.as_str();
        let mut lines: Vec<String> = self
            .triplets
            .iter()
            .map(|&[a, b, c]| format!("{}\t{}\t{}", id(a), id(b), id(c)))
            .collect();
        lines.sort_unstable();
        lines
    }

    pub fn write(&self, path: impl AsRef<Path>, ds: &GroupedDataset) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        for line in self.id_lines(ds) {
            writeln!(w, "{line}")?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Enumerates every broken triplet. With `cap`, fails before allocating if
/// more than `cap` triplets are broken.
pub fn broken_set(
    emb: &EmbeddingMatrix,
    ds: &GroupedDataset,
    cap: Option<usize>,
) -> Result<BrokenSet> {
    let al = Aligned::new(emb, ds)?;
    al.dim_check()?;
    let anchors = al.anchors();
    if let Some(cap) = cap {
        let broken: u64 = anchors.par_iter().map(|&a| al.anchor_stats(a).broken).sum();
        if broken > cap as u64 {
            return Err(Error::BrokenBudgetExceeded(cap));
        }
    }
    let per_anchor: Vec<Vec<[u32; 3]>> = anchors
        .par_iter()
        .map(|&a| {
            let (same, diff) = al.split(a);
            let mut out = Vec::new();
            for &(s, b) in &same {
                let start = diff.partition_point(|&(c, _)| c < s);
                out.extend(
                    diff[start..]
                        .iter()
                        .map(|&(_, c)| [a as u32, b as u32, c as u32]),
                );
            }
            out
        })
        .collect();
    Ok(BrokenSet::from_triplets(
        per_anchor.into_iter().flatten().collect(),
    ))
}

/// `|a ∩ b| / min(|a|, |b|)`, defined as 0 when either set is empty.
pub fn intersection(a: &BrokenSet, b: &BrokenSet) -> f64 {
    let denom = a.len().min(b.len());
    if denom == 0 {
        return 0.0;
    }
    a.intersection_count(b) as f64 / denom as f64
}
