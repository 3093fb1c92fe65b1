//! Permutation algebra: rankings, importance vectors, supermasks and
//! majority voting.
//!
//! A [`Ranking`] lists the edge IDs of one layer in ascending order of
//! importance, so `order[0]` is the least important edge. Its inverse, the
//! [`ImportanceVector`], maps each edge to its position. Majority voting sums
//! importance vectors across clients and re-sorts the edges by their totals.
//!
//! Everything here is per layer; a whole model is a `Vec<Ranking>` with one
//! entry per layer.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FrlError, Result};

/// Index of an edge within its layer.
pub type EdgeId = usize;

/// Per-layer permutation of edge IDs, least important first.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<EdgeId>", into = "Vec<EdgeId>")]
pub struct Ranking {
    order: Vec<EdgeId>,
}

impl Ranking {
    /// Builds a ranking, checking that `order` is a permutation of `0..n`.
    pub fn new(order: Vec<EdgeId>) -> Result<Self> {
        check_permutation(&order)?;
        Ok(Self { order })
    }

    pub fn identity(n: usize) -> Self {
        Self { order: (0..n).collect() }
    }

    /// Uniformly random permutation of `0..n`.
    pub fn random<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        let mut order: Vec<EdgeId> = (0..n).collect();
        order.shuffle(rng);
        Self { order }
    }

    pub fn order(&self) -> &[EdgeId] {
        &self.order
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn into_order(self) -> Vec<EdgeId> {
        self.order
    }

    /// Sorts edges ascending by `key`, ties broken by ascending edge ID.
    pub fn from_keys<K: PartialOrd>(keys: &[K]) -> Self {
        let mut order: Vec<EdgeId> = (0..keys.len()).collect();
        // sort_by is stable and `order` starts in ID order, so equal keys
        // keep ascending IDs.
        order.sort_by(|&a, &b| {
            keys[a]
                .partial_cmp(&keys[b])
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        Self { order }
    }

    pub(crate) fn from_order_unchecked(order: Vec<EdgeId>) -> Self {
        debug_assert!(check_permutation(&order).is_ok());
        Self { order }
    }
}

impl TryFrom<Vec<EdgeId>> for Ranking {
    type Error = FrlError;

    fn try_from(order: Vec<EdgeId>) -> Result<Self> {
        Ranking::new(order)
    }
}

impl From<Ranking> for Vec<EdgeId> {
    fn from(r: Ranking) -> Self {
        r.order
    }
}

fn check_permutation(order: &[EdgeId]) -> Result<()> {
    let n = order.len();
    let mut seen = vec![false; n];
    for &e in order {
        if e >= n {
            return Err(FrlError::Validation(format!(
                "edge id {e} out of range for a layer of {n} edges"
            )));
        }
        if std::mem::replace(&mut seen[e], true) {
            return Err(FrlError::Validation(format!("duplicate edge id {e}")));
        }
    }
    Ok(())
}

/// Position of every edge in a ranking, indexed by edge ID.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImportanceVector(Vec<usize>);

impl ImportanceVector {
    pub fn new(scores: Vec<usize>) -> Result<Self> {
        check_permutation(&scores)?;
        Ok(Self(scores))
    }

    pub fn scores(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Inverse operation: the ranking whose importance vector this is.
    pub fn to_ranking(&self) -> Ranking {
        let mut order = vec![0; self.0.len()];
        for (edge, &pos) in self.0.iter().enumerate() {
            order[pos] = edge;
        }
        Ranking::from_order_unchecked(order)
    }
}

/// Binary edge selection for one layer, indexed by edge ID.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuperMask {
    bits: Vec<u8>,
    sparsity_k: f64,
}

impl SuperMask {
    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn sparsity(&self) -> f64 {
        self.sparsity_k
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn is_selected(&self, e: EdgeId) -> bool {
        self.bits[e] == 1
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }

    /// Mask with every bit set to `value`; used for gating experiments.
    pub fn filled(n: usize, value: bool, sparsity_k: f64) -> Self {
        Self {
            bits: vec![u8::from(value); n],
            sparsity_k,
        }
    }
}

/// Sum of importance vectors over the voting clients, indexed by edge ID.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggregatedScore(Vec<u64>);

impl AggregatedScore {
    pub fn new(totals: Vec<u64>) -> Self {
        Self(totals)
    }

    pub fn totals(&self) -> &[u64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `result[e]` is the position of edge `e` in `r`.
pub fn invert(r: &Ranking) -> ImportanceVector {
    let mut scores = vec![0; r.len()];
    for (pos, &e) in r.order.iter().enumerate() {
        scores[e] = pos;
    }
    ImportanceVector(scores)
}

fn check_sparsity(k: f64) -> Result<()> {
    if k.is_finite() && k > 0.0 && k <= 1.0 {
        Ok(())
    } else {
        Err(FrlError::Parameter(format!("sparsity k must lie in (0, 1], got {k}")))
    }
}

/// Selection boundary `t = floor((1 - k) n)`.
///
/// A small epsilon absorbs binary rounding, e.g. `(1 - 0.9) * 10` evaluates
/// to `0.999...` in `f64` but must give 1.
pub fn selection_boundary(n: usize, k: f64) -> usize {
    let t = ((1.0 - k) * n as f64 + 1e-9).floor();
    (t.max(0.0) as usize).min(n)
}

/// Supermask selecting edges whose position is at least the boundary.
pub fn mask_from_ranking(r: &Ranking, k: f64) -> Result<SuperMask> {
    check_sparsity(k)?;
    let t = selection_boundary(r.len(), k);
    let mut bits = vec![0u8; r.len()];
    for &e in &r.order[t..] {
        bits[e] = 1;
    }
    Ok(SuperMask { bits, sparsity_k: k })
}

/// Masks for every layer of a model ranking.
pub fn masks_from_rankings(rs: &[Ranking], k: f64) -> Result<Vec<SuperMask>> {
    rs.iter().map(|r| mask_from_ranking(r, k)).collect()
}

/// Summed importance of each edge across `rs`.
pub fn aggregate_scores(rs: &[Ranking]) -> Result<AggregatedScore> {
    let first = rs
        .first()
        .ok_or_else(|| FrlError::Validation("majority vote over zero rankings".into()))?;
    let n = first.len();
    let mut totals = vec![0u64; n];
    for r in rs {
        if r.len() != n {
            return Err(FrlError::Validation(format!(
                "ranking lengths differ: {} vs {n}",
                r.len()
            )));
        }
        for (pos, &e) in r.order.iter().enumerate() {
            totals[e] += pos as u64;
        }
    }
    Ok(AggregatedScore(totals))
}

/// Majority vote: sum importance vectors, then rank edges by their totals
/// (ties by ascending edge ID).
pub fn mv_aggregate(rs: &[Ranking]) -> Result<(Ranking, AggregatedScore)> {
    let scores = aggregate_scores(rs)?;
    let ranking = Ranking::from_keys(scores.totals());
    Ok((ranking, scores))
}

/// Layer-wise majority vote over whole-model rankings (`rs[client][layer]`).
pub fn mv_aggregate_layers(rs: &[&[Ranking]]) -> Result<Vec<(Ranking, AggregatedScore)>> {
    let first = rs
        .first()
        .ok_or_else(|| FrlError::Validation("majority vote over zero clients".into()))?;
    let layers = first.len();
    if rs.iter().any(|c| c.len() != layers) {
        return Err(FrlError::Validation("clients disagree on layer count".into()));
    }
    (0..layers)
        .map(|l| {
            let column: Vec<Ranking> = rs.iter().map(|c| c[l].clone()).collect();
            mv_aggregate(&column)
        })
        .collect()
}

/// Number of edges whose selection differs between two masks.
pub fn mask_distance(a: &SuperMask, b: &SuperMask) -> Result<usize> {
    if a.len() != b.len() {
        return Err(FrlError::Validation(format!(
            "mask lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a.bits.iter().zip(&b.bits).filter(|(x, y)| x != y).count())
}

/// Gap between the lowest selected and the highest unselected aggregated
/// score. With `k = 1` there is no unselected edge and the lowest total is
/// returned.
pub fn boundary_gap(s: &AggregatedScore, k: f64) -> Result<u64> {
    check_sparsity(k)?;
    if s.is_empty() {
        return Err(FrlError::Validation("empty aggregated score".into()));
    }
    let mut sorted = s.0.clone();
    sorted.sort_unstable();
    let t = selection_boundary(sorted.len(), k);
    Ok(match t {
        0 => sorted[0],
        t if t >= sorted.len() => 0,
        t => sorted[t] - sorted[t - 1],
    })
}
