//! Poisoning attacks on rank aggregation.
//!
//! The edge control attack (ECA) steers the global model towards a target
//! accuracy `tau`. Once the global accuracy first reaches `tau` the attacker
//! adopts the current global ranking as its target `R_tau` and keeps
//! replacing it by any later global ranking whose accuracy is at least as
//! close to `tau`. Each round it then:
//!
//! 1. estimates the benign aggregate `R_bar` (previous global ranking, or the
//!    majority vote of its own honestly trained rankings);
//! 2. finds the ascending edges (selected by `R_bar` but not by `R_tau`) and
//!    the descending edges (the converse);
//! 3. moves ascending edges to the bottom of `R_bar` and descending edges to
//!    the top;
//! 4. reverses the remaining edges on each side of the selection boundary,
//!    which keeps the mask but pushes the edges adjacent to the boundary
//!    away from it, widening the aggregated gap that benign drift would have
//!    to overcome.
//!
//! All colluding clients submit the same ranking.
//!
//! The random ranking attack (RRA) baseline uploads uniformly random
//! permutations whenever accuracy is above `tau` and behaves honestly
//! otherwise.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FrlError, Result};
use crate::ranking::{mask_from_ranking, mv_aggregate, selection_boundary, EdgeId, Ranking};

/// How the attacker approximates the benign clients' aggregate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimation {
    /// Use the most recent global ranking.
    #[default]
    Historical,
    /// Majority vote of the malicious clients' honestly trained rankings.
    Alternative,
}

/// Target-tracking state of the edge control attack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackState {
    started: bool,
    target: Option<Vec<Ranking>>,
    epsilon: f64,
    tau: f64,
    history: Option<Vec<Ranking>>,
}

impl AttackState {
    pub fn new(tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(FrlError::Parameter(format!("target accuracy must lie in (0, 1), got {tau}")));
        }
        Ok(Self {
            started: false,
            target: None,
            epsilon: f64::INFINITY,
            tau,
            history: None,
        })
    }

    pub fn started(&self) -> bool {
        self.started
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// Distance between the target ranking's accuracy and `tau`; infinite
    /// before the attack starts.
    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn target(&self) -> Option<&[Ranking]> {
        self.target.as_deref()
    }

    /// Most recent global ranking observed.
    pub fn history(&self) -> Option<&[Ranking]> {
        self.history.as_deref()
    }

    /// Observes this round's global ranking and its accuracy (as measured by
    /// the attacker). Returns `true` if the target ranking was replaced.
    pub fn update_target(&mut self, global: &[Ranking], acc: f64) -> bool {
        let err = (acc - self.tau).abs();
        self.history = Some(global.to_vec());
        if !self.started {
            if acc >= self.tau {
                self.started = true;
                self.target = Some(global.to_vec());
                self.epsilon = err;
                return true;
            }
            return false;
        }
        if err <= self.epsilon {
            self.target = Some(global.to_vec());
            self.epsilon = err;
            return true;
        }
        false
    }
}

/// Edges whose selection the attacker must flip in one layer.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeSets {
    /// Selected by the benign estimate but not by the target; pushed down.
    pub ascending: BTreeSet<EdgeId>,
    /// Selected by the target but not by the benign estimate; pushed up.
    pub descending: BTreeSet<EdgeId>,
}

impl EdgeSets {
    pub fn is_empty(&self) -> bool {
        self.ascending.is_empty() && self.descending.is_empty()
    }
}

/// Benign-aggregate estimate for every layer.
pub fn estimate_benign(
    mode: Estimation,
    history: Option<&[Ranking]>,
    malicious_locals: &[Vec<Ranking>],
) -> Result<Vec<Ranking>> {
    match mode {
        Estimation::Historical => history
            .map(<[Ranking]>::to_vec)
            .ok_or_else(|| FrlError::Parameter("historical estimation needs a previous global ranking".into())),
        Estimation::Alternative => {
            let first = malicious_locals.first().ok_or_else(|| {
                FrlError::Parameter("alternative estimation needs at least one malicious local ranking".into())
            })?;
            (0..first.len())
                .map(|l| {
                    let column: Vec<Ranking> = malicious_locals
                        .iter()
                        .map(|c| {
                            c.get(l).cloned().ok_or_else(|| {
                                FrlError::Validation("malicious rankings disagree on layer count".into())
                            })
                        })
                        .collect::<Result<_>>()?;
                    mv_aggregate(&column).map(|(r, _)| r)
                })
                .collect()
        }
    }
}

/// Ascending and descending edges of `r_bar` relative to `r_tau`.
pub fn identify_edges(r_tau: &Ranking, r_bar: &Ranking, k: f64) -> Result<EdgeSets> {
    if r_tau.len() != r_bar.len() {
        return Err(FrlError::Validation(format!(
            "target ranking has {} edges, estimate has {}",
            r_tau.len(),
            r_bar.len()
        )));
    }
    let target = mask_from_ranking(r_tau, k)?;
    let bench = mask_from_ranking(r_bar, k)?;
    let mut sets = EdgeSets::default();
    for e in 0..r_tau.len() {
        match (target.is_selected(e), bench.is_selected(e)) {
            (false, true) => {
                sets.ascending.insert(e);
            }
            (true, false) => {
                sets.descending.insert(e);
            }
            _ => {}
        }
    }
    Ok(sets)
}

fn check_sets(n: usize, es: &EdgeSets) -> Result<()> {
    if let Some(&e) = es.ascending.iter().chain(&es.descending).find(|&&e| e >= n) {
        return Err(FrlError::Validation(format!("edge {e} not in a layer of {n} edges")));
    }
    if let Some(e) = es.ascending.intersection(&es.descending).next() {
        return Err(FrlError::Validation(format!("edge {e} is both ascending and descending")));
    }
    Ok(())
}

/// Rejects edge sets that cannot all be moved across the boundary in one
/// ranking: more ascending edges than unselected slots, or more descending
/// edges than selected slots.
pub fn check_capacity(n: usize, es: &EdgeSets, k: f64) -> Result<()> {
    let t = selection_boundary(n, k);
    if es.ascending.len() > t || es.descending.len() > n - t {
        return Err(FrlError::Validation(format!(
            "{} ascending / {} descending edges do not fit a boundary at {t} of {n}",
            es.ascending.len(),
            es.descending.len()
        )));
    }
    Ok(())
}

/// Moves ascending edges to the front and descending edges to the back of
/// `r_bar`, keeping relative order inside each group.
pub fn manipulate_ae_de(r_bar: &Ranking, es: &EdgeSets) -> Result<Ranking> {
    check_sets(r_bar.len(), es)?;
    let order = r_bar.order();
    let mut out = Vec::with_capacity(order.len());
    out.extend(order.iter().copied().filter(|e| es.ascending.contains(e)));
    out.extend(
        order
            .iter()
            .copied()
            .filter(|e| !es.ascending.contains(e) && !es.descending.contains(e)),
    );
    out.extend(order.iter().copied().filter(|e| es.descending.contains(e)));
    Ranking::new(out)
}

/// Reverses the non-manipulated segment on each side of the selection
/// boundary. Requires the ascending edges to form the prefix and the
/// descending edges the suffix of `r_hat_prime`.
pub fn internal_reverse(r_hat_prime: &Ranking, es: &EdgeSets, k: f64) -> Result<Ranking> {
    let n = r_hat_prime.len();
    check_sets(n, es)?;
    check_capacity(n, es, k)?;
    let order = r_hat_prime.order();
    let (a, d) = (es.ascending.len(), es.descending.len());
    if !order[..a].iter().all(|e| es.ascending.contains(e)) {
        return Err(FrlError::Validation("ascending edges are not a prefix of the ranking".into()));
    }
    if !order[n - d..].iter().all(|e| es.descending.contains(e)) {
        return Err(FrlError::Validation("descending edges are not a suffix of the ranking".into()));
    }
    let t = selection_boundary(n, k);
    let mut out = order.to_vec();
    out[a..t].reverse();
    out[t..n - d].reverse();
    Ok(Ranking::from_order_unchecked(out))
}

/// Per-round parameters of [`eca_round`].
#[derive(Clone, Debug)]
pub struct EcaInputs<'a> {
    pub estimation: Estimation,
    /// Honestly trained rankings of this round's malicious clients.
    pub malicious_locals: &'a [Vec<Ranking>],
    /// Number of malicious submissions to produce.
    pub m: usize,
    pub k: f64,
    /// Apply the boundary-widening reversal (disable for ablations).
    pub internal_reverse: bool,
}

/// One ECA round. Returns `None` while the attack has not started, else `m`
/// identical malicious model rankings.
pub fn eca_round(state: &AttackState, inputs: &EcaInputs<'_>) -> Result<Option<Vec<Vec<Ranking>>>> {
    if !state.started {
        return Ok(None);
    }
    let target = state
        .target()
        .ok_or_else(|| FrlError::Validation("started attack without a target ranking".into()))?;
    let estimate = estimate_benign(inputs.estimation, state.history(), inputs.malicious_locals)?;
    if estimate.len() != target.len() {
        return Err(FrlError::Validation("estimate and target disagree on layer count".into()));
    }
    let crafted = target
        .iter()
        .zip(&estimate)
        .map(|(r_tau, r_bar)| {
            let es = identify_edges(r_tau, r_bar, inputs.k)?;
            check_capacity(r_bar.len(), &es, inputs.k)?;
            let intermediate = manipulate_ae_de(r_bar, &es)?;
            if inputs.internal_reverse {
                internal_reverse(&intermediate, &es, inputs.k)
            } else {
                Ok(intermediate)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Some(vec![crafted; inputs.m]))
}

/// Random ranking attack: `m` uniformly random model rankings when
/// `acc > tau`, nothing otherwise.
pub fn rra_round<R: Rng + ?Sized>(
    acc: f64,
    tau: f64,
    n_per_layer: &[usize],
    m: usize,
    rng: &mut R,
) -> Option<Vec<Vec<Ranking>>> {
    if acc <= tau {
        return None;
    }
    Some(
        (0..m)
            .map(|_| n_per_layer.iter().map(|&n| Ranking::random(n, rng)).collect())
            .collect(),
    )
}
