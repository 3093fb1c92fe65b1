//! Robust aggregation rules adapted to rankings.
//!
//! Gradient-space defences need a continuous point per client. Each client
//! is embedded as the concatenation of its per-layer importance vectors,
//! shifted by `(n_l - 1) / 2` so that every layer is centred on the
//! importance of a uniformly random ranking. Distance and cosine rules
//! (Multi-Krum, AFA, FABA, DnC, FLTrust) operate on that embedding; the
//! validation rules (Fang) evaluate candidate majority votes on server data.
//! Every rule ends in a majority vote (or, for FLTrust, a trust-weighted
//! vote) over the clients it keeps.
//!
//! Updates are sorted by client ID on entry, so results never depend on the
//! order in which clients are passed in, and ties are always broken towards
//! the lower ID.

use log::warn;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FrlError, Result};
use crate::network::{evaluate_metrics, local_train, DatasetShard, SuperNetwork, TrainConfig};
use crate::ranking::{invert, mv_aggregate, Ranking};
use crate::scalar::Real;

/// Which aggregation rule the server runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregatorKind {
    #[default]
    Mv,
    MultiKrum,
    Afa,
    Faba,
    Dnc,
    Fltrust,
    FangErr,
    FangLfr,
    FangUnion,
}

impl AggregatorKind {
    pub const ALL: [AggregatorKind; 9] = [
        AggregatorKind::Mv,
        AggregatorKind::MultiKrum,
        AggregatorKind::Afa,
        AggregatorKind::Faba,
        AggregatorKind::Dnc,
        AggregatorKind::Fltrust,
        AggregatorKind::FangErr,
        AggregatorKind::FangLfr,
        AggregatorKind::FangUnion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AggregatorKind::Mv => "mv",
            AggregatorKind::MultiKrum => "multi_krum",
            AggregatorKind::Afa => "afa",
            AggregatorKind::Faba => "faba",
            AggregatorKind::Dnc => "dnc",
            AggregatorKind::Fltrust => "fltrust",
            AggregatorKind::FangErr => "fang_err",
            AggregatorKind::FangLfr => "fang_lfr",
            AggregatorKind::FangUnion => "fang_union",
        }
    }
}

/// Tunables shared by the rules; each rule reads only its own fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggregatorParams {
    /// Assumed number of attackers per round. `None` lets the simulator
    /// supply its expected malicious count.
    pub assumed_malicious: Option<usize>,
    /// Multi-Krum selection count; `None` picks the largest `c` with
    /// `U - c > 2 m + 2`.
    pub krum_selection: Option<usize>,
    /// Initial AFA band half-width in standard deviations.
    pub afa_xi: f64,
    /// Increment of the AFA band after each filtering pass.
    pub afa_xi_step: f64,
    /// Coordinates sampled by DnC.
    pub dnc_subsample: usize,
    /// DnC removes `floor(dnc_filter_fraction * m)` clients.
    pub dnc_filter_fraction: f64,
    pub dnc_max_iterations: usize,
    pub dnc_tolerance: f64,
}

impl Default for AggregatorParams {
    fn default() -> Self {
        Self {
            assumed_malicious: None,
            krum_selection: None,
            afa_xi: 2.0,
            afa_xi_step: 0.5,
            dnc_subsample: 512,
            dnc_filter_fraction: 1.0,
            dnc_max_iterations: 100,
            dnc_tolerance: 1e-6,
        }
    }
}

/// One client's submission.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientUpdate {
    pub client: usize,
    pub rankings: Vec<Ranking>,
}

/// Server-side resources some rules need.
#[derive(Clone, Copy, Debug)]
pub struct ServerAux<'a, T> {
    pub net: &'a SuperNetwork<T>,
    /// Ranking broadcast this round (FLTrust trains from it).
    pub global: &'a [Ranking],
    /// Clean validation data for Fang.
    pub validation: Option<&'a DatasetShard<T>>,
    /// Trusted root data for FLTrust.
    pub root: Option<&'a DatasetShard<T>>,
    pub train: &'a TrainConfig,
    pub k: f64,
    /// Seed for DnC subsampling and FLTrust's server training.
    pub seed: u64,
}

/// Result of one aggregation.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregationOutcome {
    pub ranking: Vec<Ranking>,
    /// Clients whose rankings contributed, ascending ID.
    pub kept: Vec<usize>,
    /// Clients filtered out (or given zero trust), ascending ID.
    pub removed: Vec<usize>,
}

fn sorted_updates(updates: &[ClientUpdate]) -> Result<Vec<&ClientUpdate>> {
    let first = updates
        .first()
        .ok_or_else(|| FrlError::Validation("aggregating zero updates".into()))?;
    let mut v: Vec<&ClientUpdate> = updates.iter().collect();
    v.sort_by_key(|u| u.client);
    if v.windows(2).any(|w| w[0].client == w[1].client) {
        return Err(FrlError::Validation("duplicate client id among updates".into()));
    }
    let shape: Vec<usize> = first.rankings.iter().map(Ranking::len).collect();
    if v.iter().any(|u| u.rankings.iter().map(Ranking::len).ne(shape.iter().copied())) {
        return Err(FrlError::Validation("clients submitted rankings of different shapes".into()));
    }
    Ok(v)
}

fn vote(ups: &[&ClientUpdate]) -> Result<Vec<Ranking>> {
    let layers = ups[0].rankings.len();
    (0..layers)
        .map(|l| {
            let column: Vec<Ranking> = ups.iter().map(|u| u.rankings[l].clone()).collect();
            mv_aggregate(&column).map(|(r, _)| r)
        })
        .collect()
}

fn outcome(all: &[&ClientUpdate], keep: &[bool]) -> Result<AggregationOutcome> {
    let kept: Vec<&ClientUpdate> = all.iter().zip(keep).filter(|(_, &k)| k).map(|(u, _)| *u).collect();
    Ok(AggregationOutcome {
        ranking: vote(&kept)?,
        kept: kept.iter().map(|u| u.client).collect(),
        removed: all.iter().zip(keep).filter(|(_, &k)| !k).map(|(u, _)| u.client).collect(),
    })
}

/// Concatenated importance vectors, each layer shifted by `(n - 1) / 2`.
pub fn embed(rankings: &[Ranking]) -> Vec<f64> {
    let mut out = Vec::with_capacity(rankings.iter().map(Ranking::len).sum());
    for r in rankings {
        let centre = (r.len() as f64 - 1.0) / 2.0;
        out.extend(invert(r).scores().iter().map(|&p| p as f64 - centre));
    }
    out
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity; 0 when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

fn mean_point(points: &[&Vec<f64>]) -> Vec<f64> {
    let d = points[0].len();
    let mut m = vec![0.0; d];
    for p in points {
        for (acc, v) in m.iter_mut().zip(p.iter()) {
            *acc += v;
        }
    }
    let inv = 1.0 / points.len() as f64;
    m.iter_mut().for_each(|v| *v *= inv);
    m
}

/// Indices of the `count` largest `scores`, ties towards lower index.
fn top_indices(scores: &[f64], count: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal));
    idx.truncate(count);
    idx
}

/// Plain majority vote over every update.
pub fn aggregate_mv(updates: &[ClientUpdate]) -> Result<AggregationOutcome> {
    let ups = sorted_updates(updates)?;
    outcome(&ups, &vec![true; ups.len()])
}

/// Default Multi-Krum selection: largest `c` with `U - c > 2 m + 2`.
pub fn krum_default_selection(clients: usize, m: usize) -> Option<usize> {
    clients.checked_sub(2 * m + 3).filter(|&c| c >= 1)
}

/// Multi-Krum: score each client by the summed squared distance to its
/// `U - m - 2` nearest neighbours and vote over the `c` lowest scores.
pub fn aggregate_multi_krum(updates: &[ClientUpdate], m: usize, selection: Option<usize>) -> Result<AggregationOutcome> {
    let ups = sorted_updates(updates)?;
    let u = ups.len();
    if u < 2 * m + 3 {
        return Err(FrlError::Config(format!(
            "multi-krum needs at least {} clients for {m} attackers, got {u}",
            2 * m + 3
        )));
    }
    let c = match selection {
        Some(c) => c,
        None => krum_default_selection(u, m)
            .ok_or_else(|| FrlError::Config(format!("no valid multi-krum selection for U={u}, m={m}")))?,
    };
    if c == 0 || u - c.min(u) <= 2 * m + 2 {
        return Err(FrlError::Config(format!(
            "multi-krum selection {c} violates U - c > 2m + 2 (U={u}, m={m})"
        )));
    }
    let points: Vec<Vec<f64>> = ups.iter().map(|x| embed(&x.rankings)).collect();
    let neighbours = u - m - 2;
    let scores: Vec<f64> = (0..u)
        .into_par_iter()
        .map(|i| {
            let mut d: Vec<f64> = (0..u).filter(|&j| j != i).map(|j| sq_dist(&points[i], &points[j])).collect();
            d.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
            d.iter().take(neighbours).sum()
        })
        .collect();
    let negated: Vec<f64> = scores.iter().map(|s| -s).collect();
    let mut keep = vec![false; u];
    for i in top_indices(&negated, c) {
        keep[i] = true;
    }
    outcome(&ups, &keep)
}

/// Adaptive federated averaging: repeatedly drop clients whose cosine
/// similarity to the mean point falls outside `mean ± xi · std` on the side
/// indicated by the skew (mean below median drops the low tail, otherwise
/// the high tail), widening `xi` after each pass.
pub fn aggregate_afa(updates: &[ClientUpdate], xi: f64, xi_step: f64) -> Result<AggregationOutcome> {
    let ups = sorted_updates(updates)?;
    let points: Vec<Vec<f64>> = ups.iter().map(|x| embed(&x.rankings)).collect();
    let mut keep = vec![true; ups.len()];
    let mut band = xi;
    loop {
        let alive: Vec<usize> = (0..ups.len()).filter(|&i| keep[i]).collect();
        if alive.is_empty() {
            break;
        }
        let refs: Vec<&Vec<f64>> = alive.iter().map(|&i| &points[i]).collect();
        let centre = mean_point(&refs);
        let sims: Vec<f64> = alive.iter().map(|&i| cosine(&points[i], &centre)).collect();
        let mean = sims.iter().sum::<f64>() / sims.len() as f64;
        let std = (sims.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / sims.len() as f64).sqrt();
        let mut sorted = sims.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        let median = if sorted.len() % 2 == 1 {
            sorted[sorted.len() / 2]
        } else {
            0.5 * (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2])
        };
        let mut removed_any = false;
        for (pos, &i) in alive.iter().enumerate() {
            let out = if mean < median {
                sims[pos] < mean - band * std
            } else {
                sims[pos] > mean + band * std
            };
            if out {
                keep[i] = false;
                removed_any = true;
            }
        }
        if !removed_any {
            break;
        }
        band += xi_step;
    }
    if !keep.iter().any(|&k| k) {
        warn!("AFA discarded every client; falling back to plain majority vote");
        keep.fill(true);
    }
    outcome(&ups, &keep)
}

/// FABA: drop the client farthest from the current mean, `m` times.
pub fn aggregate_faba(updates: &[ClientUpdate], m: usize) -> Result<AggregationOutcome> {
    let ups = sorted_updates(updates)?;
    if m >= ups.len() {
        return Err(FrlError::Config(format!("FABA cannot remove {m} of {} clients", ups.len())));
    }
    let points: Vec<Vec<f64>> = ups.iter().map(|x| embed(&x.rankings)).collect();
    let mut keep = vec![true; ups.len()];
    for _ in 0..m {
        let alive: Vec<usize> = (0..ups.len()).filter(|&i| keep[i]).collect();
        let refs: Vec<&Vec<f64>> = alive.iter().map(|&i| &points[i]).collect();
        let centre = mean_point(&refs);
        let dists: Vec<f64> = alive.iter().map(|&i| sq_dist(&points[i], &centre)).collect();
        keep[alive[top_indices(&dists, 1)[0]]] = false;
    }
    outcome(&ups, &keep)
}

/// Top right singular vector of the row matrix `rows` by power iteration on
/// `XᵀX`. Returns the vector and whether the iteration converged.
pub fn top_singular_direction(rows: &[Vec<f64>], max_iter: usize, tol: f64) -> (Vec<f64>, bool) {
    let d = rows.first().map_or(0, Vec::len);
    let mut v = vec![1.0 / (d.max(1) as f64).sqrt(); d];
    for _ in 0..max_iter {
        let xv: Vec<f64> = rows.iter().map(|r| dot(r, &v)).collect();
        let mut next = vec![0.0; d];
        for (r, &s) in rows.iter().zip(&xv) {
            for (acc, x) in next.iter_mut().zip(r) {
                *acc += s * x;
            }
        }
        let norm = dot(&next, &next).sqrt();
        if norm == 0.0 {
            // zero matrix: every direction is singular
            return (v, true);
        }
        next.iter_mut().for_each(|x| *x /= norm);
        let delta = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next;
        if delta < tol {
            return (v, true);
        }
    }
    (v, false)
}

/// Divide-and-conquer: project the centred, subsampled embeddings onto
/// their top singular direction and drop the clients with the largest
/// squared projections.
pub fn aggregate_dnc(updates: &[ClientUpdate], m: usize, params: &AggregatorParams, seed: u64) -> Result<AggregationOutcome> {
    let ups = sorted_updates(updates)?;
    let points: Vec<Vec<f64>> = ups.iter().map(|x| embed(&x.rankings)).collect();
    let dims = points[0].len();
    let take = params.dnc_subsample.clamp(1, dims.max(1));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords = sample(&mut rng, dims, take).into_vec();
    coords.sort_unstable();
    let mut rows: Vec<Vec<f64>> = points.iter().map(|p| coords.iter().map(|&c| p[c]).collect()).collect();
    let refs: Vec<&Vec<f64>> = rows.iter().collect();
    let centre = mean_point(&refs);
    for r in &mut rows {
        for (x, c) in r.iter_mut().zip(&centre) {
            *x -= c;
        }
    }
    let (dir, converged) = top_singular_direction(&rows, params.dnc_max_iterations, params.dnc_tolerance);
    if !converged {
        warn!("DnC power iteration hit its cap; using the last iterate");
    }
    let scores: Vec<f64> = rows.iter().map(|r| dot(r, &dir).powi(2)).collect();
    let drop = ((params.dnc_filter_fraction * m as f64).floor() as usize).min(ups.len() - 1);
    let mut keep = vec![true; ups.len()];
    for i in top_indices(&scores, drop) {
        keep[i] = false;
    }
    outcome(&ups, &keep)
}

/// Trust weights `max(0, cos(client, server)) / Σ`, in sorted-ID order.
/// `None` when every weight is zero.
pub fn fltrust_weights(points: &[Vec<f64>], server: &[f64]) -> Option<Vec<f64>> {
    let raw: Vec<f64> = points.iter().map(|p| cosine(p, server).max(0.0)).collect();
    let total: f64 = raw.iter().sum();
    (total > 0.0).then(|| raw.iter().map(|w| w / total).collect())
}

/// FLTrust: the server trains its own ranking on root data, weights each
/// client by its clipped cosine similarity to the server, and ranks edges by
/// the weighted sum of (uncentred) importance vectors.
pub fn aggregate_fltrust<T: Real>(updates: &[ClientUpdate], aux: &ServerAux<'_, T>) -> Result<AggregationOutcome> {
    let ups = sorted_updates(updates)?;
    let root = aux
        .root
        .ok_or_else(|| FrlError::Config("FLTrust needs server root data".into()))?;
    let server = local_train(root, aux.global, aux.net, aux.train, aux.k, aux.seed)?;
    let server_point = embed(&server);
    let points: Vec<Vec<f64>> = ups.iter().map(|x| embed(&x.rankings)).collect();
    let Some(weights) = fltrust_weights(&points, &server_point) else {
        warn!("FLTrust assigned zero trust to every client; using the server ranking");
        return Ok(AggregationOutcome {
            ranking: server,
            kept: vec![],
            removed: ups.iter().map(|u| u.client).collect(),
        });
    };
    let layers = ups[0].rankings.len();
    let ranking = (0..layers)
        .map(|l| {
            let n = ups[0].rankings[l].len();
            let mut totals = vec![0.0; n];
            for (u, &w) in ups.iter().zip(&weights) {
                if w == 0.0 {
                    continue;
                }
                for (e, &p) in invert(&u.rankings[l]).scores().iter().enumerate() {
                    totals[e] += w * p as f64;
                }
            }
            Ranking::from_keys(&totals)
        })
        .collect();
    Ok(AggregationOutcome {
        ranking,
        kept: ups.iter().zip(&weights).filter(|(_, &w)| w > 0.0).map(|(u, _)| u.client).collect(),
        removed: ups.iter().zip(&weights).filter(|(_, &w)| w == 0.0).map(|(u, _)| u.client).collect(),
    })
}

/// Which Fang criterion decides removals.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FangVariant {
    Err,
    Lfr,
    Union,
}

/// Leave-one-out impacts on validation error and loss, in sorted-ID order:
/// `metric(all) - metric(all except u)`. Positive values mean the client
/// makes the vote worse.
pub fn fang_impacts<T: Real>(
    ups: &[&ClientUpdate],
    net: &SuperNetwork<T>,
    validation: &DatasetShard<T>,
    k: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (acc_all, loss_all) = evaluate_metrics(&vote(ups)?, net, validation, k)?;
    let per_client: Vec<(f64, f64)> = (0..ups.len())
        .into_par_iter()
        .map(|skip| {
            let rest: Vec<&ClientUpdate> = ups
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != skip)
                .map(|(_, u)| *u)
                .collect();
            let (acc, loss) = evaluate_metrics(&vote(&rest)?, net, validation, k)?;
            Ok(((1.0 - acc_all) - (1.0 - acc), loss_all - loss))
        })
        .collect::<Result<_>>()?;
    Ok(per_client.into_iter().unzip())
}

/// Fang-style validation defence: ERR removes the `m` clients with the
/// largest error impact, LFR the `m` with the largest loss impact, Union
/// only those flagged by both.
pub fn aggregate_fang<T: Real>(
    updates: &[ClientUpdate],
    aux: &ServerAux<'_, T>,
    variant: FangVariant,
    m: usize,
) -> Result<AggregationOutcome> {
    let ups = sorted_updates(updates)?;
    let validation = aux
        .validation
        .filter(|v| !v.is_empty())
        .ok_or_else(|| FrlError::Config("Fang needs non-empty server validation data".into()))?;
    if m >= ups.len() {
        return Err(FrlError::Config(format!("Fang cannot remove {m} of {} clients", ups.len())));
    }
    if ups.len() < 2 {
        return outcome(&ups, &[true]);
    }
    let (err_impact, loss_impact) = fang_impacts(&ups, aux.net, validation, aux.k)?;
    let err_flags = top_indices(&err_impact, m);
    let lfr_flags = top_indices(&loss_impact, m);
    let flagged: Vec<usize> = match variant {
        FangVariant::Err => err_flags,
        FangVariant::Lfr => lfr_flags,
        FangVariant::Union => err_flags.into_iter().filter(|i| lfr_flags.contains(i)).take(m).collect(),
    };
    let mut keep = vec![true; ups.len()];
    for i in flagged {
        keep[i] = false;
    }
    outcome(&ups, &keep)
}

/// Dispatches to the configured rule with `m` assumed attackers.
pub fn aggregate<T: Real>(
    kind: AggregatorKind,
    params: &AggregatorParams,
    updates: &[ClientUpdate],
    aux: &ServerAux<'_, T>,
    m: usize,
) -> Result<AggregationOutcome> {
    let out = match kind {
        AggregatorKind::Mv => aggregate_mv(updates),
        AggregatorKind::MultiKrum => aggregate_multi_krum(updates, m, params.krum_selection),
        AggregatorKind::Afa => aggregate_afa(updates, params.afa_xi, params.afa_xi_step),
        AggregatorKind::Faba => aggregate_faba(updates, m),
        AggregatorKind::Dnc => aggregate_dnc(updates, m, params, aux.seed),
        AggregatorKind::Fltrust => aggregate_fltrust(updates, aux),
        AggregatorKind::FangErr => aggregate_fang(updates, aux, FangVariant::Err, m),
        AggregatorKind::FangLfr => aggregate_fang(updates, aux, FangVariant::Lfr, m),
        AggregatorKind::FangUnion => aggregate_fang(updates, aux, FangVariant::Union, m),
    }?;
    let expected: Vec<usize> = updates[0].rankings.iter().map(Ranking::len).collect();
    if out.ranking.iter().map(Ranking::len).ne(expected.iter().copied()) {
        return Err(FrlError::Validation(format!("{} produced a malformed ranking", kind.name())));
    }
    Ok(out)
}
