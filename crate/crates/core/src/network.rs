//! Supernetwork with frozen random weights and trainable per-edge scores,
//! trained locally with the edge-popup rule.
//!
//! Layer `l` maps `fan_in` inputs to `fan_out` outputs through a weight
//! matrix stored row-major as `[fan_out][fan_in]`; edge `o * fan_in + i`
//! connects input `i` to output `o`. Hidden layers use ReLU, the output
//! layer feeds a softmax cross-entropy loss. There are no biases.
//!
//! Only the scores move during training. Every mini-batch the top-`k`
//! edges by score form the mask, the masked network is run forward, and the
//! loss gradient with respect to each edge's gate (`dL/dgate = delta_out *
//! weight * activation_in`) is applied to the score of that edge whether or
//! not it is currently selected (straight-through estimator).

use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FrlError, Result};
use crate::ranking::{mask_from_ranking, Ranking, SuperMask};
use crate::scalar::Real;

/// Local optimiser settings for score training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 32,
            learning_rate: 0.4,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(FrlError::Parameter("epochs and batch_size must be positive".into()));
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(FrlError::Parameter(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Labelled samples, row-major features.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetShard<T> {
    features: Vec<T>,
    dim: usize,
    labels: Vec<usize>,
    num_classes: usize,
    owner: Option<usize>,
}

impl<T: Real> DatasetShard<T> {
    pub fn new(features: Vec<T>, dim: usize, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if dim == 0 || num_classes == 0 {
            return Err(FrlError::Validation("dim and num_classes must be positive".into()));
        }
        if features.len() != dim * labels.len() {
            return Err(FrlError::Validation(format!(
                "{} feature values do not form {} rows of width {dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(FrlError::Validation(format!(
                "label {bad} outside [0, {num_classes})"
            )));
        }
        Ok(Self {
            features,
            dim,
            labels,
            num_classes,
            owner: None,
        })
    }

    /// Parses CSV rows of `dim` feature columns followed by an integer label.
    /// Lines that fail to parse as numbers in the first row are treated as a
    /// header. When `num_classes` is `None` it is inferred as `max label + 1`.
    pub fn from_csv_reader<R: Read>(reader: R, num_classes: Option<usize>) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let mut features = Vec::new();
        let mut labels = Vec::new();
        let mut dim = None;
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| FrlError::Validation(format!("csv line {}: {e}", line + 1)))?;
            if rec.len() < 2 {
                return Err(FrlError::Validation(format!(
                    "csv line {}: need at least one feature and a label",
                    line + 1
                )));
            }
            let parsed: std::result::Result<Vec<f64>, _> =
                rec.iter().take(rec.len() - 1).map(str::parse::<f64>).collect();
            let label = rec[rec.len() - 1].parse::<usize>();
            let (row, label) = match (parsed, label) {
                (Ok(r), Ok(y)) => (r, y),
                _ if line == 0 => continue,
                _ => {
                    return Err(FrlError::Validation(format!(
                        "csv line {}: non-numeric field",
                        line + 1
                    )))
                }
            };
            match dim {
                None => dim = Some(row.len()),
                Some(d) if d != row.len() => {
                    return Err(FrlError::Validation(format!(
                        "csv line {}: expected {d} features, found {}",
                        line + 1,
                        row.len()
                    )))
                }
                _ => {}
            }
            features.extend(row.into_iter().map(T::lit));
            labels.push(label);
        }
        let dim = dim.ok_or_else(|| FrlError::Validation("csv contains no samples".into()))?;
        let classes = num_classes.unwrap_or_else(|| labels.iter().max().map_or(1, |m| m + 1));
        Self::new(features, dim, labels, classes)
    }

    pub fn from_csv_path(path: impl AsRef<Path>, num_classes: Option<usize>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::from_csv_reader(f, num_classes)
    }

    pub fn with_owner(mut self, owner: usize) -> Self {
        self.owner = Some(owner);
        self
    }

    pub fn owner(&self) -> Option<usize> {
        self.owner
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[T] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Copies the given rows into a new shard (owner preserved).
    pub fn select(&self, idx: &[usize]) -> Self {
        let mut features = Vec::with_capacity(idx.len() * self.dim);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Self {
            features,
            dim: self.dim,
            labels,
            num_classes: self.num_classes,
            owner: self.owner,
        }
    }

    /// Stacks shards of equal width; the result has no owner.
    pub fn concat<'a, I>(parts: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a Self>,
        T: 'a,
    {
        let mut iter = parts.into_iter();
        let first = iter
            .next()
            .ok_or_else(|| FrlError::Validation("concatenating zero shards".into()))?;
        let mut out = first.clone();
        out.owner = None;
        for p in iter {
            if p.dim != out.dim {
                return Err(FrlError::Validation("shard widths differ".into()));
            }
            out.features.extend_from_slice(&p.features);
            out.labels.extend_from_slice(&p.labels);
            out.num_classes = out.num_classes.max(p.num_classes);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Layer<T> {
    fan_in: usize,
    fan_out: usize,
    weights: Vec<T>,
    scores: Vec<T>,
}

/// Fully-connected supernetwork.
#[derive(Clone, Debug, PartialEq)]
pub struct SuperNetwork<T> {
    arch: Vec<usize>,
    layers: Vec<Layer<T>>,
    seed: u64,
}

impl<T: Real> SuperNetwork<T> {
    /// Seeded initialisation. Weights are signed constants
    /// `±sqrt(2 / fan_in)`; initial scores are uniform on `[0, 1)`, drawn from
    /// the same stream after the weights of each layer.
    pub fn init(seed: u64, arch: &[usize]) -> Result<Self> {
        check_arch(arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = arch
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let n = fan_in * fan_out;
                let magnitude = T::lit((2.0 / fan_in as f64).sqrt());
                let weights = (0..n)
                    .map(|_| if rng.random::<bool>() { magnitude } else { -magnitude })
                    .collect();
                let scores = (0..n).map(|_| T::lit(rng.random::<f64>())).collect();
                Layer {
                    fan_in,
                    fan_out,
                    weights,
                    scores,
                }
            })
            .collect();
        Ok(Self {
            arch: arch.to_vec(),
            layers,
            seed,
        })
    }

    /// Network with caller-supplied weights (row-major `[fan_out][fan_in]`
    /// per layer) and zero scores.
    pub fn from_weights(arch: &[usize], weights: Vec<Vec<T>>) -> Result<Self> {
        check_arch(arch)?;
        if weights.len() != arch.len() - 1 {
            return Err(FrlError::Validation("one weight matrix per layer required".into()));
        }
        let layers = arch
            .windows(2)
            .zip(weights)
            .map(|(w, weights)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                if weights.len() != fan_in * fan_out {
                    return Err(FrlError::Validation(format!(
                        "layer {fan_in}x{fan_out} needs {} weights, got {}",
                        fan_in * fan_out,
                        weights.len()
                    )));
                }
                Ok(Layer {
                    fan_in,
                    fan_out,
                    scores: vec![T::zero(); weights.len()],
                    weights,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            arch: arch.to_vec(),
            layers,
            seed: 0,
        })
    }

    pub fn arch(&self) -> &[usize] {
        &self.arch
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Edge count `fan_in * fan_out` of every layer.
    pub fn edge_counts(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.weights.len()).collect()
    }

    pub fn weights(&self, layer: usize) -> &[T] {
        &self.layers[layer].weights
    }

    pub fn scores(&self, layer: usize) -> &[T] {
        &self.layers[layer].scores
    }

    /// The server's starting global ranking: edges sorted by initial score.
    pub fn initial_ranking(&self) -> Vec<Ranking> {
        self.layers.iter().map(|l| rank_of(&l.scores)).collect()
    }

    pub fn num_classes(&self) -> usize {
        *self.arch.last().expect("arch validated")
    }

    fn check_batch(&self, batch: &DatasetShard<T>) -> Result<()> {
        if batch.dim() != self.arch[0] {
            return Err(FrlError::Validation(format!(
                "batch width {} does not match input width {}",
                batch.dim(),
                self.arch[0]
            )));
        }
        if batch.num_classes() > self.num_classes() {
            return Err(FrlError::Validation(format!(
                "data has {} classes but the network outputs {}",
                batch.num_classes(),
                self.num_classes()
            )));
        }
        Ok(())
    }

    fn check_gates(&self, gates: &[Vec<T>]) -> Result<()> {
        if gates.len() != self.layers.len()
            || gates.iter().zip(&self.layers).any(|(g, l)| g.len() != l.weights.len())
        {
            return Err(FrlError::Validation(
                "gate/mask shapes do not match layer edge counts".into(),
            ));
        }
        Ok(())
    }

    /// Logits and mean cross-entropy of the masked network on `batch`.
    pub fn forward(&self, masks: &[SuperMask], batch: &DatasetShard<T>) -> Result<(Vec<T>, T)> {
        let gates = masks_to_gates(masks);
        self.check_gates(&gates)?;
        self.check_batch(batch)?;
        let trace = self.run(&gates, batch);
        let loss = cross_entropy(&trace.logits, batch.labels(), self.num_classes());
        Ok((trace.logits, loss))
    }

    /// Mean cross-entropy with real-valued gates in place of the binary mask.
    pub fn loss_with_gates(&self, gates: &[Vec<T>], batch: &DatasetShard<T>) -> Result<T> {
        self.check_gates(gates)?;
        self.check_batch(batch)?;
        let trace = self.run(gates, batch);
        Ok(cross_entropy(&trace.logits, batch.labels(), self.num_classes()))
    }

    /// Loss and its gradient with respect to every gate. With binary gates
    /// this is exactly the straight-through score gradient.
    pub fn gate_gradient(&self, gates: &[Vec<T>], batch: &DatasetShard<T>) -> Result<(T, Vec<Vec<T>>)> {
        self.check_gates(gates)?;
        self.check_batch(batch)?;
        let trace = self.run(gates, batch);
        let loss = cross_entropy(&trace.logits, batch.labels(), self.num_classes());
        Ok((loss, self.backward(gates, &trace, batch.labels())))
    }

    fn run(&self, gates: &[Vec<T>], batch: &DatasetShard<T>) -> Trace<T> {
        let rows = batch.len();
        let mut inputs: Vec<Vec<T>> = Vec::with_capacity(self.layers.len());
        let mut current = batch.features().to_vec();
        let last = self.layers.len() - 1;
        for (li, (layer, gate)) in self.layers.iter().zip(gates).enumerate() {
            let mut out = vec![T::zero(); rows * layer.fan_out];
            for b in 0..rows {
                let x = &current[b * layer.fan_in..(b + 1) * layer.fan_in];
                for o in 0..layer.fan_out {
                    let w = &layer.weights[o * layer.fan_in..(o + 1) * layer.fan_in];
                    let g = &gate[o * layer.fan_in..(o + 1) * layer.fan_in];
                    let mut acc = T::zero();
                    for i in 0..layer.fan_in {
                        acc += w[i] * g[i] * x[i];
                    }
                    out[b * layer.fan_out + o] = acc;
                }
            }
            inputs.push(current);
            if li != last {
                // keep pre-activations implicitly: relu output > 0 iff pre > 0
                for v in &mut out {
                    if *v < T::zero() {
                        *v = T::zero();
                    }
                }
            }
            current = out;
        }
        Trace {
            inputs,
            logits: current,
            rows,
        }
    }

    fn backward(&self, gates: &[Vec<T>], trace: &Trace<T>, labels: &[usize]) -> Vec<Vec<T>> {
        let rows = trace.rows;
        let classes = self.num_classes();
        let inv_rows = T::one() / T::from_count(rows);
        // d(mean CE)/d logits
        let mut delta = vec![T::zero(); rows * classes];
        for b in 0..rows {
            let z = &trace.logits[b * classes..(b + 1) * classes];
            let p = softmax(z);
            for c in 0..classes {
                let target = if c == labels[b] { T::one() } else { T::zero() };
                delta[b * classes + c] = (p[c] - target) * inv_rows;
            }
        }
        let mut grads: Vec<Vec<T>> = self.layers.iter().map(|l| vec![T::zero(); l.weights.len()]).collect();
        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            let gate = &gates[li];
            let x = &trace.inputs[li];
            let grad = &mut grads[li];
            for b in 0..rows {
                let xb = &x[b * layer.fan_in..(b + 1) * layer.fan_in];
                for o in 0..layer.fan_out {
                    let d = delta[b * layer.fan_out + o];
                    if d == T::zero() {
                        continue;
                    }
                    let w = &layer.weights[o * layer.fan_in..(o + 1) * layer.fan_in];
                    let g = &mut grad[o * layer.fan_in..(o + 1) * layer.fan_in];
                    for i in 0..layer.fan_in {
                        g[i] += d * w[i] * xb[i];
                    }
                }
            }
            if li == 0 {
                break;
            }
            // propagate through the gated weights and the ReLU of layer li-1
            let mut prev = vec![T::zero(); rows * layer.fan_in];
            for b in 0..rows {
                let xb = &x[b * layer.fan_in..(b + 1) * layer.fan_in];
                for o in 0..layer.fan_out {
                    let d = delta[b * layer.fan_out + o];
                    if d == T::zero() {
                        continue;
                    }
                    let w = &layer.weights[o * layer.fan_in..(o + 1) * layer.fan_in];
                    let gt = &gate[o * layer.fan_in..(o + 1) * layer.fan_in];
                    let pb = &mut prev[b * layer.fan_in..(b + 1) * layer.fan_in];
                    for i in 0..layer.fan_in {
                        if xb[i] > T::zero() {
                            pb[i] += d * w[i] * gt[i];
                        }
                    }
                }
            }
            delta = prev;
        }
        grads
    }
}

fn check_arch(arch: &[usize]) -> Result<()> {
    if arch.len() < 2 {
        return Err(FrlError::Parameter(format!(
            "architecture needs at least an input and an output layer, got {arch:?}"
        )));
    }
    if arch.contains(&0) {
        return Err(FrlError::Parameter(format!("zero-width layer in {arch:?}")));
    }
    Ok(())
}

struct Trace<T> {
    /// Input to each layer (post-activation of the previous one).
    inputs: Vec<Vec<T>>,
    logits: Vec<T>,
    rows: usize,
}

fn softmax<T: Real>(z: &[T]) -> Vec<T> {
    let max = z.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = z.iter().map(|&v| (v - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn cross_entropy<T: Real>(logits: &[T], labels: &[usize], classes: usize) -> T {
    if labels.is_empty() {
        return T::zero();
    }
    let mut total = T::zero();
    for (b, &y) in labels.iter().enumerate() {
        let z = &logits[b * classes..(b + 1) * classes];
        let max = z.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + z.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        total += lse - z[y];
    }
    total / T::from_count(labels.len())
}

fn masks_to_gates<T: Real>(masks: &[SuperMask]) -> Vec<Vec<T>> {
    masks
        .iter()
        .map(|m| m.bits().iter().map(|&b| if b == 1 { T::one() } else { T::zero() }).collect())
        .collect()
}

/// Scores reconstructed from a ranking: `(position + 1) / n`.
pub fn scores_from_ranking<T: Real>(r: &Ranking) -> Vec<T> {
    let n = T::from_count(r.len());
    let mut scores = vec![T::zero(); r.len()];
    for (pos, &e) in r.order().iter().enumerate() {
        scores[e] = T::from_count(pos + 1) / n;
    }
    scores
}

/// Ranking of edges by ascending score (ties by edge ID).
pub fn rank_of<T: Real>(scores: &[T]) -> Ranking {
    Ranking::from_keys(scores)
}

fn check_rankings<T: Real>(net: &SuperNetwork<T>, rs: &[Ranking]) -> Result<()> {
    if rs.len() != net.num_layers() || rs.iter().zip(net.edge_counts()).any(|(r, n)| r.len() != n) {
        return Err(FrlError::Validation(
            "ranking shapes do not match the supernetwork".into(),
        ));
    }
    Ok(())
}

/// One client's local edge-popup training from the current global ranking.
///
/// `seed` drives the per-epoch shuffling only; identical inputs and seed
/// give identical output.
pub fn local_train<T: Real>(
    shard: &DatasetShard<T>,
    global: &[Ranking],
    net: &SuperNetwork<T>,
    cfg: &TrainConfig,
    k: f64,
    seed: u64,
) -> Result<Vec<Ranking>> {
    if shard.is_empty() {
        return Err(FrlError::Validation("local training on an empty shard".into()));
    }
    cfg.validate()?;
    check_rankings(net, global)?;
    let lr = T::lit(cfg.learning_rate);
    let momentum = T::lit(cfg.momentum);
    let wd = T::lit(cfg.weight_decay);
    let mut scores: Vec<Vec<T>> = global.iter().map(scores_from_ranking).collect();
    if cfg.learning_rate == 0.0 {
        return Ok(global.to_vec());
    }
    let mut velocity: Vec<Vec<T>> = scores.iter().map(|s| vec![T::zero(); s.len()]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..shard.len()).collect();
    for _ in 0..cfg.epochs {
        idx.shuffle(&mut rng);
        for chunk in idx.chunks(cfg.batch_size) {
            let batch = shard.select(chunk);
            let masks = scores
                .iter()
                .map(|s| mask_from_ranking(&rank_of(s), k))
                .collect::<Result<Vec<_>>>()?;
            let gates = masks_to_gates(&masks);
            let (loss, grads) = net.gate_gradient(&gates, &batch)?;
            if !loss.is_finite() {
                return Err(FrlError::Numerical(format!(
                    "non-finite training loss {loss} on client {:?}",
                    shard.owner()
                )));
            }
            for ((s, v), g) in scores.iter_mut().zip(&mut velocity).zip(&grads) {
                for e in 0..s.len() {
                    let step = g[e] + wd * s[e];
                    v[e] = momentum * v[e] + step;
                    s[e] -= lr * v[e];
                }
            }
        }
    }
    Ok(scores.iter().map(|s| rank_of(s)).collect())
}

/// Accuracy and mean cross-entropy of the subnetwork selected by `r`.
pub fn evaluate_metrics<T: Real>(
    r: &[Ranking],
    net: &SuperNetwork<T>,
    data: &DatasetShard<T>,
    k: f64,
) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(FrlError::Validation("evaluation on an empty dataset".into()));
    }
    check_rankings(net, r)?;
    let masks = r
        .iter()
        .map(|rk| mask_from_ranking(rk, k))
        .collect::<Result<Vec<_>>>()?;
    let (logits, loss) = net.forward(&masks, data)?;
    let classes = net.num_classes();
    let correct = data
        .labels()
        .iter()
        .enumerate()
        .filter(|&(b, &y)| argmax(&logits[b * classes..(b + 1) * classes]) == y)
        .count();
    Ok((correct as f64 / data.len() as f64, loss.as_f64()))
}

/// Fraction of samples whose argmax prediction matches the label.
pub fn evaluate<T: Real>(r: &[Ranking], net: &SuperNetwork<T>, data: &DatasetShard<T>, k: f64) -> Result<f64> {
    evaluate_metrics(r, net, data, k).map(|(acc, _)| acc)
}

fn argmax<T: Real>(z: &[T]) -> usize {
    // first maximum wins, so a constant row predicts class 0
    let mut best = 0;
    for (i, &v) in z.iter().enumerate().skip(1) {
        if v > z[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ranking::Ranking;

    fn blobs(seed: u64, n_per: usize) -> DatasetShard<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = Vec::new();
        let mut y = Vec::new();
        for c in 0..2 {
            let centre = if c == 0 { [2.0, 2.0, -2.0, 0.0] } else { [-2.0, -2.0, 2.0, 0.0] };
            for _ in 0..n_per {
                for v in centre {
                    f.push(v + rng.random::<f64>() - 0.5);
                }
                y.push(c);
            }
        }
        DatasetShard::new(f, 4, y, 2).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let a = SuperNetwork::<f64>::init(7, &[4, 8, 3]).unwrap();
        let b = SuperNetwork::<f64>::init(7, &[4, 8, 3]).unwrap();
        let c = SuperNetwork::<f64>::init(8, &[4, 8, 3]).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.weights(0), c.weights(0));
        assert_eq!(a.edge_counts(), vec![32, 24]);
        assert!(matches!(SuperNetwork::<f64>::init(1, &[]), Err(FrlError::Parameter(_))));
        assert!(matches!(SuperNetwork::<f64>::init(1, &[4]), Err(FrlError::Parameter(_))));
    }

    #[test]
    fn score_reconstruction() {
        let s: Vec<f64> = scores_from_ranking(&Ranking::identity(4));
        assert_eq!(s, vec![0.25, 0.5, 0.75, 1.0]);
        let s: Vec<f64> = scores_from_ranking(&Ranking::new(vec![1, 0]).unwrap());
        assert_eq!(s, vec![1.0, 0.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in 1..=100 {
            let r = Ranking::random(n, &mut rng);
            assert_eq!(rank_of(&scores_from_ranking::<f64>(&r)), r);
            assert_eq!(rank_of(&scores_from_ranking::<f32>(&r)), r);
        }
    }

    #[test]
    fn zero_mask_gives_constant_logits() {
        let net = SuperNetwork::<f64>::init(3, &[4, 8, 2]).unwrap();
        let data = blobs(1, 10);
        let masks: Vec<SuperMask> = net.edge_counts().iter().map(|&n| SuperMask::filled(n, false, 0.5)).collect();
        let (logits, loss) = net.forward(&masks, &data).unwrap();
        assert!(logits.iter().all(|&v| v == 0.0));
        assert!((loss - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn full_mask_equals_dense_pass() {
        let net = SuperNetwork::<f64>::init(5, &[4, 6, 3]).unwrap();
        let data = blobs(2, 4);
        let r = net.initial_ranking();
        let masks: Vec<SuperMask> = r.iter().map(|x| mask_from_ranking(x, 1.0).unwrap()).collect();
        let (logits, _) = net.forward(&masks, &data).unwrap();
        for b in 0..data.len() {
            let x = data.row(b);
            let hidden: Vec<f64> = (0..6)
                .map(|o| (0..4).map(|i| net.weights(0)[o * 4 + i] * x[i]).sum::<f64>().max(0.0))
                .collect();
            for c in 0..3 {
                let z: f64 = (0..6).map(|h| net.weights(1)[c * 6 + h] * hidden[h]).sum();
                assert_eq!(logits[b * 3 + c], z);
            }
        }
    }

    #[test]
    fn tiny_net_loss_matches_hand_computation() {
        // 2-2-2, x = (1, 2), label 1.
        // hidden pre = (1*1 + 2*(-1), 0.5*1 + 0.5*2) = (-1, 1.5) -> relu (0, 1.5)
        // logits = (2*0 + 1*1.5, -1*0 + 3*1.5) = (1.5, 4.5)
        // CE = ln(e^1.5 + e^4.5) - 4.5 = ln(1 + e^-3)
        let net = SuperNetwork::<f64>::from_weights(
            &[2, 2, 2],
            vec![vec![1.0, -1.0, 0.5, 0.5], vec![2.0, 1.0, -1.0, 3.0]],
        )
        .unwrap();
        let data = DatasetShard::new(vec![1.0, 2.0], 2, vec![1], 2).unwrap();
        let masks = vec![SuperMask::filled(4, true, 1.0), SuperMask::filled(4, true, 1.0)];
        let (logits, loss) = net.forward(&masks, &data).unwrap();
        assert_eq!(logits, vec![1.5, 4.5]);
        let expected = (1.0 + (-3.0f64).exp()).ln();
        assert!((loss - expected).abs() < 1e-9);
    }

    #[test]
    fn forward_rejects_wrong_shapes() {
        let net = SuperNetwork::<f64>::init(5, &[4, 6, 3]).unwrap();
        let data = blobs(2, 4);
        let masks = vec![SuperMask::filled(24, true, 1.0)];
        assert!(matches!(net.forward(&masks, &data), Err(FrlError::Validation(_))));
        let masks = vec![SuperMask::filled(24, true, 1.0), SuperMask::filled(17, true, 1.0)];
        assert!(net.forward(&masks, &data).is_err());
    }

    #[test]
    fn zero_learning_rate_keeps_ranking() {
        let net = SuperNetwork::<f64>::init(5, &[4, 6, 2]).unwrap();
        let data = blobs(3, 20);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        let r = net.initial_ranking();
        assert_eq!(local_train(&data, &r, &net, &cfg, 0.5, 1).unwrap(), r);
    }

    #[test]
    fn training_is_deterministic_and_leaves_weights() {
        let net = SuperNetwork::<f64>::init(5, &[4, 6, 2]).unwrap();
        let before = net.clone();
        let data = blobs(3, 20);
        let r = net.initial_ranking();
        let a = local_train(&data, &r, &net, &TrainConfig::default(), 0.5, 9).unwrap();
        let b = local_train(&data, &r, &net, &TrainConfig::default(), 0.5, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, r);
        assert_eq!(net, before);
    }

    #[test]
    fn empty_inputs_rejected() {
        let net = SuperNetwork::<f64>::init(5, &[4, 6, 2]).unwrap();
        let empty = DatasetShard::<f64>::new(vec![], 4, vec![], 2).unwrap();
        let r = net.initial_ranking();
        assert!(local_train(&empty, &r, &net, &TrainConfig::default(), 0.5, 0).is_err());
        assert!(evaluate(&r, &net, &empty, 0.5).is_err());
    }

    #[test]
    fn evaluate_is_deterministic() {
        let net = SuperNetwork::<f64>::init(5, &[4, 6, 2]).unwrap();
        let data = blobs(4, 50);
        let r = net.initial_ranking();
        let a = evaluate(&r, &net, &data, 0.5).unwrap();
        assert_eq!(a, evaluate(&r, &net, &data, 0.5).unwrap());
        assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn csv_loading() {
        let text = "f0,f1,label\n0.5,1.5,1\n-1,2,0\n";
        let d = DatasetShard::<f64>::from_csv_reader(text.as_bytes(), None).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.dim(), 2);
        assert_eq!(d.num_classes(), 2);
        assert_eq!(d.row(0), &[0.5, 1.5]);
        assert_eq!(d.labels(), &[1, 0]);
        assert!(DatasetShard::<f64>::from_csv_reader("1,2,0\n1,0\n".as_bytes(), None).is_err());
        assert!(DatasetShard::<f64>::from_csv_reader("1,2,5\n".as_bytes(), Some(3)).is_err());
        assert!(DatasetShard::<f64>::from_csv_reader("".as_bytes(), None).is_err());
    }
}
