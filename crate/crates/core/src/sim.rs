//! End-to-end federated rank learning simulation.
//!
//! A run is fully determined by its [`SimConfig`]: every random stream
//! (data generation, splits, partitioning, client sampling, local shuffling,
//! random attack rankings, DnC subsampling) is derived from the master seed
//! with a fixed tag, so replaying a config reproduces the run bit for bit no
//! matter how many threads train clients.

use std::fmt::Write as _;
use std::io::Read;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::{eca_round, rra_round, AttackState, EcaInputs, Estimation};
use crate::defense::{aggregate, AggregatorKind, AggregatorParams, ClientUpdate, ServerAux};
use crate::error::{FrlError, Result};
use crate::network::{evaluate, local_train, DatasetShard, SuperNetwork, TrainConfig};
use crate::ranking::{aggregate_scores, boundary_gap, mask_distance, masks_from_rankings, Ranking};

/// Header of `rounds.csv`.
pub const ROUNDS_CSV_HEADER: &str = "round,acc,xi,mask_flips,boundary_gap_mean,attack_active";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    #[default]
    None,
    Eca,
    Rra,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSpec {
    pub kind: AttackKind,
    /// Target accuracy; required by both attacks.
    pub tau: Option<f64>,
    pub estimation: Estimation,
    /// Rounds to keep running once the attack has triggered. When unset the
    /// run lasts exactly `rounds` rounds.
    pub post_trigger_rounds: Option<usize>,
    /// ECA boundary-widening reversal; off gives the ablation.
    pub internal_reverse: bool,
}

impl Default for AttackSpec {
    fn default() -> Self {
        Self {
            kind: AttackKind::None,
            tau: None,
            estimation: Estimation::Historical,
            post_trigger_rounds: None,
            internal_reverse: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggregatorSpec {
    pub kind: AggregatorKind,
    pub params: AggregatorParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Gaussian class blobs, see [`synth_dataset`].
    Synthetic {
        num_classes: usize,
        dim: usize,
        samples_per_class: usize,
        separation: f64,
    },
    /// Feature columns followed by an integer label.
    Csv {
        path: PathBuf,
        #[serde(default)]
        num_classes: Option<usize>,
    },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Synthetic {
            num_classes: 4,
            dim: 16,
            samples_per_class: 1000,
            separation: 3.0,
        }
    }
}

/// Everything that defines a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub seed: u64,
    pub num_clients: usize,
    pub clients_per_round: usize,
    pub malicious_fraction: f64,
    /// Round count for runs without a post-trigger budget; otherwise the cap
    /// on rounds spent waiting for the attack to trigger.
    pub rounds: usize,
    pub k: f64,
    pub dirichlet_beta: f64,
    pub arch: Vec<usize>,
    pub dataset: DatasetSpec,
    pub attack: AttackSpec,
    pub aggregator: AggregatorSpec,
    pub train: TrainConfig,
    /// Held out at the server for reporting accuracy.
    pub test_fraction: f64,
    /// Server validation data (Fang).
    pub validation_fraction: f64,
    /// Server root data (FLTrust).
    pub root_fraction: f64,
    /// Trailing rounds summarised in the run summary.
    pub eval_window: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_clients: 100,
            clients_per_round: 10,
            malicious_fraction: 0.2,
            rounds: 100,
            k: 0.5,
            dirichlet_beta: 1.0,
            arch: vec![16, 32, 4],
            dataset: DatasetSpec::default(),
            attack: AttackSpec::default(),
            aggregator: AggregatorSpec::default(),
            train: TrainConfig::default(),
            test_fraction: 0.2,
            validation_fraction: 0.05,
            root_fraction: 0.05,
            eval_window: 50,
        }
    }
}

impl SimConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: SimConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// SHA-256 of the compact JSON encoding.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serialises");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    /// Malicious client count; IDs `0..count` are the attackers.
    pub fn malicious_clients(&self) -> usize {
        if self.attack.kind == AttackKind::None {
            0
        } else {
            (self.malicious_fraction * self.num_clients as f64 + 1e-9).floor() as usize
        }
    }

    /// Attackers per round assumed by the defence.
    pub fn assumed_malicious(&self) -> usize {
        self.aggregator
            .params
            .assumed_malicious
            .unwrap_or_else(|| (self.malicious_fraction * self.clients_per_round as f64).round() as usize)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FrlError::Config(m));
        if self.num_clients == 0 || self.clients_per_round == 0 {
            return bad("num_clients and clients_per_round must be positive".into());
        }
        if self.clients_per_round > self.num_clients {
            return bad(format!(
                "clients_per_round ({}) exceeds num_clients ({})",
                self.clients_per_round, self.num_clients
            ));
        }
        if !(0.0..0.5).contains(&self.malicious_fraction) {
            return bad(format!("malicious_fraction must lie in [0, 0.5), got {}", self.malicious_fraction));
        }
        if self.rounds == 0 {
            return bad("rounds must be positive".into());
        }
        if !(self.k > 0.0 && self.k <= 1.0) {
            return bad(format!("k must lie in (0, 1], got {}", self.k));
        }
        if !(self.dirichlet_beta > 0.0 && self.dirichlet_beta.is_finite()) {
            return bad(format!("dirichlet_beta must be positive, got {}", self.dirichlet_beta));
        }
        if self.arch.len() < 2 || self.arch.contains(&0) {
            return bad(format!("arch needs at least two non-zero layer sizes, got {:?}", self.arch));
        }
        let fractions = [self.test_fraction, self.validation_fraction, self.root_fraction];
        if fractions.iter().any(|f| !(0.0..1.0).contains(f)) || fractions.iter().sum::<f64>() >= 1.0 {
            return bad("test/validation/root fractions must be in [0, 1) and sum below 1".into());
        }
        if self.test_fraction == 0.0 {
            return bad("test_fraction must be positive".into());
        }
        if self.eval_window == 0 {
            return bad("eval_window must be positive".into());
        }
        self.train.validate().map_err(|e| FrlError::Config(e.to_string()))?;
        if let DatasetSpec::Synthetic {
            num_classes,
            dim,
            samples_per_class,
            separation,
        } = &self.dataset
        {
            if *num_classes < 2 || *dim == 0 || *samples_per_class == 0 || !(*separation >= 0.0) {
                return bad("synthetic dataset needs >= 2 classes, positive dim and samples, separation >= 0".into());
            }
            if *dim != self.arch[0] {
                return bad(format!("arch input width {} does not match dataset dim {dim}", self.arch[0]));
            }
            if *num_classes > *self.arch.last().unwrap() {
                return bad("arch output width is smaller than the class count".into());
            }
        }
        match self.attack.kind {
            AttackKind::None => {}
            AttackKind::Eca | AttackKind::Rra => match self.attack.tau {
                Some(t) if t > 0.0 && t < 1.0 => {}
                _ => return bad("attacks need tau in (0, 1)".into()),
            },
        }
        if self.aggregator.kind == AggregatorKind::Fltrust && self.root_fraction == 0.0 {
            return bad("fltrust needs root_fraction > 0".into());
        }
        if matches!(
            self.aggregator.kind,
            AggregatorKind::FangErr | AggregatorKind::FangLfr | AggregatorKind::FangUnion
        ) && self.validation_fraction == 0.0
        {
            return bad("fang needs validation_fraction > 0".into());
        }
        if self.aggregator.kind == AggregatorKind::MultiKrum {
            let m = self.assumed_malicious();
            let u = self.clients_per_round;
            let c = self.aggregator.params.krum_selection.or(crate::defense::krum_default_selection(u, m));
            match c {
                Some(c) if c >= 1 && c < u && u - c > 2 * m + 2 => {}
                _ => return bad(format!("multi_krum cannot run with U={u}, m={m}")),
            }
        }
        Ok(())
    }
}

/// Mixes the master seed with a stream tag and two indices (SplitMix64
/// finaliser).
pub fn derive_seed(master: u64, tag: u64, a: u64, b: u64) -> u64 {
    let mut z = master
        ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ a.wrapping_mul(0xBF58_476D_1CE4_E5B9)
        ^ b.wrapping_mul(0x94D0_49BB_1331_11EB);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const TAG_DATA: u64 = 1;
const TAG_SPLIT: u64 = 2;
const TAG_PARTITION: u64 = 3;
const TAG_NET: u64 = 4;
const TAG_SAMPLE: u64 = 5;
const TAG_LOCAL: u64 = 6;
const TAG_RRA: u64 = 7;
const TAG_SERVER: u64 = 8;

/// Gaussian class blobs with unit-variance noise. Class means are random
/// directions scaled to length `separation`; while `num_classes <= dim` the
/// directions are orthonormalised so every pair of means sits exactly
/// `separation * sqrt(2)` apart. Rows are grouped by class.
pub fn synth_dataset(
    seed: u64,
    num_classes: usize,
    dim: usize,
    samples_per_class: usize,
    separation: f64,
) -> Result<DatasetShard<f64>> {
    if num_classes == 0 || dim == 0 {
        return Err(FrlError::Parameter("need at least one class and one dimension".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if c < dim {
            for d in &dirs {
                let dot: f64 = v.iter().zip(d).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(d).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        dirs.push(v.into_iter().map(|x| x / norm).collect());
    }
    let means: Vec<Vec<f64>> = dirs
        .into_iter()
        .map(|d| d.into_iter().map(|x| separation * x).collect())
        .collect();
    let mut features = Vec::with_capacity(num_classes * samples_per_class * dim);
    let mut labels = Vec::with_capacity(num_classes * samples_per_class);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..samples_per_class {
            features.extend(mean.iter().map(|m| m + rng.sample::<f64, _>(StandardNormal)));
            labels.push(c);
        }
    }
    DatasetShard::new(features, dim, labels, num_classes)
}

/// Splits row indices of `labels` across clients with per-class
/// Dirichlet(`beta`) proportions. Returns one index list per client; lists
/// are disjoint, cover every row, and are never empty (an empty client
/// receives one random row from the currently largest list).
pub fn dirichlet_partition_indices<R: Rng + ?Sized>(
    labels: &[usize],
    num_clients: usize,
    beta: f64,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    if num_clients == 0 {
        return Err(FrlError::Config("partition into zero clients".into()));
    }
    if labels.len() < num_clients {
        return Err(FrlError::Config(format!(
            "{} samples cannot give each of {num_clients} clients one sample",
            labels.len()
        )));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(FrlError::Parameter(format!("dirichlet beta must be positive, got {beta}")));
    }
    let gamma = Gamma::new(beta, 1.0).map_err(|e| FrlError::Parameter(e.to_string()))?;
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut shards = vec![Vec::new(); num_clients];
    for c in 0..classes {
        let mut rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if rows.is_empty() {
            continue;
        }
        rows.shuffle(rng);
        let mut props: Vec<f64> = (0..num_clients).map(|_| gamma.sample(rng)).collect();
        let total: f64 = props.iter().sum();
        if total > 0.0 && total.is_finite() {
            props.iter_mut().for_each(|p| *p /= total);
        } else {
            props.fill(1.0 / num_clients as f64);
        }
        let mut cum = 0.0;
        let mut start = 0;
        for (client, p) in props.iter().enumerate() {
            cum += p;
            let end = if client + 1 == num_clients {
                rows.len()
            } else {
                ((cum * rows.len() as f64).round() as usize).clamp(start, rows.len())
            };
            shards[client].extend_from_slice(&rows[start..end]);
            start = end;
        }
    }
    while let Some(empty) = shards.iter().position(Vec::is_empty) {
        let largest = (0..num_clients)
            .max_by(|&a, &b| shards[a].len().cmp(&shards[b].len()).then(b.cmp(&a)))
            .expect("at least one client");
        let pick = rng.random_range(0..shards[largest].len());
        let row = shards[largest].swap_remove(pick);
        shards[empty].push(row);
    }
    Ok(shards)
}

/// Dirichlet partition of a dataset into owned client shards.
pub fn dirichlet_partition<R: Rng + ?Sized>(
    data: &DatasetShard<f64>,
    num_clients: usize,
    beta: f64,
    rng: &mut R,
) -> Result<Vec<DatasetShard<f64>>> {
    if data.is_empty() {
        return Err(FrlError::Config("partitioning an empty dataset".into()));
    }
    let idx = dirichlet_partition_indices(data.labels(), num_clients, beta, rng)?;
    Ok(idx
        .iter()
        .enumerate()
        .map(|(c, rows)| data.select(rows).with_owner(c))
        .collect())
}

/// One round of the simulation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    /// Test accuracy of the global ranking after aggregation.
    pub acc: f64,
    /// `|acc - tau|` when an attack is configured.
    pub xi: Option<f64>,
    /// Edges whose selection changed relative to the previous global mask.
    pub mask_flips: usize,
    /// Mean over layers of the aggregated boundary gap.
    pub boundary_gap_mean: f64,
    /// Malicious rankings were submitted this round.
    pub attack_active: bool,
    #[serde(default)]
    pub removed: Vec<usize>,
    #[serde(default)]
    pub malicious_selected: usize,
    /// Attacker's distance `|acc - tau|` of its current target, once armed.
    #[serde(default)]
    pub target_error: Option<f64>,
}

/// Mean and population standard deviation over the trailing `window`
/// entries.
fn window_stats(values: &[f64], window: usize) -> Result<(f64, f64)> {
    if window == 0 || values.is_empty() {
        return Err(FrlError::Parameter("empty evaluation window".into()));
    }
    if window > values.len() {
        return Err(FrlError::Parameter(format!(
            "window {window} exceeds the {} recorded rounds",
            values.len()
        )));
    }
    let tail = &values[values.len() - window..];
    let mean = tail.iter().sum::<f64>() / window as f64;
    let var = tail.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / window as f64;
    Ok((mean, var.sqrt()))
}

/// Mean and standard deviation of `|acc - tau|` over the final `window`
/// rounds.
pub fn control_error(records: &[RoundRecord], tau: f64, window: usize) -> Result<(f64, f64)> {
    let xi: Vec<f64> = records.iter().map(|r| (r.acc - tau).abs()).collect();
    window_stats(&xi, window)
}

/// Mean and standard deviation of accuracy over the final `window` rounds.
pub fn accuracy_stats(records: &[RoundRecord], window: usize) -> Result<(f64, f64)> {
    let acc: Vec<f64> = records.iter().map(|r| r.acc).collect();
    window_stats(&acc, window)
}

/// Mean and spread as a percentage cell: `0.0011, 0.0027 -> "0.11 (±0.27)"`.
pub fn format_mean_std(mean: f64, std: f64) -> String {
    format!("{:.2} (±{:.2})", mean * 100.0, std * 100.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub rounds_run: usize,
    pub final_acc: f64,
    pub window: usize,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub xi_mean: Option<f64>,
    pub xi_std: Option<f64>,
    pub xi_max: Option<f64>,
}

/// Everything needed to replay and audit a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: SimConfig,
    pub seed: u64,
    pub config_hash: String,
    /// Round in which the attack first armed itself.
    pub trigger_round: Option<usize>,
    pub malicious_clients: usize,
    pub failure: Option<String>,
    pub summary: Option<RunSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub manifest: Manifest,
    pub records: Vec<RoundRecord>,
}

impl RunLog {
    fn new(cfg: &SimConfig) -> Self {
        Self {
            manifest: Manifest {
                config: cfg.clone(),
                seed: cfg.seed,
                config_hash: cfg.hash(),
                trigger_round: None,
                malicious_clients: cfg.malicious_clients(),
                failure: None,
                summary: None,
            },
            records: Vec::new(),
        }
    }

    fn finish(&mut self) {
        let Some(last) = self.records.last() else { return };
        let window = self.manifest.config.eval_window.min(self.records.len());
        let (acc_mean, acc_std) = accuracy_stats(&self.records, window).expect("non-empty window");
        let tau = self.manifest.config.attack.tau.filter(|_| self.manifest.config.attack.kind != AttackKind::None);
        let (xi_mean, xi_std, xi_max) = match tau {
            Some(t) => {
                let (m, s) = control_error(&self.records, t, window).expect("non-empty window");
                let max = self.records[self.records.len() - window..]
                    .iter()
                    .map(|r| (r.acc - t).abs())
                    .fold(0.0, f64::max);
                (Some(m), Some(s), Some(max))
            }
            None => (None, None, None),
        };
        self.manifest.summary = Some(RunSummary {
            rounds_run: self.records.len(),
            final_acc: last.acc,
            window,
            acc_mean,
            acc_std,
            xi_mean,
            xi_std,
            xi_max,
        });
    }

    /// `rounds.csv` contents.
    pub fn rounds_csv(&self) -> String {
        let mut out = String::with_capacity(64 * (self.records.len() + 1));
        out.push_str(ROUNDS_CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let xi = r.xi.map(|x| x.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.round,
                r.acc,
                xi,
                r.mask_flips,
                r.boundary_gap_mean,
                u8::from(r.attack_active)
            );
        }
        out
    }

    pub fn manifest_json(&self) -> String {
        serde_json::to_string_pretty(&self.manifest).expect("manifest serialises")
    }

    /// Writes `manifest.json` and `rounds.csv` into `dir` (created if needed).
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("manifest.json"), self.manifest_json())?;
        std::fs::write(dir.join("rounds.csv"), self.rounds_csv())?;
        Ok(())
    }

    /// Reads a run directory written by [`RunLog::write_to`].
    pub fn read_from(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
        let records = read_rounds_csv(std::fs::File::open(dir.join("rounds.csv"))?)?;
        Ok(Self { manifest, records })
    }
}

/// Parses `rounds.csv` (the columns of [`ROUNDS_CSV_HEADER`]).
pub fn read_rounds_csv<R: Read>(reader: R) -> Result<Vec<RoundRecord>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers().map_err(|e| FrlError::Validation(e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>().join(",") != ROUNDS_CSV_HEADER {
        return Err(FrlError::Validation(format!("unexpected rounds.csv header {headers:?}")));
    }
    let bad = |line: usize, what: &str| FrlError::Validation(format!("rounds.csv line {line}: bad {what}"));
    rdr.records()
        .enumerate()
        .map(|(i, rec)| {
            let line = i + 2;
            let rec = rec.map_err(|e| FrlError::Validation(e.to_string()))?;
            Ok(RoundRecord {
                round: rec[0].parse().map_err(|_| bad(line, "round"))?,
                acc: rec[1].parse().map_err(|_| bad(line, "acc"))?,
                xi: if rec[2].is_empty() {
                    None
                } else {
                    Some(rec[2].parse().map_err(|_| bad(line, "xi"))?)
                },
                mask_flips: rec[3].parse().map_err(|_| bad(line, "mask_flips"))?,
                boundary_gap_mean: rec[4].parse().map_err(|_| bad(line, "boundary_gap_mean"))?,
                attack_active: match &rec[5] {
                    "1" | "true" => true,
                    "0" | "false" => false,
                    _ => return Err(bad(line, "attack_active")),
                },
                removed: Vec::new(),
                malicious_selected: 0,
                target_error: None,
            })
        })
        .collect()
}

/// Failed run: the error plus everything recorded before it.
#[derive(Debug)]
pub struct SimFailure {
    pub log: RunLog,
    pub error: FrlError,
}

impl std::fmt::Display for SimFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "simulation failed after {} rounds: {}", self.log.records.len(), self.error)
    }
}

impl std::error::Error for SimFailure {}

/// Data roles of a run. Every sample lands in exactly one of them.
#[derive(Clone, Debug)]
pub struct DataSplit {
    pub test: DatasetShard<f64>,
    pub validation: Option<DatasetShard<f64>>,
    pub root: Option<DatasetShard<f64>>,
    pub clients: Vec<DatasetShard<f64>>,
}

fn load_dataset(cfg: &SimConfig) -> Result<DatasetShard<f64>> {
    match &cfg.dataset {
        DatasetSpec::Synthetic {
            num_classes,
            dim,
            samples_per_class,
            separation,
        } => synth_dataset(
            derive_seed(cfg.seed, TAG_DATA, 0, 0),
            *num_classes,
            *dim,
            *samples_per_class,
            *separation,
        ),
        DatasetSpec::Csv { path, num_classes } => DatasetShard::from_csv_path(path, *num_classes),
    }
}

/// Shuffles the dataset once and carves out test, validation and root
/// splits before partitioning the remainder across clients.
pub fn split_data(cfg: &SimConfig, data: &DatasetShard<f64>) -> Result<DataSplit> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, TAG_SPLIT, 0, 0));
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut rng);
    let count = |f: f64| (f * data.len() as f64).round() as usize;
    let (n_test, n_val, n_root) = (count(cfg.test_fraction).max(1), count(cfg.validation_fraction), count(cfg.root_fraction));
    if n_test + n_val + n_root >= data.len() {
        return Err(FrlError::Config("server splits leave no client data".into()));
    }
    let (test_idx, rest) = idx.split_at(n_test);
    let (val_idx, rest) = rest.split_at(n_val);
    let (root_idx, client_idx) = rest.split_at(n_root);
    let pool = data.select(client_idx);
    let mut prng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, TAG_PARTITION, 0, 0));
    let clients = dirichlet_partition(&pool, cfg.num_clients, cfg.dirichlet_beta, &mut prng)?;
    Ok(DataSplit {
        test: data.select(test_idx),
        validation: (n_val > 0).then(|| data.select(val_idx)),
        root: (n_root > 0).then(|| data.select(root_idx)),
        clients,
    })
}

fn mean_boundary_gap(rs: &[&[Ranking]], k: f64) -> Result<f64> {
    let layers = rs[0].len();
    let mut total = 0.0;
    for l in 0..layers {
        let column: Vec<Ranking> = rs.iter().map(|c| c[l].clone()).collect();
        total += boundary_gap(&aggregate_scores(&column)?, k)? as f64;
    }
    Ok(total / layers as f64)
}

/// Runs the configured simulation. On failure the rounds completed so far
/// are returned inside [`SimFailure`].
pub fn run_simulation(cfg: &SimConfig) -> std::result::Result<RunLog, SimFailure> {
    let mut log = RunLog::new(cfg);
    match drive(cfg, &mut log) {
        Ok(()) => {
            log.finish();
            Ok(log)
        }
        Err(error) => {
            log.manifest.failure = Some(error.to_string());
            log.finish();
            Err(SimFailure { log, error })
        }
    }
}

fn drive(cfg: &SimConfig, log: &mut RunLog) -> Result<()> {
    cfg.validate()?;
    let data = load_dataset(cfg)?;
    if data.dim() != cfg.arch[0] {
        return Err(FrlError::Config(format!(
            "dataset has {} features but arch expects {}",
            data.dim(),
            cfg.arch[0]
        )));
    }
    let split = split_data(cfg, &data)?;
    let net = SuperNetwork::<f64>::init(derive_seed(cfg.seed, TAG_NET, 0, 0), &cfg.arch)?;
    let edge_counts = net.edge_counts();
    let mut global = net.initial_ranking();

    let n_mal = cfg.malicious_clients();
    let attacker_data = if n_mal > 0 {
        Some(DatasetShard::concat(&split.clients[..n_mal])?)
    } else {
        None
    };
    let tau = cfg.attack.tau.unwrap_or(0.0);
    let mut eca = match cfg.attack.kind {
        AttackKind::Eca => Some(AttackState::new(tau)?),
        _ => None,
    };
    let m_hat = cfg.assumed_malicious();
    let mut prev_masks = masks_from_rankings(&global, cfg.k)?;

    let cap = cfg.rounds;
    let mut round = 0usize;
    loop {
        round += 1;
        let trigger = log.manifest.trigger_round;
        match (cfg.attack.post_trigger_rounds, trigger) {
            (Some(p), Some(t)) if round > t + p => break,
            (Some(_), None) if round > cap => break,
            (None, _) if round > cap => break,
            _ => {}
        }

        let mut srng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, TAG_SAMPLE, round as u64, 0));
        let mut selected = sample(&mut srng, cfg.num_clients, cfg.clients_per_round).into_vec();
        selected.sort_unstable();
        let malicious: Vec<usize> = selected.iter().copied().filter(|&c| c < n_mal).collect();

        // attacker observes the broadcast ranking
        let attacker_acc = match &attacker_data {
            Some(d) => Some(evaluate(&global, &net, d, cfg.k)?),
            None => None,
        };
        if let (Some(state), Some(acc)) = (eca.as_mut(), attacker_acc) {
            let was = state.started();
            state.update_target(&global, acc);
            if !was && state.started() {
                log.manifest.trigger_round = Some(round);
            }
        }
        if cfg.attack.kind == AttackKind::Rra && trigger.is_none() {
            if let Some(acc) = attacker_acc.filter(|&a| a > tau) {
                let _ = acc;
                log.manifest.trigger_round = Some(round);
            }
        }

        // malicious submissions replacing honest training, if any
        let crafted: Option<Vec<Vec<Ranking>>> = if malicious.is_empty() {
            None
        } else {
            match cfg.attack.kind {
                AttackKind::None => None,
                AttackKind::Rra => {
                    let mut rrng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, TAG_RRA, round as u64, 0));
                    rra_round(attacker_acc.unwrap_or(0.0), tau, &edge_counts, malicious.len(), &mut rrng)
                }
                AttackKind::Eca => {
                    let state = eca.as_ref().expect("eca state");
                    if state.started() {
                        let honest_needed = cfg.attack.estimation == Estimation::Alternative;
                        let locals = if honest_needed {
                            train_clients(cfg, &net, &global, &split.clients, &malicious, round)?
                        } else {
                            Vec::new()
                        };
                        eca_round(
                            state,
                            &EcaInputs {
                                estimation: cfg.attack.estimation,
                                malicious_locals: &locals,
                                m: malicious.len(),
                                k: cfg.k,
                                internal_reverse: cfg.attack.internal_reverse,
                            },
                        )?
                    } else {
                        None
                    }
                }
            }
        };
        let attack_active = crafted.is_some();

        let honest: Vec<usize> = if attack_active {
            selected.iter().copied().filter(|c| !malicious.contains(c)).collect()
        } else {
            selected.clone()
        };
        let trained = train_clients(cfg, &net, &global, &split.clients, &honest, round)?;
        let mut updates: Vec<ClientUpdate> = honest
            .iter()
            .zip(trained)
            .map(|(&client, rankings)| ClientUpdate { client, rankings })
            .collect();
        if let Some(crafted) = crafted {
            updates.extend(
                malicious
                    .iter()
                    .zip(crafted)
                    .map(|(&client, rankings)| ClientUpdate { client, rankings }),
            );
        }

        let aux = ServerAux {
            net: &net,
            global: &global,
            validation: split.validation.as_ref(),
            root: split.root.as_ref(),
            train: &cfg.train,
            k: cfg.k,
            seed: derive_seed(cfg.seed, TAG_SERVER, round as u64, 0),
        };
        let agg = aggregate(cfg.aggregator.kind, &cfg.aggregator.params, &updates, &aux, m_hat)?;
        let contributing: Vec<&[Ranking]> = updates
            .iter()
            .filter(|u| agg.kept.contains(&u.client))
            .map(|u| u.rankings.as_slice())
            .collect();
        let gap = if contributing.is_empty() {
            0.0
        } else {
            mean_boundary_gap(&contributing, cfg.k)?
        };

        global = agg.ranking;
        let masks = masks_from_rankings(&global, cfg.k)?;
        let flips = masks
            .iter()
            .zip(&prev_masks)
            .map(|(a, b)| mask_distance(a, b))
            .sum::<Result<usize>>()?;
        prev_masks = masks;
        let acc = evaluate(&global, &net, &split.test, cfg.k)?;
        log.records.push(RoundRecord {
            round,
            acc,
            xi: (cfg.attack.kind != AttackKind::None).then(|| (acc - tau).abs()),
            mask_flips: flips,
            boundary_gap_mean: gap,
            attack_active,
            removed: agg.removed,
            malicious_selected: malicious.len(),
            target_error: eca.as_ref().filter(|s| s.started()).map(AttackState::epsilon),
        });
    }
    Ok(())
}

fn train_clients(
    cfg: &SimConfig,
    net: &SuperNetwork<f64>,
    global: &[Ranking],
    shards: &[DatasetShard<f64>],
    clients: &[usize],
    round: usize,
) -> Result<Vec<Vec<Ranking>>> {
    clients
        .par_iter()
        .map(|&c| {
            let seed = derive_seed(cfg.seed, TAG_LOCAL, round as u64, c as u64);
            local_train(&shards[c], global, net, &cfg.train, cfg.k, seed)
        })
        .collect()
}
