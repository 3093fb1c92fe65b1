use frl_core::attack::Estimation;
use frl_core::defense::{aggregate, AggregatorKind, AggregatorParams, ClientUpdate, ServerAux};
use frl_core::network::{evaluate, local_train, SuperNetwork, TrainConfig};
use frl_core::ranking::Ranking;
use frl_core::sim::{
    run_simulation, split_data, synth_dataset, AttackKind, DatasetSpec, RunLog, SimConfig,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_config(seed: u64) -> SimConfig {
    SimConfig {
        seed,
        num_clients: 20,
        clients_per_round: 5,
        rounds: 6,
        arch: vec![4, 8, 3],
        dataset: DatasetSpec::Synthetic {
            num_classes: 3,
            dim: 4,
            samples_per_class: 100,
            separation: 3.0,
        },
        ..SimConfig::default()
    }
}

#[test]
fn runs_replay_exactly() {
    let cfg = small_config(3);
    let a = run_simulation(&cfg).unwrap();
    let b = run_simulation(&cfg).unwrap();
    assert_eq!(a.rounds_csv(), b.rounds_csv());
    assert_eq!(a.manifest_json(), b.manifest_json());
    assert_eq!(a.records.len(), 6);
    let c = run_simulation(&small_config(4)).unwrap();
    assert_ne!(a.manifest.config_hash, c.manifest.config_hash);
}

#[test]
fn clean_runs_have_no_control_error() {
    let log = run_simulation(&small_config(1)).unwrap();
    assert!(log.records.iter().all(|r| r.xi.is_none() && !r.attack_active));
    assert!(log.records.iter().all(|r| (0.0..=1.0).contains(&r.acc)));
    let s = log.manifest.summary.unwrap();
    assert!(s.xi_mean.is_none());
}

#[test]
fn attacked_runs_report_xi_and_trigger() {
    let mut cfg = small_config(2);
    cfg.attack.kind = AttackKind::Eca;
    cfg.attack.tau = Some(0.4);
    cfg.attack.post_trigger_rounds = Some(5);
    cfg.rounds = 30;
    let log = run_simulation(&cfg).unwrap();
    let trigger = log.manifest.trigger_round.expect("attack should arm on easy data");
    assert_eq!(log.records.len(), trigger + 5);
    for r in &log.records {
        assert!((r.xi.unwrap() - (r.acc - 0.4).abs()).abs() < 1e-12);
    }
    assert!(log.records.iter().any(|r| r.attack_active));
    assert!(log.records[..trigger - 1].iter().all(|r| !r.attack_active));
}

#[test]
fn alternative_estimation_runs() {
    let mut cfg = small_config(2);
    cfg.attack.kind = AttackKind::Eca;
    cfg.attack.tau = Some(0.4);
    cfg.attack.estimation = Estimation::Alternative;
    let log = run_simulation(&cfg).unwrap();
    assert_eq!(log.records.len(), cfg.rounds);
}

#[test]
fn run_directory_round_trips() {
    let log = run_simulation(&small_config(5)).unwrap();
    let dir = std::env::temp_dir().join(format!("frl-sim-test-{}", std::process::id()));
    log.write_to(&dir).unwrap();
    let back = RunLog::read_from(&dir).unwrap();
    assert_eq!(back.manifest, log.manifest);
    assert_eq!(back.rounds_csv(), log.rounds_csv());
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn failures_keep_the_partial_log() {
    let mut cfg = small_config(1);
    cfg.dataset = DatasetSpec::Csv {
        path: "/nonexistent/frl/data.csv".into(),
        num_classes: None,
    };
    let failure = run_simulation(&cfg).unwrap_err();
    assert!(failure.log.records.is_empty());
    assert!(failure.log.manifest.failure.is_some());
}

#[test]
fn splits_conserve_samples() {
    let cfg = small_config(9);
    let data = synth_dataset(1, 3, 4, 100, 3.0).unwrap();
    let split = split_data(&cfg, &data).unwrap();
    let clients: usize = split.clients.iter().map(|c| c.len()).sum();
    let total = split.test.len()
        + split.validation.as_ref().map_or(0, |d| d.len())
        + split.root.as_ref().map_or(0, |d| d.len())
        + clients;
    assert_eq!(total, data.len());
    assert_eq!(split.test.len(), 60);
    assert_eq!(split.clients.len(), 20);
    assert!(split.clients.iter().enumerate().all(|(i, c)| c.owner() == Some(i) && !c.is_empty()));
}

#[test]
fn local_training_learns_two_blobs() {
    let data = synth_dataset(11, 2, 4, 300, 4.0).unwrap();
    let net = SuperNetwork::<f64>::init(2, &[4, 16, 2]).unwrap();
    let mut global = net.initial_ranking();
    let cfg = TrainConfig::default();
    for round in 0..3 {
        global = local_train(&data, &global, &net, &cfg, 0.5, round).unwrap();
    }
    let acc = evaluate(&global, &net, &data, 0.5).unwrap();
    assert!(acc >= 0.90, "accuracy {acc}");
}

fn trained_updates(net: &SuperNetwork<f64>, global: &[Ranking], honest: usize) -> Vec<ClientUpdate> {
    let data = synth_dataset(5, 3, 4, 200, 3.0).unwrap();
    let cfg = TrainConfig::default();
    let mut updates: Vec<ClientUpdate> = (0..honest)
        .map(|c| ClientUpdate {
            client: c + 1,
            rankings: local_train(&data, global, net, &cfg, 0.5, c as u64).unwrap(),
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    updates.push(ClientUpdate {
        client: 0,
        rankings: net.edge_counts().iter().map(|&n| Ranking::random(n, &mut rng)).collect(),
    });
    updates
}

#[test]
fn server_side_rules_flag_a_random_client() {
    let net = SuperNetwork::<f64>::init(8, &[4, 12, 3]).unwrap();
    let global = net.initial_ranking();
    let updates = trained_updates(&net, &global, 6);
    let data = synth_dataset(6, 3, 4, 80, 3.0).unwrap();
    let cfg = TrainConfig::default();
    let aux = ServerAux {
        net: &net,
        global: &global,
        validation: Some(&data),
        root: Some(&data),
        train: &cfg,
        k: 0.5,
        seed: 1,
    };
    let params = AggregatorParams::default();
    let fang = aggregate(AggregatorKind::FangErr, &params, &updates, &aux, 1).unwrap();
    assert_eq!(fang.removed.len(), 1);
    let krum = aggregate(AggregatorKind::MultiKrum, &params, &updates, &aux, 1).unwrap();
    assert!(krum.removed.contains(&0));
    let trust = aggregate(AggregatorKind::Fltrust, &params, &updates, &aux, 1).unwrap();
    assert_eq!(trust.ranking.len(), 2);
    assert!(trust.kept.len() >= 6);
}

#[test]
fn fang_and_fltrust_need_server_data() {
    let net = SuperNetwork::<f64>::init(8, &[4, 12, 3]).unwrap();
    let global = net.initial_ranking();
    let updates = trained_updates(&net, &global, 3);
    let cfg = TrainConfig::default();
    let aux = ServerAux {
        net: &net,
        global: &global,
        validation: None,
        root: None,
        train: &cfg,
        k: 0.5,
        seed: 1,
    };
    let params = AggregatorParams::default();
    assert!(aggregate(AggregatorKind::FangUnion, &params, &updates, &aux, 1).is_err());
    assert!(aggregate(AggregatorKind::Fltrust, &params, &updates, &aux, 1).is_err());
}
