mod common;

use common::{toy_arch, toy_clients, toy_samples};
use fedloc_core::dataset::{ClassId, Sample};
use fedloc_core::fedcore::{
    local_train, pseudo_gradient, pseudo_label, run_round, run_training, Aggregation, ClientState, Federation,
    PretrainSite, SimConfig, SimilarityScope, Strategy,
};
use fedloc_core::nn::ParamVector;
use fedloc_core::Network;

fn small_cfg(clients: usize) -> SimConfig {
    SimConfig {
        clients,
        batch_size: 8,
        local_epochs: 2,
        rounds: 4,
        initial_rounds: 1,
        max_similar_clients: clients.min(2),
        pretrain_epochs: 2,
        pseudo_refresh_every: 2,
        pseudo_threshold: 0.5,
        seed: 11,
        ..SimConfig::default()
    }
}

fn net() -> Network {
    Network::new(toy_arch()).unwrap()
}

#[test]
fn single_client_strategies_coincide() {
    let net = net();
    let test = toy_samples(40, 4, 99);
    let runs: Vec<_> = [
        (Strategy::SimDeep, 0.01),
        (Strategy::FedAvg, 0.01),
        (Strategy::FedProx, 0.0),
    ]
    .into_iter()
    .map(|(strategy, mu)| {
        let cfg = SimConfig {
            strategy,
            mu,
            max_similar_clients: 1,
            ..small_cfg(1)
        };
        run_training(&net, &cfg, toy_clients(1, 60, 5), Some(&test)).unwrap()
    })
    .collect();
    for other in &runs[1..] {
        assert_eq!(other.models(), runs[0].models());
        for (a, b) in runs[0].history.iter().zip(&other.history) {
            assert_eq!(a.train, b.train);
            assert_eq!(a.similarity, b.similarity);
            assert_eq!(a.client_accuracy, b.client_accuracy);
            assert_eq!(a.pseudo_counts, b.pseudo_counts);
        }
    }
}

#[test]
fn training_is_deterministic() {
    let net = net();
    let test = toy_samples(30, 4, 98);
    let cfg = small_cfg(3);
    let a = run_training(&net, &cfg, toy_clients(3, 90, 6), Some(&test)).unwrap();
    let b = run_training(&net, &cfg, toy_clients(3, 90, 6), Some(&test)).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.models(), b.models());
}

#[test]
fn zero_rounds_return_pretrained_models() {
    let net = net();
    let cfg = SimConfig { rounds: 0, initial_rounds: 0, ..small_cfg(3) };
    let out = run_training(&net, &cfg, toy_clients(3, 90, 6), None).unwrap();
    assert!(out.history.is_empty());
    let fed = Federation::new(&net, cfg, toy_clients(3, 90, 6)).unwrap();
    let pre: Vec<&ParamVector> = fed.clients().iter().map(|c| &c.params).collect();
    assert_eq!(out.models(), pre);
    let init = net.init_params(11);
    assert_ne!(pre[0], &init);
    assert_eq!(pre[0].values()[net.classifier_range()], init.values()[net.classifier_range()]);
}

#[test]
fn server_pretraining_shares_one_autoencoder() {
    let net = net();
    let cfg = SimConfig {
        rounds: 0,
        initial_rounds: 0,
        pretrain_site: PretrainSite::Server,
        ..small_cfg(3)
    };
    let fed = Federation::new(&net, cfg, toy_clients(3, 90, 6)).unwrap();
    assert_eq!(fed.pretrain_reports().len(), 1);
    let c = fed.clients();
    assert!(c.iter().all(|s| s.params == c[0].params));
}

#[test]
fn unreachable_threshold_gives_singletons() {
    let net = net();
    let cfg = SimConfig {
        similarity_threshold: 1.5,
        max_similar_clients: 3,
        ..small_cfg(3)
    };
    let out = run_training(&net, &cfg, toy_clients(3, 90, 6), None).unwrap();
    for rec in &out.history {
        if rec.round <= cfg.initial_rounds {
            assert_eq!(rec.aggregation, Aggregation::Global);
            assert!(rec.neighbors.is_none());
        } else {
            let sets = rec.neighbors.as_ref().unwrap();
            assert_eq!(sets, &vec![vec![0], vec![1], vec![2]]);
        }
    }
}

fn locals_then_round(cfg: &SimConfig, fed_clients: &mut [ClientState], net: &Network, t: usize) -> Vec<ParamVector> {
    let mut copies = fed_clients.to_vec();
    let locals = copies
        .iter_mut()
        .map(|s| local_train(net, cfg, s, t).unwrap().params)
        .collect();
    run_round(net, cfg, fed_clients, t, None).unwrap();
    locals
}

#[test]
fn open_threshold_with_full_cap_averages_everyone() {
    let net = net();
    let cfg = SimConfig {
        similarity_threshold: 0.0,
        max_similar_clients: 4,
        initial_rounds: 1,
        pseudo_refresh_every: 0,
        ..small_cfg(4)
    };
    let mut clients = Federation::new(&net, cfg.clone(), toy_clients(4, 120, 8)).unwrap().into_clients();
    run_round(&net, &cfg, &mut clients, 1, None).unwrap();
    let locals = locals_then_round(&cfg, &mut clients, &net, 2);
    let n = locals[0].len();
    let mut mean = vec![0.0; n];
    for l in &locals {
        for k in 0..n {
            mean[k] += l.values()[k] / 4.0;
        }
    }
    for c in &clients {
        for k in 0..n {
            assert!((c.params.values()[k] - mean[k]).abs() < 1e-12);
        }
    }
}

#[test]
fn accumulated_gradient_is_sum_of_pseudo_gradients() {
    let net = net();
    let cfg = small_cfg(3);
    let mut fed = Federation::new(&net, cfg.clone(), toy_clients(3, 90, 6)).unwrap();
    let mut sums: Vec<Vec<f64>> = vec![vec![0.0; net.num_params()]; 3];
    for _ in 0..cfg.rounds {
        let before: Vec<ParamVector> = fed.clients().iter().map(|c| c.params.clone()).collect();
        fed.step(None).unwrap();
        for (i, c) in fed.clients().iter().enumerate() {
            for (s, g) in sums[i].iter_mut().zip(c.g.values()) {
                *s += g;
            }
            assert_eq!(c.acc_g.values(), &sums[i][..]);
            assert_eq!(c.g.layout(), before[i].layout());
        }
    }
}

#[test]
fn zero_epochs_leave_parameters() {
    let net = net();
    let cfg = SimConfig { local_epochs: 0, ..small_cfg(2) };
    let mut clients = Federation::new(&net, cfg.clone(), toy_clients(2, 60, 6)).unwrap().into_clients();
    let before = clients[0].params.clone();
    let out = local_train(&net, &cfg, &mut clients[0], 1).unwrap();
    assert_eq!(out.params, before);
    assert!(!out.skipped);
    assert_eq!(pseudo_gradient(&before, &out.params).unwrap().norm(), 0.0);
}

#[test]
fn local_loss_decreases_on_separable_data() {
    let net = net();
    let cfg = SimConfig {
        local_epochs: 1,
        pretrain_epochs: 0,
        learning_rate: 5e-3,
        ..small_cfg(1)
    };
    let mut clients = Federation::new(&net, cfg.clone(), toy_clients(1, 120, 3)).unwrap().into_clients();
    let mut losses = Vec::new();
    for t in 1..=200 {
        let out = local_train(&net, &cfg, &mut clients[0], t).unwrap();
        losses.push(out.report.unwrap().loss_cls);
        clients[0].params = out.params;
    }
    let head: f64 = losses[..5].iter().sum();
    let tail: f64 = losses[195..].iter().sum();
    assert!(tail < 0.5 * head, "{losses:?}");
}

#[test]
fn client_without_samples_is_skipped() {
    let net = net();
    let cfg = SimConfig { pseudo_refresh_every: 0, ..small_cfg(3) };
    let mut datasets = toy_clients(3, 90, 6);
    datasets[1].labeled.clear();
    let mut clients = Federation::new(&net, cfg.clone(), datasets).unwrap().into_clients();
    let before = clients[1].params.clone();
    let rec = run_round(&net, &cfg, &mut clients, 1, None).unwrap();
    assert_eq!(rec.skipped, vec![1]);
    assert!(rec.train[1].is_none());
    assert_eq!(clients[1].params, before);
    assert_eq!(clients[1].g.norm(), 0.0);
    assert_eq!(clients[0].params, clients[2].params);
}

#[test]
fn classifier_scope_ignores_autoencoder_updates() {
    let net = net();
    let cfg = SimConfig {
        similarity_scope: SimilarityScope::Classifier,
        ..small_cfg(3)
    };
    let mut clients = Federation::new(&net, cfg.clone(), toy_clients(3, 90, 6)).unwrap().into_clients();
    let rec = run_round(&net, &cfg, &mut clients, 1, None).unwrap();
    let cls = net.classifier_range();
    let g0 = &clients[0].g.values()[cls.clone()];
    let g1 = &clients[1].g.values()[cls];
    let want = fedloc_core::fedcore::cosine(g0, g1);
    assert!((rec.similarity[0][1] - want).abs() < 1e-12);
}

#[test]
fn pseudo_label_threshold_boundary() {
    let net = net();
    let mut params = ParamVector::zeros(net.layout().clone());
    // All-zero weights make the logits equal to the last bias, so every
    // sample gets p(class 0) = e^b / (e^b + 14).
    let b = (0.79f64 * 14.0 / 0.21).ln();
    params.segment_mut("classifier.fc1.bias").unwrap()[0] = b;
    let samples: Vec<Sample> = toy_samples(5, 2, 1).into_iter().map(|s| Sample::unlabeled(&s)).collect();
    let p = net.predict(params.values(), &samples[0].features).unwrap().1[0];
    assert!((p - 0.79).abs() < 1e-12);
    assert!(pseudo_label(&net, params.values(), &samples, 0.8).unwrap().is_empty());
    let pool = pseudo_label(&net, params.values(), &samples, p).unwrap();
    assert_eq!(pool.len(), 5);
    assert!(pool.iter().all(|q| q.label == ClassId::new(0).unwrap() && q.confidence >= p));
    assert!(pseudo_label(&net, params.values(), &samples, 1.0).unwrap().is_empty());
    assert!(pseudo_label(&net, params.values(), &samples, 0.0).is_err());
}

#[test]
fn pseudo_pool_shrinks_with_threshold() {
    let net = net();
    let samples = toy_samples(60, 4, 4);
    for seed in 0..10 {
        let params = net.init_params(seed);
        let mut scaled = params.clone();
        let fc1 = scaled.segment_mut("classifier.fc1.weight").unwrap();
        fc1.iter_mut().for_each(|w| *w *= 40.0);
        let mut last = usize::MAX;
        for th in [0.05, 0.1, 0.2, 0.3, 0.5, 0.7, 0.9, 0.99] {
            let n = pseudo_label(&net, scaled.values(), &samples, th).unwrap().len();
            assert!(n <= last);
            last = n;
        }
    }
}

#[test]
fn rejects_bad_configs() {
    let net = net();
    for cfg in [
        SimConfig { max_similar_clients: 0, ..small_cfg(3) },
        SimConfig { gamma: 1.5, ..small_cfg(3) },
        SimConfig { pseudo_threshold: 0.0, ..small_cfg(3) },
        SimConfig { beta1: 1.0, ..small_cfg(3) },
    ] {
        assert!(Federation::new(&net, cfg, toy_clients(3, 90, 6)).is_err());
    }
    assert!(Federation::new(&net, small_cfg(2), toy_clients(3, 90, 6)).is_err());
}

#[test]
fn fork_after_warm_up_matches_fresh_runs() {
    let net = net();
    let test = toy_samples(30, 4, 97);
    let base = SimConfig { initial_rounds: 2, ..small_cfg(3) };
    let mut warm = Federation::new(&net, base.clone(), toy_clients(3, 90, 6)).unwrap();
    for _ in 0..2 {
        warm.step(Some(&test)).unwrap();
    }
    for cfg in [
        SimConfig { similarity_threshold: 0.2, ..base.clone() },
        SimConfig { max_similar_clients: 3, ..base.clone() },
        SimConfig { strategy: Strategy::FedAvg, ..base.clone() },
    ] {
        let fresh = run_training(&net, &cfg, toy_clients(3, 90, 6), Some(&test)).unwrap();
        let mut forked = warm.fork(cfg.clone()).unwrap();
        let tail: Vec<_> = (2..cfg.rounds).map(|_| forked.step(Some(&test)).unwrap()).collect();
        assert_eq!(tail, fresh.history[2..]);
        let models: Vec<&ParamVector> = forked.clients().iter().map(|c| &c.params).collect();
        assert_eq!(models, fresh.models());
    }
}

#[test]
fn fork_rejects_changes_to_training() {
    let net = net();
    let base = SimConfig { initial_rounds: 1, ..small_cfg(3) };
    let mut fed = Federation::new(&net, base.clone(), toy_clients(3, 90, 6)).unwrap();
    fed.step(None).unwrap();
    assert!(fed.fork(SimConfig { learning_rate: 0.01, ..base.clone() }).is_err());
    assert!(fed.fork(SimConfig { strategy: Strategy::FedProx, mu: 0.1, ..base.clone() }).is_err());
    assert!(fed.fork(SimConfig { initial_rounds: 0, ..base.clone() }).is_err());
    fed.step(None).unwrap();
    assert!(fed.fork(base).is_err());
}
