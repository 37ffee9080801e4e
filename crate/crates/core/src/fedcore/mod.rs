//! Federated round engine: local training, pseudo-labels, update similarity
//! and the SimDeep / FedAvg / FedProx aggregation strategies.

mod aggregate;
mod pseudo;
mod similarity;

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Sample;
use crate::models::{pretrain_autoencoder, Network, TrainExample};
use crate::nn::{train_epochs, AdamConfig, AdamState, NnError, ParamVector, Proximal, TrainStepReport};
use crate::partition::ClientDataset;
use crate::rng::{self, tag};

pub use aggregate::{aggregate_fedavg, aggregate_simdeep};
pub use pseudo::{pseudo_label, pseudo_precision, PseudoLabel};
pub use similarity::{cosine, select_neighbors, similarity, similarity_matrix, ZERO_NORM};

#[derive(Debug, Error)]
pub enum FedError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type Result<T, E = FedError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    SimDeep,
    FedAvg,
    FedProx,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::SimDeep, Strategy::FedAvg, Strategy::FedProx];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::SimDeep => "simdeep",
            Strategy::FedAvg => "fedavg",
            Strategy::FedProx => "fedprox",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Where the autoencoder is pretrained before the first round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PretrainSite {
    /// Each client on its own samples.
    Client,
    /// Once on the pooled features of all clients, then broadcast.
    Server,
}

/// Which parameters enter the similarity vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityScope {
    All,
    Classifier,
}

/// Federated simulation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub clients: usize,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub rounds: usize,
    /// FedAvg warm-up rounds before similarity aggregation starts. May
    /// exceed `rounds`, in which case every round is a warm-up round.
    pub initial_rounds: usize,
    /// Upper bound on the neighbor-set size; values above `clients` allow
    /// every client.
    pub max_similar_clients: usize,
    pub similarity_threshold: f64,
    /// Weight of the instantaneous term in the similarity.
    pub gamma: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub pseudo_threshold: f64,
    /// Pseudo-labels are rebuilt in rounds divisible by this; 0 disables them.
    pub pseudo_refresh_every: usize,
    /// Weight of the reconstruction loss.
    pub lambda: f64,
    /// FedProx proximal coefficient.
    pub mu: f64,
    pub strategy: Strategy,
    pub seed: u64,
    pub pretrain_epochs: usize,
    pub pretrain_site: PretrainSite,
    pub similarity_scope: SimilarityScope,
    pub include_self: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            clients: 10,
            batch_size: 64,
            local_epochs: 75,
            rounds: 35,
            initial_rounds: 5,
            max_similar_clients: 4,
            similarity_threshold: 0.5,
            gamma: 0.5,
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
            pseudo_threshold: 0.8,
            pseudo_refresh_every: 5,
            lambda: 1.0,
            mu: 0.01,
            strategy: Strategy::SimDeep,
            seed: 0,
            pretrain_epochs: 10,
            pretrain_site: PretrainSite::Client,
            similarity_scope: SimilarityScope::All,
            include_self: true,
        }
    }
}

impl SimConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }

    /// Structural checks. The similarity threshold only has to be finite
    /// here, so degenerate values (0, or above 1) remain usable.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(FedError::Config(msg));
        if self.clients == 0 {
            return fail("clients must be at least 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if self.max_similar_clients == 0 {
            return fail("max_similar_clients must be at least 1".into());
        }
        if !self.similarity_threshold.is_finite() {
            return fail("similarity_threshold must be finite".into());
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return fail(format!("gamma must be in [0, 1], got {}", self.gamma));
        }
        if !(self.pseudo_threshold > 0.0 && self.pseudo_threshold <= 1.0) {
            return fail(format!("pseudo_threshold must be in (0, 1], got {}", self.pseudo_threshold));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return fail(format!("mu must be non-negative, got {}", self.mu));
        }
        self.adam().validate()?;
        Ok(())
    }

    fn proximal_mu(&self) -> Option<f64> {
        (self.strategy == Strategy::FedProx && self.mu > 0.0).then_some(self.mu)
    }

    /// Whether round `t` averages all clients into one model.
    pub fn is_global_round(&self, t: usize) -> bool {
        self.strategy != Strategy::SimDeep || t <= self.initial_rounds
    }
}

/// Everything one simulated client holds between rounds.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub client_id: usize,
    pub dataset: ClientDataset,
    /// Reference parameters the next round starts from.
    pub params: ParamVector,
    /// Pseudo-gradient of the latest round.
    pub g: ParamVector,
    /// Running sum of pseudo-gradients.
    pub acc_g: ParamVector,
    pub adam: AdamState,
    pub pseudo_pool: Vec<PseudoLabel>,
    labeled: Vec<TrainExample>,
}

impl ClientState {
    pub fn new(dataset: ClientDataset, params: ParamVector, adam: AdamConfig) -> Self {
        let labeled = dataset.labeled.iter().filter_map(TrainExample::from_sample).collect();
        Self {
            client_id: dataset.client_id,
            g: ParamVector::zeros(Arc::clone(params.layout())),
            acc_g: ParamVector::zeros(Arc::clone(params.layout())),
            adam: AdamState::new(params.len(), adam),
            pseudo_pool: Vec::new(),
            dataset,
            params,
            labeled,
        }
    }

    /// Samples local training sees: labeled plus active pseudo-labels.
    pub fn trainable(&self) -> usize {
        self.labeled.len() + self.pseudo_pool.len()
    }

    fn training_set(&self) -> Vec<TrainExample> {
        let mut items = self.labeled.clone();
        items.extend(self.pseudo_pool.iter().map(PseudoLabel::example));
        items
    }
}

/// Result of one client's local training.
#[derive(Debug, Clone)]
pub struct LocalOutcome {
    /// Parameters after training (the reference parameters when skipped).
    pub params: ParamVector,
    /// Mean losses of the last local epoch.
    pub report: Option<TrainStepReport>,
    pub skipped: bool,
}

/// `E` epochs of mini-batch Adam on the combined loss over labeled and
/// pseudo-labeled samples, starting from the client's reference parameters.
/// Under FedProx the proximal term pulls towards those reference parameters.
pub fn local_train(network: &Network, cfg: &SimConfig, state: &mut ClientState, round: usize) -> Result<LocalOutcome> {
    let items = state.training_set();
    if items.is_empty() {
        return Ok(LocalOutcome {
            params: state.params.clone(),
            report: None,
            skipped: true,
        });
    }
    let mut rng = rng::stream(cfg.seed, &[tag::LOCAL_TRAIN, state.client_id as u64, round as u64]);
    let mut params = state.params.clone();
    let objective = crate::models::CombinedObjective {
        network,
        lambda: cfg.lambda,
    };
    let proximal = cfg.proximal_mu().map(|mu| Proximal {
        mu,
        anchor: state.params.values(),
    });
    let reports = train_epochs(
        &objective,
        params.values_mut(),
        &items,
        cfg.local_epochs,
        cfg.batch_size,
        &mut state.adam,
        proximal,
        &mut rng,
    )?;
    Ok(LocalOutcome {
        params,
        report: reports.last().copied(),
        skipped: false,
    })
}

/// `w_ref - w_after`.
pub fn pseudo_gradient(w_ref: &ParamVector, w_after: &ParamVector) -> Result<ParamVector, NnError> {
    w_ref.sub(w_after)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Global,
    Similarity,
}

/// Diagnostics of one federated round.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundRecord {
    pub round: usize,
    pub strategy: Strategy,
    pub aggregation: Aggregation,
    pub train: Vec<Option<TrainStepReport>>,
    pub skipped: Vec<usize>,
    pub update_norms: Vec<f64>,
    pub similarity: Vec<Vec<f64>>,
    /// Neighbor sets, present in similarity-aggregated rounds.
    pub neighbors: Option<Vec<Vec<usize>>>,
    pub client_accuracy: Option<Vec<f64>>,
    pub mean_accuracy: Option<f64>,
    pub pseudo_counts: Vec<usize>,
    pub pseudo_precision: Vec<Option<f64>>,
}

/// Fraction of labeled samples classified correctly.
pub fn accuracy(network: &Network, params: &[f64], samples: &[Sample]) -> Result<f64> {
    let mut truth = Vec::with_capacity(samples.len());
    for s in samples {
        truth.push(s.label.ok_or_else(|| FedError::Config("evaluation sample without a label".into()))?);
    }
    if samples.is_empty() {
        return Err(FedError::Config("evaluation set is empty".into()));
    }
    let rows: Vec<&[f64]> = samples.iter().map(|s| &s.features[..]).collect();
    let pred = network.classify(params, &rows)?;
    let right = pred.iter().zip(&truth).filter(|(p, t)| p == t).count();
    Ok(right as f64 / samples.len() as f64)
}

/// Per-client accuracies; evaluated once when every client holds the same
/// parameters.
pub fn client_accuracies(network: &Network, states: &[ClientState], samples: &[Sample]) -> Result<Vec<f64>> {
    let first = &states[0].params;
    if states.iter().all(|s| s.params.values() == first.values()) {
        let acc = accuracy(network, first.values(), samples)?;
        return Ok(vec![acc; states.len()]);
    }
    states
        .par_iter()
        .map(|s| accuracy(network, s.params.values(), samples))
        .collect()
}

fn scope_slice<'a>(network: &Network, scope: SimilarityScope, values: &'a [f64]) -> &'a [f64] {
    match scope {
        SimilarityScope::All => values,
        SimilarityScope::Classifier => &values[network.classifier_range()],
    }
}

/// One communication round `t` (1-based): pseudo-label refresh, local
/// training, update bookkeeping, aggregation and (optionally) evaluation.
pub fn run_round(
    network: &Network,
    cfg: &SimConfig,
    states: &mut [ClientState],
    t: usize,
    eval: Option<&[Sample]>,
) -> Result<RoundRecord> {
    if t == 0 {
        return Err(FedError::Config("rounds are numbered from 1".into()));
    }
    if states.is_empty() {
        return Err(FedError::Config("no clients".into()));
    }

    if cfg.pseudo_refresh_every > 0 && t.is_multiple_of(cfg.pseudo_refresh_every) {
        states.par_iter_mut().try_for_each(|s| -> Result<()> {
            s.pseudo_pool = if s.dataset.unlabeled.is_empty() {
                Vec::new()
            } else {
                pseudo_label(network, s.params.values(), &s.dataset.unlabeled, cfg.pseudo_threshold)?
            };
            Ok(())
        })?;
    }

    let outcomes: Vec<LocalOutcome> = states
        .par_iter_mut()
        .map(|s| local_train(network, cfg, s, t))
        .collect::<Result<_>>()?;

    for (s, o) in states.iter_mut().zip(&outcomes) {
        s.g = pseudo_gradient(&s.params, &o.params)?;
        s.acc_g.add_assign(&s.g)?;
    }

    let g: Vec<&[f64]> = states
        .iter()
        .map(|s| scope_slice(network, cfg.similarity_scope, s.g.values()))
        .collect();
    let acc: Vec<&[f64]> = states
        .iter()
        .map(|s| scope_slice(network, cfg.similarity_scope, s.acc_g.values()))
        .collect();
    let sim = similarity_matrix(&g, &acc, cfg.gamma);
    let update_norms = states.iter().map(|s| s.g.norm()).collect();
    let skipped: Vec<usize> = outcomes
        .iter()
        .enumerate()
        .filter_map(|(i, o)| o.skipped.then_some(i))
        .collect();

    let global = cfg.is_global_round(t);
    let mut neighbors = None;
    if global {
        let updates: Vec<(&ParamVector, usize)> = states
            .iter()
            .zip(&outcomes)
            .filter(|(_, o)| !o.skipped)
            .map(|(s, o)| (&o.params, s.trainable()))
            .collect();
        if !updates.is_empty() {
            let w = aggregate_fedavg(&updates)?;
            for (s, o) in states.iter_mut().zip(&outcomes) {
                if !o.skipped {
                    s.params = w.clone();
                }
            }
        }
    } else {
        let mut sets = Vec::with_capacity(states.len());
        let mut next = Vec::with_capacity(states.len());
        for (i, o) in outcomes.iter().enumerate() {
            if o.skipped {
                sets.push(vec![i]);
                next.push(None);
                continue;
            }
            let mut row = sim[i].clone();
            for &j in &skipped {
                row[j] = f64::NEG_INFINITY;
            }
            let set = select_neighbors(i, &row, cfg.similarity_threshold, cfg.max_similar_clients, cfg.include_self);
            let members: Vec<(usize, &ParamVector)> = set.iter().map(|&j| (j, &outcomes[j].params)).collect();
            next.push(Some(aggregate_simdeep(&members)?));
            sets.push(set);
        }
        for (s, w) in states.iter_mut().zip(next) {
            if let Some(w) = w {
                s.params = w;
            }
        }
        neighbors = Some(sets);
    }

    let client_accuracy = eval.map(|e| client_accuracies(network, states, e)).transpose()?;
    let mean_accuracy = client_accuracy
        .as_ref()
        .map(|a| a.iter().sum::<f64>() / a.len() as f64);

    Ok(RoundRecord {
        round: t,
        strategy: cfg.strategy,
        aggregation: if global { Aggregation::Global } else { Aggregation::Similarity },
        train: outcomes.iter().map(|o| o.report).collect(),
        skipped,
        update_norms,
        similarity: sim,
        neighbors,
        client_accuracy,
        mean_accuracy,
        pseudo_counts: states.iter().map(|s| s.pseudo_pool.len()).collect(),
        pseudo_precision: states
            .iter()
            .map(|s| pseudo_precision(&s.pseudo_pool, &s.dataset.unlabeled_truth))
            .collect(),
    })
}

/// The settings that shape global rounds, with aggregation-only fields reset.
fn training_key(cfg: &SimConfig) -> SimConfig {
    let d = SimConfig::default();
    let proximal = cfg.strategy == Strategy::FedProx && cfg.mu > 0.0;
    SimConfig {
        rounds: d.rounds,
        initial_rounds: d.initial_rounds,
        max_similar_clients: d.max_similar_clients,
        similarity_threshold: d.similarity_threshold,
        gamma: d.gamma,
        similarity_scope: d.similarity_scope,
        include_self: d.include_self,
        strategy: if proximal { Strategy::FedProx } else { Strategy::FedAvg },
        mu: if proximal { cfg.mu } else { 0.0 },
        ..cfg.clone()
    }
}

/// A simulation in progress: pretrained clients plus the rounds run so far.
pub struct Federation<'a> {
    network: &'a Network,
    cfg: SimConfig,
    clients: Vec<ClientState>,
    round: usize,
    pretrain: Vec<Vec<TrainStepReport>>,
}

impl<'a> Federation<'a> {
    /// Initialises every client from the same seed and pretrains the
    /// autoencoder (per client or on the server).
    pub fn new(network: &'a Network, cfg: SimConfig, datasets: Vec<ClientDataset>) -> Result<Self> {
        cfg.validate()?;
        if datasets.len() != cfg.clients {
            return Err(FedError::Config(format!(
                "expected {} client datasets, got {}",
                cfg.clients,
                datasets.len()
            )));
        }
        if let Some((i, d)) = datasets.iter().enumerate().find(|(i, d)| d.client_id != *i) {
            return Err(FedError::Config(format!("dataset {i} carries client id {}", d.client_id)));
        }
        let init = network.init_params(cfg.seed);
        let features = |d: &ClientDataset| -> Vec<Arc<[f64]>> {
            d.labeled
                .iter()
                .chain(&d.unlabeled)
                .map(|s| Arc::clone(&s.features))
                .collect()
        };
        let mut pretrain = Vec::new();
        let starts: Vec<ParamVector> = if cfg.pretrain_epochs == 0 {
            vec![init; datasets.len()]
        } else {
            match cfg.pretrain_site {
                PretrainSite::Client => {
                    let runs: Vec<(ParamVector, Vec<TrainStepReport>)> = datasets
                        .par_iter()
                        .map(|d| -> Result<_> {
                            let mut p = init.clone();
                            let feats = features(d);
                            if feats.is_empty() {
                                return Ok((p, Vec::new()));
                            }
                            let mut rng = rng::stream(cfg.seed, &[tag::PRETRAIN, d.client_id as u64]);
                            let r = pretrain_autoencoder(
                                network,
                                &mut p,
                                &feats,
                                cfg.pretrain_epochs,
                                cfg.batch_size,
                                cfg.adam(),
                                &mut rng,
                            )?;
                            Ok((p, r))
                        })
                        .collect::<Result<_>>()?;
                    runs.into_iter()
                        .map(|(p, r)| {
                            pretrain.push(r);
                            p
                        })
                        .collect()
                }
                PretrainSite::Server => {
                    let pooled: Vec<Arc<[f64]>> = datasets.iter().flat_map(features).collect();
                    let mut p = init;
                    if !pooled.is_empty() {
                        let mut rng = rng::stream(cfg.seed, &[tag::PRETRAIN, u64::MAX]);
                        pretrain.push(pretrain_autoencoder(
                            network,
                            &mut p,
                            &pooled,
                            cfg.pretrain_epochs,
                            cfg.batch_size,
                            cfg.adam(),
                            &mut rng,
                        )?);
                    }
                    vec![p; datasets.len()]
                }
            }
        };
        let adam = cfg.adam();
        let clients = datasets
            .into_iter()
            .zip(starts)
            .map(|(d, p)| ClientState::new(d, p, adam))
            .collect();
        Ok(Self {
            network,
            cfg,
            clients,
            round: 0,
            pretrain,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    /// Rounds completed so far.
    pub fn round(&self) -> usize {
        self.round
    }

    /// Per-epoch pretraining losses (one list per client, or a single list
    /// for server-side pretraining).
    pub fn pretrain_reports(&self) -> &[Vec<TrainStepReport>] {
        &self.pretrain
    }

    /// Copy of this simulation continuing under `cfg`. Allowed only when the
    /// rounds run so far would have been identical under `cfg`: both configs
    /// must agree on everything that drives local training, and every
    /// completed round must be a global round under both.
    pub fn fork(&self, cfg: SimConfig) -> Result<Self> {
        cfg.validate()?;
        if training_key(&cfg) != training_key(&self.cfg) {
            return Err(FedError::Config(
                "fork may only change aggregation settings, rounds and warm-up length".into(),
            ));
        }
        for c in [&self.cfg, &cfg] {
            if !(1..=self.round).all(|t| c.is_global_round(t)) {
                return Err(FedError::Config(format!(
                    "cannot fork after round {}: a completed round was not a warm-up round",
                    self.round
                )));
            }
        }
        Ok(Self {
            network: self.network,
            cfg,
            clients: self.clients.clone(),
            round: self.round,
            pretrain: self.pretrain.clone(),
        })
    }

    pub fn step(&mut self, eval: Option<&[Sample]>) -> Result<RoundRecord> {
        let record = run_round(self.network, &self.cfg, &mut self.clients, self.round + 1, eval)?;
        self.round += 1;
        Ok(record)
    }

    pub fn into_clients(self) -> Vec<ClientState> {
        self.clients
    }
}

/// Final state of a finished simulation.
#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub history: Vec<RoundRecord>,
    pub clients: Vec<ClientState>,
    pub pretrain: Vec<Vec<TrainStepReport>>,
}

impl TrainingOutcome {
    /// Each client's final parameters.
    pub fn models(&self) -> Vec<&ParamVector> {
        self.clients.iter().map(|c| &c.params).collect()
    }
}

/// Pretraining followed by `cfg.rounds` rounds.
pub fn run_training(
    network: &Network,
    cfg: &SimConfig,
    datasets: Vec<ClientDataset>,
    eval: Option<&[Sample]>,
) -> Result<TrainingOutcome> {
    let mut fed = Federation::new(network, cfg.clone(), datasets)?;
    let mut history = Vec::with_capacity(cfg.rounds);
    for _ in 0..cfg.rounds {
        history.push(fed.step(eval)?);
    }
    let pretrain = fed.pretrain.clone();
    Ok(TrainingOutcome {
        history,
        clients: fed.into_clients(),
        pretrain,
    })
}
