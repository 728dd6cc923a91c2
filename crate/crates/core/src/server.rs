//! Round orchestration: client sampling, per-client subnetwork search and
//! alternating updates, masked averaging of the shared partition, global mask
//! upkeep and redistribution. Also the FedAvg baseline.
//!
//! Client work is independent and goes through a [`ClientExecutor`]; the
//! server phase is sequential and consumes results in client-id order, so a
//! run is bit-reproducible regardless of how clients were scheduled.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::data::ClientDataset;
use crate::error::{check_len, Error, Result};
use crate::gradltn::{
    run_gradltn_observed, train_masked_observed, GradLtnConfig, NoObserver, ReturnPoint, StepObserver, StopCondition,
    TrainSettings,
};
use crate::localalt::{run_localalt_observed, LocalAltConfig, LocalAltOutput};
use crate::mask::MaskVector;
use crate::model::{self, ParamVector};
use crate::seed;

const BYTES_PER_PARAM: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalState {
    pub theta: ParamVector,
    pub mask: MaskVector,
    pub round: usize,
}

impl GlobalState {
    pub fn new(theta: ParamVector) -> Self {
        let mask = MaskVector::zeros(theta.len());
        Self { theta, mask, round: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub id: usize,
    pub dataset: ClientDataset,
    pub theta: ParamVector,
    /// Mask from this client's latest participation; `None` before the first.
    pub mask: Option<MaskVector>,
}

impl ClientState {
    pub fn new(dataset: ClientDataset, theta: ParamVector) -> Self {
        Self {
            id: dataset.client_id,
            dataset,
            theta,
            mask: None,
        }
    }
}

/// Every client starts from the same global initialization.
pub fn init_clients(datasets: Vec<ClientDataset>, theta_g: &ParamVector) -> Vec<ClientState> {
    datasets
        .into_iter()
        .map(|d| ClientState::new(d, theta_g.clone()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRoundStats {
    pub client_id: usize,
    pub sampled: bool,
    /// Mean training loss of the client's model after redistribution.
    pub loss: f64,
    /// Accuracy on the client's own test set after redistribution.
    pub accuracy: f64,
    pub personal_params: usize,
    pub bytes_up: usize,
    pub bytes_down: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub sampled: Vec<usize>,
    /// One entry per client, sampled or not, in client-id order.
    pub clients: Vec<ClientRoundStats>,
    pub mean_accuracy: f64,
}

impl RoundReport {
    pub fn bytes_up(&self) -> usize {
        self.clients.iter().map(|c| c.bytes_up).sum()
    }

    pub fn bytes_down(&self) -> usize {
        self.clients.iter().map(|c| c.bytes_down).sum()
    }
}

/// Per-client aggregation weights (`alpha_k`).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClientWeights {
    #[default]
    Uniform,
    /// Indexed by client id.
    PerClient(Vec<f64>),
}

impl ClientWeights {
    fn weight(&self, client_id: usize) -> Result<f64> {
        match self {
            ClientWeights::Uniform => Ok(1.0),
            ClientWeights::PerClient(w) => match w.get(client_id) {
                Some(&a) if a > 0.0 && a.is_finite() => Ok(a),
                Some(_) => Err(Error::invalid("client_weights", "weights must be positive")),
                None => Err(Error::invalid(
                    "client_weights",
                    alloc::format!("no weight for client {client_id}"),
                )),
            },
        }
    }
}

/// Which positions of a non-participating client are overwritten with the
/// global parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnsampledPolicy {
    /// Positions outside the global mask (the shared ones).
    #[default]
    ComplementOfGlobal,
    /// Positions inside the global mask.
    LiteralGlobal,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AggregationConfig {
    #[serde(default)]
    pub client_weights: ClientWeights,
    #[serde(default)]
    pub unsampled_policy: UnsampledPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FedSelectConfig {
    /// Participation rate `K`.
    pub participation: f64,
    /// Personalization rate `p`: the keep fraction of every pruning step.
    pub personalization_rate: f64,
    pub gradltn_iterations: usize,
    pub gradltn_epochs: usize,
    pub localalt: LocalAltConfig,
    /// Learning rate of the subnetwork search.
    pub lr: f64,
    pub batch_size: usize,
    pub return_point: ReturnPoint,
    pub stop: StopCondition,
    pub aggregation: AggregationConfig,
    pub seed: u64,
}

impl FedSelectConfig {
    /// The search runs with pruning rate `1 - p`, i.e. keeps a fraction `p`.
    pub fn gradltn(&self) -> GradLtnConfig {
        GradLtnConfig {
            iterations: self.gradltn_iterations,
            keep_fraction: self.personalization_rate,
            epochs: self.gradltn_epochs,
            lr: self.lr,
            batch_size: self.batch_size,
            return_point: self.return_point,
            stop: self.stop,
        }
    }

    pub fn validate(&self) -> Result<()> {
        validate_participation(self.participation)?;
        if !(self.personalization_rate >= 0.0 && self.personalization_rate <= 1.0) {
            return Err(Error::invalid("p", "personalization rate must lie in [0, 1]"));
        }
        self.gradltn().validate()?;
        self.localalt.validate()
    }
}

fn validate_participation(k: f64) -> Result<()> {
    if k > 0.0 && k <= 1.0 {
        Ok(())
    } else {
        Err(Error::invalid("participation", "K must lie in (0, 1]"))
    }
}

/// Runs per-client work, returning results in the order of `ids`.
pub trait ClientExecutor {
    fn run<T, F>(&self, ids: &[usize], f: F) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(usize) -> Result<T> + Sync + Send;
}

pub struct Sequential;

impl ClientExecutor for Sequential {
    fn run<T, F>(&self, ids: &[usize], f: F) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(usize) -> Result<T> + Sync + Send,
    {
        ids.iter().map(|&id| f(id)).collect()
    }
}

/// Uniform random subset of `max(floor(N*K), 1)` client ids, sorted,
/// determined by `(seed, round)`.
pub fn sample_clients(num_clients: usize, participation: f64, seed: u64, round: usize) -> Result<Vec<usize>> {
    if num_clients == 0 {
        return Err(Error::Empty("client list"));
    }
    validate_participation(participation)?;
    let k = (libm::floor(num_clients as f64 * participation) as usize).clamp(1, num_clients);
    let mut rng = seed::rng(seed::derive(seed, &[seed::tag::SAMPLE, round as u64]));
    let mut ids = index::sample(&mut rng, num_clients, k).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// One client's shared partition after local training.
#[derive(Debug, Clone, Copy)]
pub struct SharedUpdate<'a> {
    pub client_id: usize,
    pub params: &'a ParamVector,
    pub mask: &'a MaskVector,
}

/// Position-wise weighted mean of the clients whose mask is 0 there; positions
/// no client shares keep `prev_global`. Mask-1 values are never read.
pub fn aggregate_shared(
    updates: &[SharedUpdate<'_>],
    prev_global: &ParamVector,
    weights: &ClientWeights,
) -> Result<ParamVector> {
    if updates.is_empty() {
        return Err(Error::Empty("update list"));
    }
    let n = prev_global.len();
    let mut ordered: Vec<&SharedUpdate<'_>> = updates.iter().collect();
    ordered.sort_by_key(|u| u.client_id);
    let mut alphas = Vec::with_capacity(ordered.len());
    for u in &ordered {
        check_len("update parameters", n, u.params.len())?;
        check_len("update mask", n, u.mask.len())?;
        alphas.push(weights.weight(u.client_id)?);
    }

    let mut num = vec![0.0; n];
    let mut den = vec![0.0; n];
    for (u, &alpha) in ordered.iter().zip(&alphas) {
        let values = u.params.values();
        for (j, &personal) in u.mask.as_bits().iter().enumerate() {
            if !personal {
                num[j] += alpha * values[j];
                den[j] += alpha;
            }
        }
    }
    let values = prev_global
        .values()
        .iter()
        .zip(num.iter().zip(&den))
        .map(|(&prev, (&s, &w))| if w > 0.0 { s / w } else { prev })
        .collect();
    ParamVector::new(prev_global.spec().clone(), values)
}

/// Elementwise OR.
pub fn update_global_mask(masks: &[&MaskVector]) -> Result<MaskVector> {
    let (first, rest) = masks.split_first().ok_or(Error::Empty("mask list"))?;
    rest.iter().try_fold((*first).clone(), |acc, m| acc.or(m))
}

/// Writes the new global parameters into every client.
///
/// A sampled client takes the global values on its shared positions and its
/// own trained values on its personal positions, and records the new mask.
/// Every other client is updated according to `policy` against the global
/// mask. Returns the number of parameters written into each client.
pub fn distribute(
    global: &GlobalState,
    clients: &mut [ClientState],
    trained: &BTreeMap<usize, LocalAltOutput>,
    sampled: &[usize],
    policy: UnsampledPolicy,
) -> Result<Vec<usize>> {
    for &id in sampled {
        if !trained.contains_key(&id) {
            return Err(Error::MissingPersonal(id));
        }
    }
    let mut written = Vec::with_capacity(clients.len());
    for client in clients.iter_mut() {
        if let Some(out) = trained.get(&client.id).filter(|_| sampled.contains(&client.id)) {
            let mut theta = out.params.clone();
            let shared = out.mask.not();
            theta.copy_from_where(&global.theta, &shared)?;
            written.push(shared.count_ones());
            client.theta = theta;
            client.mask = Some(out.mask.clone());
        } else {
            let select = match policy {
                UnsampledPolicy::ComplementOfGlobal => global.mask.not(),
                UnsampledPolicy::LiteralGlobal => global.mask.clone(),
            };
            client.theta.copy_from_where(&global.theta, &select)?;
            written.push(select.count_ones());
        }
    }
    Ok(written)
}

/// Result of one client's local phase.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub output: LocalAltOutput,
    /// Mask popcount after each search iteration.
    pub popcounts: Vec<usize>,
}

pub fn client_seed(seed: u64, round: usize, client_id: usize) -> u64 {
    seed::derive(seed, &[seed::tag::CLIENT, round as u64, client_id as u64])
}

/// Subnetwork search from the client's current parameters, then LocalAlt.
pub fn client_update(
    client: &ClientState,
    cfg: &FedSelectConfig,
    round: usize,
    observer: &mut dyn StepObserver,
) -> Result<ClientUpdate> {
    let s = client_seed(cfg.seed, round, client.id);
    let search = run_gradltn_observed(&client.theta, &client.dataset.train, &cfg.gradltn(), s, observer)?;
    let output = run_localalt_observed(
        &search.params,
        &search.mask,
        &client.dataset.train,
        &cfg.localalt,
        s,
        observer,
    )?;
    Ok(ClientUpdate {
        client_id: client.id,
        output,
        popcounts: search.popcounts,
    })
}

fn client_stats(
    client: &ClientState,
    sampled: bool,
    personal: usize,
    up: usize,
    down: usize,
) -> Result<ClientRoundStats> {
    Ok(ClientRoundStats {
        client_id: client.id,
        sampled,
        loss: model::dataset_loss(&client.theta, &client.dataset.train)?,
        accuracy: model::accuracy(&client.theta, &client.dataset.test)?,
        personal_params: personal,
        bytes_up: up,
        bytes_down: down,
    })
}

fn mean(values: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = values.len();
    values.sum::<f64>() / n as f64
}

/// Aggregation, mask upkeep, redistribution and reporting for one round.
pub fn server_update(
    global: &mut GlobalState,
    clients: &mut [ClientState],
    sampled: &[usize],
    updates: Vec<ClientUpdate>,
    aggregation: &AggregationConfig,
) -> Result<RoundReport> {
    let shared: Vec<SharedUpdate<'_>> = updates
        .iter()
        .map(|u| SharedUpdate {
            client_id: u.client_id,
            params: &u.output.params,
            mask: &u.output.mask,
        })
        .collect();
    let theta = aggregate_shared(&shared, &global.theta, &aggregation.client_weights)?;
    let masks: Vec<&MaskVector> = updates.iter().map(|u| &u.output.mask).collect();
    let round_mask = update_global_mask(&masks)?;
    global.mask = global.mask.or(&round_mask)?;
    global.theta = theta;
    global.round += 1;

    let total = global.theta.len();
    let mask_bytes = total.div_ceil(8);
    let trained: BTreeMap<usize, LocalAltOutput> = updates.into_iter().map(|u| (u.client_id, u.output)).collect();
    let written = distribute(global, clients, &trained, sampled, aggregation.unsampled_policy)?;

    let mut stats = Vec::with_capacity(clients.len());
    for (client, &w) in clients.iter().zip(&written) {
        let stat = if let Some(out) = trained.get(&client.id) {
            let shared_count = out.mask.count_zeros();
            client_stats(
                client,
                true,
                out.mask.count_ones(),
                BYTES_PER_PARAM * shared_count + mask_bytes,
                BYTES_PER_PARAM * shared_count,
            )?
        } else {
            let personal = client.mask.as_ref().map_or(0, |m| m.count_ones());
            client_stats(client, false, personal, 0, BYTES_PER_PARAM * w)?
        };
        stats.push(stat);
    }
    Ok(RoundReport {
        round: global.round,
        sampled: sampled.to_vec(),
        mean_accuracy: mean(stats.iter().map(|s| s.accuracy)),
        clients: stats,
    })
}

/// One FedSelect round with client work scheduled by `exec`.
pub fn run_round<E: ClientExecutor>(
    global: &mut GlobalState,
    clients: &mut [ClientState],
    cfg: &FedSelectConfig,
    exec: &E,
) -> Result<RoundReport> {
    cfg.validate()?;
    let round = global.round + 1;
    let sampled = sample_clients(clients.len(), cfg.participation, cfg.seed, round)?;
    let view: &[ClientState] = clients;
    let updates = exec.run(&sampled, |id| {
        let client = find(view, id)?;
        client_update(client, cfg, round, &mut NoObserver)
    })?;
    server_update(global, clients, &sampled, updates, &cfg.aggregation)
}

/// Sequential round with every SGD step reported to `observer`.
pub fn run_round_observed(
    global: &mut GlobalState,
    clients: &mut [ClientState],
    cfg: &FedSelectConfig,
    observer: &mut dyn StepObserver,
) -> Result<RoundReport> {
    cfg.validate()?;
    let round = global.round + 1;
    let sampled = sample_clients(clients.len(), cfg.participation, cfg.seed, round)?;
    let mut updates = Vec::with_capacity(sampled.len());
    for &id in &sampled {
        updates.push(client_update(find(clients, id)?, cfg, round, observer)?);
    }
    server_update(global, clients, &sampled, updates, &cfg.aggregation)
}

fn find(clients: &[ClientState], id: usize) -> Result<&ClientState> {
    clients
        .iter()
        .find(|c| c.id == id)
        .ok_or(Error::invalid("client id", alloc::format!("unknown client {id}")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FedAvgWeighting {
    /// Weight each client by its number of training examples.
    #[default]
    DatasetSize,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FedAvgConfig {
    pub participation: f64,
    pub local_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weighting: FedAvgWeighting,
    pub seed: u64,
}

impl FedAvgConfig {
    fn settings(&self) -> TrainSettings {
        TrainSettings {
            epochs: self.local_epochs,
            lr: self.lr,
            batch_size: self.batch_size,
        }
    }
}

/// Local full-model SGD from the broadcast global parameters.
pub fn fedavg_local_update(
    global: &ParamVector,
    client: &ClientState,
    cfg: &FedAvgConfig,
    round: usize,
) -> Result<ParamVector> {
    train_masked_observed(
        global,
        &MaskVector::ones(global.len()),
        &client.dataset.train,
        cfg.settings(),
        client_seed(cfg.seed, round, client.id),
        &mut NoObserver,
    )
}

/// `sum(w_k * theta_k) / sum(w_k)` over full parameter vectors.
pub fn weighted_average(models: &[(f64, &ParamVector)]) -> Result<ParamVector> {
    let (_, first) = models.first().ok_or(Error::Empty("model list"))?;
    let mut den = 0.0;
    for &(w, m) in models {
        check_len("model parameters", first.len(), m.len())?;
        if !(w > 0.0 && w.is_finite()) {
            return Err(Error::invalid("weight", "must be positive"));
        }
        den += w;
    }
    // Normalising the weights first keeps a lone model bit-exact.
    let mut out = vec![0.0; first.len()];
    for &(w, m) in models {
        let share = w / den;
        for (o, &v) in out.iter_mut().zip(m.values()) {
            *o += share * v;
        }
    }
    ParamVector::new(first.spec().clone(), out)
}

/// One FedAvg round: broadcast, local SGD, weighted average, every client
/// then holds the new global model.
pub fn run_fedavg_round<E: ClientExecutor>(
    global: &mut GlobalState,
    clients: &mut [ClientState],
    cfg: &FedAvgConfig,
    exec: &E,
) -> Result<RoundReport> {
    cfg.settings().validate()?;
    let round = global.round + 1;
    let sampled = sample_clients(clients.len(), cfg.participation, cfg.seed, round)?;
    let view: &[ClientState] = clients;
    let theta_g = &global.theta;
    let locals = exec.run(&sampled, |id| fedavg_local_update(theta_g, find(view, id)?, cfg, round))?;

    let mut weighted = Vec::with_capacity(locals.len());
    for (&id, local) in sampled.iter().zip(&locals) {
        let w = match cfg.weighting {
            FedAvgWeighting::DatasetSize => find(clients, id)?.dataset.train.len() as f64,
            FedAvgWeighting::Uniform => 1.0,
        };
        weighted.push((w, local));
    }
    global.theta = weighted_average(&weighted)?;
    global.round += 1;

    let full = BYTES_PER_PARAM * global.theta.len();
    let mut stats = Vec::with_capacity(clients.len());
    for client in clients.iter_mut() {
        client.theta = global.theta.clone();
        let sampled_here = sampled.contains(&client.id);
        let up = if sampled_here { full } else { 0 };
        stats.push(client_stats(client, sampled_here, 0, up, full)?);
    }
    Ok(RoundReport {
        round: global.round,
        sampled,
        mean_accuracy: mean(stats.iter().map(|s| s.accuracy)),
        clients: stats,
    })
}

/// `rounds` FedAvg rounds from `theta_0`.
pub fn run_fedavg<E: ClientExecutor>(
    clients: &mut [ClientState],
    theta_0: &ParamVector,
    rounds: usize,
    cfg: &FedAvgConfig,
    exec: &E,
) -> Result<(ParamVector, Vec<RoundReport>)> {
    let mut global = GlobalState::new(theta_0.clone());
    let mut reports = Vec::with_capacity(rounds);
    for _ in 0..rounds {
        reports.push(run_fedavg_round(&mut global, clients, cfg, exec)?);
    }
    Ok((global.theta, reports))
}
