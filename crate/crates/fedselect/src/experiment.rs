//! End-to-end experiments: data, training rounds and the files they leave behind.

use std::path::PathBuf;

use fedselect_core::data::{generate_pool, partition_noniid, ClientDataset, PartitionAudit, PartitionSpec};
use fedselect_core::gradltn::run_gradltn;
use fedselect_core::metrics::{self, accuracy_curve, iou_matrix, AccuracySeries, IouMatrix};
use fedselect_core::model::{init_params, ModelSpec, ParamVector};
use fedselect_core::server::{
    client_seed, init_clients, run_fedavg_round, run_round, ClientExecutor, ClientState, GlobalState, RoundReport,
};
use serde::Serialize;

use crate::config::{DataSpec, ExperimentConfig, Method};
use crate::csv_pool::load_csv_pool;
use crate::error::{Result, RunError};
use crate::output::{self, layer_densities, LayerDensity, OutputDir};

/// Data and initial model shared by every method run from one config.
#[derive(Debug, Clone)]
pub struct Federation {
    pub spec: ModelSpec,
    pub theta_0: ParamVector,
    pub datasets: Vec<ClientDataset>,
}

/// Builds the pool, the non-IID partition and the initial parameters. All
/// three depend only on the config's data fields and seed, so runs that
/// differ only in `p` or `method` see identical clients.
pub fn build_federation(cfg: &ExperimentConfig) -> Result<Federation> {
    cfg.validate()?;
    let spec = cfg.model_spec()?;
    let classes = spec.num_classes;
    let pool = match &cfg.data {
        DataSpec::Synthetic { spread, .. } => {
            generate_pool(classes, spec.input_dim, cfg.synthetic_per_class(), *spread, cfg.seed)?
        }
        DataSpec::Csv { path } => load_csv_pool(path, classes, spec.input_dim)?,
    };
    let datasets = partition_noniid(
        &pool,
        classes,
        &PartitionSpec {
            num_clients: cfg.clients,
            classes_per_client: cfg.classes_per_client,
            n_train_per_class: cfg.train_per_class,
            n_test_per_class: cfg.test_per_class,
            seed: cfg.seed,
        },
    )?;
    let theta_0 = init_params(&spec, cfg.seed)?;
    Ok(Federation {
        spec,
        theta_0,
        datasets,
    })
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub config: ExperimentConfig,
    pub spec: ModelSpec,
    pub partition: Vec<PartitionAudit>,
    pub reports: Vec<RoundReport>,
    pub global: GlobalState,
    pub clients: Vec<ClientState>,
    /// Mean client accuracy after the last round (before any round when `R = 0`).
    pub final_mean_accuracy: f64,
}

impl ExperimentOutcome {
    pub fn label(&self) -> String {
        run_label(&self.config)
    }

    pub fn curve(&self) -> AccuracySeries {
        accuracy_curve(&self.reports, self.label())
    }

    /// IoU of the final-layer masks; `None` while some client has no mask.
    pub fn output_layer_iou(&self) -> Option<IouMatrix> {
        iou_matrix(&self.clients, self.spec.output_layer_range()).ok()
    }

    pub fn mean_bytes_up(&self) -> f64 {
        mean(self.reports.iter().map(|r| r.bytes_up() as f64))
    }

    pub fn mean_bytes_down(&self) -> f64 {
        mean(self.reports.iter().map(|r| r.bytes_down() as f64))
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub fn run_label(cfg: &ExperimentConfig) -> String {
    match cfg.method {
        Method::Fedselect => format!("fedselect p={}", cfg.personalization_rate),
        Method::Fedavg => "fedavg".to_string(),
    }
}

/// Runs all rounds in memory. Only a CSV data source touches the filesystem.
pub fn run_experiment<E: ClientExecutor>(cfg: &ExperimentConfig, exec: &E) -> Result<ExperimentOutcome> {
    let fed = build_federation(cfg)?;
    run_on(cfg, fed, exec)
}

/// Like [`run_experiment`] on an already built federation.
pub fn run_on<E: ClientExecutor>(cfg: &ExperimentConfig, fed: Federation, exec: &E) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let partition = fed.datasets.iter().map(ClientDataset::audit).collect();
    let mut clients = init_clients(fed.datasets, &fed.theta_0);
    let mut global = GlobalState::new(fed.theta_0);
    let mut reports = Vec::with_capacity(cfg.rounds);
    match cfg.method {
        Method::Fedselect => {
            let fs = cfg.fedselect();
            for _ in 0..cfg.rounds {
                reports.push(run_round(&mut global, &mut clients, &fs, exec)?);
            }
        }
        Method::Fedavg => {
            let fa = cfg.fedavg();
            for _ in 0..cfg.rounds {
                reports.push(run_fedavg_round(&mut global, &mut clients, &fa, exec)?);
            }
        }
    }
    let final_mean_accuracy = match reports.last() {
        Some(r) => r.mean_accuracy,
        None => metrics::mean_client_accuracy(&clients)?,
    };
    Ok(ExperimentOutcome {
        config: cfg.clone(),
        spec: fed.spec,
        partition,
        reports,
        global,
        clients,
        final_mean_accuracy,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IouSummary {
    pub range: [usize; 2],
    pub mean_off_diagonal: Option<f64>,
    /// Pairs whose masks were both empty on the range; their IoU is 1 by definition.
    pub empty_pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub label: String,
    pub method: Method,
    pub rounds: usize,
    pub clients: usize,
    pub param_count: usize,
    pub final_mean_accuracy: f64,
    pub mean_accuracy_by_round: Vec<f64>,
    pub total_bytes_up: usize,
    pub total_bytes_down: usize,
    pub mean_bytes_up_per_round: f64,
    pub mean_personal_fraction: f64,
    pub global_mask_ones: usize,
    pub reused_examples: bool,
    pub output_layer_iou: Option<IouSummary>,
}

pub fn summarize(outcome: &ExperimentOutcome) -> RunSummary {
    let total = outcome.spec.param_count();
    let personal: Vec<f64> = outcome
        .clients
        .iter()
        .map(|c| c.mask.as_ref().map_or(0.0, |m| m.count_ones() as f64 / total as f64))
        .collect();
    RunSummary {
        label: outcome.label(),
        method: outcome.config.method,
        rounds: outcome.reports.len(),
        clients: outcome.clients.len(),
        param_count: total,
        final_mean_accuracy: outcome.final_mean_accuracy,
        mean_accuracy_by_round: outcome.reports.iter().map(|r| r.mean_accuracy).collect(),
        total_bytes_up: outcome.reports.iter().map(RoundReport::bytes_up).sum(),
        total_bytes_down: outcome.reports.iter().map(RoundReport::bytes_down).sum(),
        mean_bytes_up_per_round: outcome.mean_bytes_up(),
        mean_personal_fraction: mean(personal.into_iter()),
        global_mask_ones: outcome.global.mask.count_ones(),
        reused_examples: outcome.partition.iter().any(|p| p.reused_examples),
        output_layer_iou: outcome.output_layer_iou().map(|m| IouSummary {
            range: [m.range.start, m.range.end],
            mean_off_diagonal: m.mean_off_diagonal(),
            empty_pairs: m.empty_pairs,
        }),
    }
}

#[derive(Serialize)]
struct ResolvedConfig<'a> {
    #[serde(flatten)]
    config: &'a ExperimentConfig,
    overridden: &'a [&'a str],
}

/// Writes every artifact of `outcome` under `dir`.
pub fn write_outputs(dir: &OutputDir, outcome: &ExperimentOutcome, overridden: &[&str]) -> Result<RunSummary> {
    output::write_rounds_csv(dir, "rounds.csv", &outcome.reports)?;
    dir.write_json(
        "resolved_config.json",
        &ResolvedConfig {
            config: &outcome.config,
            overridden,
        },
    )?;
    dir.write_json("partition.json", &outcome.partition)?;
    output::write_accuracy_curves(dir, "accuracy_curve.csv", &[outcome.curve()])?;

    output::write_params(dir, "global_params", &outcome.global.theta)?;
    output::write_mask(dir, "global_mask", &outcome.spec, &outcome.global.mask)?;
    let clients = dir.subdir("clients")?;
    for c in &outcome.clients {
        output::write_params(&clients, &format!("client_{}_params", c.id), &c.theta)?;
        if let Some(mask) = &c.mask {
            output::write_mask(&clients, &format!("client_{}_mask", c.id), &outcome.spec, mask)?;
        }
    }
    if let Some(m) = outcome.output_layer_iou() {
        output::write_iou_csv(dir, "iou_matrix.csv", &m)?;
    }
    let summary = summarize(outcome);
    dir.write_json("summary.json", &summary)?;
    Ok(summary)
}

pub const FINAL_SUMMARY_HEADER: [&str; 6] = [
    "p",
    "label",
    "final_mean_accuracy",
    "mean_bytes_up_per_round",
    "mean_bytes_down_per_round",
    "mean_personal_fraction",
];

/// One leg of a personalization-rate sweep.
#[derive(Debug, Clone)]
pub struct SweepLeg {
    pub p: f64,
    pub dir: PathBuf,
    pub outcome: ExperimentOutcome,
    pub summary: RunSummary,
}

/// Subdirectory name of the sweep leg for `p`.
pub fn leg_dir_name(p: f64) -> String {
    format!("p_{p}")
}

/// Runs one FedSelect experiment per `p` on the same clients and writes each
/// leg into its own subdirectory, plus combined `accuracy_curve.csv` and
/// `final_summary.csv` at the root.
pub fn run_sweep<E: ClientExecutor>(
    base: &ExperimentConfig,
    ps: &[f64],
    overridden: &[&str],
    exec: &E,
) -> Result<Vec<SweepLeg>> {
    if ps.is_empty() {
        return Err(RunError::config("p", "the sweep needs at least one value"));
    }
    let mut base = base.clone();
    base.method = Method::Fedselect;
    for &p in ps {
        let mut leg = base.clone();
        leg.personalization_rate = p;
        leg.validate()?;
    }
    let root = OutputDir::create(&base.output_dir)?;
    let fed = build_federation(&base)?;
    let mut overridden = overridden.to_vec();
    if !overridden.contains(&"personalization_rate") {
        overridden.push("personalization_rate");
    }

    let mut legs = Vec::with_capacity(ps.len());
    for &p in ps {
        let mut cfg = base.clone();
        cfg.personalization_rate = p;
        let name = leg_dir_name(p);
        cfg.output_dir = root.path(&name)?;
        let outcome = run_on(&cfg, fed.clone(), exec)?;
        let dir = root.subdir(&name)?;
        let summary = write_outputs(&dir, &outcome, &overridden)?;
        legs.push(SweepLeg {
            p,
            dir: dir.root().to_path_buf(),
            outcome,
            summary,
        });
    }

    let curves: Vec<AccuracySeries> = legs.iter().map(|l| l.outcome.curve()).collect();
    output::write_accuracy_curves(&root, "accuracy_curve.csv", &curves)?;
    let rows = legs.iter().map(|l| {
        vec![
            l.p.to_string(),
            l.summary.label.clone(),
            l.summary.final_mean_accuracy.to_string(),
            l.summary.mean_bytes_up_per_round.to_string(),
            l.outcome.mean_bytes_down().to_string(),
            l.summary.mean_personal_fraction.to_string(),
        ]
    });
    root.write_csv("final_summary.csv", &FINAL_SUMMARY_HEADER, rows)?;
    Ok(legs)
}

/// What a single subnetwork search on one client looks like.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradLtnInspection {
    pub client_id: usize,
    pub param_count: usize,
    pub keep_fraction: f64,
    pub popcounts: Vec<usize>,
    pub layers: Vec<LayerDensity>,
    pub personal_fraction: f64,
}

impl std::fmt::Display for GradLtnInspection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "client {}: {} parameters, keep fraction {}",
            self.client_id, self.param_count, self.keep_fraction
        )?;
        writeln!(f, "iteration  popcount  fraction")?;
        for (i, &c) in self.popcounts.iter().enumerate() {
            writeln!(
                f,
                "{i:>9}  {c:>8}  {:>7.4}%",
                100.0 * c as f64 / self.param_count as f64
            )?;
        }
        writeln!(f, "layer  shape      weights      biases   density")?;
        for l in &self.layers {
            writeln!(
                f,
                "{:>5}  {:>4}x{:<4}  {:>5}/{:<5}  {:>4}/{:<4}  {:>7.4}%",
                l.layer,
                l.fan_out,
                l.fan_in,
                l.weights.ones,
                l.weights.len,
                l.biases.ones,
                l.biases.len,
                100.0 * l.density
            )?;
        }
        write!(f, "personalized fraction: {:.4}%", 100.0 * self.personal_fraction)
    }
}

/// Runs the search a client would run in round 1, from the initial model.
pub fn inspect_gradltn(cfg: &ExperimentConfig, client_id: usize) -> Result<GradLtnInspection> {
    cfg.validate()?;
    if client_id >= cfg.clients {
        return Err(RunError::config(
            "client",
            format!("no client {client_id}; the config has {} clients", cfg.clients),
        ));
    }
    let fed = build_federation(cfg)?;
    let data = &fed.datasets[client_id].train;
    let fs = cfg.fedselect();
    let result = run_gradltn(&fed.theta_0, data, &fs.gradltn(), client_seed(cfg.seed, 1, client_id))?;
    Ok(GradLtnInspection {
        client_id,
        param_count: fed.spec.param_count(),
        keep_fraction: cfg.personalization_rate,
        popcounts: result.popcounts.clone(),
        layers: layer_densities(&fed.spec, &result.mask),
        personal_fraction: result.personal_fraction(),
    })
}
