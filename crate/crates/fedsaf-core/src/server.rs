//! Round orchestration: collect uplinks, run the two-stage aggregation
//! (or a baseline aggregate), downlink the personalized payloads, and let
//! every client train locally. The server step is a synchronization
//! barrier; client tasks run in parallel but draw from per-client RNG
//! streams, so results never depend on scheduling.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{
    amp_aggregate, fedavg_aggregate, fim_aggregate, fim_weights, similarity_weights,
    AggregationWeights, DistanceMetric,
};
use crate::client::{
    apply_straggler_policy, compute_tfim, local_update_from_global, local_update_one_step,
    local_update_two_step, ClientState, LocalTrainConfig,
};
use crate::config::{DataConfig, DatasetKind, ExperimentConfig};
use crate::data::{self, Dataset, Partition};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricsLog, MetricsRow};
use crate::model::{self, Batch, ModelSpec};
use crate::params::{split, ParamVector};
use crate::seed;

/// Protocol family a round follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    #[default]
    FedSaf,
    FedAvg,
    FedProx,
    FedAmp,
    FedRep,
}

impl std::fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            StrategyKind::FedSaf => "fedsaf",
            StrategyKind::FedAvg => "fedavg",
            StrategyKind::FedProx => "fedprox",
            StrategyKind::FedAmp => "fedamp",
            StrategyKind::FedRep => "fedrep",
        };
        f.write_str(name)
    }
}

impl std::str::FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fedsaf" => Ok(Self::FedSaf),
            "fedavg" => Ok(Self::FedAvg),
            "fedprox" => Ok(Self::FedProx),
            "fedamp" => Ok(Self::FedAmp),
            "fedrep" => Ok(Self::FedRep),
            other => Err(Error::Config(format!(
                "unknown strategy {other:?}, expected one of fedsaf, fedavg, fedprox, fedamp, fedrep"
            ))),
        }
    }
}

/// A strategy with its ablation flags resolved. The baselines are
/// structural variants of the same round loop: FedAMP is the protocol with
/// Fisher weighting and splitting off, FedRep is splitting plus a
/// size-weighted mean over the base, FedAvg/FedProx broadcast one global
/// size-weighted mean.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Strategy {
    pub name: StrategyKind,
    pub use_fim: bool,
    pub use_split: bool,
    pub metric: DistanceMetric,
    pub mu_prox: f64,
}

impl Strategy {
    pub fn fedsaf(use_fim: bool, use_split: bool, metric: DistanceMetric) -> Self {
        Self {
            name: StrategyKind::FedSaf,
            use_fim,
            use_split,
            metric,
            mu_prox: 0.0,
        }
    }

    pub fn fedavg() -> Self {
        Self {
            name: StrategyKind::FedAvg,
            use_fim: false,
            use_split: false,
            metric: DistanceMetric::Manhattan,
            mu_prox: 0.0,
        }
    }

    pub fn fedprox(mu_prox: f64) -> Self {
        Self {
            name: StrategyKind::FedProx,
            mu_prox,
            ..Self::fedavg()
        }
    }

    pub fn fedamp(metric: DistanceMetric) -> Self {
        Self {
            name: StrategyKind::FedAmp,
            use_fim: false,
            use_split: false,
            metric,
            mu_prox: 0.0,
        }
    }

    pub fn fedrep() -> Self {
        Self {
            name: StrategyKind::FedRep,
            use_fim: false,
            use_split: true,
            metric: DistanceMetric::Manhattan,
            mu_prox: 0.0,
        }
    }

    fn uses_amp(&self) -> bool {
        matches!(self.name, StrategyKind::FedSaf | StrategyKind::FedAmp)
    }
}

/// What one client uploads per round.
#[derive(Debug, Clone)]
pub struct ClientUplink {
    pub base_params: ParamVector,
    pub tfim: f64,
    pub train_size: usize,
}

/// Uplink and downlink payloads of one round with scalar counts.
#[derive(Debug, Clone)]
pub struct RoundMessages {
    pub uplink: Vec<ClientUplink>,
    pub downlink: Vec<ParamVector>,
    pub uplink_scalars: usize,
    pub downlink_scalars: usize,
}

/// Per-client evaluation after the round's local update.
#[derive(Debug, Clone, Copy)]
pub struct ClientEval {
    pub train_loss: f64,
    pub test_accuracy: f64,
    /// NaN when the client's test shard has no defined AUC.
    pub test_auc: f64,
    pub test_loss: f64,
}

/// Everything `run_round` needs besides the client states.
#[derive(Debug, Clone, Copy)]
pub struct RoundOptions<'a> {
    pub strategy: &'a Strategy,
    pub train: &'a LocalTrainConfig,
    /// Similarity scaling factor.
    pub alpha: f64,
    /// Attention scale.
    pub sigma: f64,
    pub master_seed: u64,
}

fn dataset_batch(data: &Dataset) -> Batch {
    Batch {
        inputs: data.features.clone(),
        labels: data.labels.clone(),
    }
}

fn eval_client(state: &ClientState, spec: &ModelSpec) -> Result<ClientEval> {
    let train_eval = model::evaluate(&state.params, spec, &dataset_batch(&state.train))?;
    let test_eval = model::evaluate(&state.params, spec, &dataset_batch(&state.test))?;
    Ok(ClientEval {
        train_loss: train_eval.loss,
        test_accuracy: test_eval.accuracy,
        test_auc: test_eval.auc,
        test_loss: test_eval.loss,
    })
}

/// Second-stage weights: Fisher-trace proportional, or uniform when the
/// Fisher stage is ablated.
fn aggregation_gammas(strategy: &Strategy, tfims: &[f64]) -> Result<AggregationWeights> {
    if strategy.use_fim {
        fim_weights(tfims)
    } else {
        AggregationWeights::uniform(tfims.len())
    }
}

/// Run one synchronous communication round, mutating the client states in
/// place. Returns the exchanged messages and per-client evaluations.
pub fn run_round(
    states: &mut [ClientState],
    spec: &ModelSpec,
    opts: &RoundOptions<'_>,
    round_k: usize,
) -> Result<(RoundMessages, Vec<ClientEval>)> {
    if states.is_empty() {
        return Err(Error::Empty("round with no clients".into()));
    }
    let strategy = opts.strategy;
    let schema = spec.schema();
    for state in states.iter() {
        if state.params.len() != schema.total_len() {
            return Err(Error::Integrity(format!(
                "client {} parameter length {} does not match the shared schema ({})",
                state.id,
                state.params.len(),
                schema.total_len()
            )));
        }
    }
    let nhead = states[0].nhead;
    if states.iter().any(|s| s.nhead != nhead) {
        return Err(Error::Integrity(
            "clients disagree on the head depth".into(),
        ));
    }
    if strategy.use_split && nhead == 0 {
        return Err(Error::Config("splitting strategies need nhead >= 1".into()));
    }

    for state in states.iter_mut() {
        state.rng_seed = seed::client_round_seed(opts.master_seed, state.id as u64, round_k as u64);
    }

    // uplink: shared base segments (full vectors when splitting is off)
    let uplink_nhead = if strategy.use_split { nhead } else { 0 };
    let uplink: Vec<ClientUplink> = states
        .iter()
        .map(|state| {
            Ok(ClientUplink {
                base_params: split(&state.params, &schema, uplink_nhead)?.base,
                tfim: state.tfim,
                train_size: state.train.len(),
            })
        })
        .collect::<Result<_>>()?;
    let uplink_scalars: usize = uplink.iter().map(|u| u.base_params.len()).sum();

    let uploaded: Vec<ParamVector> = uplink.iter().map(|u| u.base_params.clone()).collect();
    let tfims: Vec<f64> = uplink.iter().map(|u| u.tfim).collect();
    let sizes: Vec<usize> = uplink.iter().map(|u| u.train_size).collect();

    let downlink: Vec<ParamVector> = if strategy.uses_amp() {
        let xi = similarity_weights(&uploaded, strategy.metric, opts.alpha, opts.sigma)?;
        let z = amp_aggregate(&xi, &uploaded)?;
        let gammas = aggregation_gammas(strategy, &tfims)?;
        fim_aggregate(&gammas, &z)?
    } else {
        let global = fedavg_aggregate(&uploaded, &sizes)?;
        vec![global; states.len()]
    };
    let downlink_scalars: usize = downlink.iter().map(|p| p.len()).sum();

    let evals: Vec<ClientEval> = states
        .par_iter_mut()
        .zip(downlink.par_iter())
        .map(|(state, payload)| -> Result<ClientEval> {
            let trains_this_round = apply_straggler_policy(state, opts.train) > 0;
            let updated = match strategy.name {
                StrategyKind::FedSaf | StrategyKind::FedAmp => {
                    if strategy.use_split {
                        local_update_two_step(state, payload, opts.train, spec)?
                    } else {
                        local_update_one_step(state, payload, opts.train, spec)?
                    }
                }
                StrategyKind::FedAvg => {
                    local_update_from_global(state, payload, 0.0, opts.train, spec)?
                }
                StrategyKind::FedProx => {
                    local_update_from_global(state, payload, strategy.mu_prox, opts.train, spec)?
                }
                StrategyKind::FedRep => {
                    let cfg = LocalTrainConfig {
                        lambda: 0.0,
                        ..opts.train.clone()
                    };
                    local_update_two_step(state, payload, &cfg, spec)?
                }
            };
            if !updated.all_finite() {
                return Err(Error::Integrity(format!(
                    "client {} produced non-finite parameters at round {round_k}",
                    state.id
                )));
            }
            state.params = updated;
            // an offline client runs none of the client-side steps, so its
            // reported Fisher trace goes stale along with its parameters
            if trains_this_round {
                state.tfim = compute_tfim(state, spec, opts.train.tfim_batch)?;
            }
            eval_client(state, spec)
        })
        .collect::<Result<_>>()?;

    Ok((
        RoundMessages {
            uplink,
            downlink,
            uplink_scalars,
            downlink_scalars,
        },
        evals,
    ))
}

/// Build the client states for an experiment: every client shares one
/// initial parameter vector. Fisher traces start at zero (nothing has been
/// reported yet), so the first round aggregates with uniform weights.
pub fn init_clients(
    partition: Partition,
    spec: &ModelSpec,
    nhead: usize,
    stragglers: &[usize],
    master_seed: u64,
) -> Result<Vec<ClientState>> {
    let init = model::init_params(spec, master_seed);
    let mut states = Vec::with_capacity(partition.num_clients());
    for (id, split) in partition.clients.into_iter().enumerate() {
        if split.train.dim() != spec.input_dim {
            return Err(Error::Integrity(format!(
                "client {id} feature width {} does not match model input_dim {}",
                split.train.dim(),
                spec.input_dim
            )));
        }
        states.push(ClientState {
            id,
            params: init.clone(),
            nhead,
            train: split.train,
            test: split.test,
            tfim: 0.0,
            is_straggler: stragglers.contains(&id),
            rng_seed: seed::client_round_seed(master_seed, id as u64, 0),
        });
    }
    Ok(states)
}

fn build_dataset(cfg: &DataConfig, master_seed: u64) -> Result<Dataset> {
    let mut dataset = match cfg.dataset {
        DatasetKind::Synthetic => data::generate_synthetic(
            cfg.num_classes,
            cfg.samples_per_class,
            cfg.dim,
            cfg.separation,
            seed::mix(master_seed, seed::TAG_DATA),
        )?,
        DatasetKind::FashionMnistIdx => {
            let images = cfg.images_path.as_ref().ok_or_else(|| {
                Error::Config("data.images_path is required for IDX datasets".into())
            })?;
            let labels = cfg.labels_path.as_ref().ok_or_else(|| {
                Error::Config("data.labels_path is required for IDX datasets".into())
            })?;
            data::load_idx(images, labels)?
        }
        DatasetKind::Csv => {
            let path = cfg.csv_path.as_ref().ok_or_else(|| {
                Error::Config("data.csv_path is required for CSV datasets".into())
            })?;
            data::load_csv(path)?
        }
    };
    if let Some(cap) = cfg.max_samples {
        dataset = data::stratified_subsample(&dataset, cap, seed::mix(master_seed, seed::TAG_DATA));
    }
    Ok(dataset)
}

/// Partition rule: equal stratified IID shards when every class is kept
/// and no size skew is requested, label/size-skewed otherwise.
fn build_partition(config: &ExperimentConfig, dataset: &Dataset) -> Result<Partition> {
    let s = config.classes_per_client(dataset.num_classes);
    if s > dataset.num_classes {
        return Err(Error::Config(format!(
            "data.classes_per_client {} exceeds the dataset's {} classes",
            s, dataset.num_classes
        )));
    }
    if s == dataset.num_classes && config.data.unbalance == 0.0 {
        data::iid_partition(
            dataset,
            config.data.clients,
            config.data.test_fraction,
            config.master_seed,
        )
    } else {
        data::partition_noniid(
            dataset,
            config.data.clients,
            s,
            config.data.unbalance,
            config.data.test_fraction,
            config.master_seed,
        )
    }
}

fn metrics_row(
    round: usize,
    evals: &[ClientEval],
    uplink_scalars: usize,
    cumulative_uplink_scalars: usize,
) -> MetricsRow {
    let accs: Vec<f64> = evals.iter().map(|e| e.test_accuracy).collect();
    let aucs: Vec<f64> = evals.iter().map(|e| e.test_auc).collect();
    let train_losses: Vec<f64> = evals.iter().map(|e| e.train_loss).collect();
    let (avg_test_acc, std_test_acc) = metrics::mean_std(&accs).unwrap_or((f64::NAN, f64::NAN));
    MetricsRow {
        round,
        avg_train_loss: metrics::mean_defined(&train_losses),
        avg_test_acc,
        std_test_acc,
        avg_test_auc: metrics::mean_defined(&aucs),
        std_test_auc: metrics::std_defined(&aucs),
        uplink_scalars,
        cumulative_uplink_scalars,
        per_client_acc: accs,
    }
}

/// Run a full experiment: build the dataset and partition, initialize the
/// clients, run K rounds, and collect one metrics row per round (plus the
/// round-0 evaluation of the shared initial model). Identical configs give
/// identical logs.
pub fn run_experiment(config: &ExperimentConfig) -> Result<MetricsLog> {
    config.validate()?;
    let dataset = build_dataset(&config.data, config.master_seed)?;
    let partition = build_partition(config, &dataset)?;
    let spec = ModelSpec::new(
        dataset.dim(),
        config.model.hidden_dims.clone(),
        dataset.num_classes,
    )?;
    let strategy = config.strategy();
    let nhead = config.effective_nhead();
    if strategy.use_split {
        // surface bad head depths before any training happens
        spec.schema().base_len(nhead)?;
        if nhead == 0 {
            return Err(Error::Config(
                "split.nhead must be at least 1 when splitting is on".into(),
            ));
        }
    }
    let mut states = init_clients(
        partition,
        &spec,
        nhead,
        &config.stragglers,
        config.master_seed,
    )?;

    let mut rows = Vec::with_capacity(config.rounds + 1);
    let initial_evals: Vec<ClientEval> = states
        .iter()
        .map(|s| eval_client(s, &spec))
        .collect::<Result<_>>()?;
    rows.push(metrics_row(0, &initial_evals, 0, 0));

    let opts = RoundOptions {
        strategy: &strategy,
        train: &config.train,
        alpha: config.amp.alpha,
        sigma: config.amp.sigma,
        master_seed: config.master_seed,
    };
    let mut cumulative = 0usize;
    for k in 1..=config.rounds {
        let (messages, evals) = run_round(&mut states, &spec, &opts, k)
            .map_err(|e| Error::Integrity(format!("round {k}: {e}")))?;
        cumulative += messages.uplink_scalars;
        rows.push(metrics_row(k, &evals, messages.uplink_scalars, cumulative));
    }
    Ok(MetricsLog { rows })
}
