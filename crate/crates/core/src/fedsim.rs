//! The federated round engine: client sampling, local training, unweighted
//! parameter averaging, the parallel and alternate schedules, and the two
//! centralized baselines.
//!
//! Clients either train supervised on their own shard labels (classic
//! federated mode) or pseudo-label their unlabeled shard (semi-supervised
//! federated mode). Every random draw derives from the experiment seed
//! plus role, round, and client tags, so results are independent of client
//! execution order.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::augment::{AugmentPipeline, DEFAULT_MIX_BETA};
use crate::csvlog::RoundLog;
use crate::data::{split_labeled, Dataset, Example, PartitionPlan, Scheme};
use crate::error::{Error, Result};
use crate::metrics::accuracy;
use crate::model::{build_model, Model, ModelSpec};
use crate::params::{average_params, ParamSet};
use crate::rng::{derive_rng, TAG_CENTRAL, TAG_CLIENT, TAG_SAMPLE, TAG_SERVER};
use crate::ssl::{
    gather_labeled, gather_unlabeled, mix_supervised_loss, pseudo_label, supervised_loss,
    unsupervised_loss, PseudoBatch,
};
use crate::tape::{backward, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    Parallel,
    Alternate,
    CentralizedSupervised,
    CentralizedSemi,
}

/// Parses a schedule name. The `-fl` suffix selects classic federated
/// mode, where clients hold labeled data and train supervised; without it
/// clients hold unlabeled data and train on pseudo-labels.
pub fn parse_schedule(name: &str) -> Result<(Schedule, bool)> {
    match name {
        "parallel" => Ok((Schedule::Parallel, false)),
        "alternate" => Ok((Schedule::Alternate, false)),
        "parallel-fl" => Ok((Schedule::Parallel, true)),
        "alternate-fl" => Ok((Schedule::Alternate, true)),
        "centralized-supervised" => Ok((Schedule::CentralizedSupervised, false)),
        "centralized-semi" => Ok((Schedule::CentralizedSemi, false)),
        other => Err(Error::config(format!(
            "unknown schedule {other:?} (expected parallel, alternate, parallel-fl, \
             alternate-fl, centralized-supervised, or centralized-semi)"
        ))),
    }
}

pub fn schedule_name(schedule: Schedule, clients_supervised: bool) -> &'static str {
    match (schedule, clients_supervised) {
        (Schedule::Parallel, false) => "parallel",
        (Schedule::Alternate, false) => "alternate",
        (Schedule::Parallel, true) => "parallel-fl",
        (Schedule::Alternate, true) => "alternate-fl",
        (Schedule::CentralizedSupervised, _) => "centralized-supervised",
        (Schedule::CentralizedSemi, _) => "centralized-semi",
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub m_clients: usize,
    pub frac_active: f64,
    pub rounds: usize,
    pub local_epochs: usize,
    pub server_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub tau: f64,
    pub schedule: Schedule,
    pub clients_supervised: bool,
    pub partition: Scheme,
    pub partition_param: f64,
    pub n_labeled: usize,
    pub weak_stages: String,
    pub strong_stages: String,
    pub mix: bool,
    pub seed: u64,
    pub pretrained_path: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.frac_active > 0.0 && self.frac_active <= 1.0) {
            return Err(Error::config(format!(
                "frac_active={} outside (0, 1]",
                self.frac_active
            )));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::config(format!("tau={} outside [0, 1]", self.tau)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr={} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!(
                "momentum={} outside [0, 1)",
                self.momentum
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1".to_string()));
        }
        let federated = matches!(self.schedule, Schedule::Parallel | Schedule::Alternate);
        if federated && self.m_clients == 0 {
            return Err(Error::config("m_clients must be at least 1".to_string()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub client_id: usize,
    pub shard: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct RoundResult {
    pub round: usize,
    pub global_params: ParamSet,
    pub log: RoundLog,
}

/// Pseudo-labeling and loss tallies accumulated over one round's steps.
#[derive(Debug, Clone, Copy, Default)]
struct RoundStats {
    n_total: usize,
    n_kept: usize,
    n_truth: usize,
    n_correct_all: usize,
    n_kept_truth: usize,
    n_correct_kept: usize,
    sup_loss_sum: f64,
    sup_steps: usize,
    unsup_loss_sum: f64,
    unsup_steps: usize,
}

impl RoundStats {
    fn merge(&mut self, o: &RoundStats) {
        self.n_total += o.n_total;
        self.n_kept += o.n_kept;
        self.n_truth += o.n_truth;
        self.n_correct_all += o.n_correct_all;
        self.n_kept_truth += o.n_kept_truth;
        self.n_correct_kept += o.n_correct_kept;
        self.sup_loss_sum += o.sup_loss_sum;
        self.sup_steps += o.sup_steps;
        self.unsup_loss_sum += o.unsup_loss_sum;
        self.unsup_steps += o.unsup_steps;
    }

    fn absorb_pseudo(&mut self, pseudo: &PseudoBatch, indices: &[usize], pool: &Dataset) {
        self.n_total += pseudo.n_total();
        self.n_kept += pseudo.n_kept();
        for (i, &idx) in indices.iter().enumerate() {
            if let Some(truth) = pool.example(idx).ground_truth() {
                let ok = pseudo.pseudo_labels[i] == truth;
                self.n_truth += 1;
                self.n_correct_all += usize::from(ok);
                if pseudo.keep_mask[i] {
                    self.n_kept_truth += 1;
                    self.n_correct_kept += usize::from(ok);
                }
            }
        }
    }

    fn mean_sup(&self) -> f64 {
        if self.sup_steps == 0 {
            0.0
        } else {
            self.sup_loss_sum / self.sup_steps as f64
        }
    }

    fn mean_unsup(&self) -> f64 {
        if self.unsup_steps == 0 {
            0.0
        } else {
            self.unsup_loss_sum / self.unsup_steps as f64
        }
    }

    /// (label_accuracy, threshold_accuracy, label_ratio). When the round
    /// involved no pseudo-labeling (supervised clients, supervised
    /// baseline) all three are 1: labels are exact and every example is
    /// used.
    fn pseudo_metrics(&self) -> (f64, f64, f64) {
        if self.n_total == 0 {
            return (1.0, 1.0, 1.0);
        }
        let label_accuracy = if self.n_truth == 0 {
            -1.0
        } else {
            self.n_correct_all as f64 / self.n_truth as f64
        };
        let threshold_accuracy = if self.n_kept_truth == 0 {
            -1.0
        } else {
            self.n_correct_kept as f64 / self.n_kept_truth as f64
        };
        (label_accuracy, threshold_accuracy, self.n_kept as f64 / self.n_total as f64)
    }

    fn to_log(self, round: usize, test_accuracy: f64) -> RoundLog {
        let (label_accuracy, threshold_accuracy, label_ratio) = self.pseudo_metrics();
        RoundLog {
            round,
            test_accuracy,
            label_accuracy,
            threshold_accuracy,
            label_ratio,
            loss_sup: self.mean_sup(),
            loss_unsup: self.mean_unsup(),
        }
    }
}

/// Uniform sample without replacement of max(1, round(C*M)) client ids,
/// skipping clients whose shards are empty. Returns ids in ascending
/// order so aggregation order never depends on execution order.
pub fn sample_clients(
    m_clients: usize,
    frac_active: f64,
    empty: &[bool],
    round: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    if empty.len() != m_clients {
        return Err(Error::shape(format!(
            "{} empty flags for {m_clients} clients",
            empty.len()
        )));
    }
    if !(frac_active > 0.0 && frac_active <= 1.0) {
        return Err(Error::config(format!("frac_active={frac_active} outside (0, 1]")));
    }
    let mut eligible: Vec<usize> = (0..m_clients).filter(|&i| !empty[i]).collect();
    if eligible.is_empty() {
        return Err(Error::Experiment("every client shard is empty".to_string()));
    }
    let m_t = ((frac_active * m_clients as f64).round() as usize).max(1);
    let take = m_t.min(eligible.len());
    let mut rng = derive_rng(seed, &[TAG_SAMPLE, round as u64]);
    eligible.shuffle(&mut rng);
    let mut picked = eligible[..take].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// One client's local training pass starting from the global parameters.
/// The global set is untouched; the returned copy carries the local
/// updates. Pseudo-label tallies ride along for round logging.
#[allow(clippy::too_many_arguments)]
pub fn client_update(
    global: &ParamSet,
    spec: &ModelSpec,
    client: &ClientState,
    pool: &Dataset,
    weak: &AugmentPipeline,
    strong: &AugmentPipeline,
    supervised: bool,
    cfg: &ExperimentConfig,
    round: usize,
) -> Result<(ParamSet, RoundLogParts)> {
    if client.shard.is_empty() {
        return Err(Error::Experiment(format!(
            "client {} has an empty shard",
            client.client_id
        )));
    }
    let mut rng = derive_rng(
        cfg.seed,
        &[TAG_CLIENT, round as u64, client.client_id as u64],
    );
    let mut model = Model::with_params(spec, global.clone())?;
    let mut stats = RoundStats::default();
    for _ in 0..cfg.local_epochs {
        let mut order = client.shard.clone();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if supervised {
                let batch = gather_labeled(pool, chunk)?;
                let mut tape = Tape::new();
                let loss = supervised_loss(&mut model, &mut tape, &batch, weak, &mut rng)?;
                stats.sup_loss_sum += tape.value(loss).scalar_value();
                stats.sup_steps += 1;
                model.params.zero_grad();
                backward(&tape, loss, &mut model.params)?;
                model.params.sgd_step(cfg.lr, cfg.momentum)?;
            } else {
                let batch = gather_unlabeled(pool, chunk)?;
                let pseudo = pseudo_label(&model, &batch, weak, cfg.tau, &mut rng)?;
                stats.absorb_pseudo(&pseudo, chunk, pool);
                let mut tape = Tape::new();
                let node = unsupervised_loss(&mut model, &mut tape, &pseudo, strong, &mut rng)?;
                stats.unsup_steps += 1;
                if let Some(loss) = node {
                    stats.unsup_loss_sum += tape.value(loss).scalar_value();
                    model.params.zero_grad();
                    backward(&tape, loss, &mut model.params)?;
                    model.params.sgd_step(cfg.lr, cfg.momentum)?;
                }
            }
        }
    }
    Ok((model.params, RoundLogParts(stats)))
}

/// Opaque per-call tally handed back to the round driver.
#[derive(Debug, Clone, Copy, Default)]
pub struct RoundLogParts(RoundStats);

/// Supervised fine-tuning on the server's labeled set. With mixup enabled
/// but no pseudo-labeled data at hand (the federated server never has
/// any), the blended loss reduces to this plain supervised pass, so it is
/// run directly.
pub fn server_finetune(
    params: ParamSet,
    spec: &ModelSpec,
    labeled: &Dataset,
    weak: &AugmentPipeline,
    cfg: &ExperimentConfig,
    round: usize,
) -> Result<(ParamSet, RoundLogParts)> {
    if labeled.is_empty() {
        return Err(Error::Experiment("server has no labeled data".to_string()));
    }
    let mut rng = derive_rng(cfg.seed, &[TAG_SERVER, round as u64]);
    let mut model = Model::with_params(spec, params)?;
    let mut stats = RoundStats::default();
    for _ in 0..cfg.server_epochs {
        let mut order: Vec<usize> = (0..labeled.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = gather_labeled(labeled, chunk)?;
            let mut tape = Tape::new();
            let loss = supervised_loss(&mut model, &mut tape, &batch, weak, &mut rng)?;
            stats.sup_loss_sum += tape.value(loss).scalar_value();
            stats.sup_steps += 1;
            model.params.zero_grad();
            backward(&tape, loss, &mut model.params)?;
            model.params.sgd_step(cfg.lr, cfg.momentum)?;
        }
    }
    Ok((model.params, RoundLogParts(stats)))
}

/// Everything a federated run carries between rounds.
pub struct FedState {
    pub spec: ModelSpec,
    pub global: ParamSet,
    pub clients: Vec<ClientState>,
    pub pool: Dataset,
    pub server_ds: Dataset,
    pub test_ds: Dataset,
    pub weak: AugmentPipeline,
    pub strong: AugmentPipeline,
    pub clients_supervised: bool,
}

impl FedState {
    fn empty_flags(&self) -> Vec<bool> {
        self.clients.iter().map(|c| c.shard.is_empty()).collect()
    }

    fn eval(&self) -> Result<f64> {
        let model = Model::with_params(&self.spec, self.global.clone())?;
        accuracy(&model, &self.test_ds)
    }

    fn run_clients(
        &self,
        ids: &[usize],
        cfg: &ExperimentConfig,
        round: usize,
    ) -> Result<(Vec<ParamSet>, RoundStats)> {
        let outcomes: Vec<(ParamSet, RoundLogParts)> = ids
            .par_iter()
            .map(|&id| {
                client_update(
                    &self.global,
                    &self.spec,
                    &self.clients[id],
                    &self.pool,
                    &self.weak,
                    &self.strong,
                    self.clients_supervised,
                    cfg,
                    round,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let mut stats = RoundStats::default();
        let mut sets = Vec::with_capacity(outcomes.len());
        for (params, parts) in outcomes {
            stats.merge(&parts.0);
            sets.push(params);
        }
        Ok((sets, stats))
    }
}

/// Alternate order: clients train from the current global model, their
/// returns are averaged without the server, then the server fine-tunes
/// the average.
pub fn run_round_alternate(
    state: &mut FedState,
    cfg: &ExperimentConfig,
    round: usize,
) -> Result<RoundResult> {
    let ids = sample_clients(
        cfg.m_clients,
        cfg.frac_active,
        &state.empty_flags(),
        round,
        cfg.seed,
    )?;
    let (sets, mut stats) = state.run_clients(&ids, cfg, round)?;
    let refs: Vec<&ParamSet> = sets.iter().collect();
    let aggregated = average_params(&refs)?;
    let (finetuned, parts) =
        server_finetune(aggregated, &state.spec, &state.server_ds, &state.weak, cfg, round)?;
    stats.merge(&parts.0);
    state.global = finetuned;
    let test_accuracy = state.eval()?;
    Ok(RoundResult {
        round,
        global_params: state.global.clone(),
        log: stats.to_log(round, test_accuracy),
    })
}

/// Parallel order: the server trains from the same starting point as the
/// clients and its model joins the average as one extra participant.
pub fn run_round_parallel(
    state: &mut FedState,
    cfg: &ExperimentConfig,
    round: usize,
) -> Result<RoundResult> {
    let ids = sample_clients(
        cfg.m_clients,
        cfg.frac_active,
        &state.empty_flags(),
        round,
        cfg.seed,
    )?;
    let (mut sets, mut stats) = state.run_clients(&ids, cfg, round)?;
    let (server_params, parts) = server_finetune(
        state.global.clone(),
        &state.spec,
        &state.server_ds,
        &state.weak,
        cfg,
        round,
    )?;
    stats.merge(&parts.0);
    sets.push(server_params);
    let refs: Vec<&ParamSet> = sets.iter().collect();
    state.global = average_params(&refs)?;
    let test_accuracy = state.eval()?;
    Ok(RoundResult {
        round,
        global_params: state.global.clone(),
        log: stats.to_log(round, test_accuracy),
    })
}

/// Remakes every example as labeled with its ground truth; the classic
/// federated mode hands these to clients as their local labels.
pub fn reveal_labels(ds: &Dataset) -> Result<Dataset> {
    let examples = ds
        .examples()
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            let truth = ex
                .ground_truth()
                .ok_or_else(|| Error::state(format!("example {i} has no recoverable label")))?;
            Ok(Example::labeled(ex.features().clone(), truth))
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(examples, ds.n_classes, ds.n_mels, ds.n_frames)
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub results: Vec<RoundResult>,
    pub final_accuracy: f64,
}

impl ExperimentOutcome {
    pub fn logs(&self) -> Vec<RoundLog> {
        self.results.iter().map(|r| r.log).collect()
    }
}

/// Dispatches to the partitioner for `scheme`; `param` is the class
/// count for label skew (rounded) or the concentration for Dirichlet.
pub fn build_partition(
    pool: &Dataset,
    scheme: Scheme,
    param: f64,
    m_clients: usize,
    seed: u64,
) -> Result<PartitionPlan> {
    match scheme {
        Scheme::Iid => crate::data::partition_iid(pool.len(), m_clients, seed),
        Scheme::LabelSkewK => {
            crate::data::partition_label_skew(pool, m_clients, param.round() as usize, seed)
        }
        Scheme::Dirichlet => crate::data::partition_dirichlet(pool, m_clients, param, seed),
    }
}

fn initial_params(spec: &ModelSpec, cfg: &ExperimentConfig) -> Result<ParamSet> {
    match &cfg.pretrained_path {
        None => build_model(spec, cfg.seed),
        Some(path) => {
            let loaded = ParamSet::load(path).map_err(|e| {
                Error::config(format!("pretrained model {}: {e}", path.display()))
            })?;
            // Structure-check against a freshly built model of this spec.
            let model = Model::with_params(spec, loaded).map_err(|e| {
                Error::config(format!("pretrained model {}: {e}", path.display()))
            })?;
            Ok(model.params)
        }
    }
}

/// Runs the configured schedule with the default model for the dataset's
/// geometry. With rounds = 0 the summary is just the initial model's
/// evaluation.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    train: &Dataset,
    test: &Dataset,
) -> Result<ExperimentOutcome> {
    let spec = ModelSpec::lite(train.n_mels, train.n_frames, train.n_classes);
    run_experiment_with_spec(cfg, &spec, train, test)
}

/// Same engine with an explicit model shape (it must match the dataset's
/// geometry).
pub fn run_experiment_with_spec(
    cfg: &ExperimentConfig,
    spec: &ModelSpec,
    train: &Dataset,
    test: &Dataset,
) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    if train.n_mels != test.n_mels
        || train.n_frames != test.n_frames
        || train.n_classes != test.n_classes
    {
        return Err(Error::config(format!(
            "train set {}x{} ({} classes) vs test set {}x{} ({} classes)",
            train.n_mels, train.n_frames, train.n_classes,
            test.n_mels, test.n_frames, test.n_classes,
        )));
    }
    if spec.n_mels != train.n_mels
        || spec.n_frames != train.n_frames
        || spec.n_classes != train.n_classes
    {
        return Err(Error::config(format!(
            "model expects {}x{} ({} classes), dataset is {}x{} ({} classes)",
            spec.n_mels, spec.n_frames, spec.n_classes,
            train.n_mels, train.n_frames, train.n_classes,
        )));
    }
    if n_labeled_out_of_range(cfg, train) {
        return Err(Error::config(format!(
            "n_labeled={} outside 1..={} (train size)",
            cfg.n_labeled,
            train.len()
        )));
    }
    let spec = spec.clone();
    let weak = AugmentPipeline::parse(&cfg.weak_stages, train.n_mels, train.n_frames)
        .map_err(|e| Error::config(format!("weak_stages: {e}")))?;
    let strong = AugmentPipeline::parse(&cfg.strong_stages, train.n_mels, train.n_frames)
        .map_err(|e| Error::config(format!("strong_stages: {e}")))?;
    let params = initial_params(&spec, cfg)?;

    match cfg.schedule {
        Schedule::CentralizedSupervised => run_centralized(cfg, train, test, &spec, params, &weak, None),
        Schedule::CentralizedSemi => {
            run_centralized(cfg, train, test, &spec, params, &weak, Some(&strong))
        }
        Schedule::Parallel | Schedule::Alternate => {
            let (server_ds, rest) = split_labeled(train, cfg.n_labeled, cfg.seed)?;
            let pool = if cfg.clients_supervised {
                reveal_labels(&rest)?
            } else {
                rest
            };
            let plan = build_partition(
                &pool,
                cfg.partition,
                cfg.partition_param,
                cfg.m_clients,
                cfg.seed,
            )?;
            plan.validate(pool.len())?;
            let clients = plan
                .client_shards
                .iter()
                .enumerate()
                .map(|(client_id, shard)| ClientState {
                    client_id,
                    shard: shard.clone(),
                })
                .collect();
            let mut state = FedState {
                spec,
                global: params,
                clients,
                pool,
                server_ds,
                test_ds: test.clone(),
                weak,
                strong,
                clients_supervised: cfg.clients_supervised,
            };
            let mut results = Vec::with_capacity(cfg.rounds);
            for round in 1..=cfg.rounds {
                let result = match cfg.schedule {
                    Schedule::Parallel => run_round_parallel(&mut state, cfg, round)?,
                    _ => run_round_alternate(&mut state, cfg, round)?,
                };
                results.push(result);
            }
            let final_accuracy = match results.last() {
                Some(r) => r.log.test_accuracy,
                None => state.eval()?,
            };
            Ok(ExperimentOutcome {
                results,
                final_accuracy,
            })
        }
    }
}

fn n_labeled_out_of_range(cfg: &ExperimentConfig, train: &Dataset) -> bool {
    cfg.n_labeled == 0 || cfg.n_labeled > train.len()
}

/// Centralized baselines: supervised epochs over the labeled subset, or a
/// joint labeled+pseudo-labeled loop when `strong` is given. One round =
/// one epoch.
fn run_centralized(
    cfg: &ExperimentConfig,
    train: &Dataset,
    test: &Dataset,
    spec: &ModelSpec,
    params: ParamSet,
    weak: &AugmentPipeline,
    strong: Option<&AugmentPipeline>,
) -> Result<ExperimentOutcome> {
    let (labeled, unlabeled) = split_labeled(train, cfg.n_labeled, cfg.seed)?;
    if strong.is_some() && unlabeled.is_empty() {
        return Err(Error::config(
            "semi-supervised schedule needs unlabeled data (n_labeled covers everything)"
                .to_string(),
        ));
    }
    let mix_enabled = cfg.mix || strong.map(|s| s.has_mix()).unwrap_or(false);
    let mut model = Model::with_params(spec, params)?;
    let mut results = Vec::with_capacity(cfg.rounds);

    for round in 1..=cfg.rounds {
        let mut rng = derive_rng(cfg.seed, &[TAG_CENTRAL, round as u64]);
        let mut stats = RoundStats::default();
        match strong {
            None => {
                let mut order: Vec<usize> = (0..labeled.len()).collect();
                order.shuffle(&mut rng);
                for chunk in order.chunks(cfg.batch_size) {
                    let batch = gather_labeled(&labeled, chunk)?;
                    let mut tape = Tape::new();
                    let loss = supervised_loss(&mut model, &mut tape, &batch, weak, &mut rng)?;
                    stats.sup_loss_sum += tape.value(loss).scalar_value();
                    stats.sup_steps += 1;
                    model.params.zero_grad();
                    backward(&tape, loss, &mut model.params)?;
                    model.params.sgd_step(cfg.lr, cfg.momentum)?;
                }
            }
            Some(strong) => {
                let mut unlab_order: Vec<usize> = (0..unlabeled.len()).collect();
                unlab_order.shuffle(&mut rng);
                let mut lab_order: Vec<usize> = (0..labeled.len()).collect();
                lab_order.shuffle(&mut rng);
                let lab_chunks: Vec<&[usize]> = lab_order.chunks(cfg.batch_size).collect();
                for (i, chunk) in unlab_order.chunks(cfg.batch_size).enumerate() {
                    let lab_batch = gather_labeled(&labeled, lab_chunks[i % lab_chunks.len()])?;
                    let unlab_batch = gather_unlabeled(&unlabeled, chunk)?;
                    let pseudo = pseudo_label(&model, &unlab_batch, weak, cfg.tau, &mut rng)?;
                    stats.absorb_pseudo(&pseudo, chunk, &unlabeled);

                    let mut tape = Tape::new();
                    let sup = if mix_enabled {
                        mix_supervised_loss(
                            &mut model,
                            &mut tape,
                            &lab_batch,
                            &pseudo,
                            weak,
                            DEFAULT_MIX_BETA,
                            &mut rng,
                        )?
                    } else {
                        supervised_loss(&mut model, &mut tape, &lab_batch, weak, &mut rng)?
                    };
                    stats.sup_loss_sum += tape.value(sup).scalar_value();
                    stats.sup_steps += 1;
                    let unsup = unsupervised_loss(&mut model, &mut tape, &pseudo, strong, &mut rng)?;
                    stats.unsup_steps += 1;
                    let total = match unsup {
                        Some(u) => {
                            stats.unsup_loss_sum += tape.value(u).scalar_value();
                            tape.add_scalars(sup, u)
                        }
                        None => sup,
                    };
                    model.params.zero_grad();
                    backward(&tape, total, &mut model.params)?;
                    model.params.sgd_step(cfg.lr, cfg.momentum)?;
                }
            }
        }
        let test_accuracy = accuracy(&model, test)?;
        results.push(RoundResult {
            round,
            global_params: model.params.clone(),
            log: stats.to_log(round, test_accuracy),
        });
    }
    let final_accuracy = match results.last() {
        Some(r) => r.log.test_accuracy,
        None => accuracy(&model, test)?,
    };
    Ok(ExperimentOutcome {
        results,
        final_accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_synthetic;
    use crate::tape::Targets;

    fn tiny_spec(ds: &Dataset) -> ModelSpec {
        ModelSpec {
            n_mels: ds.n_mels,
            n_frames: ds.n_frames,
            n_classes: ds.n_classes,
            block_channels: vec![4],
            kernel_size: 3,
            use_batchnorm: true,
        }
    }

    fn base_cfg() -> ExperimentConfig {
        ExperimentConfig {
            m_clients: 4,
            frac_active: 1.0,
            rounds: 1,
            local_epochs: 1,
            server_epochs: 1,
            batch_size: 8,
            lr: 0.05,
            momentum: 0.9,
            tau: 0.95,
            schedule: Schedule::Alternate,
            clients_supervised: false,
            partition: Scheme::Iid,
            partition_param: 0.0,
            n_labeled: 12,
            weak_stages: String::new(),
            strong_stages: String::new(),
            mix: false,
            seed: 42,
            pretrained_path: None,
        }
    }

    fn corpus(per_class: usize, seed: u64) -> Dataset {
        gen_synthetic(per_class, 3, 4, 8, 0.4, seed).unwrap()
    }

    fn fed_state(cfg: &ExperimentConfig, seed: u64) -> FedState {
        let train = corpus(12, seed);
        let test = corpus(4, seed + 1);
        let spec = tiny_spec(&train);
        let (server_ds, rest) = split_labeled(&train, cfg.n_labeled, cfg.seed).unwrap();
        let pool = if cfg.clients_supervised {
            reveal_labels(&rest).unwrap()
        } else {
            rest
        };
        let plan = crate::data::partition_iid(pool.len(), cfg.m_clients, cfg.seed).unwrap();
        let clients = plan
            .client_shards
            .iter()
            .enumerate()
            .map(|(client_id, shard)| ClientState {
                client_id,
                shard: shard.clone(),
            })
            .collect();
        FedState {
            global: build_model(&spec, cfg.seed).unwrap(),
            spec,
            clients,
            pool,
            server_ds,
            test_ds: test,
            weak: AugmentPipeline::parse(&cfg.weak_stages, 4, 8).unwrap(),
            strong: AugmentPipeline::parse(&cfg.strong_stages, 4, 8).unwrap(),
            clients_supervised: cfg.clients_supervised,
        }
    }

    fn params_equal(a: &ParamSet, b: &ParamSet) -> bool {
        a.max_abs_diff(b).unwrap() == 0.0
    }

    #[test]
    fn schedule_names_round_trip() {
        for name in [
            "parallel",
            "alternate",
            "parallel-fl",
            "alternate-fl",
            "centralized-supervised",
            "centralized-semi",
        ] {
            let (s, fl) = parse_schedule(name).unwrap();
            assert_eq!(schedule_name(s, fl), name);
        }
        let err = parse_schedule("round-robin").unwrap_err();
        assert!(err.to_string().contains("round-robin"), "{err}");
    }

    #[test]
    fn config_validation_catches_bad_fields() {
        let ok = base_cfg();
        ok.validate().unwrap();
        for patch in [
            |c: &mut ExperimentConfig| c.frac_active = 0.0,
            |c: &mut ExperimentConfig| c.frac_active = 1.5,
            |c: &mut ExperimentConfig| c.tau = 1.01,
            |c: &mut ExperimentConfig| c.lr = 0.0,
            |c: &mut ExperimentConfig| c.momentum = 1.0,
            |c: &mut ExperimentConfig| c.batch_size = 0,
            |c: &mut ExperimentConfig| c.m_clients = 0,
        ] {
            let mut bad = base_cfg();
            patch(&mut bad);
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn sampling_counts_and_determinism() {
        let none = vec![false; 100];
        let ids = sample_clients(100, 0.1, &none, 3, 7).unwrap();
        assert_eq!(ids.len(), 10);
        assert!(ids.windows(2).all(|w| w[0] < w[1]));

        let all = sample_clients(100, 1.0, &none, 3, 7).unwrap();
        assert_eq!(all, (0..100).collect::<Vec<_>>());

        assert_eq!(ids, sample_clients(100, 0.1, &none, 3, 7).unwrap());
        assert_ne!(ids, sample_clients(100, 0.1, &none, 4, 7).unwrap());

        // At least one client even for vanishing participation.
        assert_eq!(sample_clients(9, 0.01, &vec![false; 9], 0, 1).unwrap().len(), 1);
    }

    #[test]
    fn sampling_avoids_empty_shards() {
        let mut empty = vec![false; 10];
        for i in 0..7 {
            empty[i] = true;
        }
        for round in 0..20 {
            let ids = sample_clients(10, 0.5, &empty, round, 5).unwrap();
            // half of 10 is 5 wanted, but only 3 clients have data.
            assert_eq!(ids.len(), 3);
            assert!(ids.iter().all(|&i| i >= 7));
        }
        let err = sample_clients(4, 0.5, &vec![true; 4], 0, 5).unwrap_err();
        assert!(matches!(err, Error::Experiment(_)), "{err}");
    }

    #[test]
    fn zero_local_epochs_returns_global_unchanged() {
        let mut cfg = base_cfg();
        cfg.local_epochs = 0;
        let state = fed_state(&cfg, 1);
        let (params, _) = client_update(
            &state.global,
            &state.spec,
            &state.clients[0],
            &state.pool,
            &state.weak,
            &state.strong,
            false,
            &cfg,
            1,
        )
        .unwrap();
        assert!(params_equal(&params, &state.global));
    }

    #[test]
    fn full_threshold_keeps_nothing_and_changes_nothing() {
        let mut cfg = base_cfg();
        cfg.tau = 1.0;
        cfg.local_epochs = 3;
        let state = fed_state(&cfg, 2);
        let (params, _) = client_update(
            &state.global,
            &state.spec,
            &state.clients[1],
            &state.pool,
            &state.weak,
            &state.strong,
            false,
            &cfg,
            1,
        )
        .unwrap();
        assert!(params_equal(&params, &state.global));
    }

    #[test]
    fn client_update_leaves_global_untouched() {
        let cfg = base_cfg();
        let state = fed_state(&cfg, 3);
        let before = state.global.clone();
        let mut cfg2 = cfg.clone();
        cfg2.tau = 0.0;
        let _ = client_update(
            &state.global,
            &state.spec,
            &state.clients[2],
            &state.pool,
            &state.weak,
            &state.strong,
            false,
            &cfg2,
            1,
        )
        .unwrap();
        assert!(params_equal(&before, &state.global));
    }

    #[test]
    fn client_step_matches_hand_run_pipeline() {
        let mut cfg = base_cfg();
        cfg.tau = 0.0;
        cfg.batch_size = 64;
        cfg.local_epochs = 1;
        let state = fed_state(&cfg, 4);
        let client = &state.clients[0];
        let round = 5usize;

        let (got, _) = client_update(
            &state.global,
            &state.spec,
            client,
            &state.pool,
            &state.weak,
            &state.strong,
            false,
            &cfg,
            round,
        )
        .unwrap();

        // Hand-run the identical draws and operations.
        let mut rng = derive_rng(
            cfg.seed,
            &[TAG_CLIENT, round as u64, client.client_id as u64],
        );
        let mut model = Model::with_params(&state.spec, state.global.clone()).unwrap();
        let mut order = client.shard.clone();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = gather_unlabeled(&state.pool, chunk).unwrap();
            let pseudo = pseudo_label(&model, &batch, &state.weak, cfg.tau, &mut rng).unwrap();
            let mut tape = Tape::new();
            let loss = unsupervised_loss(&mut model, &mut tape, &pseudo, &state.strong, &mut rng)
                .unwrap()
                .unwrap();
            model.params.zero_grad();
            backward(&tape, loss, &mut model.params).unwrap();
            model.params.sgd_step(cfg.lr, cfg.momentum).unwrap();
        }
        assert!(params_equal(&got, &model.params));
    }

    #[test]
    fn zero_server_epochs_is_identity() {
        let mut cfg = base_cfg();
        cfg.server_epochs = 0;
        let state = fed_state(&cfg, 5);
        let (out, parts) = server_finetune(
            state.global.clone(),
            &state.spec,
            &state.server_ds,
            &state.weak,
            &cfg,
            1,
        )
        .unwrap();
        assert!(params_equal(&out, &state.global));
        assert_eq!(parts.0.sup_steps, 0);
    }

    #[test]
    fn alternate_round_aggregates_exactly_the_sampled_clients() {
        let mut cfg = base_cfg();
        cfg.server_epochs = 0;
        cfg.frac_active = 0.5;
        cfg.tau = 0.5;
        let mut state = fed_state(&cfg, 6);
        let before = state.global.clone();
        let result = run_round_alternate(&mut state, &cfg, 1).unwrap();

        // Replay: the same two sampled clients, averaged, no server step.
        let ids = sample_clients(cfg.m_clients, cfg.frac_active, &state.empty_flags(), 1, cfg.seed)
            .unwrap();
        assert_eq!(ids.len(), 2);
        let sets: Vec<ParamSet> = ids
            .iter()
            .map(|&id| {
                client_update(
                    &before,
                    &state.spec,
                    &state.clients[id],
                    &state.pool,
                    &state.weak,
                    &state.strong,
                    false,
                    &cfg,
                    1,
                )
                .unwrap()
                .0
            })
            .collect();
        let refs: Vec<&ParamSet> = sets.iter().collect();
        let expect = average_params(&refs).unwrap();
        assert!(params_equal(&result.global_params, &expect));
        assert!(params_equal(&state.global, &expect));
    }

    #[test]
    fn parallel_round_includes_the_server_exactly_once() {
        let mut cfg = base_cfg();
        cfg.frac_active = 0.5;
        cfg.tau = 0.5;
        let mut state = fed_state(&cfg, 7);
        let before = state.global.clone();
        let result = run_round_parallel(&mut state, &cfg, 1).unwrap();

        let ids = sample_clients(cfg.m_clients, cfg.frac_active, &state.empty_flags(), 1, cfg.seed)
            .unwrap();
        let mut sets: Vec<ParamSet> = ids
            .iter()
            .map(|&id| {
                client_update(
                    &before,
                    &state.spec,
                    &state.clients[id],
                    &state.pool,
                    &state.weak,
                    &state.strong,
                    false,
                    &cfg,
                    1,
                )
                .unwrap()
                .0
            })
            .collect();
        let (server, _) = server_finetune(
            before.clone(),
            &state.spec,
            &state.server_ds,
            &state.weak,
            &cfg,
            1,
        )
        .unwrap();
        sets.push(server);
        let refs: Vec<&ParamSet> = sets.iter().collect();
        let expect = average_params(&refs).unwrap();
        assert!(params_equal(&result.global_params, &expect));
    }

    #[test]
    fn idle_parallel_round_keeps_the_model() {
        let mut cfg = base_cfg();
        cfg.local_epochs = 0;
        cfg.server_epochs = 0;
        let mut state = fed_state(&cfg, 8);
        let before = state.global.clone();
        run_round_parallel(&mut state, &cfg, 1).unwrap();
        // Averaging five identical copies can wobble the last bit.
        assert!(before.max_abs_diff(&state.global).unwrap() < 1e-14);
    }

    #[test]
    fn single_client_parallel_mean_formula() {
        let mut cfg = base_cfg();
        cfg.m_clients = 1;
        cfg.server_epochs = 0;
        cfg.tau = 0.0;
        let mut state = fed_state(&cfg, 9);
        let before = state.global.clone();
        run_round_parallel(&mut state, &cfg, 1).unwrap();

        let (theta1, _) = client_update(
            &before,
            &state.spec,
            &state.clients[0],
            &state.pool,
            &state.weak,
            &state.strong,
            false,
            &cfg,
            1,
        )
        .unwrap();
        let expect = average_params(&[&theta1, &before]).unwrap();
        assert!(params_equal(&state.global, &expect));
    }

    #[test]
    fn degenerate_alternate_round_is_a_server_epoch() {
        // Two clients with no local work: the average of two identical
        // copies is bitwise the global, so the round is exactly one
        // supervised pass on the server set.
        let mut cfg = base_cfg();
        cfg.m_clients = 2;
        cfg.local_epochs = 0;
        cfg.server_epochs = 1;
        let mut state = fed_state(&cfg, 10);
        let before = state.global.clone();
        run_round_alternate(&mut state, &cfg, 1).unwrap();

        let (expect, _) = server_finetune(
            before,
            &state.spec,
            &state.server_ds,
            &state.weak,
            &cfg,
            1,
        )
        .unwrap();
        assert!(params_equal(&state.global, &expect));
    }

    #[test]
    fn one_shot_fedavg_equals_pooled_gradient_step() {
        // Supervised clients, one full-batch step each, no momentum, no
        // augmentation, equal shards: the averaged update must match one
        // SGD step on the pooled batch. Needs a per-example forward, so
        // batchnorm is off (its train-mode statistics couple the batch).
        let mut cfg = base_cfg();
        cfg.m_clients = 3;
        cfg.frac_active = 1.0;
        cfg.local_epochs = 1;
        cfg.server_epochs = 0;
        cfg.momentum = 0.0;
        cfg.batch_size = 1024;
        cfg.clients_supervised = true;
        let mut state = fed_state(&cfg, 11);
        state.spec.use_batchnorm = false;
        state.global = build_model(&state.spec, cfg.seed).unwrap();
        let sizes: Vec<usize> = state.clients.iter().map(|c| c.shard.len()).collect();
        assert!(sizes.windows(2).all(|w| w[0] == w[1]), "shards {sizes:?}");
        let before = state.global.clone();
        run_round_alternate(&mut state, &cfg, 1).unwrap();

        let mut model = Model::with_params(&state.spec, before).unwrap();
        let all: Vec<usize> = (0..state.pool.len()).collect();
        let batch = gather_labeled(&state.pool, &all).unwrap();
        let mut tape = Tape::new();
        let logits = model.forward_train(&mut tape, &batch.features).unwrap();
        let loss = tape
            .cross_entropy(logits, Targets::Hard(batch.labels.clone().unwrap()))
            .unwrap();
        model.params.zero_grad();
        backward(&tape, loss, &mut model.params).unwrap();
        model.params.sgd_step(cfg.lr, 0.0).unwrap();

        let worst = state.global.max_abs_diff(&model.params).unwrap();
        assert!(worst < 1e-9, "worst difference {worst}");
    }

    #[test]
    fn experiment_runs_are_reproducible() {
        let mut cfg = base_cfg();
        cfg.rounds = 2;
        cfg.tau = 0.3;
        cfg.weak_stages = "basic".to_string();
        cfg.strong_stages = "basic,spec".to_string();
        let train = corpus(12, 20);
        let test = corpus(4, 21);
        let spec = tiny_spec(&train);
        let a = run_experiment_with_spec(&cfg, &spec, &train, &test).unwrap();
        let b = run_experiment_with_spec(&cfg, &spec, &train, &test).unwrap();
        assert_eq!(a.logs(), b.logs());
        assert_eq!(a.final_accuracy, b.final_accuracy);
        assert_eq!(a.results.len(), 2);
        for (x, y) in a.results.iter().zip(&b.results) {
            assert!(params_equal(&x.global_params, &y.global_params));
        }
    }

    #[test]
    fn zero_rounds_reports_the_initial_model() {
        let mut cfg = base_cfg();
        cfg.rounds = 0;
        let train = corpus(12, 22);
        let test = corpus(4, 23);
        let spec = tiny_spec(&train);
        let out = run_experiment_with_spec(&cfg, &spec, &train, &test).unwrap();
        assert!(out.results.is_empty());

        let init = Model::with_params(&spec, build_model(&spec, cfg.seed).unwrap()).unwrap();
        assert_eq!(out.final_accuracy, accuracy(&init, &test).unwrap());
    }

    #[test]
    fn mismatched_test_geometry_is_rejected_before_compute() {
        let cfg = base_cfg();
        let train = corpus(12, 24);
        let test = gen_synthetic(4, 3, 4, 10, 0.4, 25).unwrap();
        let err = run_experiment_with_spec(&cfg, &tiny_spec(&train), &train, &test).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");

        let mut bad = base_cfg();
        bad.n_labeled = 10_000;
        let test = corpus(4, 26);
        let err = run_experiment_with_spec(&bad, &tiny_spec(&train), &train, &test).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn centralized_supervised_learns_the_separable_corpus() {
        let mut cfg = base_cfg();
        cfg.schedule = Schedule::CentralizedSupervised;
        cfg.rounds = 30;
        cfg.n_labeled = 108;
        cfg.lr = 0.05;
        let train = corpus(36, 27);
        assert_eq!(train.len(), cfg.n_labeled);
        let test = corpus(6, 28);
        let out = run_experiment_with_spec(&cfg, &tiny_spec(&train), &train, &test).unwrap();
        let first = out.results[0].log.loss_sup;
        let last = out.results.last().unwrap().log.loss_sup;
        assert!(last < first, "loss {first} -> {last}");
        assert!(out.final_accuracy > 0.9, "accuracy {}", out.final_accuracy);
        // Supervised rounds log the pinned pseudo metrics.
        assert_eq!(out.results[0].log.label_ratio, 1.0);
        assert_eq!(out.results[0].log.label_accuracy, 1.0);
    }

    #[test]
    fn centralized_semi_consumes_both_pools() {
        let mut cfg = base_cfg();
        cfg.schedule = Schedule::CentralizedSemi;
        cfg.rounds = 2;
        cfg.n_labeled = 12;
        cfg.tau = 0.0;
        let train = corpus(12, 29);
        let test = corpus(4, 30);
        let out = run_experiment_with_spec(&cfg, &tiny_spec(&train), &train, &test).unwrap();
        let log = out.results[0].log;
        // 24 unlabeled examples, all kept at tau=0.
        assert_eq!(log.label_ratio, 1.0);
        assert!(log.loss_sup > 0.0 && log.loss_unsup > 0.0);
        assert!(log.label_accuracy >= 0.0);
    }
}
