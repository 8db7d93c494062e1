//! Federated training loop: partitioning, per-round style sharing, local
//! updates with the style and attention pipeline, and FedAvg aggregation.

mod aggregate;
mod partition;
mod sharing;

use std::collections::BTreeSet;
use std::io::Write;
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use aggregate::fedavg_aggregate;
pub use partition::{
    dirichlet_proportions, largest_remainder, partition_multi_domain, partition_single_domain,
};
pub use sharing::{derangement, style_sharing_round};

use crate::autodiff::{sgd_step, SgdConfig, Tape, Velocity};
use crate::data::SyntheticCorpus;
use crate::error::{Error, Result};
use crate::model::{self, ArchConfig, ForwardPlan, Mode, ModelParams, StyleContext};
use crate::seed;
use crate::style::{self, ExplorationParams, ExploreRef, StyleInfo};

const STREAM_INIT: u64 = 1;
const STREAM_SERVER: u64 = 2;
const STREAM_PARTITION: u64 = 3;
const STREAM_CLIENT: u64 = 4;

/// Which components are switched on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "fedavg")]
    FedAvg,
    #[serde(rename = "style_only")]
    StyleOnly,
    #[serde(rename = "attention_only")]
    AttentionOnly,
    #[serde(rename = "stablefdg")]
    StableFdg,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::FedAvg, Method::StyleOnly, Method::AttentionOnly, Method::StableFdg];

    pub fn uses_style(self) -> bool {
        matches!(self, Method::StyleOnly | Method::StableFdg)
    }

    pub fn uses_attention(self) -> bool {
        matches!(self, Method::AttentionOnly | Method::StableFdg)
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::FedAvg => "fedavg",
            Method::StyleOnly => "style_only",
            Method::AttentionOnly => "attention_only",
            Method::StableFdg => "stablefdg",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    SingleDomain,
    MultiDomain,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    /// Cosine annealing over `rounds × local_epochs` epochs.
    Cosine,
    /// Multiply by `lr_gamma` every `lr_step_size` global epochs.
    Step,
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FederationConfig {
    pub num_clients: usize,
    pub participation: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub lr_schedule: LrSchedule,
    pub lr_step_size: usize,
    pub lr_gamma: f32,
    pub style_prob: f64,
    pub alpha: f32,
    pub oversample_size: usize,
    pub mix_beta: f32,
    pub explore_ref: ExploreRef,
    pub mode: Method,
    pub partition: Partition,
    pub dirichlet_beta: f64,
    pub seed: u64,
    pub eval_every: usize,
    pub target_domain: usize,
    pub attention_dim: usize,
    pub eps_stab: f32,
    /// Styles received per client per round; only 1 is supported.
    pub shared_styles: usize,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            num_clients: 12,
            participation: 4,
            rounds: 30,
            local_epochs: 2,
            batch_size: 16,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_schedule: LrSchedule::Cosine,
            lr_step_size: 20,
            lr_gamma: 0.1,
            style_prob: 0.5,
            alpha: 3.0,
            oversample_size: 16,
            mix_beta: 0.1,
            explore_ref: ExploreRef::Original,
            mode: Method::StableFdg,
            partition: Partition::SingleDomain,
            dirichlet_beta: 0.5,
            seed: 0,
            eval_every: 5,
            target_domain: 0,
            attention_dim: 30,
            eps_stab: style::EPS_STAB,
            shared_styles: 1,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_clients == 0 || self.participation == 0 || self.participation > self.num_clients {
            return fail(format!(
                "participation must satisfy 1 ≤ M ≤ N, got M={} N={}",
                self.participation, self.num_clients
            ));
        }
        if self.batch_size < 2 {
            return fail(format!("batch_size must be ≥ 2, got {}", self.batch_size));
        }
        if self.local_epochs == 0 {
            return fail("local_epochs must be positive".into());
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return fail(format!("lr must be finite and ≥ 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return fail("momentum must be in [0,1) and weight_decay ≥ 0".into());
        }
        if self.lr_schedule == LrSchedule::Step && (self.lr_step_size == 0 || !(self.lr_gamma > 0.0)) {
            return fail("step schedule needs lr_step_size > 0 and lr_gamma > 0".into());
        }
        if !(0.0..=1.0).contains(&self.style_prob) {
            return fail(format!("style_prob must be in [0,1], got {}", self.style_prob));
        }
        if !(self.alpha >= 0.0) || !(self.mix_beta > 0.0) || !(self.eps_stab > 0.0) {
            return fail("alpha ≥ 0, mix_beta > 0 and eps_stab > 0 are required".into());
        }
        if !(self.dirichlet_beta > 0.0) {
            return fail(format!("dirichlet_beta must be positive, got {}", self.dirichlet_beta));
        }
        if self.eval_every == 0 || self.attention_dim == 0 {
            return fail("eval_every and attention_dim must be positive".into());
        }
        if self.shared_styles != 1 {
            return fail(format!("shared_styles = {} is not supported (only 1)", self.shared_styles));
        }
        Ok(())
    }

    pub fn arch(&self, num_classes: usize) -> ArchConfig {
        ArchConfig {
            num_classes,
            attention_dim: self.mode.uses_attention().then_some(self.attention_dim),
            ..ArchConfig::default()
        }
    }

    pub fn exploration(&self) -> ExplorationParams {
        ExplorationParams {
            alpha: self.alpha,
            oversample_size: self.oversample_size,
            mix_beta: self.mix_beta,
            explore_ref: self.explore_ref,
        }
    }

    pub fn sgd(&self, lr: f32) -> SgdConfig {
        SgdConfig {
            lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    /// Learning rate for local epoch `epoch` of round `round` (both from 0).
    pub fn lr_at(&self, round: usize, epoch: usize) -> f32 {
        let global = round * self.local_epochs + epoch;
        match self.lr_schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Step => self.lr * self.lr_gamma.powi((global / self.lr_step_size) as i32),
            LrSchedule::Cosine => {
                let total = (self.rounds * self.local_epochs).max(1) as f64;
                let frac = global as f64 / total;
                (self.lr as f64 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())) as f32
            }
        }
    }
}

/// Initial global model for a run.
pub fn init_params(config: &FederationConfig, num_classes: usize) -> Result<ModelParams> {
    ModelParams::init(&config.arch(num_classes), &mut seed::stream(config.seed, &[STREAM_INIT]))
}

/// The RNG stream a client owns for the whole run.
pub fn client_rng(seed: u64, client_id: usize) -> ChaCha8Rng {
    seed::stream(seed, &[STREAM_CLIENT, client_id as u64])
}

/// Mini-batches of a shuffled index order: chunks of `batch_size`, with a
/// trailing single sample folded into the previous batch.
pub fn batches(order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if out.len() >= 2 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").extend(last);
    }
    out
}

pub struct ClientState {
    pub client_id: usize,
    pub shard: Vec<usize>,
    pub own_style: Option<StyleInfo>,
    /// Set for the round the client participates in, cleared afterwards.
    pub received_style: Option<StyleInfo>,
    pub velocity: Velocity,
    pub rng: ChaCha8Rng,
}

impl ClientState {
    pub fn new(client_id: usize, shard: Vec<usize>, seed: u64) -> Self {
        ClientState {
            client_id,
            shard,
            own_style: None,
            received_style: None,
            velocity: Velocity::default(),
            rng: client_rng(seed, client_id),
        }
    }
}

/// Sample indices that touched gradients or style statistics.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TaintAudit {
    pub gradient: BTreeSet<usize>,
    pub style: BTreeSet<usize>,
}

impl TaintAudit {
    /// Indices from `domain` found in either set.
    pub fn hits(&self, domains: &[usize], domain: usize) -> Vec<usize> {
        self.gradient
            .union(&self.style)
            .copied()
            .filter(|&i| domains[i] == domain)
            .collect()
    }
}

/// Block-1 style information of a client's full shard under `params`.
pub fn client_style_info(params: &ModelParams, corpus: &SyntheticCorpus, client: &ClientState) -> Result<StyleInfo> {
    if client.shard.is_empty() {
        return Err(Error::EmptyDataset("client shard"));
    }
    let (images, _) = corpus.gather(&client.shard);
    let feats = params.block1_features(&images)?;
    let stats = style::batch_style_stats(&feats)?;
    style::compute_style_info(&stats, client.client_id as u32)
}

/// Add a second same-class sample for every class that appears once in the
/// batch, drawn from the shard (the same sample again if the shard has no other).
pub fn repair_singletons<R: Rng + ?Sized>(
    batch: &mut Vec<usize>,
    shard: &[usize],
    labels: &[usize],
    rng: &mut R,
) {
    let mut classes: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
    classes.sort_unstable();
    let mut singles = Vec::new();
    for (i, &c) in classes.iter().enumerate() {
        let before = i > 0 && classes[i - 1] == c;
        let after = i + 1 < classes.len() && classes[i + 1] == c;
        if !before && !after {
            singles.push(c);
        }
    }
    for c in singles {
        let present = *batch.iter().find(|&&i| labels[i] == c).expect("class in batch");
        let pool: Vec<usize> = shard
            .iter()
            .copied()
            .filter(|&i| labels[i] == c && i != present)
            .collect();
        batch.push(if pool.is_empty() {
            present
        } else {
            pool[rng.random_range(0..pool.len())]
        });
    }
}

pub struct LocalResult {
    pub params: ModelParams,
    pub losses: Vec<f32>,
    /// Corpus indices that entered a loss.
    pub used: Vec<usize>,
}

/// `E` epochs of mini-batch SGD on the client's shard starting from `global`.
pub fn local_update(
    client: &mut ClientState,
    global: &ModelParams,
    corpus: &SyntheticCorpus,
    config: &FederationConfig,
    round: usize,
) -> Result<LocalResult> {
    if client.shard.is_empty() {
        return Err(Error::EmptyDataset("client shard"));
    }
    let method = config.mode;
    let ctx = method.uses_style().then(|| StyleContext {
        received: client.received_style.clone().or_else(|| client.own_style.clone()),
        exploration: config.exploration(),
        eps_stab: config.eps_stab,
    });
    let mut params = global.clone();
    let mut losses = Vec::new();
    let mut used = Vec::new();
    for epoch in 0..config.local_epochs {
        let sgd = config.sgd(config.lr_at(round, epoch));
        let mut order = client.shard.clone();
        order.shuffle(&mut client.rng);
        for mut batch in batches(&order, config.batch_size) {
            let plan = if method.uses_style() {
                model::sample_plan(&mut client.rng, config.style_prob)
            } else {
                ForwardPlan::inactive(Mode::Train)
            };
            if method.uses_attention() {
                repair_singletons(&mut batch, &client.shard, &corpus.labels, &mut client.rng);
            }
            let (images, labels) = corpus.gather(&batch);
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, true);
            let x = tape.constant(images);
            let out = model::forward(&mut tape, &params, &bound, x, &labels, &plan, ctx.as_ref(), &mut client.rng)?;
            let loss = tape.softmax_cross_entropy(out.logits, &out.labels)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Numeric(format!(
                    "client {} round {round}: loss is {value}",
                    client.client_id
                )));
            }
            tape.backward(loss)?;
            let grads = bound.gradients(&tape);
            let mut tensors = params.tensors();
            sgd_step(&mut tensors, &grads, &mut client.velocity, sgd)?;
            params = params.with_tensors(tensors)?;
            params.update_running_stats(&tape, &out);
            losses.push(value);
            used.extend(batch);
        }
    }
    Ok(LocalResult { params, losses, used })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub target_acc: f64,
    /// Accuracy on every domain of the corpus, by domain id.
    pub domain_acc: Vec<f64>,
}

/// Eval-mode accuracy of `params` on each domain.
pub fn evaluate(params: &ModelParams, corpus: &SyntheticCorpus, target: usize) -> Result<EvalReport> {
    let mut domain_acc = Vec::with_capacity(corpus.num_domains());
    for d in 0..corpus.num_domains() {
        domain_acc.push(accuracy(params, corpus, &corpus.domain_indices(d))?);
    }
    Ok(EvalReport {
        target_acc: domain_acc[target],
        domain_acc,
    })
}

pub fn accuracy(params: &ModelParams, corpus: &SyntheticCorpus, indices: &[usize]) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::EmptyDataset("evaluation set"));
    }
    let (images, labels) = corpus.gather(indices);
    let logits = params.predict(&images)?;
    let k = logits.shape()[1];
    let correct = logits
        .data()
        .chunks(k)
        .zip(&labels)
        .filter(|(row, &l)| {
            let best = (0..k).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            best == l
        })
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClientLoss {
    pub client_id: usize,
    pub losses: Vec<f32>,
}

#[derive(Clone, Debug, Serialize)]
pub struct RoundLog {
    pub round: usize,
    pub participants: Vec<usize>,
    pub client_losses: Vec<ClientLoss>,
    pub eval: Option<EvalReport>,
    pub wall_time_s: f64,
}

impl RoundLog {
    /// Everything except wall time.
    pub fn same_trajectory(&self, other: &RoundLog) -> bool {
        self.round == other.round
            && self.participants == other.participants
            && self.client_losses == other.client_losses
            && self.eval == other.eval
    }
}

/// Column layout version of [`write_round_csv`].
pub const ROUND_CSV_VERSION: u32 = 1;

/// One row per participant per round: `round,client_id,loss,target_acc,acc_domain<d>...`.
/// Accuracy columns are empty in rounds without evaluation.
pub fn write_round_csv<W: Write>(logs: &[RoundLog], num_domains: usize, mut out: W) -> Result<()> {
    let mut header = String::from("round,client_id,loss,target_acc");
    for d in 0..num_domains {
        header.push_str(&format!(",acc_domain{d}"));
    }
    writeln!(out, "{header}")?;
    for log in logs {
        for c in &log.client_losses {
            let mean = c.losses.iter().map(|&v| v as f64).sum::<f64>() / c.losses.len().max(1) as f64;
            let mut row = format!("{},{},{mean:.6}", log.round, c.client_id);
            match &log.eval {
                Some(e) => {
                    row.push_str(&format!(",{:.6}", e.target_acc));
                    for a in &e.domain_acc {
                        row.push_str(&format!(",{a:.6}"));
                    }
                }
                None => row.push_str(&",".repeat(1 + num_domains)),
            }
            writeln!(out, "{row}")?;
        }
    }
    Ok(())
}

pub struct FederationOutcome {
    pub logs: Vec<RoundLog>,
    pub params: ModelParams,
    pub final_eval: EvalReport,
    pub audit: TaintAudit,
    pub shards: Vec<Vec<usize>>,
}

/// Client shards for the run: every domain but the target is a source.
pub fn make_shards(config: &FederationConfig, corpus: &SyntheticCorpus) -> Result<Vec<Vec<usize>>> {
    let sources: Vec<usize> = (0..corpus.num_domains())
        .filter(|&d| d != config.target_domain)
        .collect();
    let mut rng = seed::stream(config.seed, &[STREAM_PARTITION]);
    match config.partition {
        Partition::SingleDomain => {
            partition_single_domain(&corpus.domains, &sources, config.num_clients, &mut rng)
        }
        Partition::MultiDomain => partition_multi_domain(
            &corpus.domains,
            &sources,
            config.num_clients,
            config.dirichlet_beta,
            &mut rng,
        ),
    }
}

/// Full federated run with the target domain held out.
pub fn run_federation(config: &FederationConfig, corpus: &SyntheticCorpus) -> Result<FederationOutcome> {
    config.validate()?;
    if config.target_domain >= corpus.num_domains() {
        return Err(Error::Config(format!(
            "target_domain {} out of range for {} domains",
            config.target_domain,
            corpus.num_domains()
        )));
    }
    let shards = make_shards(config, corpus)?;
    let mut clients: Vec<ClientState> = shards
        .iter()
        .enumerate()
        .map(|(id, s)| ClientState::new(id, s.clone(), config.seed))
        .collect();
    let mut server = seed::stream(config.seed, &[STREAM_SERVER]);
    let mut global = init_params(config, corpus.num_classes())?;
    let mut audit = TaintAudit::default();
    let mut logs = Vec::with_capacity(config.rounds);

    for round in 0..config.rounds {
        let started = Instant::now();
        let mut participants = index::sample(&mut server, config.num_clients, config.participation).into_vec();
        participants.sort_unstable();

        if config.mode.uses_style() {
            let mut uploaded = Vec::with_capacity(participants.len());
            for &id in &participants {
                let info = client_style_info(&global, corpus, &clients[id])?;
                audit.style.extend(clients[id].shard.iter().copied());
                clients[id].own_style = Some(info.clone());
                uploaded.push(info);
            }
            for (&id, received) in participants.iter().zip(style_sharing_round(&uploaded, &mut server)) {
                clients[id].received_style = Some(received);
            }
        }

        let mut models = Vec::with_capacity(participants.len());
        let mut weights = Vec::with_capacity(participants.len());
        let mut client_losses = Vec::with_capacity(participants.len());
        for &id in &participants {
            let result = local_update(&mut clients[id], &global, corpus, config, round)?;
            audit.gradient.extend(result.used.iter().copied());
            clients[id].received_style = None;
            weights.push(clients[id].shard.len() as f64);
            models.push(result.params);
            client_losses.push(ClientLoss {
                client_id: id,
                losses: result.losses,
            });
        }
        global = fedavg_aggregate(&models, &weights)?;

        let eval = if (round + 1) % config.eval_every == 0 || round + 1 == config.rounds {
            Some(evaluate(&global, corpus, config.target_domain)?)
        } else {
            None
        };
        if let Some(e) = &eval {
            log::info!(
                "{} target {} round {}: target acc {:.3}",
                config.mode.name(),
                config.target_domain,
                round + 1,
                e.target_acc
            );
        }
        logs.push(RoundLog {
            round: round + 1,
            participants,
            client_losses,
            eval,
            wall_time_s: started.elapsed().as_secs_f64(),
        });
    }
    let final_eval = match logs.last().and_then(|l| l.eval.clone()) {
        Some(e) => e,
        None => evaluate(&global, corpus, config.target_domain)?,
    };
    Ok(FederationOutcome {
        logs,
        params: global,
        final_eval,
        audit,
        shards,
    })
}
