//! Minibatch training for reward models (BT / FR / FC) and DPO policies
//! (plain / FR / FC), with deterministic shuffling, gradient clipping,
//! checkpoint/resume and a per-step metrics trace.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::allocation::{positivize, DEFAULT_BETA};
use crate::datagen::PreferencePair;
use crate::error::{Error, Result};
use crate::fairness::{jain_index, unified_fairness, FairnessMode, FairnessSpec};
use crate::losses::{evaluate, LossValue, Objective};
use crate::models::{
    dpo_loss_and_gaps, policy_backward, reward_backward, reward_gaps, CandidatePolicy, DpoPair, PairRef,
    PromptBank, RewardNet, DEFAULT_HIDDEN,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    BtRm,
    FrRm,
    FcRm,
    Dpo,
    FrDpo,
    FcDpo,
}

impl ObjectiveKind {
    pub fn is_dpo(self) -> bool {
        matches!(self, Self::Dpo | Self::FrDpo | Self::FcDpo)
    }

    pub fn fairness_mode(self) -> Option<FairnessMode> {
        match self {
            Self::BtRm | Self::Dpo => None,
            Self::FrRm | Self::FrDpo => Some(FairnessMode::Fr),
            Self::FcRm | Self::FcDpo => Some(FairnessMode::Fc),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::BtRm => "bt_rm",
            Self::FrRm => "fr_rm",
            Self::FcRm => "fc_rm",
            Self::Dpo => "dpo",
            Self::FrDpo => "fr_dpo",
            Self::FcDpo => "fc_dpo",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: ObjectiveKind,
    /// `mode` is overridden by the objective.
    pub fairness: FairnessSpec,
    pub beta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Record training-set pairwise accuracy every this many steps; 0 = never.
    pub eval_every: usize,
    pub hidden: usize,
    /// Stop after this many optimizer steps in total, if set.
    pub max_steps: Option<usize>,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: ObjectiveKind::BtRm,
            fairness: FairnessSpec::default(),
            beta: DEFAULT_BETA,
            epochs: 50,
            batch_size: 64,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::default(),
            seed: 0,
            eval_every: 0,
            hidden: DEFAULT_HIDDEN,
            max_steps: None,
            clip_norm: 10.0,
        }
    }
}

impl TrainConfig {
    pub fn with_objective(objective: ObjectiveKind) -> Self {
        Self {
            objective,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.fairness.validate()?;
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::invalid("train.beta", "must be > 0"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("train.learning_rate", "must be > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("train.batch_size", "must be >= 1"));
        }
        if self.objective.fairness_mode().is_some() && self.batch_size < 2 {
            return Err(Error::invalid(
                "train.batch_size",
                "must be >= 2 when a fairness objective is active",
            ));
        }
        if self.hidden == 0 {
            return Err(Error::invalid("train.hidden", "must be >= 1"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::invalid("train.clip_norm", "must be > 0"));
        }
        if let OptimizerKind::Adam { beta1, beta2, eps } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                return Err(Error::invalid("train.optimizer", "adam needs beta1, beta2 in [0, 1) and eps > 0"));
            }
        }
        Ok(())
    }

    /// The loss objective with the fairness mode forced by `objective`.
    pub fn loss_objective(&self) -> Objective {
        match self.objective.fairness_mode() {
            None => Objective::Bt,
            Some(mode) => Objective::Fair(FairnessSpec { mode, ..self.fairness }),
        }
    }

    /// Hash over every field that affects the trajectory, except run length.
    pub fn config_hash(&self, feature_dim: usize, num_examples: usize) -> String {
        #[derive(Serialize)]
        struct Key<'a> {
            objective: ObjectiveKind,
            fairness: &'a FairnessSpec,
            beta: f64,
            batch_size: usize,
            learning_rate: f64,
            optimizer: &'a OptimizerKind,
            seed: u64,
            hidden: usize,
            clip_norm: f64,
            feature_dim: usize,
            num_examples: usize,
        }
        let key = Key {
            objective: self.objective,
            fairness: &self.fairness,
            beta: self.beta,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            optimizer: &self.optimizer,
            seed: self.seed,
            hidden: self.hidden,
            clip_norm: self.clip_norm,
            feature_dim,
            num_examples,
        };
        let bytes = serde_json::to_vec(&key).expect("config key serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Training examples: explicit pairs, or prompt candidate sets for DPO.
#[derive(Debug, Clone, Copy)]
pub enum TrainData<'a> {
    Pairs(&'a [PreferencePair]),
    Prompts {
        bank: &'a PromptBank,
        pairs: &'a [DpoPair],
    },
}

impl TrainData<'_> {
    pub fn len(&self) -> usize {
        match self {
            TrainData::Pairs(p) => p.len(),
            TrainData::Prompts { pairs, .. } => pairs.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn feature_dim(&self) -> Option<usize> {
        match self {
            TrainData::Pairs(p) => p.first().map(|p| p.chosen_features.len()),
            TrainData::Prompts { bank, .. } => bank
                .prompts
                .first()
                .and_then(|p| p.candidates.first())
                .map(|c| c.len()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Model {
    Reward(RewardNet),
    Policy(CandidatePolicy),
}

impl Model {
    pub fn net(&self) -> &RewardNet {
        match self {
            Model::Reward(n) => n,
            Model::Policy(p) => p.net(),
        }
    }

    fn net_mut(&mut self) -> &mut RewardNet {
        match self {
            Model::Reward(n) => n,
            Model::Policy(p) => p.net_mut(),
        }
    }
}

/// One row of the metrics trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub loss: f64,
    pub utility_term: f64,
    /// Raw `f_tau` of the positivized batch gaps at the configured `tau`,
    /// recorded for every objective.
    pub fairness_value: f64,
    pub batch_jain: f64,
}

pub const TRACE_CSV_HEADER: &str = "step,loss,utility_term,fairness_value,batch_jain";

pub fn trace_to_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from(TRACE_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.step, r.loss, r.utility_term, r.fairness_value, r.batch_jain
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct OptimizerState {
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

pub const CHECKPOINT_FORMAT: &str = "fairpref-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to continue a run exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub step: usize,
    pub num_examples: usize,
    pub config: TrainConfig,
    pub model: Model,
    pub optimizer: OptimizerState,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format `{}`", ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", ck.version)));
        }
        Ok(ck)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub trace: Vec<TraceRow>,
    /// `(step, training-set pairwise accuracy)` every `eval_every` steps.
    pub evals: Vec<(usize, f64)>,
}

/// Batch boundaries for one epoch: full batches, a trailing short batch of
/// at least two, and a lone leftover example merged into the last batch.
fn batch_bounds(n: usize, batch_size: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        out.push((start, end));
        start = end;
    }
    if out.len() >= 2 {
        let (s, e) = out[out.len() - 1];
        if e - s == 1 {
            out.pop();
            out.last_mut().expect("non-empty").1 = e;
        }
    }
    out
}

fn epoch_permutation(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5348_5546_464c_4521);
    rng.set_stream(epoch as u64);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    state: OptimizerState,
}

impl Optimizer {
    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.state.t += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= self.lr * g;
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.state.t as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                let st = &mut self.state;
                for i in 0..params.len() {
                    st.m[i] = beta1 * st.m[i] + (1.0 - beta1) * grad[i];
                    st.v[i] = beta2 * st.v[i] + (1.0 - beta2) * grad[i] * grad[i];
                    let mhat = st.m[i] / c1;
                    let vhat = st.v[i] / c2;
                    params[i] -= self.lr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
    }
}

fn clip(grad: &mut [f64], max_norm: f64) {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grad {
            *g *= s;
        }
    }
}

/// Fraction of pairs with positive model gap; ties count one half.
pub fn gap_accuracy(gaps: &[f64]) -> f64 {
    if gaps.is_empty() {
        return 0.0;
    }
    let score: f64 = gaps
        .iter()
        .map(|&g| if g > 0.0 { 1.0 } else if g == 0.0 { 0.5 } else { 0.0 })
        .sum();
    score / gaps.len() as f64
}

/// Gaps of every example under the current model (reward or implicit).
pub fn model_gaps(model: &Model, data: TrainData<'_>, beta: f64) -> Result<Vec<f64>> {
    match (model, data) {
        (Model::Reward(net), TrainData::Pairs(pairs)) => {
            let refs: Vec<PairRef<'_>> = pairs
                .iter()
                .map(|p| (p.chosen_features.as_slice(), p.rejected_features.as_slice()))
                .collect();
            reward_gaps(net, &refs)
        }
        (Model::Policy(policy), TrainData::Prompts { bank, pairs }) => {
            let inputs = policy.implicit_inputs(bank, pairs, beta)?;
            Ok(crate::allocation::dpo_allocation(&inputs)?.gaps)
        }
        (Model::Policy(_), TrainData::Pairs(pairs)) => {
            let (bank, dpo) = PromptBank::from_pairs(pairs);
            model_gaps(model, TrainData::Prompts { bank: &bank, pairs: &dpo }, beta)
        }
        (Model::Reward(_), TrainData::Prompts { .. }) => Err(Error::invalid(
            "data",
            "reward models train on explicit preference pairs",
        )),
    }
}

struct Run<'a> {
    config: &'a TrainConfig,
    objective: Objective,
    model: Model,
    opt: Optimizer,
    step: usize,
}

impl Run<'_> {
    fn batch_step(&mut self, data: TrainData<'_>, idx: &[usize]) -> Result<TraceRow> {
        let beta = self.config.beta;
        let (value, gaps, grad): (LossValue, Vec<f64>, Vec<f64>) = match (&self.model, data) {
            (Model::Reward(net), TrainData::Pairs(pairs)) => {
                let batch: Vec<PairRef<'_>> = idx
                    .iter()
                    .map(|&i| (pairs[i].chosen_features.as_slice(), pairs[i].rejected_features.as_slice()))
                    .collect();
                let gaps = reward_gaps(net, &batch)?;
                let (value, dgaps) = evaluate(&gaps, &self.objective)?;
                let grad = if value.total.is_finite() {
                    reward_backward(net, &batch, &dgaps)?
                } else {
                    Vec::new()
                };
                (value, gaps, grad)
            }
            (Model::Policy(policy), TrainData::Prompts { bank, pairs }) => {
                let batch: Vec<DpoPair> = idx.iter().map(|&i| pairs[i]).collect();
                let (value, gaps, dgaps) = dpo_loss_and_gaps(policy, bank, &batch, beta, &self.objective)?;
                let grad = if value.total.is_finite() {
                    policy_backward(policy, bank, &batch, beta, &dgaps)?
                } else {
                    Vec::new()
                };
                (value, gaps, grad)
            }
            _ => return Err(Error::invalid("data", "model kind does not match training data")),
        };
        let step = self.step + 1;
        if !value.total.is_finite() {
            return Err(Error::Divergence { step, loss: value.total });
        }
        let mut grad = grad;
        clip(&mut grad, self.config.clip_norm);
        self.opt.step(self.model.net_mut().params_mut(), &grad);
        if let Some(p) = self.model.net().params().iter().find(|p| !p.is_finite()) {
            return Err(Error::Divergence { step, loss: *p });
        }
        self.step = step;

        let alloc = positivize(&gaps, &self.config.fairness)?;
        Ok(TraceRow {
            step,
            loss: value.total,
            utility_term: value.utility_term,
            fairness_value: unified_fairness(alloc.as_slice(), self.config.fairness.tau)?,
            batch_jain: jain_index(alloc.as_slice())?,
        })
    }
}

fn total_steps(config: &TrainConfig, n: usize) -> usize {
    let per_epoch = batch_bounds(n, config.batch_size).len();
    let full = per_epoch * config.epochs;
    config.max_steps.map_or(full, |m| m.min(full))
}

fn run_from(
    config: &TrainConfig,
    data: TrainData<'_>,
    model: Model,
    optimizer: OptimizerState,
    start_step: usize,
) -> Result<TrainOutput> {
    let n = data.len();
    let feature_dim = data.feature_dim().unwrap_or(0);
    let bounds = batch_bounds(n, config.batch_size);
    let end = total_steps(config, n);
    let mut run = Run {
        config,
        objective: config.loss_objective(),
        model,
        opt: Optimizer {
            kind: config.optimizer,
            lr: config.learning_rate,
            state: optimizer,
        },
        step: start_step,
    };
    let mut trace = Vec::with_capacity(end.saturating_sub(start_step));
    let mut evals = Vec::new();
    let mut perm_epoch = usize::MAX;
    let mut perm = Vec::new();
    while run.step < end {
        let epoch = run.step / bounds.len();
        if epoch != perm_epoch {
            perm = epoch_permutation(config.seed, epoch, n);
            perm_epoch = epoch;
        }
        let (s, e) = bounds[run.step % bounds.len()];
        trace.push(run.batch_step(data, &perm[s..e])?);
        if config.eval_every > 0 && run.step % config.eval_every == 0 {
            evals.push((run.step, gap_accuracy(&model_gaps(&run.model, data, config.beta)?)));
        }
    }
    let checkpoint = Checkpoint {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        config_hash: config.config_hash(feature_dim, n),
        seed: config.seed,
        step: run.step,
        num_examples: n,
        config: config.clone(),
        model: run.model,
        optimizer: run.opt.state,
    };
    Ok(TrainOutput {
        checkpoint,
        trace,
        evals,
    })
}

fn prepare<'a>(
    config: &TrainConfig,
    data: TrainData<'a>,
    owned: &'a mut Option<(PromptBank, Vec<DpoPair>)>,
) -> Result<TrainData<'a>> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("data", "training set is empty"));
    }
    match (config.objective.is_dpo(), data) {
        (true, TrainData::Pairs(pairs)) => {
            let (bank, dpo) = owned.insert(PromptBank::from_pairs(pairs));
            Ok(TrainData::Prompts { bank, pairs: dpo })
        }
        (false, TrainData::Prompts { .. }) => Err(Error::invalid(
            "train.objective",
            "reward-model objectives need explicit preference pairs",
        )),
        _ => Ok(data),
    }
}

/// Train from scratch. The network is initialized from `config.seed`; DPO
/// objectives freeze that initialization as the reference policy.
pub fn train(config: &TrainConfig, data: TrainData<'_>) -> Result<TrainOutput> {
    let mut owned = None;
    let data = prepare(config, data, &mut owned)?;
    let feature_dim = data
        .feature_dim()
        .ok_or_else(|| Error::invalid("data", "no feature vectors"))?;
    let net = RewardNet::init(feature_dim, config.hidden, config.seed)?;
    let num_params = net.num_params();
    let model = if config.objective.is_dpo() {
        Model::Policy(CandidatePolicy::new(net))
    } else {
        Model::Reward(net)
    };
    let state = OptimizerState {
        t: 0,
        m: vec![0.0; num_params],
        v: vec![0.0; num_params],
    };
    run_from(config, data, model, state, 0)
}

/// Continue a run from `checkpoint` until `config`'s step budget.
///
/// `config` may change `epochs`, `max_steps` and `eval_every`; anything else
/// that affects the trajectory must match the checkpoint.
pub fn resume(checkpoint: &Checkpoint, config: &TrainConfig, data: TrainData<'_>) -> Result<TrainOutput> {
    let mut owned = None;
    let data = prepare(config, data, &mut owned)?;
    let feature_dim = data
        .feature_dim()
        .ok_or_else(|| Error::invalid("data", "no feature vectors"))?;
    let net = checkpoint.model.net();
    if net.feature_dim() != feature_dim {
        return Err(Error::Checkpoint(format!(
            "checkpoint feature_dim {} != data feature_dim {feature_dim}",
            net.feature_dim()
        )));
    }
    if checkpoint.config.objective != config.objective {
        return Err(Error::Checkpoint(format!(
            "checkpoint objective {} != config objective {}",
            checkpoint.config.objective.as_str(),
            config.objective.as_str()
        )));
    }
    let hash = config.config_hash(feature_dim, data.len());
    if hash != checkpoint.config_hash {
        return Err(Error::Checkpoint("config hash mismatch".into()));
    }
    run_from(
        config,
        data,
        checkpoint.model.clone(),
        checkpoint.optimizer.clone(),
        checkpoint.step,
    )
}
