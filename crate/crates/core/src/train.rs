//! The four fine-tuning strategies and their shared training loop.
//!
//! Every run draws randomness from named streams under `cfg.seed`, so a
//! strategy whose fairness coefficient is zero replays the ERM run exactly.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, PenaltyTarget};
use crate::backbone::{forward, positive_scores, AppliedStack, Backbone, ClassifierHead, DropoutCtx, HeadVars, Party};
use crate::data::{LabelKind, LabeledDataset, SensitiveLabel, TaskLabel};
use crate::error::{Error, Result};
use crate::lora::{self, compose, init_adapter_stack, LoraAdapterStack, Sign, StackVars};
use crate::optim::{cosine_lr, AdamW, AdamWConfig, BalancedSampler};
use crate::rng::Stream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Erm,
    Unl,
    Adv,
    Orth,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Erm, Strategy::Unl, Strategy::Adv, Strategy::Orth];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Erm => "erm",
            Strategy::Unl => "unl",
            Strategy::Adv => "adv",
            Strategy::Orth => "orth",
        }
    }

    pub fn display(self) -> &'static str {
        match self {
            Strategy::Erm => "Erm",
            Strategy::Unl => "Unl",
            Strategy::Adv => "Adv",
            Strategy::Orth => "Orth",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "erm" => Ok(Strategy::Erm),
            "unl" => Ok(Strategy::Unl),
            "adv" => Ok(Strategy::Adv),
            "orth" => Ok(Strategy::Orth),
            other => Err(Error::config(format!("unknown strategy '{other}'"))),
        }
    }
}

/// Target of the cross-Gram penalty between task and sensitive factors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OrthTarget {
    Identity,
    Zero,
}

impl From<OrthTarget> for PenaltyTarget {
    fn from(t: OrthTarget) -> Self {
        match t {
            OrthTarget::Identity => PenaltyTarget::Identity,
            OrthTarget::Zero => PenaltyTarget::Zero,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    /// Standard deviation of the Gaussian `A` init.
    pub init_sigma: f64,
    pub lambda_norm: f64,
    pub lambda_sen: f64,
    pub lambda_orth: f64,
    pub orth_target: OrthTarget,
    pub grl_scale: f64,
    pub adv_rounds: usize,
    pub adv_sen_epochs: usize,
    pub adv_task_epochs: usize,
    /// Learning-rate multiplier for the sensitive head in adversarial phases.
    pub adv_head_lr_mult: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 5e-4,
            epochs: 5,
            batch_size: 64,
            rank: 4,
            alpha: 8.0,
            dropout: 0.1,
            init_sigma: 0.02,
            lambda_norm: 0.0,
            lambda_sen: 1.0,
            lambda_orth: 1.0,
            orth_target: OrthTarget::Identity,
            grl_scale: 1.0,
            adv_rounds: 3,
            adv_sen_epochs: 2,
            adv_task_epochs: 2,
            adv_head_lr_mult: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    // Negated comparisons also reject NaN.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::config("lr must be positive and weight decay non-negative"));
        }
        if self.batch_size == 0 || self.rank == 0 {
            return Err(Error::config("batch size and rank must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout must lie in [0, 1)"));
        }
        for (name, v) in [
            ("lambda_norm", self.lambda_norm),
            ("lambda_sen", self.lambda_sen),
            ("lambda_orth", self.lambda_orth),
            ("grl_scale", self.grl_scale),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(format!("{name} must be a finite non-negative number")));
            }
        }
        if !(self.init_sigma > 0.0) {
            return Err(Error::config("init_sigma must be positive"));
        }
        Ok(())
    }

    fn optimizer(&self) -> AdamW {
        AdamW::new(AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedArtifacts {
    pub strategy: Strategy,
    pub task_stack: LoraAdapterStack,
    pub sensitive_stack: Option<LoraAdapterStack>,
    pub task_head: ClassifierHead,
    pub sensitive_head: Option<ClassifierHead>,
    /// Mean training objective per task epoch.
    pub loss_trace: Vec<f64>,
    pub sensitive_loss_trace: Vec<f64>,
}

/// What gets applied on top of the base during evaluation.
#[derive(Debug, Clone)]
pub struct EvalModel {
    pub backbone: Backbone,
    pub stacks: Vec<(LoraAdapterStack, Sign, f64)>,
    pub head: ClassifierHead,
}

impl EvalModel {
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let stacks: Vec<_> = self.stacks.iter().map(|(s, sign, c)| (s, *sign, *c)).collect();
        let mut rng = Stream::new(0, "eval");
        forward(&self.backbone, &stacks, &self.head, x, false, 0.0, &mut rng)
    }

    /// `P(ŷ = 1)` per row.
    pub fn scores(&self, x: &Tensor) -> Result<Vec<f64>> {
        Ok(positive_scores(&self.logits(x)?))
    }
}

impl TrainedArtifacts {
    /// The model each strategy is evaluated with:
    /// ERM/ORTH `pre ⊕ task`, UNL `(pre ⊖ λ_sen·sen) ⊕ task`, ADV `pre ⊕ sen ⊕ task`.
    pub fn eval_model(&self, base: &Backbone, cfg: &TrainConfig) -> Result<EvalModel> {
        let (backbone, stacks) = match self.strategy {
            Strategy::Erm | Strategy::Orth => (base.clone(), vec![(self.task_stack.clone(), Sign::Plus, 1.0)]),
            Strategy::Unl => {
                let sen = self
                    .sensitive_stack
                    .as_ref()
                    .ok_or_else(|| Error::composition("UNL artifacts lack the sensitive stack"))?;
                (
                    unlearned_base(base, sen, cfg.lambda_sen)?,
                    vec![(self.task_stack.clone(), Sign::Plus, 1.0)],
                )
            }
            Strategy::Adv => {
                // With zero rounds no sensitive stack ever reaches SD; a fresh
                // one is transparent, so leaving it out changes nothing.
                let mut stacks = Vec::new();
                if let Some(sen) = &self.sensitive_stack {
                    stacks.push((sen.clone(), Sign::Plus, 1.0));
                }
                stacks.push((self.task_stack.clone(), Sign::Plus, 1.0));
                (base.clone(), stacks)
            }
        };
        Ok(EvalModel {
            backbone,
            stacks,
            head: self.task_head.clone(),
        })
    }
}

/// `θ^(pre) ⊖ λ_sen · θ^(sen)` as a new backbone.
pub fn unlearned_base(base: &Backbone, sensitive: &LoraAdapterStack, lambda_sen: f64) -> Result<Backbone> {
    let weights = compose(base.weights(), sensitive, Sign::Minus, lambda_sen)?;
    base.with_weights(weights)
}

/// Per-run random streams; `prefix` separates task, sensitive and ADV phases.
struct Streams {
    sampling: Stream,
    dropout: Stream,
}

impl Streams {
    fn new(seed: u64, prefix: &str) -> Self {
        Self {
            sampling: Stream::new(seed, &format!("{prefix}.sampling")),
            dropout: Stream::new(seed, &format!("{prefix}.dropout")),
        }
    }
}

/// Fresh adapters and head for one party. Same seed and prefix give the same
/// initial state.
pub fn fresh_state(
    base: &Backbone,
    cfg: &TrainConfig,
    prefix: &str,
    owner: Party,
) -> Result<(LoraAdapterStack, ClassifierHead)> {
    let mut init_rng = Stream::new(cfg.seed, &format!("{prefix}.init"));
    let mut stack = init_adapter_stack(
        &base.attachment_points(),
        cfg.rank,
        cfg.alpha,
        cfg.init_sigma,
        cfg.seed,
        &mut init_rng,
    )?;
    stack.meta_mut().strategy = prefix.to_string();
    let head = ClassifierHead::init(
        base.width(),
        owner,
        &mut Stream::new(cfg.seed, &format!("{prefix}.head")),
    );
    Ok((stack, head))
}

/// Extra regularization tied to the sensitive adapter.
enum Extra<'a> {
    None,
    Orth {
        sensitive: &'a LoraAdapterStack,
        target: PenaltyTarget,
        lambda: f64,
    },
}

struct Fit<'a> {
    base: &'a Backbone,
    /// Frozen stacks applied before the trainable one.
    fixed: &'a [(&'a LoraAdapterStack, Sign, f64)],
    x: &'a Tensor,
    labels: &'a [usize],
    epochs: usize,
    grl: Option<f64>,
    head_lr_mult: f64,
    extra: Extra<'a>,
    location: String,
}

/// Minimizes `CE + λ_norm·R_norm (+ extra)` over `stack` and `head`.
/// Returns the mean objective per epoch.
fn fit(
    spec: &Fit<'_>,
    cfg: &TrainConfig,
    stack: &mut LoraAdapterStack,
    head: &mut ClassifierHead,
    streams: &mut Streams,
) -> Result<Vec<f64>> {
    let sampler = BalancedSampler::new(spec.labels)?;
    let mut opt = cfg.optimizer();
    let mut head_opt = cfg.optimizer();
    let mut trace = Vec::with_capacity(spec.epochs);
    let mut first_loss: Option<f64> = None;
    for epoch in 0..spec.epochs {
        let lr = cosine_lr(epoch, spec.epochs, cfg.lr);
        let batches = sampler.epoch(cfg.batch_size, &mut streams.sampling);
        let mut total = 0.0;
        for (step, idx) in batches.iter().enumerate() {
            let mut g = Graph::new();
            let fixed_vars: Vec<StackVars> = spec
                .fixed
                .iter()
                .map(|(s, _, _)| StackVars::bind(&mut g, s, false))
                .collect();
            let train_vars = StackVars::bind(&mut g, stack, true);
            let mut applied: Vec<AppliedStack<'_>> = fixed_vars
                .iter()
                .zip(spec.fixed)
                .map(|(vars, &(_, sign, coeff))| AppliedStack { vars, sign, coeff })
                .collect();
            applied.push(AppliedStack {
                vars: &train_vars,
                sign: Sign::Plus,
                coeff: 1.0,
            });
            let head_vars = HeadVars::bind(&mut g, head, true);

            let xb = g.constant(spec.x.gather_rows(idx));
            let yb: Vec<usize> = idx.iter().map(|&i| spec.labels[i]).collect();
            let mut dctx = DropoutCtx {
                rate: cfg.dropout,
                train: true,
                rng: &mut streams.dropout,
            };
            let mut rep = spec.base.represent(&mut g, xb, &applied, &mut dctx)?;
            if let Some(scale) = spec.grl {
                rep = g.gradient_reversal(rep, scale);
            }
            let logits = head_vars.logits(&mut g, rep)?;
            let mut loss = g.cross_entropy_logits(logits, &yb)?;
            if cfg.lambda_norm > 0.0 {
                let rn = lora::r_norm(&mut g, &train_vars)?;
                let rn = g.scale(rn, cfg.lambda_norm);
                loss = g.add(loss, rn)?;
            }
            if let Extra::Orth {
                sensitive,
                target,
                lambda,
            } = spec.extra
            {
                if lambda > 0.0 {
                    let sen_vars = StackVars::bind(&mut g, sensitive, false);
                    let ro = lora::r_orth(&mut g, &train_vars, &sen_vars, target)?;
                    let ro = g.scale(ro, lambda);
                    loss = g.add(loss, ro)?;
                }
            }
            let value = g.value(loss).item();
            let reference = *first_loss.get_or_insert(value);
            if !value.is_finite() || value.abs() > 1e3 * reference.abs().max(1e-12) {
                return Err(Error::Divergence {
                    location: format!("{} epoch {epoch} step {step}", spec.location),
                    loss: value,
                });
            }
            g.backward(loss)?;

            let mut params = Vec::with_capacity(2 * train_vars.layers.len());
            let mut grads = Vec::with_capacity(params.capacity());
            for &(a, b) in train_vars.layers.values() {
                params.push(g.value(a).clone());
                params.push(g.value(b).clone());
                grads.push(g.grad(a));
                grads.push(g.grad(b));
            }
            opt.step(&mut params, &grads, lr)?;
            let mut head_params = [g.value(head_vars.weight).clone(), g.value(head_vars.bias).clone()];
            let head_grads = [g.grad(head_vars.weight), g.grad(head_vars.bias)];
            head_opt.step(&mut head_params, &head_grads, lr * spec.head_lr_mult)?;

            let mut it = params.into_iter();
            for ad in stack.iter_mut() {
                ad.a = it.next().expect("a");
                ad.b = it.next().expect("b");
            }
            let [weight, bias] = head_params;
            head.weight = weight;
            head.bias = bias;
            total += value;
        }
        trace.push(total / batches.len() as f64);
    }
    Ok(trace)
}

fn train_single<K: LabelKind>(
    base: &Backbone,
    fixed: &[(&LoraAdapterStack, Sign, f64)],
    data: &LabeledDataset<K>,
    cfg: &TrainConfig,
    prefix: &str,
    owner: Party,
    extra: Extra<'_>,
) -> Result<(LoraAdapterStack, ClassifierHead, Vec<f64>)> {
    cfg.validate()?;
    let (mut stack, mut head) = fresh_state(base, cfg, prefix, owner)?;
    let mut streams = Streams::new(cfg.seed, prefix);
    let spec = Fit {
        base,
        fixed,
        x: data.x(),
        labels: data.labels(),
        epochs: cfg.epochs,
        grl: None,
        head_lr_mult: 1.0,
        extra,
        location: prefix.to_string(),
    };
    let trace = fit(&spec, cfg, &mut stack, &mut head, &mut streams)?;
    Ok((stack, head, trace))
}

/// `argmin λ_norm·R_norm(θ_task) + CE(pre ⊕ θ_task, w_task; D_task)`.
pub fn train_erm(base: &Backbone, d_task: &LabeledDataset<TaskLabel>, cfg: &TrainConfig) -> Result<TrainedArtifacts> {
    let (task_stack, task_head, loss_trace) =
        train_single(base, &[], d_task, cfg, "task", Party::SolutionDeveloper, Extra::None)?;
    Ok(TrainedArtifacts {
        strategy: Strategy::Erm,
        task_stack,
        sensitive_stack: None,
        task_head,
        sensitive_head: None,
        loss_trace,
        sensitive_loss_trace: Vec::new(),
    })
}

/// The compliance officer's sensitive adapter and head, trained on `g` labels.
pub fn train_sensitive_erm(
    base: &Backbone,
    d_sen: &LabeledDataset<SensitiveLabel>,
    cfg: &TrainConfig,
) -> Result<(LoraAdapterStack, ClassifierHead, Vec<f64>)> {
    train_single(base, &[], d_sen, cfg, "sen", Party::ComplianceOfficer, Extra::None)
}

/// Task fine-tuning on `pre ⊖ λ_sen·θ_sen`.
pub fn train_unl(
    base: &Backbone,
    sensitive: &LoraAdapterStack,
    d_task: &LabeledDataset<TaskLabel>,
    cfg: &TrainConfig,
) -> Result<TrainedArtifacts> {
    let debiased = unlearned_base(base, sensitive, cfg.lambda_sen)?;
    let (task_stack, task_head, loss_trace) = train_single(
        &debiased,
        &[],
        d_task,
        cfg,
        "task",
        Party::SolutionDeveloper,
        Extra::None,
    )?;
    Ok(TrainedArtifacts {
        strategy: Strategy::Unl,
        task_stack,
        sensitive_stack: Some(sensitive.clone()),
        task_head,
        sensitive_head: None,
        loss_trace,
        sensitive_loss_trace: Vec::new(),
    })
}

/// Task fine-tuning with `λ_orth·R_orth(θ_task, θ_sen)` added; `θ_sen` is fixed.
pub fn train_orth(
    base: &Backbone,
    sensitive: &LoraAdapterStack,
    d_task: &LabeledDataset<TaskLabel>,
    cfg: &TrainConfig,
) -> Result<TrainedArtifacts> {
    let points = base.attachment_points();
    if sensitive.layer_ids() != points.keys().map(String::as_str).collect::<Vec<_>>() || sensitive.rank() != cfg.rank {
        return Err(Error::composition(
            "sensitive stack does not cover the backbone's attachment points at the configured rank",
        ));
    }
    let extra = Extra::Orth {
        sensitive,
        target: cfg.orth_target.into(),
        lambda: cfg.lambda_orth,
    };
    let (task_stack, task_head, loss_trace) =
        train_single(base, &[], d_task, cfg, "task", Party::SolutionDeveloper, extra)?;
    Ok(TrainedArtifacts {
        strategy: Strategy::Orth,
        task_stack,
        sensitive_stack: Some(sensitive.clone()),
        task_head,
        sensitive_head: None,
        loss_trace,
        sensitive_loss_trace: Vec::new(),
    })
}

/// Compliance-officer state carried across adversarial rounds.
#[derive(Debug, Clone)]
pub struct AdvSensitiveState {
    pub stack: LoraAdapterStack,
    pub head: ClassifierHead,
    pub trace: Vec<f64>,
}

impl AdvSensitiveState {
    pub fn fresh(base: &Backbone, cfg: &TrainConfig) -> Result<Self> {
        let (stack, head) = fresh_state(base, cfg, "adv.sen", Party::ComplianceOfficer)?;
        Ok(Self {
            stack,
            head,
            trace: Vec::new(),
        })
    }
}

/// Solution-developer state carried across adversarial rounds.
#[derive(Debug, Clone)]
pub struct AdvTaskState {
    pub stack: LoraAdapterStack,
    pub head: ClassifierHead,
    pub trace: Vec<f64>,
}

impl AdvTaskState {
    pub fn fresh(base: &Backbone, cfg: &TrainConfig) -> Result<Self> {
        let (stack, head) = fresh_state(base, cfg, "task", Party::SolutionDeveloper)?;
        Ok(Self {
            stack,
            head,
            trace: Vec::new(),
        })
    }
}

/// One sensitive phase: `pre ⊕ θ_sen ⊕ θ_task,k` with a gradient reversal
/// layer in front of the sensitive head. The head learns to predict `g`; the
/// adapter receives the reversed gradient.
pub fn adv_sensitive_phase(
    base: &Backbone,
    task_k: &LoraAdapterStack,
    state: &mut AdvSensitiveState,
    d_sen: &LabeledDataset<SensitiveLabel>,
    cfg: &TrainConfig,
    round: usize,
) -> Result<()> {
    cfg.validate()?;
    // θ_sen is listed before θ_task in the composition; the trainable stack is
    // always applied last by `fit`, so the frozen task stack goes in `fixed`.
    let fixed = [(task_k, Sign::Plus, 1.0)];
    let mut streams = Streams::new(cfg.seed, &format!("adv.sen.r{round}"));
    let spec = Fit {
        base,
        fixed: &fixed,
        x: d_sen.x(),
        labels: d_sen.labels(),
        epochs: cfg.adv_sen_epochs,
        grl: Some(cfg.grl_scale),
        head_lr_mult: cfg.adv_head_lr_mult,
        extra: Extra::None,
        location: format!("adv round {round} sensitive phase"),
    };
    let trace = fit(&spec, cfg, &mut state.stack, &mut state.head, &mut streams)?;
    state.trace.extend(trace);
    Ok(())
}

/// One task phase: `pre ⊕ θ_sen,k+1 ⊕ θ_task` with the sensitive stack fixed.
pub fn adv_task_phase(
    base: &Backbone,
    sen_k1: &LoraAdapterStack,
    state: &mut AdvTaskState,
    d_task: &LabeledDataset<TaskLabel>,
    cfg: &TrainConfig,
    round: usize,
) -> Result<()> {
    cfg.validate()?;
    let fixed = [(sen_k1, Sign::Plus, 1.0)];
    let mut streams = Streams::new(cfg.seed, &format!("adv.task.r{round}"));
    let spec = Fit {
        base,
        fixed: &fixed,
        x: d_task.x(),
        labels: d_task.labels(),
        epochs: cfg.adv_task_epochs,
        grl: None,
        head_lr_mult: 1.0,
        extra: Extra::None,
        location: format!("adv round {round} task phase"),
    };
    let trace = fit(&spec, cfg, &mut state.stack, &mut state.head, &mut streams)?;
    state.trace.extend(trace);
    Ok(())
}

/// Alternating adversarial training, all in one process.
///
/// Stacks cross between phases rounded to `f32`, exactly as they would in a
/// bundle exchange.
pub fn train_adv(
    base: &Backbone,
    d_task: &LabeledDataset<TaskLabel>,
    d_sen: &LabeledDataset<SensitiveLabel>,
    cfg: &TrainConfig,
) -> Result<TrainedArtifacts> {
    cfg.validate()?;
    let mut sen = AdvSensitiveState::fresh(base, cfg)?;
    let mut task = AdvTaskState::fresh(base, cfg)?;
    let mut sen_at_sd = sen.stack.round_to_f32();
    for round in 0..cfg.adv_rounds {
        let task_at_co = task.stack.round_to_f32();
        adv_sensitive_phase(base, &task_at_co, &mut sen, d_sen, cfg, round)?;
        sen_at_sd = sen.stack.round_to_f32();
        adv_task_phase(base, &sen_at_sd, &mut task, d_task, cfg, round)?;
    }
    Ok(TrainedArtifacts {
        strategy: Strategy::Adv,
        task_stack: task.stack,
        sensitive_stack: Some(sen_at_sd),
        task_head: task.head,
        sensitive_head: Some(sen.head),
        loss_trace: task.trace,
        sensitive_loss_trace: sen.trace,
    })
}

/// JSON record of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainManifest {
    pub strategy: Strategy,
    pub config: TrainConfig,
    pub backbone_hash: String,
    pub epoch_losses: Vec<f64>,
    pub sensitive_epoch_losses: Vec<f64>,
    pub task_stack_hash: String,
    pub sensitive_stack_hash: Option<String>,
    pub task_head_hash: String,
}

impl TrainManifest {
    pub fn new(art: &TrainedArtifacts, cfg: &TrainConfig, base: &Backbone) -> Self {
        Self {
            strategy: art.strategy,
            config: cfg.clone(),
            backbone_hash: base.checkpoint_hash(),
            epoch_losses: art.loss_trace.clone(),
            sensitive_epoch_losses: art.sensitive_loss_trace.clone(),
            task_stack_hash: art.task_stack.content_hash(),
            sensitive_stack_hash: art.sensitive_stack.as_ref().map(LoraAdapterStack::content_hash),
            task_head_hash: art.task_head.content_hash(),
        }
    }
}
