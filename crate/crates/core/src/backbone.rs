//! The frozen base model, its adapter attachment points, and classifier heads.
//!
//! Two architectures are available. `MiniAttention` embeds the input into a
//! handful of tokens and runs pre-norm transformer blocks whose query and value
//! projections (`blk{i}.q`, `blk{i}.v`) accept adapters. `Mlp` is a plain
//! stack of ReLU layers (`layer{i}`), all of which accept adapters.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, PenaltyTarget, Var};
use crate::bundle::{sha256_hex, Reader, Writer, BACKBONE_MAGIC};
use crate::error::{Error, Result};
use crate::lora::{LoraAdapterStack, Sign, StackVars};
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::Stream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct WeightEntry {
    pub tensor: Tensor,
    pub frozen: bool,
}

/// Named base weights.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightMap {
    entries: BTreeMap<String, WeightEntry>,
}

impl WeightMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, frozen: bool) {
        self.entries.insert(name.into(), WeightEntry { tensor, frozen });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| &e.tensor)
    }

    pub fn is_frozen(&self, name: &str) -> Option<bool> {
        self.entries.get(name).map(|e| e.frozen)
    }

    /// Replaces a tensor, keeping its frozen flag. The shape must not change.
    pub fn replace(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::composition(format!("no weight named {name}")))?;
        if entry.tensor.shape() != tensor.shape() {
            return Err(Error::shape(format!(
                "replacing {name}: {:?} with {:?}",
                entry.tensor.shape(),
                tensor.shape()
            )));
        }
        entry.tensor = tensor;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &WeightEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn freeze_all(&mut self) {
        for e in self.entries.values_mut() {
            e.frozen = true;
        }
    }

    pub fn bit_eq(&self, other: &WeightMap) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((ka, a), (kb, b))| ka == kb && a.frozen == b.frozen && a.tensor.bit_eq(&b.tensor))
    }

    fn bind(&self, g: &mut Graph, trainable: bool) -> BTreeMap<String, Var> {
        self.entries
            .iter()
            .map(|(k, e)| {
                let v = if trainable && !e.frozen {
                    g.param(e.tensor.clone())
                } else {
                    g.constant(e.tensor.clone())
                };
                (k.clone(), v)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    Mlp,
    MiniAttention,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub architecture: Architecture,
    pub depth: usize,
    pub width: usize,
    pub tokens: usize,
    pub input_dim: usize,
    pub seed: u64,
    pub pretrain_steps: usize,
    /// Leading input features the pretext task reads. The rest of the input is
    /// nuisance during pretraining.
    pub pretext_inputs: usize,
    pub pretrain_lr: f64,
    pub pretrain_weight_decay: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::MiniAttention,
            depth: 2,
            width: 32,
            tokens: 4,
            input_dim: 16,
            seed: 1234,
            pretrain_steps: 1000,
            pretext_inputs: 4,
            pretrain_lr: 3e-3,
            pretrain_weight_decay: 0.1,
        }
    }
}

impl BackboneConfig {
    pub fn mlp() -> Self {
        Self {
            architecture: Architecture::Mlp,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::config("backbone depth must be at least 1"));
        }
        if self.width == 0 || self.input_dim == 0 {
            return Err(Error::config("backbone width and input dim must be positive"));
        }
        if self.architecture == Architecture::MiniAttention && self.tokens == 0 {
            return Err(Error::config("mini-attention needs at least one token"));
        }
        if self.pretext_inputs == 0 || self.pretext_inputs > self.input_dim {
            return Err(Error::config("pretext_inputs must be in 1..=input_dim"));
        }
        Ok(())
    }
}

/// Which party owns a head. Heads never leave their owner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Party {
    #[serde(rename = "SD")]
    SolutionDeveloper,
    #[serde(rename = "CO")]
    ComplianceOfficer,
}

impl Party {
    pub fn tag(self) -> &'static str {
        match self {
            Party::SolutionDeveloper => "SD",
            Party::ComplianceOfficer => "CO",
        }
    }
}

/// Linear two-class head on top of the pooled representation.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub weight: Tensor,
    pub bias: Tensor,
    owner: Party,
}

impl ClassifierHead {
    pub fn init(width: usize, owner: Party, rng: &mut Stream) -> Self {
        Self {
            weight: Tensor::randn(width, 2, 1.0 / (width as f64).sqrt(), rng),
            bias: Tensor::zeros(1, 2),
            owner,
        }
    }

    /// Rebuilds a head from stored tensors (`width×2` weight, `1×2` bias).
    pub fn from_parts(weight: Tensor, bias: Tensor, owner: Party) -> Result<Self> {
        if weight.cols() != 2 || bias.shape() != [1, 2] {
            return Err(Error::shape(format!(
                "head weight {:?} / bias {:?}, expected [w, 2] / [1, 2]",
                weight.shape(),
                bias.shape()
            )));
        }
        Ok(Self { weight, bias, owner })
    }

    pub fn owner(&self) -> Party {
        self.owner
    }

    pub fn content_hash(&self) -> String {
        let mut bytes = Vec::new();
        for v in self.weight.data().iter().chain(self.bias.data()) {
            bytes.extend_from_slice(&v.to_bits().to_le_bytes());
        }
        sha256_hex(&bytes)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub weight: Var,
    pub bias: Var,
}

impl HeadVars {
    pub fn bind(g: &mut Graph, head: &ClassifierHead, trainable: bool) -> Self {
        if trainable {
            Self {
                weight: g.param(head.weight.clone()),
                bias: g.param(head.bias.clone()),
            }
        } else {
            Self {
                weight: g.constant(head.weight.clone()),
                bias: g.constant(head.bias.clone()),
            }
        }
    }

    pub fn logits(&self, g: &mut Graph, rep: Var) -> Result<Var> {
        let z = g.matmul(rep, self.weight)?;
        g.add_row(z, self.bias)
    }

    pub fn read_into(&self, g: &Graph, head: &mut ClassifierHead) {
        head.weight = g.value(self.weight).clone();
        head.bias = g.value(self.bias).clone();
    }
}

/// An adapter stack bound on a graph together with how it is applied.
#[derive(Debug, Clone, Copy)]
pub struct AppliedStack<'a> {
    pub vars: &'a StackVars,
    pub sign: Sign,
    pub coeff: f64,
}

/// Dropout on adapter outputs during a forward pass.
pub struct DropoutCtx<'a> {
    pub rate: f64,
    pub train: bool,
    pub rng: &'a mut Stream,
}

impl DropoutCtx<'_> {
    fn apply(&mut self, g: &mut Graph, x: Var) -> Var {
        g.dropout(x, self.rate, self.train, self.rng)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    config: BackboneConfig,
    weights: WeightMap,
}

impl Backbone {
    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn weights(&self) -> &WeightMap {
        &self.weights
    }

    /// The same architecture over different base weights (e.g. after `⊖`).
    pub fn with_weights(&self, weights: WeightMap) -> Result<Self> {
        for (name, e) in self.weights.iter() {
            match weights.get(name) {
                Some(t) if t.shape() == e.tensor.shape() => {}
                _ => return Err(Error::composition(format!("weight {name} missing or reshaped"))),
            }
        }
        Ok(Self {
            config: self.config.clone(),
            weights,
        })
    }

    pub fn width(&self) -> usize {
        self.config.width
    }

    /// Layer ids that accept adapters, with their `(d, k)` shapes.
    pub fn attachment_points(&self) -> BTreeMap<String, (usize, usize)> {
        let mut out = BTreeMap::new();
        for id in attachment_ids(&self.config) {
            let t = self.weights.get(&id).expect("attachment weight exists");
            out.insert(id, (t.rows(), t.cols()));
        }
        out
    }

    /// Pooled representation `n×width` for a batch `x: n×input_dim`.
    pub fn represent(
        &self,
        g: &mut Graph,
        x: Var,
        stacks: &[AppliedStack<'_>],
        dropout: &mut DropoutCtx<'_>,
    ) -> Result<Var> {
        let bound = self.weights.bind(g, false);
        self.represent_bound(g, &bound, x, stacks, dropout)
    }

    fn represent_bound(
        &self,
        g: &mut Graph,
        w: &BTreeMap<String, Var>,
        x: Var,
        stacks: &[AppliedStack<'_>],
        dropout: &mut DropoutCtx<'_>,
    ) -> Result<Var> {
        let cfg = &self.config;
        if g.value(x).cols() != cfg.input_dim {
            return Err(Error::shape(format!(
                "input has {} features, backbone expects {}",
                g.value(x).cols(),
                cfg.input_dim
            )));
        }
        for s in stacks {
            for (id, &(a, b)) in &s.vars.layers {
                let wt = w
                    .get(id)
                    .ok_or_else(|| Error::composition(format!("adapter targets unknown layer {id}")))?;
                let (d, k) = (g.value(*wt).rows(), g.value(*wt).cols());
                if g.value(a).rows() != d || g.value(b).cols() != k {
                    return Err(Error::composition(format!("adapter for {id} does not match {d}x{k}")));
                }
            }
        }
        match cfg.architecture {
            Architecture::Mlp => {
                let mut h = x;
                for i in 0..cfg.depth {
                    let id = format!("layer{i}");
                    let z = linear(g, w, &id, h, stacks, dropout)?;
                    let z = g.add_row(z, w[&format!("layer{i}.b")])?;
                    h = g.relu(z);
                }
                Ok(h)
            }
            Architecture::MiniAttention => {
                let t = cfg.tokens;
                let e = g.matmul(x, w["embed"])?;
                let e = g.add_row(e, w["embed.b"])?;
                let n = g.value(x).rows();
                let mut h = g.reshape(e, n * t, cfg.width)?;
                for i in 0..cfg.depth {
                    let p = |s: &str| format!("blk{i}.{s}");
                    let u = g.layer_norm(h, w[&p("ln1.g")], w[&p("ln1.b")])?;
                    let q = linear(g, w, &p("q"), u, stacks, dropout)?;
                    let k = g.matmul(u, w[&p("k")])?;
                    let v = linear(g, w, &p("v"), u, stacks, dropout)?;
                    let a = g.attention(q, k, v, t)?;
                    let o = g.matmul(a, w[&p("o")])?;
                    h = g.add(h, o)?;
                    let u2 = g.layer_norm(h, w[&p("ln2.g")], w[&p("ln2.b")])?;
                    let f1 = g.matmul(u2, w[&p("ff1")])?;
                    let f1 = g.add_row(f1, w[&p("ff1.b")])?;
                    let f1 = g.relu(f1);
                    let f2 = g.matmul(f1, w[&p("ff2")])?;
                    let f2 = g.add_row(f2, w[&p("ff2.b")])?;
                    h = g.add(h, f2)?;
                }
                let pooled = g.token_mean_pool(h, t)?;
                g.layer_norm(pooled, w["final.ln.g"], w["final.ln.b"])
            }
        }
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode_checkpoint())?;
        Ok(())
    }

    pub fn encode_checkpoint(&self) -> Vec<u8> {
        let mut w = Writer::new(BACKBONE_MAGIC);
        w.str(&serde_json::to_string(&self.config).expect("config serializes"));
        w.u32(self.weights.len() as u32);
        for (name, e) in self.weights.iter() {
            w.str(name);
            w.u32(e.tensor.rows() as u32);
            w.u32(e.tensor.cols() as u32);
            w.f32s(&e.tensor);
        }
        w.finish()
    }

    pub fn decode_checkpoint(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, BACKBONE_MAGIC)?;
        let at = r.offset();
        let config: BackboneConfig =
            serde_json::from_str(&r.str()?).map_err(|e| Error::format(at, format!("bad config blob: {e}")))?;
        let count = r.u32()? as usize;
        let mut weights = WeightMap::new();
        for _ in 0..count {
            let name = r.str()?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            weights.insert(name, r.tensor(rows, cols)?, true);
        }
        r.finish()?;
        let expected = init_weights(&config, &mut Stream::new(0, "shape-only"));
        for (name, e) in expected.iter() {
            match weights.get(name) {
                Some(t) if t.shape() == e.tensor.shape() => {}
                _ => {
                    return Err(Error::format(
                        bytes.len(),
                        format!("checkpoint lacks weight {name} of shape {:?}", e.tensor.shape()),
                    ))
                }
            }
        }
        Ok(Self { config, weights })
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        Self::decode_checkpoint(&std::fs::read(path)?)
    }

    /// SHA-256 of the checkpoint encoding. Both parties compare this before
    /// any exchange.
    pub fn checkpoint_hash(&self) -> String {
        sha256_hex(&self.encode_checkpoint())
    }
}

/// `u·W` plus, for every stack adapting `id`, `dropout(u · Σ sign·coeff·(α/r)·A·B)`.
fn linear(
    g: &mut Graph,
    w: &BTreeMap<String, Var>,
    id: &str,
    u: Var,
    stacks: &[AppliedStack<'_>],
    dropout: &mut DropoutCtx<'_>,
) -> Result<Var> {
    let base = g.matmul(u, w[id])?;
    let mut delta: Option<Var> = None;
    for s in stacks {
        let Some(&(a, b)) = s.vars.layers.get(id) else {
            continue;
        };
        if s.coeff == 0.0 {
            continue;
        }
        let ab = g.matmul(a, b)?;
        let term = g.scale(ab, s.sign.factor() * s.coeff * s.vars.scale);
        delta = Some(match delta {
            Some(d) => g.add(d, term)?,
            None => term,
        });
    }
    match delta {
        None => Ok(base),
        Some(d) => {
            let upd = g.matmul(u, d)?;
            let upd = dropout.apply(g, upd);
            g.add(base, upd)
        }
    }
}

fn attachment_ids(cfg: &BackboneConfig) -> Vec<String> {
    match cfg.architecture {
        Architecture::Mlp => (0..cfg.depth).map(|i| format!("layer{i}")).collect(),
        Architecture::MiniAttention => (0..cfg.depth)
            .flat_map(|i| [format!("blk{i}.q"), format!("blk{i}.v")])
            .collect(),
    }
}

fn init_weights(cfg: &BackboneConfig, rng: &mut Stream) -> WeightMap {
    let mut w = WeightMap::new();
    let h = cfg.width;
    let dense = |w: &mut WeightMap, name: String, rows: usize, cols: usize, rng: &mut Stream| {
        w.insert(name, Tensor::randn(rows, cols, 1.0 / (rows as f64).sqrt(), rng), false);
    };
    match cfg.architecture {
        Architecture::Mlp => {
            for i in 0..cfg.depth {
                let d = if i == 0 { cfg.input_dim } else { h };
                dense(&mut w, format!("layer{i}"), d, h, rng);
                w.insert(format!("layer{i}.b"), Tensor::zeros(1, h), false);
            }
        }
        Architecture::MiniAttention => {
            dense(&mut w, "embed".into(), cfg.input_dim, cfg.tokens * h, rng);
            w.insert("embed.b", Tensor::zeros(1, cfg.tokens * h), false);
            for i in 0..cfg.depth {
                for name in ["q", "k", "v", "o", "ff1", "ff2"] {
                    dense(&mut w, format!("blk{i}.{name}"), h, h, rng);
                }
                for name in ["ff1.b", "ff2.b", "ln1.b", "ln2.b"] {
                    w.insert(format!("blk{i}.{name}"), Tensor::zeros(1, h), false);
                }
                for name in ["ln1.g", "ln2.g"] {
                    w.insert(format!("blk{i}.{name}"), Tensor::full(1, h, 1.0), false);
                }
            }
            w.insert("final.ln.g", Tensor::full(1, h, 1.0), false);
            w.insert("final.ln.b", Tensor::zeros(1, h), false);
        }
    }
    w
}

/// Number of regression targets in the pretext task.
const PRETEXT_TARGETS: usize = 8;
const PRETEXT_BATCH: usize = 64;

/// Builds and "pretrains" a backbone, then freezes every weight.
///
/// The pretext task regresses fixed random nonlinear features of the leading
/// `pretext_inputs` input coordinates from standard-normal inputs. Final
/// weights are rounded to `f32` so a checkpoint round-trip is lossless.
pub fn build_backbone(cfg: &BackboneConfig) -> Result<Backbone> {
    cfg.validate()?;
    let mut init_rng = Stream::new(cfg.seed, "backbone.init");
    let weights = init_weights(cfg, &mut init_rng);
    let mut bb = Backbone {
        config: cfg.clone(),
        weights,
    };
    pretrain(&mut bb, &mut Stream::new(cfg.seed, "backbone.pretext"))?;
    let mut weights = bb.weights.clone();
    let names: Vec<String> = weights.iter().map(|(k, _)| k.to_string()).collect();
    for name in names {
        let t = weights.get(&name).expect("present").round_to_f32();
        weights.replace(&name, t)?;
    }
    weights.freeze_all();
    bb.weights = weights;
    Ok(bb)
}

fn pretrain(bb: &mut Backbone, rng: &mut Stream) -> Result<()> {
    let cfg = bb.config.clone();
    if cfg.pretrain_steps == 0 {
        return Ok(());
    }
    let teacher_in = Tensor::randn(cfg.pretext_inputs, PRETEXT_TARGETS, 1.0, rng);
    let mut probe = Tensor::randn(cfg.width, PRETEXT_TARGETS, 1.0 / (cfg.width as f64).sqrt(), rng);
    let names: Vec<String> = bb.weights.iter().map(|(k, _)| k.to_string()).collect();
    let mut opt = AdamW::new(AdamWConfig {
        lr: cfg.pretrain_lr,
        weight_decay: cfg.pretrain_weight_decay,
        ..AdamWConfig::default()
    });
    let mut dummy_rng = Stream::new(cfg.seed, "backbone.pretext.dropout");
    for _ in 0..cfg.pretrain_steps {
        let x = Tensor::randn(PRETEXT_BATCH, cfg.input_dim, 1.0, rng);
        let lead: Vec<f64> = (0..PRETEXT_BATCH)
            .flat_map(|i| x.row(i)[..cfg.pretext_inputs].to_vec())
            .collect();
        let lead = Tensor::new(PRETEXT_BATCH, cfg.pretext_inputs, lead)?;
        let target = lead.matmul(&teacher_in)?.map(f64::tanh);

        let mut g = Graph::new();
        let bound = bb.weights.bind(&mut g, true);
        let xv = g.constant(x);
        let mut dctx = DropoutCtx {
            rate: 0.0,
            train: false,
            rng: &mut dummy_rng,
        };
        let rep = bb.represent_bound(&mut g, &bound, xv, &[], &mut dctx)?;
        let pv = g.param(probe.clone());
        let pred = g.matmul(rep, pv)?;
        let tv = g.constant(target);
        let diff = g.sub(pred, tv)?;
        let sq = g.frobenius_penalty(diff, PenaltyTarget::Zero)?;
        let loss = g.scale(sq, 1.0 / (PRETEXT_BATCH * PRETEXT_TARGETS) as f64);
        g.backward(loss)?;

        let mut params: Vec<Tensor> = names.iter().map(|n| g.value(bound[n]).clone()).collect();
        params.push(g.value(pv).clone());
        let mut grads: Vec<Tensor> = names.iter().map(|n| g.grad(bound[n])).collect();
        grads.push(g.grad(pv));
        opt.step(&mut params, &grads, cfg.pretrain_lr)?;
        probe = params.pop().expect("probe");
        for (n, t) in names.iter().zip(params) {
            bb.weights.replace(n, t)?;
        }
    }
    Ok(())
}

/// A stack applied to a backbone forward pass: `(stack, sign, coeff)`.
pub type StackApplication<'a> = (&'a LoraAdapterStack, Sign, f64);

/// Eval-mode or train-mode logits `n×2` as a plain tensor.
pub fn forward(
    base: &Backbone,
    stacks: &[StackApplication<'_>],
    head: &ClassifierHead,
    x: &Tensor,
    train_mode: bool,
    dropout_rate: f64,
    rng: &mut Stream,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let bound: Vec<StackVars> = stacks
        .iter()
        .map(|(s, _, _)| StackVars::bind(&mut g, s, false))
        .collect();
    let applied: Vec<AppliedStack<'_>> = bound
        .iter()
        .zip(stacks)
        .map(|(vars, &(_, sign, coeff))| AppliedStack { vars, sign, coeff })
        .collect();
    let xv = g.constant(x.clone());
    let mut dctx = DropoutCtx {
        rate: dropout_rate,
        train: train_mode,
        rng,
    };
    let rep = base.represent(&mut g, xv, &applied, &mut dctx)?;
    let hv = HeadVars::bind(&mut g, head, false);
    let logits = hv.logits(&mut g, rep)?;
    Ok(g.value(logits).clone())
}

/// Eval-mode pooled representation `n×width`.
pub fn representation(base: &Backbone, stacks: &[StackApplication<'_>], x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let bound: Vec<StackVars> = stacks
        .iter()
        .map(|(s, _, _)| StackVars::bind(&mut g, s, false))
        .collect();
    let applied: Vec<AppliedStack<'_>> = bound
        .iter()
        .zip(stacks)
        .map(|(vars, &(_, sign, coeff))| AppliedStack { vars, sign, coeff })
        .collect();
    let xv = g.constant(x.clone());
    let mut rng = Stream::new(0, "unused");
    let mut dctx = DropoutCtx {
        rate: 0.0,
        train: false,
        rng: &mut rng,
    };
    let rep = base.represent(&mut g, xv, &applied, &mut dctx)?;
    Ok(g.value(rep).clone())
}

/// Positive-class probabilities from eval-mode logits.
pub fn positive_scores(logits: &Tensor) -> Vec<f64> {
    (0..logits.rows())
        .map(|i| {
            let (a, b) = (logits.get(i, 0), logits.get(i, 1));
            1.0 / (1.0 + (a - b).exp())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(arch: Architecture) -> BackboneConfig {
        BackboneConfig {
            architecture: arch,
            pretrain_steps: 5,
            ..BackboneConfig::default()
        }
    }

    #[test]
    fn attention_backbone_exposes_q_and_v() {
        let bb = build_backbone(&small_cfg(Architecture::MiniAttention)).unwrap();
        let ids: Vec<String> = bb.attachment_points().into_keys().collect();
        assert_eq!(ids, ["blk0.q", "blk0.v", "blk1.q", "blk1.v"]);
    }

    #[test]
    fn mlp_backbone_adapts_every_layer() {
        let bb = build_backbone(&small_cfg(Architecture::Mlp)).unwrap();
        let pts = bb.attachment_points();
        assert_eq!(pts["layer0"], (16, 32));
        assert_eq!(pts["layer1"], (32, 32));
    }

    #[test]
    fn all_weights_frozen_and_f32_exact() {
        let bb = build_backbone(&small_cfg(Architecture::MiniAttention)).unwrap();
        for (_, e) in bb.weights().iter() {
            assert!(e.frozen);
            assert!(e.tensor.bit_eq(&e.tensor.round_to_f32()));
        }
    }

    #[test]
    fn zero_input_gives_finite_logits() {
        for arch in [Architecture::Mlp, Architecture::MiniAttention] {
            let bb = build_backbone(&small_cfg(arch)).unwrap();
            let head = ClassifierHead::init(32, Party::SolutionDeveloper, &mut Stream::new(0, "h"));
            let out = forward(
                &bb,
                &[],
                &head,
                &Tensor::zeros(5, 16),
                false,
                0.1,
                &mut Stream::new(0, "d"),
            )
            .unwrap();
            assert_eq!(out.shape(), [5, 2]);
            assert!(out.is_finite());
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let cfg = BackboneConfig {
            depth: 0,
            ..BackboneConfig::default()
        };
        assert!(matches!(build_backbone(&cfg), Err(Error::Config(_))));
        let cfg = BackboneConfig {
            pretext_inputs: 17,
            ..BackboneConfig::default()
        };
        assert!(matches!(build_backbone(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn wrong_input_width_is_shape_error() {
        let bb = build_backbone(&small_cfg(Architecture::Mlp)).unwrap();
        let head = ClassifierHead::init(32, Party::SolutionDeveloper, &mut Stream::new(0, "h"));
        let r = forward(
            &bb,
            &[],
            &head,
            &Tensor::zeros(2, 15),
            false,
            0.0,
            &mut Stream::new(0, "d"),
        );
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn gradients_reach_adapters_and_head_only() {
        for arch in [Architecture::Mlp, Architecture::MiniAttention] {
            let bb = build_backbone(&small_cfg(arch)).unwrap();
            let mut rng = Stream::new(1, "t");
            let mut stack = crate::lora::init_adapter_stack(&bb.attachment_points(), 2, 4.0, 0.3, 1, &mut rng).unwrap();
            for ad in stack.iter_mut() {
                ad.b = Tensor::randn(ad.b.rows(), ad.b.cols(), 0.3, &mut rng);
            }
            let head = ClassifierHead::init(32, Party::SolutionDeveloper, &mut rng);
            let mut g = Graph::new();
            let w = bb.weights.bind(&mut g, true);
            let sv = StackVars::bind(&mut g, &stack, true);
            let hv = HeadVars::bind(&mut g, &head, true);
            let x = g.constant(Tensor::randn(6, 16, 1.0, &mut rng));
            let applied = [AppliedStack {
                vars: &sv,
                sign: Sign::Plus,
                coeff: 1.0,
            }];
            let mut dctx = DropoutCtx {
                rate: 0.1,
                train: true,
                rng: &mut rng,
            };
            let rep = bb.represent_bound(&mut g, &w, x, &applied, &mut dctx).unwrap();
            let logits = hv.logits(&mut g, rep).unwrap();
            let loss = g.cross_entropy_logits(logits, &[0, 1, 0, 1, 1, 0]).unwrap();
            g.backward(loss).unwrap();
            for (name, &v) in &w {
                assert!(!g.requires_grad(v), "{name}");
                assert!(g.grad(v).data().iter().all(|&d| d == 0.0), "{name}");
            }
            let moved = |v: Var| g.grad(v).data().iter().any(|&d| d != 0.0);
            assert!(sv.layers.values().all(|&(a, b)| moved(a) && moved(b)));
            assert!(moved(hv.weight) && moved(hv.bias));
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let bb = build_backbone(&small_cfg(Architecture::MiniAttention)).unwrap();
        let back = Backbone::decode_checkpoint(&bb.encode_checkpoint()).unwrap();
        assert!(back.weights().bit_eq(bb.weights()));
        assert_eq!(back.config(), bb.config());
        let bytes = bb.encode_checkpoint();
        assert!(matches!(
            Backbone::decode_checkpoint(&bytes[..bytes.len() - 3]),
            Err(Error::Format { .. })
        ));
    }
}
