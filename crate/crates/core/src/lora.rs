//! LoRA adapters and the arithmetic on them.
//!
//! An adapter targets one `d×k` backbone weight and stores factors
//! `A: d×r` and `B: r×k`. Its weight update is `ΔW = (alpha / r) · A · B`.
//! Freshly initialized adapters have Gaussian `A` and zero `B`, so `ΔW = 0`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, PenaltyTarget, Var};
use crate::backbone::WeightMap;
use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub layer_id: String,
    pub a: Tensor,
    pub b: Tensor,
    pub rank: usize,
    pub alpha: f64,
}

impl LoraAdapter {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// `(alpha / r) · A · B`
    pub fn delta(&self) -> Tensor {
        self.a
            .matmul(&self.b)
            .expect("adapter factors are conformable")
            .scale(self.scale())
    }

    pub fn in_dim(&self) -> usize {
        self.a.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.b.cols()
    }
}

/// Which training strategy produced a stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StackRole {
    Task,
    Sensitive,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StackMeta {
    pub rank: usize,
    pub alpha: f64,
    pub seed: u64,
    pub strategy: String,
}

/// The adapters of one fine-tuning run, keyed by layer id.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapterStack {
    adapters: BTreeMap<String, LoraAdapter>,
    meta: StackMeta,
}

/// Which way an adapter stack is applied to base weights: `⊕` or `⊖`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sign {
    Plus,
    Minus,
}

impl Sign {
    pub fn factor(self) -> f64 {
        match self {
            Sign::Plus => 1.0,
            Sign::Minus => -1.0,
        }
    }
}

impl LoraAdapterStack {
    /// Builds a stack from explicit adapters. All must share `rank` and `alpha`.
    pub fn from_adapters(adapters: Vec<LoraAdapter>, meta: StackMeta) -> Result<Self> {
        let mut map = BTreeMap::new();
        for ad in adapters {
            if ad.rank != meta.rank || ad.alpha != meta.alpha {
                return Err(Error::config(format!(
                    "adapter {} has rank/alpha {}/{} but stack uses {}/{}",
                    ad.layer_id, ad.rank, ad.alpha, meta.rank, meta.alpha
                )));
            }
            if ad.a.shape() != [ad.a.rows(), ad.rank] || ad.b.rows() != ad.rank {
                return Err(Error::shape(format!(
                    "adapter {} factors {:?}/{:?} do not have rank {}",
                    ad.layer_id,
                    ad.a.shape(),
                    ad.b.shape(),
                    ad.rank
                )));
            }
            if ad.rank > ad.in_dim().min(ad.out_dim()) {
                return Err(Error::config(format!(
                    "rank {} exceeds min(d, k) for layer {}",
                    ad.rank, ad.layer_id
                )));
            }
            if map.insert(ad.layer_id.clone(), ad).is_some() {
                return Err(Error::config("duplicate layer id in stack"));
            }
        }
        Ok(Self { adapters: map, meta })
    }

    pub fn meta(&self) -> &StackMeta {
        &self.meta
    }

    pub fn meta_mut(&mut self) -> &mut StackMeta {
        &mut self.meta
    }

    pub fn rank(&self) -> usize {
        self.meta.rank
    }

    pub fn alpha(&self) -> f64 {
        self.meta.alpha
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn get(&self, layer_id: &str) -> Option<&LoraAdapter> {
        self.adapters.get(layer_id)
    }

    pub fn get_mut(&mut self, layer_id: &str) -> Option<&mut LoraAdapter> {
        self.adapters.get_mut(layer_id)
    }

    /// Adapters in layer-id order.
    pub fn iter(&self) -> impl Iterator<Item = &LoraAdapter> {
        self.adapters.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut LoraAdapter> {
        self.adapters.values_mut()
    }

    pub fn layer_ids(&self) -> Vec<&str> {
        self.adapters.keys().map(String::as_str).collect()
    }

    /// Rounds every factor through `f32`, matching what a bundle round-trip yields.
    pub fn round_to_f32(&self) -> Self {
        let mut out = self.clone();
        for ad in out.adapters.values_mut() {
            ad.a = ad.a.round_to_f32();
            ad.b = ad.b.round_to_f32();
        }
        out
    }

    /// SHA-256 over layer ids and the exact bits of every factor.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.meta.rank as u64).to_le_bytes());
        h.update(self.meta.alpha.to_bits().to_le_bytes());
        for ad in self.iter() {
            h.update((ad.layer_id.len() as u64).to_le_bytes());
            h.update(ad.layer_id.as_bytes());
            for v in ad.a.data().iter().chain(ad.b.data()) {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|ad| ad.a.is_finite() && ad.b.is_finite())
    }
}

/// Fresh adapters: `A ~ N(0, sigma²)` i.i.d., `B = 0`.
///
/// Layers are initialized in layer-id order from the given stream.
pub fn init_adapter_stack(
    layer_shapes: &BTreeMap<String, (usize, usize)>,
    rank: usize,
    alpha: f64,
    sigma: f64,
    seed: u64,
    rng: &mut Stream,
) -> Result<LoraAdapterStack> {
    if rank == 0 {
        return Err(Error::config("rank must be at least 1"));
    }
    if sigma <= 0.0 || !sigma.is_finite() {
        return Err(Error::config("sigma must be positive"));
    }
    let mut adapters = Vec::with_capacity(layer_shapes.len());
    for (id, &(d, k)) in layer_shapes {
        if rank > d.min(k) {
            return Err(Error::config(format!(
                "rank {rank} exceeds min({d}, {k}) for layer {id}"
            )));
        }
        adapters.push(LoraAdapter {
            layer_id: id.clone(),
            a: Tensor::randn(d, rank, sigma, rng),
            b: Tensor::zeros(rank, k),
            rank,
            alpha,
        });
    }
    LoraAdapterStack::from_adapters(
        adapters,
        StackMeta {
            rank,
            alpha,
            seed,
            strategy: String::new(),
        },
    )
}

/// Adds `sign · coeff · ΔW` into each adapted layer of `base`.
///
/// `Sign::Minus` negates the `B` factor before forming the product, which is
/// the `⊖` operation. A zero coefficient returns `base` unchanged.
pub fn compose(base: &WeightMap, stack: &LoraAdapterStack, sign: Sign, coeff: f64) -> Result<WeightMap> {
    let mut out = base.clone();
    for ad in stack.iter() {
        let w = base
            .get(&ad.layer_id)
            .ok_or_else(|| Error::composition(format!("layer {} not present in base weights", ad.layer_id)))?;
        if w.shape() != [ad.in_dim(), ad.out_dim()] {
            return Err(Error::composition(format!(
                "layer {} is {:?}, adapter expects {}x{}",
                ad.layer_id,
                w.shape(),
                ad.in_dim(),
                ad.out_dim()
            )));
        }
        if coeff == 0.0 {
            continue;
        }
        let b = match sign {
            Sign::Plus => ad.b.clone(),
            Sign::Minus => ad.b.scale(-1.0),
        };
        let delta = ad.a.matmul(&b)?.scale(coeff * ad.scale());
        out.replace(&ad.layer_id, w.add(&delta)?)?;
    }
    Ok(out)
}

/// An adapter stack placed on a [`Graph`], one leaf pair per layer.
#[derive(Debug, Clone)]
pub struct StackVars {
    pub rank: usize,
    pub scale: f64,
    pub layers: BTreeMap<String, (Var, Var)>,
}

impl StackVars {
    /// Trainable leaves when `trainable`, constants otherwise.
    pub fn bind(g: &mut Graph, stack: &LoraAdapterStack, trainable: bool) -> Self {
        let mut layers = BTreeMap::new();
        for ad in stack.iter() {
            let (a, b) = if trainable {
                (g.param(ad.a.clone()), g.param(ad.b.clone()))
            } else {
                (g.constant(ad.a.clone()), g.constant(ad.b.clone()))
            };
            layers.insert(ad.layer_id.clone(), (a, b));
        }
        Self {
            rank: stack.rank(),
            scale: stack.alpha() / stack.rank() as f64,
            layers,
        }
    }

    /// Copies the current values of the bound leaves back into `stack`.
    pub fn read_into(&self, g: &Graph, stack: &mut LoraAdapterStack) {
        for (id, &(a, b)) in &self.layers {
            let ad = stack.get_mut(id).expect("bound stack layer exists");
            ad.a = g.value(a).clone();
            ad.b = g.value(b).clone();
        }
    }
}

/// `Σ_i ‖A_iᵀA_i − I‖_F² + ‖B_iB_iᵀ − I‖_F²`.
///
/// Both Gram matrices are `r×r`.
pub fn r_norm(g: &mut Graph, stack: &StackVars) -> Result<Var> {
    if stack.layers.is_empty() {
        return Err(Error::config("r_norm needs a non-empty stack"));
    }
    let mut terms = Vec::with_capacity(2 * stack.layers.len());
    for &(a, b) in stack.layers.values() {
        let at = g.transpose(a);
        let gram_a = g.matmul(at, a)?;
        terms.push(g.frobenius_penalty(gram_a, PenaltyTarget::Identity)?);
        let bt = g.transpose(b);
        let gram_b = g.matmul(b, bt)?;
        terms.push(g.frobenius_penalty(gram_b, PenaltyTarget::Identity)?);
    }
    sum_vars(g, &terms)
}

/// `Σ_i ‖(A_i^task)ᵀA_i^sen − T‖_F² + ‖B_i^task (B_i^sen)ᵀ − T‖_F²` with
/// `T = I` or `T = 0`.
///
/// The sensitive factors are detached, so no gradient ever reaches them.
pub fn r_orth(g: &mut Graph, task: &StackVars, sensitive: &StackVars, target: PenaltyTarget) -> Result<Var> {
    if task.layers.keys().ne(sensitive.layers.keys()) {
        return Err(Error::composition("task and sensitive stacks cover different layers"));
    }
    if task.rank != sensitive.rank {
        return Err(Error::composition("task and sensitive stacks differ in rank"));
    }
    if task.layers.is_empty() {
        return Err(Error::config("r_orth needs non-empty stacks"));
    }
    let mut terms = Vec::with_capacity(2 * task.layers.len());
    for (id, &(ta, tb)) in &task.layers {
        let (sa, sb) = sensitive.layers[id];
        let sa = g.detach(sa);
        let sb = g.detach(sb);
        let ta_t = g.transpose(ta);
        let cross_a = g.matmul(ta_t, sa)?;
        terms.push(g.frobenius_penalty(cross_a, target)?);
        let sb_t = g.transpose(sb);
        let cross_b = g.matmul(tb, sb_t)?;
        terms.push(g.frobenius_penalty(cross_b, target)?);
    }
    sum_vars(g, &terms)
}

pub(crate) fn sum_vars(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}

/// Value of `r_norm` for a stack, without building a training graph.
pub fn r_norm_value(stack: &LoraAdapterStack) -> Result<f64> {
    let mut g = Graph::new();
    let vars = StackVars::bind(&mut g, stack, false);
    let v = r_norm(&mut g, &vars)?;
    Ok(g.value(v).item())
}

/// Value of `r_orth` between two stacks.
pub fn r_orth_value(task: &LoraAdapterStack, sensitive: &LoraAdapterStack, target: PenaltyTarget) -> Result<f64> {
    let mut g = Graph::new();
    let tv = StackVars::bind(&mut g, task, false);
    let sv = StackVars::bind(&mut g, sensitive, false);
    let v = r_orth(&mut g, &tv, &sv, target)?;
    Ok(g.value(v).item())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shapes(list: &[(&str, usize, usize)]) -> BTreeMap<String, (usize, usize)> {
        list.iter().map(|&(id, d, k)| (id.to_string(), (d, k))).collect()
    }

    #[test]
    fn rank_four_alpha_eight_gives_scale_two() {
        let mut rng = Stream::new(0, "init");
        let s = init_adapter_stack(&shapes(&[("l", 8, 8)]), 4, 8.0, 0.02, 0, &mut rng).unwrap();
        assert_eq!(s.get("l").unwrap().scale(), 2.0);
    }

    #[test]
    fn init_rejects_oversized_rank() {
        let mut rng = Stream::new(0, "init");
        let err = init_adapter_stack(&shapes(&[("l", 8, 3)]), 4, 8.0, 0.02, 0, &mut rng);
        assert!(matches!(err, Err(Error::Config(_))));
        let err = init_adapter_stack(&shapes(&[("l", 8, 8)]), 0, 8.0, 0.02, 0, &mut rng);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn init_is_deterministic_and_b_zero() {
        let sh = shapes(&[("a", 6, 5), ("b", 5, 7)]);
        let s1 = init_adapter_stack(&sh, 2, 4.0, 0.02, 9, &mut Stream::new(9, "init")).unwrap();
        let s2 = init_adapter_stack(&sh, 2, 4.0, 0.02, 9, &mut Stream::new(9, "init")).unwrap();
        assert_eq!(s1.content_hash(), s2.content_hash());
        for ad in s1.iter() {
            assert!(ad.b.data().iter().all(|&v| v == 0.0));
            assert!(ad.delta().data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn r_norm_zero_matrices_is_eight() {
        let ad = LoraAdapter {
            layer_id: "l".into(),
            a: Tensor::zeros(6, 4),
            b: Tensor::zeros(4, 5),
            rank: 4,
            alpha: 8.0,
        };
        let meta = StackMeta {
            rank: 4,
            alpha: 8.0,
            seed: 0,
            strategy: String::new(),
        };
        let s = LoraAdapterStack::from_adapters(vec![ad], meta).unwrap();
        assert_eq!(r_norm_value(&s).unwrap(), 8.0);
        assert_eq!(r_orth_value(&s, &s, PenaltyTarget::Identity).unwrap(), 8.0);
        assert_eq!(r_orth_value(&s, &s, PenaltyTarget::Zero).unwrap(), 0.0);
    }

    #[test]
    fn r_orth_rejects_layer_mismatch() {
        let mut rng = Stream::new(0, "init");
        let s1 = init_adapter_stack(&shapes(&[("a", 6, 6)]), 2, 4.0, 0.02, 0, &mut rng).unwrap();
        let s2 = init_adapter_stack(&shapes(&[("b", 6, 6)]), 2, 4.0, 0.02, 0, &mut rng).unwrap();
        assert!(matches!(
            r_orth_value(&s1, &s2, PenaltyTarget::Identity),
            Err(Error::Composition(_))
        ));
    }
}
