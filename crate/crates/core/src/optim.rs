//! AdamW, the cosine learning-rate schedule, and class-balanced sampling.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: AdamWConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update at learning rate `lr` (the scheduled rate, not `cfg.lr`).
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape(format!(
                "{} params but {} grads",
                params.len(),
                grads.len()
            )));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len() {
            return Err(Error::shape("parameter count changed between steps"));
        }
        for (p, g) in params.iter().zip(grads) {
            p.check_same_shape(g)?;
        }
        self.step += 1;
        let AdamWConfig {
            weight_decay,
            beta1,
            beta2,
            eps,
            ..
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let pd = p.data_mut();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                let gi = g.data()[i];
                pd[i] -= lr * weight_decay * pd[i];
                md[i] = beta1 * md[i] + (1.0 - beta1) * gi;
                vd[i] = beta2 * vd[i] + (1.0 - beta2) * gi * gi;
                let m_hat = md[i] / bc1;
                let v_hat = vd[i] / bc2;
                pd[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// `base_lr · (1 + cos(π · step / total)) / 2`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let frac = step.min(total_steps) as f64 / total_steps as f64;
    base_lr * (1.0 + (std::f64::consts::PI * frac).cos()) / 2.0
}

/// Draws index batches with replacement, each index weighted inversely to the
/// frequency of its label, so both classes are equally likely per draw.
#[derive(Debug, Clone)]
pub struct BalancedSampler {
    dist: WeightedIndex<f64>,
    n: usize,
}

impl BalancedSampler {
    pub fn new(labels: &[usize]) -> Result<Self> {
        let mut counts = [0usize; 2];
        for &l in labels {
            if l > 1 {
                return Err(Error::domain(format!("label {l} outside {{0,1}}")));
            }
            counts[l] += 1;
        }
        if counts.contains(&0) {
            return Err(Error::config(format!(
                "class-balanced sampling needs both classes, got counts {counts:?}"
            )));
        }
        let weights = labels.iter().map(|&l| 1.0 / counts[l] as f64);
        let dist = WeightedIndex::new(weights).map_err(|e| Error::config(e.to_string()))?;
        Ok(Self { dist, n: labels.len() })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn batch(&self, batch_size: usize, rng: &mut Stream) -> Vec<usize> {
        (0..batch_size).map(|_| self.dist.sample(rng.rng_mut())).collect()
    }

    /// `ceil(n / batch_size)` batches, one epoch's worth.
    pub fn epoch(&self, batch_size: usize, rng: &mut Stream) -> Vec<Vec<usize>> {
        let steps = self.n.div_ceil(batch_size);
        (0..steps).map(|_| self.batch(batch_size, rng)).collect()
    }
}

/// Convenience wrapper: one epoch of balanced batches.
pub fn balanced_batches(labels: &[usize], batch_size: usize, rng: &mut Stream) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    Ok(BalancedSampler::new(labels)?.epoch(batch_size, rng))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_zero_decay_is_fixed_point() {
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        });
        let mut p = vec![Tensor::new(1, 3, vec![1.0, -2.0, 0.5]).unwrap()];
        let before = p[0].clone();
        for _ in 0..5 {
            opt.step(&mut p, &[Tensor::zeros(1, 3)], 0.1).unwrap();
        }
        assert!(p[0].bit_eq(&before));
    }

    #[test]
    fn one_step_descends_half_square() {
        let mut opt = AdamW::new(AdamWConfig::default());
        let mut p = vec![Tensor::scalar(1.0)];
        let g = p[0].clone(); // d/dw ½w² = w
        opt.step(&mut p, &[g], 1e-2).unwrap();
        assert!(p[0].item().abs() < 1.0);
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 10, 0.3), 0.3);
        assert!(cosine_lr(10, 10, 0.3).abs() < 1e-18);
        assert!((cosine_lr(5, 10, 0.3) - 0.15).abs() < 1e-15);
    }

    #[test]
    fn sampler_needs_both_classes() {
        assert!(matches!(BalancedSampler::new(&[1, 1, 1]), Err(Error::Config(_))));
        assert!(matches!(BalancedSampler::new(&[0, 2]), Err(Error::Domain(_))));
    }

    #[test]
    fn balanced_input_has_equal_weights() {
        let labels = [0, 1, 0, 1, 1, 0];
        let s = BalancedSampler::new(&labels).unwrap();
        let mut rng = Stream::new(4, "s");
        let mut counts = [0usize; 6];
        for _ in 0..600 {
            for i in s.batch(10, &mut rng) {
                counts[i] += 1;
            }
        }
        for c in counts {
            assert!((c as f64 - 1000.0).abs() < 120.0, "{counts:?}");
        }
    }

    #[test]
    fn same_seed_same_batches() {
        let labels: Vec<usize> = (0..100).map(|i| usize::from(i % 7 == 0)).collect();
        let a = balanced_batches(&labels, 16, &mut Stream::new(2, "s")).unwrap();
        let b = balanced_batches(&labels, 16, &mut Stream::new(2, "s")).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 7);
    }
}
