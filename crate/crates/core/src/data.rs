//! Synthetic tabular data with a controllable sensitive-attribute bias, and
//! CSV ingestion for external data.
//!
//! Each sample has a latent `z ~ N(0, I)`, a binary group `g ~ Bernoulli(p_g)`
//! and a task label `y`. The feature vector is four equal blocks:
//!
//! | block  | content                                            |
//! |--------|----------------------------------------------------|
//! | task   | the observed part of `z`                           |
//! | group  | `s(g)·u + noise`, `s(g) = ±1`                      |
//! | mixed  | `β·s(g)·v + (1 − β)·noise`                          |
//! | noise  | pure noise                                         |
//!
//! `y = 1[w·z_obs + σ_h·ξ > t_g]` with per-group thresholds chosen so that
//! `P(y = 1 | g)` moves from the common base rate (at `β = 0`) to the
//! configured per-group rates (at `β = 1`). Labels then flip with probability
//! `η`. At `β = 0` the label is independent of `g`.

use std::collections::BTreeSet;
use std::marker::PhantomData;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tensor::Tensor;

/// Marker for which label column a dataset carries.
pub trait LabelKind: Clone + std::fmt::Debug {
    const NAME: &'static str;
    /// Column names that belong to the *other* party and must never appear.
    const FORBIDDEN_COLUMNS: &'static [&'static str];
}

/// Downstream task labels `y`, held by the solution developer.
#[derive(Debug, Clone, Copy)]
pub struct TaskLabel;

/// Sensitive-attribute labels `g`, held by the compliance officer.
#[derive(Debug, Clone, Copy)]
pub struct SensitiveLabel;

impl LabelKind for TaskLabel {
    const NAME: &'static str = "task";
    const FORBIDDEN_COLUMNS: &'static [&'static str] = &["g", "group", "sensitive", "sensitive_label", "attribute"];
}

impl LabelKind for SensitiveLabel {
    const NAME: &'static str = "sensitive";
    const FORBIDDEN_COLUMNS: &'static [&'static str] = &["y", "target", "task", "task_label"];
}

/// Features plus exactly one label column, typed by which party may hold it.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset<K: LabelKind> {
    x: Tensor,
    labels: Vec<usize>,
    ids: Vec<u64>,
    _kind: PhantomData<K>,
}

impl<K: LabelKind> LabeledDataset<K> {
    pub fn new(x: Tensor, labels: Vec<usize>, ids: Vec<u64>) -> Result<Self> {
        if x.rows() != labels.len() || ids.len() != labels.len() {
            return Err(Error::shape(format!(
                "{} rows, {} labels, {} ids",
                x.rows(),
                labels.len(),
                ids.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::domain(format!("{} label {bad} outside {{0,1}}", K::NAME)));
        }
        Ok(Self {
            x,
            labels,
            ids,
            _kind: PhantomData,
        })
    }

    pub fn x(&self) -> &Tensor {
        &self.x
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Global sample ids, unique across every split of one generation.
    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> usize {
        self.x.cols()
    }

    pub fn kind(&self) -> &'static str {
        K::NAME
    }

    fn subset(&self, idx: &[usize]) -> Self {
        Self {
            x: self.x.gather_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            ids: idx.iter().map(|&i| self.ids[i]).collect(),
            _kind: PhantomData,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenSpec {
    /// Samples per party.
    pub n: usize,
    /// Feature dimension, at least 4.
    pub features: usize,
    /// Bias knob in `[0, 1]`.
    pub beta: f64,
    /// Label flip probability.
    pub label_noise: f64,
    /// `P(g = 1)`.
    pub group_prevalence: f64,
    /// `P(y = 1 | g)` for `g = 0, 1` at `β = 1`; their mean is the base rate at `β = 0`.
    pub positive_rate: [f64; 2],
    /// Standard deviation of the unobserved part of the label score.
    pub hidden_noise: f64,
    /// Noise standard deviation in the group block.
    pub group_noise: f64,
    /// Size of the SD test split. `None` keeps the 15% share of `n`; a larger
    /// value tightens metric estimates without touching train/val.
    pub test_n: Option<usize>,
    pub seed: u64,
}

impl Default for GenSpec {
    fn default() -> Self {
        Self {
            n: 4000,
            features: 16,
            beta: 0.8,
            label_noise: 0.1,
            group_prevalence: 0.5,
            positive_rate: [0.4, 0.6],
            hidden_noise: 1.0,
            group_noise: 1.0,
            test_n: None,
            seed: 0,
        }
    }
}

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("beta", self.beta),
            ("label_noise", self.label_noise),
            ("group_prevalence", self.group_prevalence),
            ("positive_rate[0]", self.positive_rate[0]),
            ("positive_rate[1]", self.positive_rate[1]),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{name} = {p} is not a probability")));
            }
        }
        if self.positive_rate.iter().any(|&r| r <= 0.0 || r >= 1.0) {
            return Err(Error::config("positive rates must lie strictly inside (0, 1)"));
        }
        if self.features < 4 {
            return Err(Error::config("need at least 4 features"));
        }
        if self.n < 20 {
            return Err(Error::config("need at least 20 samples per party"));
        }
        if self.hidden_noise < 0.0 || self.group_noise < 0.0 {
            return Err(Error::config("noise scales must be non-negative"));
        }
        if self.test_n == Some(0) {
            return Err(Error::config("test_n must be positive"));
        }
        Ok(())
    }

    /// Block widths `[task, group, mixed, noise]`.
    pub fn blocks(&self) -> [usize; 4] {
        let q = self.features / 4;
        [self.features - 3 * q, q, q, q]
    }

    /// `P(y = 1 | g)` before label noise, at this spec's `β`.
    pub fn effective_rates(&self) -> [f64; 2] {
        let mean = 0.5 * (self.positive_rate[0] + self.positive_rate[1]);
        [
            mean + self.beta * (self.positive_rate[0] - mean),
            mean + self.beta * (self.positive_rate[1] - mean),
        ]
    }
}

/// Fixed coefficients of the generative process, derived from the seed.
#[derive(Debug, Clone)]
struct Process {
    spec: GenSpec,
    /// Label weights on the observed latent.
    w: Vec<f64>,
    /// Direction of the group signal in the group block.
    u: Vec<f64>,
    /// Direction of the group signal in the mixed block.
    v: Vec<f64>,
    thresholds: [f64; 2],
}

impl Process {
    fn new(spec: &GenSpec) -> Result<Self> {
        spec.validate()?;
        let [dt, dg, dm, _] = spec.blocks();
        let mut rng = Stream::new(spec.seed, "data.process");
        let w = unit(&mut rng, dt);
        let u = unit(&mut rng, dg.max(1));
        let v = unit(&mut rng, dm.max(1));
        let sd = (1.0 + spec.hidden_noise * spec.hidden_noise).sqrt();
        let normal = Normal::new(0.0, sd).expect("positive sd");
        let rates = spec.effective_rates();
        let thresholds = [normal.inverse_cdf(1.0 - rates[0]), normal.inverse_cdf(1.0 - rates[1])];
        Ok(Self {
            spec: spec.clone(),
            w,
            u,
            v,
            thresholds,
        })
    }

    fn sign(g: usize) -> f64 {
        if g == 1 {
            1.0
        } else {
            -1.0
        }
    }

    /// One sample: `(features, y, g)`.
    fn draw(&self, rng: &mut Stream) -> (Vec<f64>, usize, usize) {
        let s = &self.spec;
        let [dt, dg, dm, dn] = s.blocks();
        let g = usize::from(rng.bernoulli(s.group_prevalence));
        let sg = Self::sign(g);
        let z: Vec<f64> = (0..dt).map(|_| rng.normal()).collect();
        let score: f64 = z.iter().zip(&self.w).map(|(a, b)| a * b).sum::<f64>() + s.hidden_noise * rng.normal();
        let mut y = usize::from(score > self.thresholds[g]);
        if rng.bernoulli(s.label_noise) {
            y = 1 - y;
        }
        let mut x = Vec::with_capacity(s.features);
        x.extend_from_slice(&z);
        for j in 0..dg {
            x.push(sg * self.u[j] * 2.0 + s.group_noise * rng.normal());
        }
        for j in 0..dm {
            x.push(s.beta * sg * self.v[j] * 2.0 + (1.0 - s.beta) * rng.normal());
        }
        for _ in 0..dn {
            x.push(rng.normal());
        }
        (x, y, g)
    }

    /// `P(y = 1 | x)` under the generative model.
    fn posterior_positive(&self, x: &[f64]) -> f64 {
        let s = &self.spec;
        let [dt, dg, dm, _] = s.blocks();
        // log-likelihood ratio of g = 1 vs g = 0 from the group and mixed blocks
        let mut llr = (s.group_prevalence / (1.0 - s.group_prevalence)).ln();
        if s.group_noise > 0.0 {
            let var = s.group_noise * s.group_noise;
            for j in 0..dg {
                let m = 2.0 * self.u[j];
                llr += 2.0 * m * x[dt + j] / var;
            }
        }
        if s.beta < 1.0 {
            let var = (1.0 - s.beta) * (1.0 - s.beta);
            for j in 0..dm {
                let m = 2.0 * s.beta * self.v[j];
                llr += 2.0 * m * x[dt + dg + j] / var;
            }
        } else {
            // noiseless mixed block reveals g exactly
            let proj: f64 = (0..dm).map(|j| self.v[j] * x[dt + dg + j]).sum();
            llr = if proj > 0.0 { f64::INFINITY } else { f64::NEG_INFINITY };
        }
        let p1 = 1.0 / (1.0 + (-llr).exp());
        let signal: f64 = x[..dt].iter().zip(&self.w).map(|(a, b)| a * b).sum();
        let p_clean = |t: f64| {
            if s.hidden_noise > 0.0 {
                let n = Normal::new(0.0, s.hidden_noise).expect("positive sd");
                1.0 - n.cdf(t - signal)
            } else if signal > t {
                1.0
            } else {
                0.0
            }
        };
        let eta = s.label_noise;
        let py = |t: f64| eta + (1.0 - 2.0 * eta) * p_clean(t);
        p1 * py(self.thresholds[1]) + (1.0 - p1) * py(self.thresholds[0])
    }
}

fn unit(rng: &mut Stream, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
    let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    v.into_iter().map(|a| a / norm).collect()
}

/// Labels the evaluator holds for computing group metrics. Trainers never see it.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSidecar {
    pub sd_train_groups: Vec<usize>,
    pub sd_val_groups: Vec<usize>,
    pub sd_test_groups: Vec<usize>,
    pub co_train_task_labels: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct GeneratedData {
    pub sd_train: LabeledDataset<TaskLabel>,
    pub sd_val: LabeledDataset<TaskLabel>,
    pub sd_test: LabeledDataset<TaskLabel>,
    pub co_train: LabeledDataset<SensitiveLabel>,
    pub eval_sidecar: EvalSidecar,
}

impl GeneratedData {
    /// True when no sample id is shared between the two parties' data.
    pub fn parties_disjoint(&self) -> bool {
        let sd: BTreeSet<u64> = self
            .sd_train
            .ids()
            .iter()
            .chain(self.sd_val.ids())
            .chain(self.sd_test.ids())
            .copied()
            .collect();
        self.co_train.ids().iter().all(|id| !sd.contains(id))
    }
}

/// Features, task labels, groups and ids of one party's draw.
type PartyDraw = (Tensor, Vec<usize>, Vec<usize>, Vec<u64>);

/// Generates the SD splits (70/15/15 of `n`, or `test_n` test rows) and the
/// CO training set (`n`).
pub fn generate(spec: &GenSpec) -> Result<GeneratedData> {
    let process = Process::new(spec)?;
    let n_train = spec.n * 70 / 100;
    let n_val = spec.n * 15 / 100;
    let n_test = spec.test_n.unwrap_or(spec.n - n_train - n_val);
    let n_sd = n_train + n_val + n_test;
    let draw_party = |name: &str, count: usize, offset: u64| -> Result<PartyDraw> {
        let mut rng = Stream::new(spec.seed, name);
        let mut data = Vec::with_capacity(count * spec.features);
        let mut ys = Vec::with_capacity(count);
        let mut gs = Vec::with_capacity(count);
        for _ in 0..count {
            let (x, y, g) = process.draw(&mut rng);
            data.extend(x);
            ys.push(y);
            gs.push(g);
        }
        let ids = (0..count as u64).map(|i| offset + i).collect();
        Ok((Tensor::new(count, spec.features, data)?, ys, gs, ids))
    };
    let (sx, sy, sg, sids) = draw_party("data.sd", n_sd, 0)?;
    let (cx, cy, cg, cids) = draw_party("data.co", spec.n, n_sd as u64)?;

    let sd_all = LabeledDataset::<TaskLabel>::new(sx, sy, sids)?;
    let idx: Vec<usize> = (0..n_sd).collect();
    let (tr, rest) = idx.split_at(n_train);
    let (va, te) = rest.split_at(n_val);

    Ok(GeneratedData {
        sd_train: sd_all.subset(tr),
        sd_val: sd_all.subset(va),
        sd_test: sd_all.subset(te),
        co_train: LabeledDataset::new(cx, cg, cids)?,
        eval_sidecar: EvalSidecar {
            sd_train_groups: tr.iter().map(|&i| sg[i]).collect(),
            sd_val_groups: va.iter().map(|&i| sg[i]).collect(),
            sd_test_groups: te.iter().map(|&i| sg[i]).collect(),
            co_train_task_labels: cy,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    /// Half-width of the 95% normal-approximation interval.
    pub ci95: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BayesReference {
    pub accuracy: Estimate,
    pub dp_diff: Estimate,
}

/// Monte-Carlo accuracy and demographic-parity gap of the Bayes-optimal
/// classifier `1[P(y = 1 | x) ≥ 0.5]` under the generative model.
pub fn bayes_reference(spec: &GenSpec, samples: usize) -> Result<BayesReference> {
    let process = Process::new(spec)?;
    let mut rng = Stream::new(spec.seed, "data.bayes");
    let mut correct = 0usize;
    let mut pos = [0usize; 2];
    let mut cnt = [0usize; 2];
    for _ in 0..samples {
        let (x, y, g) = process.draw(&mut rng);
        let pred = usize::from(process.posterior_positive(&x) >= 0.5);
        correct += usize::from(pred == y);
        pos[g] += pred;
        cnt[g] += 1;
    }
    let n = samples as f64;
    let acc = correct as f64 / n;
    let rate = |g: usize| pos[g] as f64 / cnt[g].max(1) as f64;
    let (r0, r1) = (rate(0), rate(1));
    let var_dp = r0 * (1.0 - r0) / cnt[0].max(1) as f64 + r1 * (1.0 - r1) / cnt[1].max(1) as f64;
    Ok(BayesReference {
        accuracy: Estimate {
            mean: acc,
            ci95: 1.96 * (acc * (1.0 - acc) / n).sqrt(),
        },
        dp_diff: Estimate {
            mean: (r0 - r1).abs(),
            ci95: 1.96 * var_dp.sqrt(),
        },
    })
}

fn feature_header(f: usize) -> Vec<String> {
    (0..f).map(|i| format!("feature_{i}")).collect()
}

/// Writes `feature_0..feature_{f−1},label`.
pub fn write_csv<K: LabelKind>(ds: &LabeledDataset<K>, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = feature_header(ds.features());
    header.push("label".into());
    w.write_record(&header)?;
    for i in 0..ds.len() {
        let mut rec: Vec<String> = ds.x().row(i).iter().map(|v| format!("{v:e}")).collect();
        rec.push(ds.labels()[i].to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a party-facing CSV. Rejects any column other than the features and
/// `label`, and names the violation when a column belongs to the other party.
pub fn read_csv<K: LabelKind>(path: &Path) -> Result<LabeledDataset<K>> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let cols: Vec<&str> = headers.iter().collect();
    for c in &cols {
        if K::FORBIDDEN_COLUMNS.contains(&c.to_ascii_lowercase().as_str()) {
            return Err(Error::config(format!(
                "{} dataset must not contain column '{c}' (belongs to the other party)",
                K::NAME
            )));
        }
    }
    let Some(label_pos) = cols.iter().position(|&c| c == "label") else {
        return Err(Error::config("csv has no 'label' column"));
    };
    if label_pos != cols.len() - 1 {
        return Err(Error::config("'label' must be the last column"));
    }
    let f = cols.len() - 1;
    if cols[..f] != feature_header(f).iter().map(String::as_str).collect::<Vec<_>>()[..] {
        return Err(Error::config(format!(
            "expected columns feature_0..feature_{}, got {:?}",
            f.saturating_sub(1),
            &cols[..f]
        )));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        for v in rec.iter().take(f) {
            data.push(
                v.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::config(format!("row {}: bad feature '{v}': {e}", line + 1)))?,
            );
        }
        let l = rec[f].trim();
        labels.push(match l {
            "0" => 0,
            "1" => 1,
            _ => return Err(Error::domain(format!("row {}: label '{l}' not in {{0,1}}", line + 1))),
        });
    }
    let n = labels.len();
    LabeledDataset::new(Tensor::new(n, f, data)?, labels, (0..n as u64).collect())
}
