//! Logistic-regression probes on frozen hidden states.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::LabeledSample;
use crate::error::{Error, Result};
use crate::eval::auroc;
use crate::model::Model;

const PROBE_ITERS: usize = 400;
const PROBE_LR: f64 = 2.0;
const PROBE_L2: f64 = 1e-3;
/// Added to the covariance diagonal, relative to the mean feature variance.
const PROBE_RIDGE: f64 = 1e-4;

/// Response-token hidden states of one layer with their labels.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TokenStates {
    pub d: usize,
    /// `n × d`, row-major.
    pub vectors: Vec<f64>,
    pub labels: Vec<u8>,
    /// Fact id of the sample each row came from.
    pub groups: Vec<u32>,
}

impl TokenStates {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.d..(i + 1) * self.d]
    }

    fn select(&self, keep: impl Fn(usize) -> bool) -> TokenStates {
        let mut out = TokenStates { d: self.d, ..Default::default() };
        for i in (0..self.len()).filter(|&i| keep(i)) {
            out.vectors.extend_from_slice(self.row(i));
            out.labels.push(self.labels[i]);
            out.groups.push(self.groups[i]);
        }
        out
    }

    /// Even fact ids train, odd fact ids are held out. Paired prompts share
    /// a fact id, so both members land on the same side.
    pub fn split(&self) -> (TokenStates, TokenStates) {
        (self.select(|i| self.groups[i] % 2 == 0), self.select(|i| self.groups[i] % 2 == 1))
    }
}

/// One `(hidden state, label)` row per response token of every sample.
pub fn extract_states(model: &Model<f32>, samples: &[LabeledSample], layer: usize) -> Result<TokenStates> {
    Ok(extract_all_layers(model, samples, &[layer])?.pop().expect("one layer"))
}

fn extract_all_layers(model: &Model<f32>, samples: &[LabeledSample], layers: &[usize]) -> Result<Vec<TokenStates>> {
    let n = model.config.n_layers;
    if let Some(&layer) = layers.iter().find(|&&l| l > n) {
        return Err(Error::LayerOutOfRange { layer, n_layers: n });
    }
    let d = model.config.d_model;
    let mut out: Vec<TokenStates> = layers.iter().map(|_| TokenStates { d, ..Default::default() }).collect();
    for s in samples {
        let hs = model.hidden_states(&s.token_ids)?;
        for (ts, &l) in out.iter_mut().zip(layers) {
            for (k, t) in (s.prompt_len..s.token_ids.len()).enumerate() {
                ts.vectors.extend(hs.at(l, t).iter().map(|&x| x as f64));
                ts.labels.push(s.labels[k]);
                ts.groups.push(s.fact_id);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub layer: usize,
}

impl LinearProbe {
    /// Pre-sigmoid score.
    pub fn score(&self, x: &[f64]) -> f64 {
        self.bias + self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
    }

    pub fn scores(&self, states: &TokenStates) -> Vec<f64> {
        (0..states.len()).map(|i| self.score(states.row(i))).collect()
    }
}

/// Full-batch gradient descent on the L2-penalized logistic loss over
/// whitened features. The returned weights act on raw features.
pub fn fit_probe(states: &TokenStates, layer: usize, seed: u64) -> Result<LinearProbe> {
    let (n, d) = (states.len(), states.d);
    if !states.labels.contains(&0) || !states.labels.contains(&1) {
        return Err(Error::SingleClass);
    }
    let x = DMatrix::from_row_slice(n, d, &states.vectors);
    let mean = x.row_mean();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let mut cov = centered.tr_mul(&centered) / n as f64;
    let ridge = PROBE_RIDGE * (cov.trace() / d as f64).max(f64::MIN_POSITIVE);
    for j in 0..d {
        cov[(j, j)] += ridge;
    }
    let chol = Cholesky::new(cov).ok_or_else(|| Error::Config("probe covariance is not positive definite".into()))?;
    let l = chol.l();
    // z = L⁻¹ (x − μ), one column per token.
    let z = l.solve_lower_triangular(&centered.transpose()).expect("nonsingular factor");

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = DVector::from_fn(d, |_, _| rng.random_range(-0.01..0.01));
    let mut b = 0.0;
    let y = DVector::from_fn(n, |i, _| states.labels[i] as f64);
    for _ in 0..PROBE_ITERS {
        let s = z.tr_mul(&w).add_scalar(b);
        let r = s.map(crate::tensor::sigmoid) - &y;
        let gw = &z * &r / n as f64 + &w * PROBE_L2;
        w -= gw * PROBE_LR;
        b -= PROBE_LR * r.sum() / n as f64;
    }
    let raw = l.transpose().solve_upper_triangular(&w).expect("nonsingular factor");
    let bias = b - raw.dot(&mean.transpose());
    Ok(LinearProbe { weights: raw.iter().copied().collect(), bias, layer })
}

/// Held-out AUROC of a probe trained on the even-fact half of `states`.
pub fn probe_auroc(states: &TokenStates, layer: usize, seed: u64) -> Result<f64> {
    let (train, held) = states.split();
    let probe = fit_probe(&train, layer, seed)?;
    auroc(&probe.scores(&held), &held.labels)
}

/// Held-out probe AUROC at every hidden layer, embeddings included.
pub fn layer_curve(model: &Model<f32>, samples: &[LabeledSample], seed: u64) -> Result<Vec<f64>> {
    let layers: Vec<usize> = (0..=model.config.n_layers).collect();
    extract_all_layers(model, samples, &layers)?
        .iter()
        .zip(&layers)
        .map(|(s, &l)| probe_auroc(s, l, seed))
        .collect()
}

/// Middle-layer probe AUROC for the base, detection-head-tuned and
/// text-tuned models, on one shared token split.
pub fn compare_procedures(
    base: &Model<f32>,
    det_head: &Model<f32>,
    text_ft: &Model<f32>,
    samples: &[LabeledSample],
    seed: u64,
) -> Result<[f64; 3]> {
    for other in [det_head, text_ft] {
        if !base.config.same_backbone(&other.config) {
            return Err(Error::ConfigMismatch("checkpoints do not share an architecture".into()));
        }
    }
    let layer = base.config.mid_layer();
    let mut out = [0.0; 3];
    for (o, m) in out.iter_mut().zip([base, det_head, text_ft]) {
        *o = probe_auroc(&extract_states(m, samples, layer)?, layer, seed)?;
    }
    Ok(out)
}

/// Two-column `layer<TAB>auroc` table.
pub fn curve_table(curve: &[f64]) -> String {
    let mut s = String::from("layer\tauroc\n");
    for (l, a) in curve.iter().enumerate() {
        s.push_str(&format!("{l}\t{a:.6}\n"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn states(rows: &[(Vec<f64>, u8, u32)]) -> TokenStates {
        TokenStates {
            d: rows[0].0.len(),
            vectors: rows.iter().flat_map(|r| r.0.clone()).collect(),
            labels: rows.iter().map(|r| r.1).collect(),
            groups: rows.iter().map(|r| r.2).collect(),
        }
    }

    #[test]
    fn separable_pair() {
        let s = states(&[(vec![1.0, 0.0], 1, 0), (vec![-1.0, 0.5], 0, 0)]);
        let p = fit_probe(&s, 0, 1).unwrap();
        assert!(p.score(s.row(0)) > 0.0 && p.score(s.row(1)) < 0.0);
    }

    #[test]
    fn single_class_rejected() {
        let s = states(&[(vec![1.0], 1, 0), (vec![2.0], 1, 0)]);
        assert!(matches!(fit_probe(&s, 0, 0), Err(Error::SingleClass)));
    }

    #[test]
    fn random_labels_give_chance_auroc() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows: Vec<(Vec<f64>, u8, u32)> =
            (0..2000).map(|i| ((0..8).map(|_| rng.random_range(-1.0..1.0)).collect(), rng.random_range(0..2), i)).collect();
        let a = probe_auroc(&states(&rows), 0, 3).unwrap();
        assert!((a - 0.5).abs() < 0.05, "{a}");
    }

    #[test]
    fn deterministic() {
        let rows: Vec<(Vec<f64>, u8, u32)> = (0..20).map(|i| (vec![i as f64, (i * 7 % 5) as f64], (i % 3 == 0) as u8, i)).collect();
        let s = states(&rows);
        assert_eq!(fit_probe(&s, 0, 9).unwrap(), fit_probe(&s, 0, 9).unwrap());
    }
}
