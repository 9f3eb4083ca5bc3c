//! Empirical domain discrepancy measured by how well a small probe separates the streams.

use rand::seq::SliceRandom;

use crate::error::{invalid_arg, Result};
use crate::numerics::{relu, seeded_rng, sigmoid, xavier_with, Matrix, Param, SgdMomentum};

pub const MIN_PROBE_SAMPLES: usize = 10;
const PROBE_HIDDEN: usize = 16;
const PROBE_EPOCHS: usize = 200;
const PROBE_MINIBATCH: usize = 16;

/// `2 (1 - err)` with `err = mean_S 1[predicted target] + mean_T 1[predicted source]`.
/// The flipped probe is always available, so `err` is replaced by `min(err, 2 - err)`
/// and the value lies in `[0, 2]`.
pub fn h_divergence_from_predictions(source_says_source: &[bool], target_says_source: &[bool]) -> Result<f64> {
    if source_says_source.is_empty() || target_says_source.is_empty() {
        return Err(invalid_arg!("divergence needs predictions for both streams"));
    }
    let miss_s = source_says_source.iter().filter(|p| !**p).count() as f64 / source_says_source.len() as f64;
    let miss_t = target_says_source.iter().filter(|p| **p).count() as f64 / target_says_source.len() as f64;
    let err = miss_s + miss_t;
    Ok(2.0 * (1.0 - err.min(2.0 - err)))
}

struct Probe {
    hidden: Param,
    hidden_bias: Param,
    out: Param,
    out_bias: Param,
}

impl Probe {
    fn new(dim: usize, seed: u64) -> Result<Self> {
        let mut rng = seeded_rng(seed);
        Ok(Probe {
            hidden: Param::new(xavier_with(&mut rng, dim, PROBE_HIDDEN)?),
            hidden_bias: Param::zeros(PROBE_HIDDEN, 1),
            out: Param::new(xavier_with(&mut rng, PROBE_HIDDEN, 1)?),
            out_bias: Param::zeros(1, 1),
        })
    }

    fn hidden(&self, x: &[f64]) -> Vec<f64> {
        self.hidden
            .value
            .matvec(x)
            .expect("probe input dimension checked")
            .into_iter()
            .zip(self.hidden_bias.value.data())
            .map(|(v, b)| relu(v + b))
            .collect()
    }

    fn logit(&self, h: &[f64]) -> f64 {
        self.out.value.matvec(h).expect("probe hidden width")[0] + self.out_bias.value.data()[0]
    }

    fn says_source(&self, x: &[f64]) -> bool {
        self.logit(&self.hidden(x)) > 0.0
    }

    fn train(&mut self, data: &[(&[f64], f64)], seed: u64) -> Result<()> {
        let opt = SgdMomentum::new(0.05, 0.9)?;
        let mut rng = seeded_rng(seed);
        let mut order: Vec<usize> = (0..data.len()).collect();
        for _ in 0..PROBE_EPOCHS {
            order.shuffle(&mut rng);
            for chunk in order.chunks(PROBE_MINIBATCH) {
                let mut g_hidden = Matrix::zeros(self.hidden.value.rows(), self.hidden.value.cols());
                let mut g_hidden_bias = Matrix::zeros(PROBE_HIDDEN, 1);
                let mut g_out = Matrix::zeros(1, PROBE_HIDDEN);
                let mut g_out_bias = Matrix::zeros(1, 1);
                let scale = 1.0 / chunk.len() as f64;
                for &i in chunk {
                    let (x, y) = data[i];
                    let h = self.hidden(x);
                    let g_logit = scale * (sigmoid(self.logit(&h)) - y);
                    g_out_bias.data_mut()[0] += g_logit;
                    g_out.add_outer(g_logit, &[1.0], &h);
                    let g_pre: Vec<f64> = self
                        .out
                        .value
                        .row(0)
                        .iter()
                        .zip(&h)
                        .map(|(w, h)| if *h > 0.0 { g_logit * w } else { 0.0 })
                        .collect();
                    for (b, g) in g_hidden_bias.data_mut().iter_mut().zip(&g_pre) {
                        *b += g;
                    }
                    g_hidden.add_outer(1.0, &g_pre, x);
                }
                opt.step(&mut self.hidden, &g_hidden)?;
                opt.step(&mut self.hidden_bias, &g_hidden_bias)?;
                opt.step(&mut self.out, &g_out)?;
                opt.step(&mut self.out_bias, &g_out_bias)?;
            }
        }
        Ok(())
    }
}

/// Proxy divergence between two sets of representations: a fresh
/// single-hidden-layer probe is trained on one half of each set and scored on
/// the other half.
pub fn proxy_h_divergence(source: &[Vec<f64>], target: &[Vec<f64>], seed: u64) -> Result<f64> {
    if source.len() < MIN_PROBE_SAMPLES || target.len() < MIN_PROBE_SAMPLES {
        return Err(invalid_arg!(
            "divergence probe needs >= {MIN_PROBE_SAMPLES} samples per stream, got {} and {}",
            source.len(),
            target.len()
        ));
    }
    let dim = source[0].len();
    if dim == 0 || source.iter().chain(target).any(|x| x.len() != dim) {
        return Err(invalid_arg!("divergence inputs must share one non-zero dimension"));
    }
    let mut rng = seeded_rng(seed);
    let split = |set: &[Vec<f64>], rng: &mut _| {
        let mut idx: Vec<usize> = (0..set.len()).collect();
        idx.shuffle(rng);
        let half = set.len() / 2;
        (idx[..half].to_vec(), idx[half..].to_vec())
    };
    let (s_train, s_test) = split(source, &mut rng);
    let (t_train, t_test) = split(target, &mut rng);
    let train: Vec<(&[f64], f64)> = s_train
        .iter()
        .map(|&i| (source[i].as_slice(), 1.0))
        .chain(t_train.iter().map(|&i| (target[i].as_slice(), 0.0)))
        .collect();
    let mut probe = Probe::new(dim, seed.wrapping_add(1))?;
    probe.train(&train, seed.wrapping_add(2))?;
    let s_pred: Vec<bool> = s_test.iter().map(|&i| probe.says_source(&source[i])).collect();
    let t_pred: Vec<bool> = t_test.iter().map(|&i| probe.says_source(&target[i])).collect();
    h_divergence_from_predictions(&s_pred, &t_pred)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn cloud(n: usize, centre: f64, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = seeded_rng(seed);
        (0..n)
            .map(|_| (0..3).map(|_| centre + rng.random_range(-0.5..0.5)).collect())
            .collect()
    }

    #[test]
    fn constant_source_probe_gives_zero() {
        let d = h_divergence_from_predictions(&[true; 7], &[true; 5]).unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn perfect_and_inverted_probes_give_two() {
        assert_eq!(h_divergence_from_predictions(&[true; 4], &[false; 4]).unwrap(), 2.0);
        assert_eq!(h_divergence_from_predictions(&[false; 4], &[true; 4]).unwrap(), 2.0);
    }

    #[test]
    fn identical_distributions_are_near_zero() {
        let d = proxy_h_divergence(&cloud(200, 0.0, 1), &cloud(200, 0.0, 2), 3).unwrap();
        assert!(d <= 0.3, "divergence {d}");
    }

    #[test]
    fn disjoint_distributions_are_near_two() {
        let d = proxy_h_divergence(&cloud(100, 0.0, 1), &cloud(100, 5.0, 2), 3).unwrap();
        assert!(d >= 1.9, "divergence {d}");
    }

    #[test]
    fn too_few_samples() {
        assert!(proxy_h_divergence(&cloud(9, 0.0, 1), &cloud(50, 0.0, 2), 3).is_err());
    }
}
