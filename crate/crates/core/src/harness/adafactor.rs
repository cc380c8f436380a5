//! Adafactor with factored second moments, relative step sizes and an
//! inverse-square-root schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

const EPS: f64 = 1e-30;
const DECAY_EXPONENT: f64 = 0.8;
/// Upper bound on the RMS of one update before scaling by the learning rate.
const CLIP_THRESHOLD: f64 = 1.0;
/// Floor on the parameter RMS that sets each tensor's relative step.
const PARAM_SCALE_FLOOR: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub scale: f64,
    pub warmup: u64,
}

impl Schedule {
    /// `scale · min(1/√step, step/warmup^1.5)` for 1-based `step`.
    pub fn lr(&self, step: u64) -> f64 {
        let s = step.max(1) as f64;
        let w = self.warmup.max(1) as f64;
        self.scale * (1.0 / s.sqrt()).min(s / w.powf(1.5))
    }
}

#[derive(Clone, Debug)]
enum Moment {
    /// Row and column means of squared gradients for a `rows × cols` view.
    Factored { row: Vec<f64>, col: Vec<f64> },
    Full(Vec<f64>),
}

#[derive(Clone, Debug)]
pub struct OptimState {
    moments: Vec<(Vec<usize>, Moment)>,
    pub step: u64,
    /// Updates dropped because a gradient was not finite.
    pub skipped: u64,
    pub schedule: Schedule,
}

fn rms_of<T: Float>(x: &[T]) -> f64 {
    (x.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>() / x.len().max(1) as f64).sqrt()
}

fn view(shape: &[usize]) -> Option<(usize, usize)> {
    (shape.len() >= 2).then(|| (shape[0], shape[1..].iter().product()))
}

impl OptimState {
    pub fn new<T: Float>(params: &[Tensor<T>], schedule: Schedule) -> Self {
        let moments = params
            .iter()
            .map(|p| {
                let m = match view(p.shape()) {
                    Some((r, c)) => Moment::Factored { row: vec![0.0; r], col: vec![0.0; c] },
                    None => Moment::Full(vec![0.0; p.numel()]),
                };
                (p.shape().to_vec(), m)
            })
            .collect();
        OptimState { moments, step: 0, skipped: 0, schedule }
    }

    /// All accumulator entries, for inspection.
    pub fn accumulators(&self) -> impl Iterator<Item = f64> + '_ {
        self.moments.iter().flat_map(|(_, m)| match m {
            Moment::Factored { row, col } => row.iter().chain(col.iter()).copied().collect::<Vec<_>>(),
            Moment::Full(v) => v.clone(),
        })
    }

    /// Applies one update; returns `false` when skipped for a non-finite gradient.
    /// Parameters without a gradient entry are left unchanged.
    pub fn update<T: Float>(&mut self, params: &mut [Tensor<T>], grads: &BTreeMap<usize, Tensor<T>>) -> Result<bool> {
        if params.len() != self.moments.len() {
            return Err(Error::dim(format!("{} params vs {} optimizer slots", params.len(), self.moments.len())));
        }
        for (&i, g) in grads {
            let (shape, _) = self.moments.get(i).ok_or_else(|| Error::dim(format!("gradient for unknown slot {}", i)))?;
            if g.shape() != shape.as_slice() || params[i].shape() != shape.as_slice() {
                return Err(Error::dim(format!("slot {} expects {:?}, got {:?}", i, shape, g.shape())));
            }
        }
        if grads.values().any(|g| !g.is_finite()) {
            self.skipped += 1;
            return Ok(false);
        }
        self.step += 1;
        let t = self.step as f64;
        let beta = 1.0 - t.powf(-DECAY_EXPONENT);
        let lr = self.schedule.lr(self.step);
        for (&i, g) in grads {
            let g: Vec<f64> = g.data().iter().map(|v| v.as_f64()).collect();
            let mut u = vec![0.0; g.len()];
            match &mut self.moments[i].1 {
                Moment::Factored { row, col } => {
                    let (r, c) = (row.len(), col.len());
                    let mut row_sum = vec![0.0; r];
                    let mut col_sum = vec![0.0; c];
                    for a in 0..r {
                        for b in 0..c {
                            let sq = g[a * c + b] * g[a * c + b] + EPS;
                            row_sum[a] += sq;
                            col_sum[b] += sq;
                        }
                    }
                    for (x, s) in row.iter_mut().zip(row_sum) {
                        *x = beta * *x + (1.0 - beta) * s / c as f64;
                    }
                    for (x, s) in col.iter_mut().zip(col_sum) {
                        *x = beta * *x + (1.0 - beta) * s / r as f64;
                    }
                    let row_mean = row.iter().sum::<f64>() / r as f64;
                    for a in 0..r {
                        for b in 0..c {
                            let v = row[a] * col[b] / row_mean;
                            u[a * c + b] = g[a * c + b] / v.sqrt();
                        }
                    }
                }
                Moment::Full(v) => {
                    for ((x, &gi), ui) in v.iter_mut().zip(&g).zip(u.iter_mut()) {
                        *x = beta * *x + (1.0 - beta) * (gi * gi + EPS);
                        *ui = gi / x.sqrt();
                    }
                }
            }
            let rms = (u.iter().map(|x| x * x).sum::<f64>() / u.len().max(1) as f64).sqrt();
            let p_rms = rms_of(params[i].data());
            let step = lr * p_rms.max(PARAM_SCALE_FLOOR) / (rms / CLIP_THRESHOLD).max(1.0);
            for (p, ui) in params[i].data_mut().iter_mut().zip(u) {
                *p = T::lit(p.as_f64() - step * ui);
            }
        }
        Ok(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grads_of<T: Float>(params: &[Tensor<T>], f: impl Fn(f64) -> f64) -> BTreeMap<usize, Tensor<T>> {
        params.iter().enumerate().map(|(i, p)| (i, p.map(|v| T::lit(f(v.as_f64()))))).collect()
    }

    #[test]
    fn schedule_warms_up_then_decays() {
        let s = Schedule { scale: 1.0, warmup: 100 };
        assert!((s.lr(100) - 0.1).abs() < 1e-12);
        assert!(s.lr(50) < s.lr(100) && s.lr(400) < s.lr(100));
        assert!((s.lr(400) - 0.05).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = vec![Tensor::<f64>::full(vec![3, 4], 0.7), Tensor::full(vec![5], -1.0)];
        let before = p.clone();
        let mut st = OptimState::new(&p, Schedule { scale: 1.0, warmup: 10 });
        let g = grads_of(&p, |_| 0.0);
        assert!(st.update(&mut p, &g).unwrap());
        assert_eq!(p, before);
    }

    #[test]
    fn non_finite_gradients_skip_the_step() {
        let mut p = vec![Tensor::<f64>::full(vec![2, 2], 1.0)];
        let before = p.clone();
        let mut st = OptimState::new(&p, Schedule { scale: 1.0, warmup: 10 });
        let g = grads_of(&p, |_| f64::NAN);
        assert!(!st.update(&mut p, &g).unwrap());
        assert_eq!((st.step, st.skipped), (0, 1));
        assert_eq!(p, before);
        let bad: BTreeMap<usize, Tensor<f64>> = [(0, Tensor::zeros(vec![4]))].into();
        assert!(matches!(st.update(&mut p, &bad), Err(Error::Dimension(_))));
    }

    #[test]
    fn scalar_parameter_matches_hand_simulation() {
        let sched = Schedule { scale: 0.5, warmup: 20 };
        let mut p = vec![Tensor::<f64>::full(vec![1], 3.0)];
        let mut st = OptimState::new(&p, sched);
        let (mut w, mut v) = (3.0f64, 0.0f64);
        for t in 1..=200u64 {
            let g = 2.0 * w;
            let beta = 1.0 - (t as f64).powf(-0.8);
            v = beta * v + (1.0 - beta) * (g * g + 1e-30);
            let u = g / v.sqrt();
            let lr = 0.5 * (1.0 / (t as f64).sqrt()).min(t as f64 / 20f64.powf(1.5));
            w -= lr * w.abs().max(1e-3) * u / u.abs().max(1.0);
            let g = grads_of(&p, |x| 2.0 * x);
            st.update(&mut p, &g).unwrap();
            assert!((p[0].data()[0] - w).abs() < 1e-12, "step {t}");
        }
    }

    #[test]
    fn quadratic_bowl_descends_monotonically_after_warmup() {
        let warmup = 10;
        let init: Vec<f64> = (0..24).map(|i| 40.0 + i as f64).collect();
        let mut p = vec![Tensor::<f64>::from_f64(vec![4, 6], &init).unwrap()];
        let mut st = OptimState::new(&p, Schedule { scale: 0.1, warmup });
        let norm = |p: &[Tensor<f64>]| p[0].data().iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut prev = norm(&p);
        let start = prev;
        for t in 1..=500u64 {
            let g = grads_of(&p, |x| 2.0 * x);
            st.update(&mut p, &g).unwrap();
            let n = norm(&p);
            if t > warmup {
                assert!(n < prev, "step {t}: {n} >= {prev}");
            }
            prev = n;
            assert!(st.accumulators().all(|a| a >= 0.0));
        }
        assert!(prev < start);
    }
}
