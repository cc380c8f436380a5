use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::Model;
use crate::config::{Family, ModelConfig};
use crate::error::{Error, Result};
use crate::layers::Ctx;
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub n_enc: usize,
    pub n_dec: usize,
    /// Entries probed per parameter tensor.
    pub probes: usize,
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions { seed: 0, n_enc: 6, n_dec: 5, probes: 3, step: 1e-5, tolerance: 1e-4 }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub family: Family,
    pub seed: u64,
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_component: String,
    pub checked: usize,
    /// Probes discarded because the loss is not smooth within the step.
    pub skipped: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Keeps near-zero derivatives from inflating the relative error.
const REL_FLOOR: f64 = 1e-4;
/// Central differences at `h` and `h/10` disagreeing beyond this mark a kink.
const KINK_TOL: f64 = 1e-3;
const MAX_ATTEMPTS: usize = 8;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// A configuration small enough for exhaustive finite differences.
pub fn tiny_config(family: Family) -> ModelConfig {
    let mut c = ModelConfig::new(family, 2, 32, 16, 8, 2, 23);
    c.n_experts = 2;
    c.n_recur = 2;
    c.k_mos = 2;
    c.n_enc_fixed = 6;
    c.kernel_width = 3;
    c.max_position = 16;
    c.embed_factor = 8;
    c
}

fn total_loss(model: &Model<f64>, params: &[Tensor<f64>], enc: &[usize], dec: &[usize], tgt: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let mut cx = Ctx::new(&mut g, params);
    let loss = model.arch.loss(&mut cx, enc, dec, tgt)?;
    let v = g.value(loss.total).item();
    if !v.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {}", v)));
    }
    Ok(v)
}

/// Tape gradients of the training loss against central differences on a
/// random subset of parameter entries.
pub fn gradcheck(config: &ModelConfig, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let model = Model::<f64>::build(config, opts.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9c4e_c0de);
    let n_enc = if config.family == Family::Mixer { config.n_enc_fixed } else { opts.n_enc };
    let v = config.vocab;
    let enc: Vec<usize> = (0..n_enc).map(|_| rng.gen_range(0..v)).collect();
    let dec: Vec<usize> = (0..opts.n_dec).map(|_| rng.gen_range(0..v)).collect();
    let tgt: Vec<usize> = (0..opts.n_dec).map(|_| rng.gen_range(0..v)).collect();

    let analytic = {
        let mut g = Graph::new();
        let mut cx = Ctx::new(&mut g, &model.params);
        let loss = model.arch.loss(&mut cx, &enc, &dec, &tgt)?;
        let value = g.value(loss.total).item();
        if !value.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {}", value)));
        }
        g.backward(loss.total)?.into_params()
    };

    let h = opts.step;
    let mut params = model.params.clone();
    let mut fd = |i: usize, j: usize, h: f64| -> Result<f64> {
        let orig = params[i].data()[j];
        params[i].data_mut()[j] = orig + h;
        let plus = total_loss(&model, &params, &enc, &dec, &tgt)?;
        params[i].data_mut()[j] = orig - h;
        let minus = total_loss(&model, &params, &enc, &dec, &tgt)?;
        params[i].data_mut()[j] = orig;
        Ok((plus - minus) / (2.0 * h))
    };

    let mut report = GradcheckReport {
        family: config.family,
        seed: opts.seed,
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_component: String::new(),
        checked: 0,
        skipped: 0,
        tolerance: opts.tolerance,
        passed: false,
    };
    for (i, spec) in model.arch.layout.specs().iter().enumerate() {
        let numel = spec.numel() as usize;
        let grad = analytic.get(&i);
        let mut done = 0;
        for _ in 0..opts.probes * MAX_ATTEMPTS {
            if done == opts.probes.min(numel) {
                break;
            }
            let j = rng.gen_range(0..numel);
            let coarse = fd(i, j, h)?;
            let fine = fd(i, j, h / 10.0)?;
            if rel_err(coarse, fine) > KINK_TOL {
                report.skipped += 1;
                continue;
            }
            let a = grad.map_or(0.0, |g| g.data()[j]);
            let err = rel_err(a, coarse);
            report.checked += 1;
            done += 1;
            if err > report.max_rel_err || report.worst_param.is_empty() {
                report.max_rel_err = err.max(report.max_rel_err);
                report.worst_param = format!("{}[{}]", spec.name, j);
                report.worst_component = spec.component.to_string();
            }
        }
    }
    report.passed = report.checked > 0 && report.max_rel_err < opts.tolerance;
    Ok(report)
}
