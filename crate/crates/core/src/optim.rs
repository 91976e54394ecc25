//! Adam with one moment buffer per parameter group.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{Model, ModelGrad, ParamGroup};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn zeros(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n] }
    }
}

/// Bias-corrected Adam update of one flat buffer; `step` is 1-based.
pub fn adam_update(params: &mut [f64], grads: &[f64], moments: &mut Moments, lr: f64, step: u64) -> Result<()> {
    if params.len() != grads.len() || params.len() != moments.m.len() || params.len() != moments.v.len() {
        return Err(Error::Contract(format!(
            "optimizer shape mismatch: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            moments.m.len()
        )));
    }
    if step == 0 {
        return Err(Error::Contract("optimizer step index is 1-based".into()));
    }
    let c1 = 1.0 - BETA1.powi(step as i32);
    let c2 = 1.0 - BETA2.powi(step as i32);
    for i in 0..params.len() {
        let g = grads[i];
        let m = BETA1 * moments.m[i] + (1.0 - BETA1) * g;
        let v = BETA2 * moments.v[i] + (1.0 - BETA2) * g * g;
        moments.m[i] = m;
        moments.v[i] = v;
        params[i] -= lr * (m / c1) / ((v / c2).sqrt() + EPS);
    }
    Ok(())
}

/// Per-group Adam state for a [`Model`].
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub step: u64,
    pub groups: BTreeMap<&'static str, Moments>,
}

impl Adam {
    pub fn new(model: &Model) -> Self {
        let groups = ParamGroup::ALL.iter().map(|&g| (g.name(), Moments::zeros(model.group(g).len()))).collect();
        Self { step: 0, groups }
    }

    pub fn moments(&self, g: ParamGroup) -> &Moments {
        &self.groups[g.name()]
    }

    /// One update of the listed groups; groups with a zero learning rate are left untouched.
    pub fn step(&mut self, model: &mut Model, grad: &ModelGrad, groups: &[ParamGroup], lr: impl Fn(ParamGroup) -> f64) -> Result<()> {
        self.step += 1;
        for &g in groups {
            let rate = lr(g);
            let moments = self.groups.get_mut(g.name()).expect("every group has moments");
            if moments.m.len() != model.group(g).len() {
                return Err(Error::Contract(format!("optimizer state for {} is stale", g.name())));
            }
            if rate == 0.0 {
                continue;
            }
            adam_update(model.group_mut(g), grad.group(g), moments, rate, self.step)?;
        }
        Ok(())
    }

    /// Reorders row-structured moments after node membership changed. New rows copy
    /// nothing: a clone starts with zero moments even though its parameters are copied.
    pub fn remap_rows(&mut self, g: ParamGroup, row_len: usize, source_rows: &[usize], kept: usize) {
        let old = self.groups.get(g.name()).cloned().unwrap_or_default();
        let mut fresh = Moments::zeros(source_rows.len() * row_len);
        for (new_row, &src) in source_rows.iter().enumerate().take(kept) {
            let (a, b) = (src * row_len, new_row * row_len);
            fresh.m[b..b + row_len].copy_from_slice(&old.m[a..a + row_len]);
            fresh.v[b..b + row_len].copy_from_slice(&old.v[a..a + row_len]);
        }
        self.groups.insert(g.name(), fresh);
    }
}

/// Log-linear interpolation from `init` to `last` as `progress` goes 0 → 1.
pub fn exp_decay(init: f64, last: f64, progress: f64) -> f64 {
    let t = progress.clamp(0.0, 1.0);
    (init.ln() * (1.0 - t) + last.ln() * t).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![1.0, -2.0, 3.0];
        let mut m = Moments::zeros(3);
        for s in 1..5 {
            adam_update(&mut p, &[0.0; 3], &mut m, 0.1, s).unwrap();
        }
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient() {
        // m̂ = g and v̂ = g², so the step is lr·g/(|g| + ε)
        for g in [3.0, -0.25, 1e-3] {
            let mut p = vec![0.0];
            let mut m = Moments::zeros(1);
            adam_update(&mut p, &[g], &mut m, 0.01, 1).unwrap();
            let expect = -0.01 * g / (g.abs() + EPS);
            assert_relative_eq!(p[0], expect, max_relative = 1e-12);
        }
    }

    #[test]
    fn repeated_gradient_converges_to_lr() {
        let mut p = vec![0.0];
        let mut m = Moments::zeros(1);
        let mut prev = 0.0;
        let mut last_step = 0.0;
        for s in 1..=3000 {
            adam_update(&mut p, &[0.5], &mut m, 1e-3, s).unwrap();
            last_step = prev - p[0];
            prev = p[0];
        }
        assert_relative_eq!(last_step, 1e-3 * 0.5 / (0.5 + EPS), max_relative = 1e-9);
    }

    #[test]
    fn shape_mismatch_is_error() {
        let mut p = vec![0.0; 2];
        assert!(adam_update(&mut p, &[0.0], &mut Moments::zeros(2), 0.1, 1).is_err());
    }

    #[test]
    fn remap_zeroes_clone_rows() {
        let mut a = Adam { step: 3, groups: BTreeMap::new() };
        a.groups.insert("node_code", Moments { m: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], v: vec![1.0; 6] });
        // keep rows 2 and 0, then clone row 2
        a.remap_rows(ParamGroup::NodeCode, 2, &[2, 0, 2], 2);
        let m = &a.groups["node_code"];
        assert_eq!(m.m, vec![5.0, 6.0, 1.0, 2.0, 0.0, 0.0]);
        assert_eq!(m.v, vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn decay_endpoints() {
        assert_relative_eq!(exp_decay(1.6e-4, 1.6e-6, 0.0), 1.6e-4, max_relative = 1e-12);
        assert_relative_eq!(exp_decay(1.6e-4, 1.6e-6, 1.0), 1.6e-6, max_relative = 1e-12);
        assert_relative_eq!(exp_decay(1.6e-4, 1.6e-6, 0.5), 1.6e-5, max_relative = 1e-12);
    }
}
