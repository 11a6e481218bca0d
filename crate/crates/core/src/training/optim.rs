use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::models::ParamStore;

pub(crate) const BETA1: f64 = 0.9;
pub(crate) const BETA2: f64 = 0.999;
pub(crate) const EPS: f64 = 1e-8;

/// First and second moment estimates of AdamW, one per parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamMoments {
    pub m: ParamStore,
    pub v: ParamStore,
    /// Running maximum of `v` when AMSGrad is enabled.
    pub v_max: Option<ParamStore>,
}

impl AdamMoments {
    pub fn new(params: &ParamStore, amsgrad: bool) -> Self {
        Self { m: params.zeros_like(), v: params.zeros_like(), v_max: amsgrad.then(|| params.zeros_like()) }
    }

    /// One AdamW step with decoupled weight decay; `t` is the 1-based step.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor], lr: f64, weight_decay: f64, t: u64) {
        let bc1 = 1.0 - BETA1.powf(t as f64);
        let bc2_sqrt = (1.0 - BETA2.powf(t as f64)).sqrt();
        let step_size = lr / bc1;
        let mut v_max = self.v_max.as_mut().map(|s| s.iter_mut().map(|(_, t)| t).collect::<Vec<_>>());
        for (i, ((((_, p), (_, m)), (_, v)), g)) in
            params.iter_mut().zip(self.m.iter_mut()).zip(self.v.iter_mut()).zip(grads).enumerate()
        {
            let (p, m, v, g) = (p.data_mut(), m.data_mut(), v.data_mut(), g.data());
            let mut vm = v_max.as_mut().map(|vs| vs[i].data_mut());
            for k in 0..p.len() {
                if weight_decay != 0.0 {
                    p[k] *= 1.0 - lr * weight_decay;
                }
                m[k] = BETA1 * m[k] + (1.0 - BETA1) * g[k];
                v[k] = BETA2 * v[k] + (1.0 - BETA2) * g[k] * g[k];
                let second = match vm.as_mut() {
                    Some(vm) => {
                        vm[k] = vm[k].max(v[k]);
                        vm[k]
                    }
                    None => v[k],
                };
                let denom = second.sqrt() / bc2_sqrt + EPS;
                p[k] -= step_size * m[k] / denom;
            }
        }
    }
}

/// Scales all gradients so that their joint norm is at most `max_norm`
/// and returns the norm before scaling.
pub fn clip_grad_norm(groups: &mut [Vec<Tensor>], max_norm: Option<f64>) -> f64 {
    let norm = groups.iter().flatten().map(|g| g.norm_sq()).sum::<f64>().sqrt();
    if let Some(max) = max_norm {
        let coef = max / (norm + 1e-6);
        if max.is_finite() && coef < 1.0 {
            for g in groups.iter_mut().flatten() {
                g.data_mut().iter_mut().for_each(|x| *x *= coef);
            }
        }
    }
    norm
}

/// `shadow <- d shadow + (1 - d) params` with `d = min(decay, (1+t)/(10+t))`.
pub(crate) fn ema_update(shadow: &mut ParamStore, params: &ParamStore, decay: f64, t: u64) {
    let d = decay.min((1.0 + t as f64) / (10.0 + t as f64));
    for ((_, s), (_, p)) in shadow.iter_mut().zip(params.iter()) {
        if d == 0.0 {
            s.data_mut().copy_from_slice(p.data());
        } else {
            for (s, &p) in s.data_mut().iter_mut().zip(p.data()) {
                *s = d * *s + (1.0 - d) * p;
            }
        }
    }
}
