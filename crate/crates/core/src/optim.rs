//! Adam with bias correction over a named parameter store.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::checkpoint::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// First and second moment buffers for `name`, if it has been updated.
    pub fn moments(&self, name: &str) -> Option<(&[f64], &[f64])> {
        self.moments.get(name).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }
}

/// One Adam update of every parameter in `params`.
///
/// Every parameter needs a same-shaped gradient; a missing one is an error
/// naming the parameter and leaves `params` and `state` untouched.
pub fn adam_step(params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, state: &mut AdamState) -> Result<()> {
    for (name, value) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Training(format!("missing gradient for parameter `{name}`")))?;
        if g.shape() != value.shape() {
            return Err(Error::Training(format!(
                "gradient for `{name}` has shape {:?}, parameter has {:?}",
                g.shape(),
                value.shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let (b1, b2) = (state.beta1, state.beta2);
    let bc1 = 1.0 - b1.powf(t);
    let bc2 = 1.0 - b2.powf(t);
    for (name, value) in params.iter_mut() {
        let g = grads[name].data();
        let (m, v) = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
        for (((p, &gi), mi), vi) in value.data_mut().iter_mut().zip(g).zip(m).zip(v) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *p -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(value: f64) -> ParamStore {
        let mut s = ParamStore::default();
        s.insert("w", Tensor::scalar(value)).unwrap();
        s
    }

    fn grad(value: f64) -> BTreeMap<String, Tensor> {
        BTreeMap::from([("w".to_string(), Tensor::scalar(value))])
    }

    /// Scalar Adam written out longhand.
    fn reference(p0: f64, gs: &[f64], lr: f64) -> f64 {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut p, mut m, mut v) = (p0, 0.0, 0.0);
        for (i, g) in gs.iter().enumerate() {
            let t = (i + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            p -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        }
        p
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = store(0.5);
        let mut st = AdamState::new(0.1);
        adam_step(&mut p, &grad(0.0), &mut st).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[0.5]);
        assert_eq!(st.step(), 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = store(0.0);
        let mut st = AdamState::new(0.1);
        adam_step(&mut p, &grad(1.0), &mut st).unwrap();
        let moved = p.get("w").unwrap().data()[0];
        assert!((moved + 0.1).abs() < 1e-8, "{moved}");
    }

    #[test]
    fn two_steps_match_longhand_trace() {
        let mut p = store(0.3);
        let mut st = AdamState::new(0.05);
        adam_step(&mut p, &grad(0.7), &mut st).unwrap();
        adam_step(&mut p, &grad(0.7), &mut st).unwrap();
        let expected = reference(0.3, &[0.7, 0.7], 0.05);
        assert_eq!(p.get("w").unwrap().data()[0], expected);
        let (m, v) = st.moments("w").unwrap();
        assert!((m[0] - 0.133).abs() < 1e-12);
        assert!((v[0] - 0.001 * 0.49 * (1.0 + 0.999)).abs() < 1e-15);
    }

    #[test]
    fn missing_gradient_names_the_parameter() {
        let mut p = store(0.0);
        p.insert("other", Tensor::scalar(1.0)).unwrap();
        let mut st = AdamState::new(0.1);
        let err = adam_step(&mut p, &grad(1.0), &mut st).unwrap_err();
        assert!(err.to_string().contains("other"));
        assert_eq!(st.step(), 0);
    }
}
