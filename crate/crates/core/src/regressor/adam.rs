use super::{Gradients, NetworkWeights, TrainConfig};
use crate::error::{Error, Result};

/// First and second moment estimates, one entry per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(num_params: usize) -> Self {
        AdamState {
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            step: 0,
        }
    }
}

/// One bias-corrected ADAM update. Weights and state are left untouched when
/// the gradient has a non-finite entry.
pub fn adam_step(
    w: &mut NetworkWeights,
    grads: &Gradients,
    state: &mut AdamState,
    config: &TrainConfig,
) -> Result<()> {
    let n = w.params.len();
    if grads.0.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: grads.0.len(),
        });
    }
    if let Some((index, &value)) = grads.0.iter().enumerate().find(|(_, g)| !g.is_finite()) {
        return Err(Error::NonFiniteGradient { index, value });
    }
    state.step += 1;
    let (b1, b2) = (config.adam_beta1, config.adam_beta2);
    let t = state.step as i32;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for i in 0..n {
        let g = grads.0[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        w.params[i] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.adam_epsilon);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regressor::NetworkSpec;

    fn setup() -> (NetworkWeights, TrainConfig) {
        let spec = NetworkSpec::new(32, 32, [2, 2, 2, 2, 2], 2).unwrap();
        (NetworkWeights::init(&spec, 0), TrainConfig::default())
    }

    #[test]
    fn zero_gradient_keeps_weights_and_decays_moments() {
        let (mut w, cfg) = setup();
        let before = w.clone();
        let mut state = AdamState::new(w.params.len());
        state.m.fill(1.0);
        state.v.fill(1.0);
        state.step = 10;
        // Moments are nonzero, so a zero gradient still moves the weights;
        // from a fresh state it does not.
        let mut fresh = AdamState::new(w.params.len());
        adam_step(&mut w, &Gradients(vec![0.0; before.params.len()]), &mut fresh, &cfg).unwrap();
        assert_eq!(w, before);
        adam_step(&mut w, &Gradients(vec![0.0; before.params.len()]), &mut state, &cfg).unwrap();
        assert!(state.m.iter().all(|&m| (m - cfg.adam_beta1).abs() < 1e-15));
        assert!(state.v.iter().all(|&v| (v - cfg.adam_beta2).abs() < 1e-15));
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let (mut w, cfg) = setup();
        let before = w.clone();
        let n = w.params.len();
        let g: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 0.3 } else { -2.0 }).collect();
        let mut state = AdamState::new(n);
        adam_step(&mut w, &Gradients(g.clone()), &mut state, &cfg).unwrap();
        for i in 0..n {
            let delta = w.params[i] - before.params[i];
            assert!((delta + cfg.learning_rate * g[i].signum()).abs() < 1e-6);
        }
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let (mut w, cfg) = setup();
        let n = w.params.len();
        let mut g = vec![0.1; n];
        g[7] = f64::NAN;
        let mut state = AdamState::new(n);
        let before = w.clone();
        assert!(matches!(
            adam_step(&mut w, &Gradients(g), &mut state, &cfg),
            Err(Error::NonFiniteGradient { index: 7, .. })
        ));
        assert_eq!(w, before);
        assert_eq!(state.step, 0);
    }

    #[test]
    fn identical_runs_identical_trajectories() {
        let run = || {
            let (mut w, cfg) = setup();
            let n = w.params.len();
            let mut state = AdamState::new(n);
            for k in 0..5 {
                let g: Vec<f64> = (0..n).map(|i| ((i * 7 + k) % 11) as f64 - 5.0).collect();
                adam_step(&mut w, &Gradients(g), &mut state, &cfg).unwrap();
            }
            w
        };
        assert_eq!(run(), run());
    }
}
