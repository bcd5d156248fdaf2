//! Plain SGD with decoupled weight decay and a polynomial learning-rate
//! schedule.

use crate::tensor::{TensorError, Variable};

/// Schedule and update hyperparameters plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub power: f64,
    pub total_steps: u64,
    pub step_count: u64,
}

impl OptimizerState {
    pub fn new(
        base_lr: f64,
        weight_decay: f64,
        power: f64,
        total_steps: u64,
    ) -> Result<Self, TensorError> {
        if !(base_lr > 0.0) {
            return Err(TensorError::InvalidOptimizer(format!(
                "base_lr must be positive, got {base_lr}"
            )));
        }
        if !(power > 0.0) {
            return Err(TensorError::InvalidOptimizer(format!(
                "power must be positive, got {power}"
            )));
        }
        if weight_decay < 0.0 {
            return Err(TensorError::InvalidOptimizer(format!(
                "weight_decay must be non-negative, got {weight_decay}"
            )));
        }
        if total_steps == 0 {
            return Err(TensorError::InvalidOptimizer(
                "total_steps must be positive".into(),
            ));
        }
        Ok(OptimizerState {
            base_lr,
            weight_decay,
            power,
            total_steps,
            step_count: 0,
        })
    }
}

/// `base_lr * (1 - step/total)^power`.
pub fn poly_lr(state: &OptimizerState) -> f64 {
    let frac = 1.0 - state.step_count as f64 / state.total_steps as f64;
    state.base_lr * frac.powf(state.power)
}

/// One update: `p <- p - lr*grad - lr*weight_decay*p` for each trainable
/// parameter, gradients zeroed afterwards. Non-trainable variables are left
/// untouched, gradients included.
pub fn sgd_step(
    params: &mut [&mut Variable],
    state: &mut OptimizerState,
) -> Result<(), TensorError> {
    if state.step_count >= state.total_steps {
        return Err(TensorError::StepBeyondSchedule {
            step: state.step_count + 1,
            total: state.total_steps,
        });
    }
    let lr = poly_lr(state);
    let wd = state.weight_decay;
    for p in params.iter_mut() {
        if !p.trainable() {
            continue;
        }
        p.apply_update(|v, g| v - lr * g - lr * wd * v);
        p.zero_grad();
    }
    state.step_count += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn state(lr: f64, wd: f64, total: u64) -> OptimizerState {
        OptimizerState::new(lr, wd, 0.9, total).unwrap()
    }

    #[test]
    fn poly_lr_starts_at_base() {
        assert_eq!(poly_lr(&state(1e-3, 0.0, 100)), 1e-3);
    }

    #[test]
    fn poly_lr_ends_at_zero() {
        let mut s = state(1e-3, 0.0, 100);
        s.step_count = 100;
        assert_eq!(poly_lr(&s), 0.0);
    }

    #[test]
    fn poly_lr_halfway_matches_closed_form() {
        // 1e-3 * 0.5^0.9, frozen from a high-precision calculator.
        let mut s = state(1e-3, 0.0, 100);
        s.step_count = 50;
        assert!((poly_lr(&s) - 5.358867312681466e-4).abs() < 1e-18);
    }

    #[test]
    fn poly_lr_strictly_decreasing() {
        let mut s = state(2e-3, 0.0, 37);
        let mut prev = f64::INFINITY;
        for step in 0..=37 {
            s.step_count = step;
            let lr = poly_lr(&s);
            assert!(lr < prev, "step {step}: {lr} !< {prev}");
            prev = lr;
        }
    }

    #[test]
    fn sgd_zero_grad_zero_decay_is_identity() {
        let mut p = Variable::new("p", Tensor::scalar(1.0), true);
        let mut s = state(0.1, 0.0, 10);
        sgd_step(&mut [&mut p], &mut s).unwrap();
        assert_eq!(p.value().item(), 1.0);
        assert_eq!(s.step_count, 1);
    }

    #[test]
    fn sgd_applies_gradient() {
        let mut p = Variable::new("p", Tensor::scalar(1.0), true);
        p.accumulate_grad(&[2.0]);
        let mut s = state(0.1, 0.0, 10);
        sgd_step(&mut [&mut p], &mut s).unwrap();
        assert!((p.value().item() - 0.8).abs() < 1e-15);
        assert_eq!(p.grad().item(), 0.0, "grad zeroed after step");
    }

    #[test]
    fn sgd_decoupled_decay_only() {
        let mut p = Variable::new("p", Tensor::scalar(1.0), true);
        let mut s = state(0.1, 1e-4, 10);
        sgd_step(&mut [&mut p], &mut s).unwrap();
        assert!((p.value().item() - 0.99999).abs() < 1e-15);
    }

    #[test]
    fn sgd_skips_non_trainable_bitwise() {
        let init = Tensor::new(vec![2], vec![0.1 + 0.2, -1.75]).unwrap();
        let mut p = Variable::new("frozen", init.clone(), false);
        p.accumulate_grad(&[5.0, 5.0]);
        let mut s = state(0.5, 0.1, 4);
        sgd_step(&mut [&mut p], &mut s).unwrap();
        assert!(p.value().bit_eq(&init));
    }

    #[test]
    fn sgd_rejects_step_past_schedule() {
        let mut p = Variable::new("p", Tensor::scalar(1.0), true);
        let mut s = state(0.1, 0.0, 1);
        sgd_step(&mut [&mut p], &mut s).unwrap();
        assert!(matches!(
            sgd_step(&mut [&mut p], &mut s).unwrap_err(),
            TensorError::StepBeyondSchedule { .. }
        ));
    }
}
