//! Step learning-rate schedule and Nesterov SGD.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::Parameter;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSchedule {
    pub base_lr: f64,
    pub decay_factor: f64,
    pub decay_epochs: Vec<usize>,
    pub total_epochs: usize,
    pub weight_decay: f64,
    pub momentum: f64,
    pub nesterov: bool,
}

impl Default for TrainingSchedule {
    /// 240 epochs, lr 0.05 decayed tenfold at 150, 180 and 210.
    fn default() -> Self {
        Self {
            base_lr: 5e-2,
            decay_factor: 0.1,
            decay_epochs: vec![150, 180, 210],
            total_epochs: 240,
            weight_decay: 5e-4,
            momentum: 0.9,
            nesterov: true,
        }
    }
}

impl TrainingSchedule {
    /// Short schedule for desk-scale runs: 30 epochs, decays at 15, 22, 27.
    pub fn desk() -> Self {
        Self { decay_epochs: vec![15, 22, 27], total_epochs: 30, ..Self::default() }
    }

    /// The desk schedule stretched to `total` epochs.
    pub fn desk_with_epochs(total: usize) -> Self {
        Self::desk().with_epochs(total)
    }

    /// Keeps the decay points at the same fractions of a different length.
    pub fn with_epochs(self, total: usize) -> Self {
        let mut decay: Vec<usize> = self
            .decay_epochs
            .iter()
            .map(|&e| e * total / self.total_epochs.max(1))
            .filter(|&e| e > 0 && e < total)
            .collect();
        decay.dedup();
        Self { decay_epochs: decay, total_epochs: total, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Parameter(format!("base lr must be positive, got {}", self.base_lr)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Parameter(format!("decay factor must lie in (0, 1], got {}", self.decay_factor)));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::Parameter("momentum must lie in [0, 1) and weight decay be >= 0".into()));
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Parameter(format!("decay epochs {:?} are not strictly increasing", self.decay_epochs)));
        }
        if self.decay_epochs.last().is_some_and(|&e| e >= self.total_epochs) {
            return Err(Error::Parameter(format!(
                "decay epochs {:?} must precede the last epoch {}",
                self.decay_epochs, self.total_epochs
            )));
        }
        Ok(())
    }

    /// `base_lr · decay^k` with `k` the number of decay epochs `<= epoch`.
    ///
    /// When the decay factor is the reciprocal of an integer `r` the rate is
    /// computed as `base_lr / r^k`, which gives the correctly rounded value
    /// (0.05 → 0.005 → 0.0005 → 5e-5) instead of accumulating error.
    pub fn lr_at_epoch(&self, epoch: usize) -> Result<f64> {
        if epoch >= self.total_epochs {
            return Err(Error::Usage(format!("epoch {epoch} outside 0..{}", self.total_epochs)));
        }
        let k = self.decay_epochs.iter().filter(|&&e| e <= epoch).count() as i32;
        let r = 1.0 / self.decay_factor;
        Ok(if (r - r.round()).abs() < 1e-9 {
            self.base_lr / r.round().powi(k)
        } else {
            self.base_lr * self.decay_factor.powi(k)
        })
    }
}

/// Momentum buffers keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SgdState {
    velocity: BTreeMap<String, Vec<f64>>,
}

impl SgdState {
    pub fn velocity(&self, name: &str) -> Option<&[f64]> {
        self.velocity.get(name).map(Vec::as_slice)
    }
}

/// One SGD update of every parameter in `params` from its stored gradient.
///
/// `g ← g + wd·w`, `v ← μv + g`, then `w ← w − lr·(g + μv)` with Nesterov
/// momentum or `w ← w − lr·v` without.
pub fn sgd_step(
    params: &mut [&mut Parameter],
    schedule: &TrainingSchedule,
    epoch: usize,
    state: &mut SgdState,
) -> Result<()> {
    if params.is_empty() {
        return Err(Error::Usage("sgd_step called without parameters".into()));
    }
    let lr = schedule.lr_at_epoch(epoch)?;
    let (mu, wd) = (schedule.momentum, schedule.weight_decay);
    let grads = params
        .iter()
        .map(|p| p.tensor.grad().ok_or_else(|| Error::Usage(format!("parameter {} has no gradient", p.name))))
        .collect::<Result<Vec<_>>>()?;
    for (p, mut g) in params.iter_mut().zip(grads) {
        let w = p.tensor.data();
        let v = state.velocity.entry(p.name.clone()).or_insert_with(|| vec![0.0; w.len()]);
        let mut next = Vec::with_capacity(w.len());
        for i in 0..w.len() {
            g[i] += wd * w[i];
            v[i] = mu * v[i] + g[i];
            let step = if schedule.nesterov { g[i] + mu * v[i] } else { v[i] };
            next.push(w[i] - lr * step);
        }
        p.assign(next)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{self, Tensor};

    #[test]
    fn full_schedule_rates() {
        let s = TrainingSchedule::default();
        assert_eq!(s.lr_at_epoch(0).unwrap(), 0.05);
        assert_eq!(s.lr_at_epoch(149).unwrap(), 0.05);
        assert_eq!(s.lr_at_epoch(150).unwrap(), 0.005);
        assert_eq!(s.lr_at_epoch(180).unwrap(), 5e-4);
        assert_eq!(s.lr_at_epoch(210).unwrap(), 5e-5);
        assert_eq!(s.lr_at_epoch(239).unwrap(), 5e-5);
        assert!(matches!(s.lr_at_epoch(240), Err(Error::Usage(_))));
    }

    #[test]
    fn rates_never_increase() {
        for s in [TrainingSchedule::default(), TrainingSchedule::desk(), TrainingSchedule::desk_with_epochs(12)] {
            s.validate().unwrap();
            let lrs: Vec<f64> = (0..s.total_epochs).map(|e| s.lr_at_epoch(e).unwrap()).collect();
            assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        }
        assert_eq!(TrainingSchedule::desk_with_epochs(12).decay_epochs, vec![6, 8, 10]);
    }

    #[test]
    fn rejects_bad_decay_epochs() {
        let s = TrainingSchedule { decay_epochs: vec![5, 5], ..TrainingSchedule::desk() };
        assert!(s.validate().is_err());
        let s = TrainingSchedule { decay_epochs: vec![30], ..TrainingSchedule::desk() };
        assert!(s.validate().is_err());
    }

    fn param(w: &[f64]) -> Parameter {
        Parameter::new("w".into(), w.to_vec(), &[w.len()]).unwrap()
    }

    fn set_grad(p: &Parameter, f: impl Fn(&Tensor) -> Tensor) {
        p.tensor.zero_grad();
        f(&p.tensor).backward().unwrap();
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut p = param(&[1.5, -2.0]);
        let sched = TrainingSchedule { weight_decay: 0.0, ..TrainingSchedule::desk() };
        set_grad(&p, |w| tensor::scale(&tensor::sum(w), 0.0));
        let mut st = SgdState::default();
        sgd_step(&mut [&mut p], &sched, 0, &mut st).unwrap();
        assert_eq!(p.tensor.data(), &[1.5, -2.0]);
    }

    #[test]
    fn plain_descent_without_momentum() {
        let mut p = param(&[1.0, 2.0]);
        let sched = TrainingSchedule { weight_decay: 0.0, momentum: 0.0, ..TrainingSchedule::desk() };
        set_grad(&p, |w| tensor::sum(&tensor::mul(w, w).unwrap()));
        sgd_step(&mut [&mut p], &sched, 0, &mut SgdState::default()).unwrap();
        assert_eq!(p.tensor.data(), &[1.0 - 0.05 * 2.0, 2.0 - 0.05 * 4.0]);
    }

    #[test]
    fn two_nesterov_steps_on_quadratic() {
        // f(w) = 1.5 w², g = 3w, with weight decay 0.01 and μ = 0.9
        let sched = TrainingSchedule { base_lr: 0.1, weight_decay: 0.01, ..TrainingSchedule::desk() };
        let mut p = param(&[2.0]);
        let mut st = SgdState::default();
        for _ in 0..2 {
            set_grad(&p, |w| tensor::scale(&tensor::sum(&tensor::mul(w, w).unwrap()), 1.5));
            sgd_step(&mut [&mut p], &sched, 0, &mut st).unwrap();
        }
        // by hand: g1 = 6 + 0.02 = 6.02, v1 = 6.02, w1 = 2 - 0.1(6.02 + 5.418) = 0.8562
        // g2 = 2.5686 + 0.008562 = 2.577162, v2 = 5.418 + 2.577162 = 7.995162
        // w2 = 0.8562 - 0.1(2.577162 + 7.1956458) = -0.12108078
        assert!((p.tensor.data()[0] - (-0.121_080_78)).abs() < 1e-12);
        assert!((st.velocity("w").unwrap()[0] - 7.995_162).abs() < 1e-12);
    }

    #[test]
    fn missing_gradient_is_usage_error() {
        let mut p = param(&[1.0]);
        let err = sgd_step(&mut [&mut p], &TrainingSchedule::desk(), 0, &mut SgdState::default());
        assert!(matches!(err, Err(Error::Usage(_))));
        assert!(sgd_step(&mut [], &TrainingSchedule::desk(), 0, &mut SgdState::default()).is_err());
    }
}
