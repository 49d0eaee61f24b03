//! Supervised cross-entropy, the conventional KD term, and the composite
//! objective `γ·CE + L_CKT + θ·L_Distill`.

use crate::contrastive::{l_ckt, CktWeights, ContrastiveState, CriticParams, SiteLoss};
use crate::error::{shape_err, Error, Result};
use crate::model::ModuleOutputs;
use crate::projection::HeadSet;
use crate::tensor::{self, Tensor};

pub const DEFAULT_RHO: f64 = 4.0;

/// Mean negative log-likelihood of `labels` under `softmax(logits)`.
pub fn cross_entropy(labels: &[usize], logits: &Tensor) -> Result<Tensor> {
    if logits.rank() != 2 || logits.shape()[0] != labels.len() {
        return Err(shape_err!("{} labels for logits of shape {:?}", labels.len(), logits.shape()));
    }
    let c = logits.shape()[1];
    if let Some(bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::Usage(format!("label {bad} out of range for {c} classes")));
    }
    let logp = tensor::log_softmax(logits, 1.0)?;
    Ok(tensor::neg(&tensor::mean(&tensor::gather_cols(&logp, labels)?)))
}

/// `ρ² · mean_b KL(softmax(T_b/ρ) ‖ softmax(S_b/ρ))`. The teacher side is
/// treated as a constant.
pub fn kd_kl(teacher_logits: &Tensor, student_logits: &Tensor, rho: f64) -> Result<Tensor> {
    if teacher_logits.shape() != student_logits.shape() {
        return Err(shape_err!(
            "teacher logits {:?} vs student logits {:?}",
            teacher_logits.shape(),
            student_logits.shape()
        ));
    }
    let log_p = tensor::log_softmax(&teacher_logits.detach(), rho)?;
    let p = Tensor::new(log_p.data().iter().map(|v| v.exp()).collect(), log_p.shape())?;
    let log_q = tensor::log_softmax(student_logits, rho)?;
    let kl = tensor::sum(&tensor::mul(&p, &tensor::sub(&log_p, &log_q)?)?);
    let b = student_logits.shape()[0] as f64;
    Ok(tensor::scale(&kl, rho * rho / b))
}

/// A third loss term borrowed from another transfer method.
pub trait DistillTerm: Send + Sync {
    fn name(&self) -> &'static str;
    fn loss(&self, teacher: &ModuleOutputs, student: &ModuleOutputs) -> Result<Tensor>;
}

/// Conventional knowledge distillation on softened logits.
#[derive(Debug, Clone, Copy)]
pub struct KdTerm {
    pub rho: f64,
}

impl DistillTerm for KdTerm {
    fn name(&self) -> &'static str {
        "kd"
    }

    fn loss(&self, teacher: &ModuleOutputs, student: &ModuleOutputs) -> Result<Tensor> {
        kd_kl(&teacher.logits, &student.logits, self.rho)
    }
}

/// Method names accepted by [`distill_term`].
pub const DISTILL_METHODS: &[&str] = &["kd"];

/// Looks up a distillation term by method name.
pub fn distill_term(name: &str, rho: f64) -> Result<Box<dyn DistillTerm>> {
    match name {
        "kd" => Ok(Box::new(KdTerm { rho })),
        other => Err(Error::Config(format!(
            "unknown distillation method `{other}` (available: {})",
            DISTILL_METHODS.join(", ")
        ))),
    }
}

/// Scalar weights and temperatures of the composite objective.
#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    /// 1 with labels, 0 without.
    pub gamma: f64,
    pub theta: f64,
    /// KD temperature.
    pub rho: f64,
    pub ckt: CktWeights,
    pub critic: CriticParams,
    pub distill_method: String,
}

impl LossConfig {
    /// Model-compression defaults with the given critic.
    pub fn compression(critic: CriticParams) -> Self {
        Self {
            gamma: 1.0,
            theta: 0.0,
            rho: DEFAULT_RHO,
            ckt: CktWeights::default(),
            critic,
            distill_method: "kd".into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gamma != 0.0 && self.gamma != 1.0 {
            return Err(Error::Parameter(format!("gamma must be 0 or 1, got {}", self.gamma)));
        }
        if !(self.theta >= 0.0 && self.theta.is_finite()) {
            return Err(Error::Parameter(format!("theta must be finite and >= 0, got {}", self.theta)));
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::Parameter(format!("rho must be positive, got {}", self.rho)));
        }
        self.ckt.validate()?;
        self.critic.validate()?;
        distill_term(&self.distill_method, self.rho).map(|_| ())
    }
}

/// Values of every loss component for one step.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    /// Differentiable total.
    pub total: Tensor,
    pub ce: f64,
    /// Already weighted by α1/α2.
    pub ckt: f64,
    /// Unweighted; the total uses `θ · distill`.
    pub distill: f64,
    /// Unweighted per-module contrastive losses.
    pub per_module: Vec<f64>,
    /// Unweighted penultimate contrastive loss.
    pub penultimate: f64,
    /// Site losses with their embeddings, for the bank update.
    pub sites: Vec<SiteLoss>,
}

impl LossBreakdown {
    pub fn total_value(&self) -> f64 {
        self.total.item().unwrap_or(f64::NAN)
    }
}

/// Inputs to [`total_loss`] that come from the current batch.
pub struct StepInputs<'a> {
    /// Required when γ = 1.
    pub labels: Option<&'a [usize]>,
    pub sample_indices: &'a [usize],
    pub student: &'a ModuleOutputs,
    pub teacher: &'a ModuleOutputs,
}

/// Assembles the composite objective.
///
/// Terms with a zero weight are computed for reporting but left out of the
/// differentiable total. Cross-entropy is skipped entirely when γ = 0.
pub fn total_loss(
    inputs: &StepInputs<'_>,
    heads: &HeadSet,
    state: &mut ContrastiveState,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    let StepInputs { labels, sample_indices, student, teacher } = *inputs;
    if teacher.module_reps.len() != student.module_reps.len() {
        return Err(Error::Spec(format!(
            "teacher has {} modules, student has {}",
            teacher.module_reps.len(),
            student.module_reps.len()
        )));
    }

    let mut terms: Vec<Tensor> = Vec::new();

    let mut ce = 0.0;
    if cfg.gamma != 0.0 {
        let labels = labels.ok_or_else(|| Error::Usage("gamma = 1 needs labels".into()))?;
        let ce_t = cross_entropy(labels, &student.logits)?;
        ce = ce_t.item()?;
        terms.push(tensor::scale(&ce_t, cfg.gamma));
    }

    let mut sites = state.l_mckt(&teacher.module_reps, &student.module_reps, heads, sample_indices)?;
    let pen = state.l_pckt(&teacher.penultimate, &student.penultimate, heads, sample_indices)?;
    let module_losses: Vec<Tensor> = sites.iter().map(|s| s.loss.clone()).collect();
    let ckt_t = l_ckt(&module_losses, &pen.loss, &cfg.ckt)?;
    let ckt = ckt_t.item()?;
    if ckt_t.requires_grad() {
        terms.push(ckt_t);
    }
    let per_module = module_losses.iter().map(Tensor::item).collect::<Result<Vec<_>>>()?;
    let penultimate = pen.loss.item()?;
    sites.push(pen);

    let distill_t = distill_term(&cfg.distill_method, cfg.rho)?.loss(teacher, student)?;
    let distill = distill_t.item()?;
    if cfg.theta != 0.0 {
        terms.push(tensor::scale(&distill_t, cfg.theta));
    }

    let mut it = terms.into_iter();
    let mut total = it.next().unwrap_or_else(|| Tensor::scalar(0.0));
    for t in it {
        total = tensor::add(&total, &t)?;
    }
    Ok(LossBreakdown { total, ce, ckt, distill, per_module, penultimate, sites })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(data: &[f64], shape: &[usize]) -> Tensor {
        Tensor::new(data.to_vec(), shape).unwrap()
    }

    #[test]
    fn ce_perfect_and_uniform() {
        let l = cross_entropy(&[1, 0], &t(&[-50., 50., 50., -50.], &[2, 2])).unwrap();
        assert!(l.item().unwrap() < 1e-6);
        let l = cross_entropy(&[3], &t(&[0.7; 4], &[1, 4])).unwrap();
        assert!((l.item().unwrap() - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn ce_high_precision_oracle() {
        // logits and reference value from 50-digit mpmath
        let logits = [
            0.3, -1.2, 2.5, 0.0, 1.1, //
            -0.4, 0.9, -2.2, 3.3, 0.5, //
            1.7, 1.7, -0.6, 0.2, -3.0,
        ];
        let l = cross_entropy(&[2, 3, 0], &t(&logits, &[3, 5])).unwrap().item().unwrap();
        assert!((l - 0.464_683_314_232_646_4).abs() < 1e-10, "{l}");
    }

    #[test]
    fn ce_rejects_bad_labels() {
        let logits = t(&[0.0; 6], &[2, 3]);
        assert!(matches!(cross_entropy(&[0, 3], &logits), Err(Error::Usage(_))));
        assert!(matches!(cross_entropy(&[0], &logits), Err(Error::Shape(_))));
    }

    #[test]
    fn kd_identical_is_zero() {
        let x = t(&[0.3, -2.0, 1.0, 4.0, 0.0, -1.0], &[2, 3]);
        assert_eq!(kd_kl(&x, &x, 4.0).unwrap().item().unwrap(), 0.0);
    }

    #[test]
    fn kd_two_class_value() {
        let teacher = t(&[2f64.ln(), 0.0], &[1, 2]);
        let student = t(&[0.0, 0.0], &[1, 2]);
        let v = kd_kl(&teacher, &student, 1.0).unwrap().item().unwrap();
        let expected = (2.0 / 3.0) * (4f64 / 3.0).ln() + (1.0 / 3.0) * (2f64 / 3.0).ln();
        assert!((v - expected).abs() < 1e-15);
        assert!((v - 0.056_633).abs() < 1e-6);
        // ρ² scaling
        let v4 = kd_kl(&teacher, &student, 2.0).unwrap().item().unwrap();
        let p = [2f64.sqrt() / (1.0 + 2f64.sqrt()), 1.0 / (1.0 + 2f64.sqrt())];
        let kl = p[0] * (p[0] / 0.5).ln() + p[1] * (p[1] / 0.5).ln();
        assert!((v4 - 4.0 * kl).abs() < 1e-14);
    }

    #[test]
    fn kd_nonnegative_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10_000 {
            let a: Vec<f64> = (0..5).map(|_| rng.random_range(-10.0..10.0)).collect();
            let b: Vec<f64> = (0..5).map(|_| rng.random_range(-10.0..10.0)).collect();
            let rho = rng.random_range(0.5..8.0);
            let v = kd_kl(&t(&a, &[1, 5]), &t(&b, &[1, 5]), rho).unwrap().item().unwrap();
            assert!(v >= 0.0, "{v}");
        }
    }

    #[test]
    fn kd_gradient_only_on_student() {
        let teacher = Tensor::param(vec![1.0, -1.0, 0.5], &[1, 3]).unwrap();
        let student = Tensor::param(vec![0.2, 0.1, -0.3], &[1, 3]).unwrap();
        kd_kl(&teacher, &student, 2.0).unwrap().backward().unwrap();
        assert!(teacher.grad().is_none());
        assert!(student.grad().is_some());
    }

    #[test]
    fn config_validation() {
        let critic = CriticParams::new(0.1, 4, 10).unwrap();
        let mut cfg = LossConfig::compression(critic);
        assert!(cfg.validate().is_ok());
        cfg.gamma = 0.5;
        assert!(cfg.validate().is_err());
        cfg.gamma = 0.0;
        cfg.rho = 0.0;
        assert!(cfg.validate().is_err());
        cfg.rho = 4.0;
        cfg.distill_method = "fitnet".into();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
