//! Self-checks behind the `gradcheck` and `oracle-check` subcommands.
//!
//! The gradient suite compares reverse-mode gradients with central finite
//! differences for every differentiable operation and for the full training
//! loss with all terms switched on. The oracle suite recomputes the module
//! and penultimate contrastive losses by direct summation over explicit
//! loops and compares them with the library.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::contrastive::{
    estimate_log_z, nce_loss, nce_loss_normalized, ContrastiveState, CriticParams, Side,
};
use crate::error::Result;
use crate::losses::{cross_entropy, kd_kl, total_loss, LossConfig, StepInputs};
use crate::model::{Model, ModelSpec};
use crate::projection::{make_heads, pool_and_flatten, EmbeddingBatch, HeadKind, HeadSet};
use crate::tensor::{self, numeric_gradient, Tensor};

pub const GRAD_TOLERANCE: f64 = 1e-5;
pub const ORACLE_TOLERANCE: f64 = 1e-10;
const STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    /// Largest error observed.
    pub error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.error < self.tolerance
    }

    pub fn line(&self) -> String {
        format!(
            "{} {:<40} error {:.3e} (tolerance {:.0e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.error,
            self.tolerance
        )
    }
}

/// `max_i |a_i - n_i| / max(max|a|, max|n|, 1e-12)`: error relative to the
/// scale of the gradient, so entries that are zero by construction do not
/// turn rounding noise into large ratios.
pub fn scaled_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-12);
    analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()))
        / scale
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Values in `±[0.2, 1]`, away from the ReLU kink.
fn away_from_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.2..1.0);
            if rng.random_bool(0.5) { v } else { -v }
        })
        .collect()
}

fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, d: usize) -> Vec<f64> {
    (0..rows)
        .flat_map(|_| {
            let v = random_vec(rng, d, -1.0, 1.0);
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(move |x| x / n)
        })
        .collect()
}

/// Reduces a tensor to a scalar with fixed random weights, so every output
/// entry contributes to the checked gradient.
fn weighted_sum(t: &Tensor, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::new(random_vec(&mut rng, t.numel(), -1.0, 1.0), t.shape())?;
    Ok(tensor::sum(&tensor::mul(t, &w)?))
}

fn check<F>(name: &str, f: F, point: &Tensor) -> Result<CheckResult>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let leaf = Tensor::param(point.to_vec(), point.shape())?;
    f(&leaf)?.backward()?;
    let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; leaf.numel()]);
    let numeric = numeric_gradient(&f, point, STEP)?;
    Ok(CheckResult { name: name.into(), error: scaled_error(&analytic, &numeric), tolerance: GRAD_TOLERANCE })
}

fn t(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
    Tensor::new(data, shape)
}

/// Finite-difference checks of every differentiable tensor operation and
/// loss, one result per (operation, argument).
pub fn op_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let ws = seed.wrapping_add(1);

    let img = t(random_vec(&mut rng, 2 * 2 * 5 * 5, -1.0, 1.0), &[2, 2, 5, 5])?;
    let kernel = t(random_vec(&mut rng, 3 * 2 * 3 * 3, -0.5, 0.5), &[3, 2, 3, 3])?;
    let bias = t(random_vec(&mut rng, 3, -0.5, 0.5), &[3])?;
    for stride in [1, 2] {
        out.push(check(
            &format!("conv2d input (stride {stride})"),
            |x| weighted_sum(&tensor::conv2d(x, &kernel, Some(&bias), stride, 1)?, ws),
            &img,
        )?);
        out.push(check(
            &format!("conv2d weight (stride {stride})"),
            |w| weighted_sum(&tensor::conv2d(&img, w, Some(&bias), stride, 1)?, ws),
            &kernel,
        )?);
        out.push(check(
            &format!("conv2d bias (stride {stride})"),
            |b| weighted_sum(&tensor::conv2d(&img, &kernel, Some(b), stride, 1)?, ws),
            &bias,
        )?);
    }
    out.push(check("global_avg_pool", |x| weighted_sum(&tensor::global_avg_pool(x)?, ws), &img)?);
    out.push(check("reshape", |x| weighted_sum(&tensor::reshape(x, &[4, 25])?, ws), &img)?);

    let x = t(random_vec(&mut rng, 3 * 4, -1.0, 1.0), &[3, 4])?;
    let w = t(random_vec(&mut rng, 4 * 5, -1.0, 1.0), &[4, 5])?;
    let b = t(random_vec(&mut rng, 5, -1.0, 1.0), &[5])?;
    out.push(check("affine input", |v| weighted_sum(&tensor::affine(v, &w, Some(&b))?, ws), &x)?);
    out.push(check("affine weight", |v| weighted_sum(&tensor::affine(&x, v, Some(&b))?, ws), &w)?);
    out.push(check("affine bias", |v| weighted_sum(&tensor::affine(&x, &w, Some(v))?, ws), &b)?);

    let kinky = t(away_from_zero(&mut rng, 12), &[3, 4])?;
    out.push(check("relu", |v| weighted_sum(&tensor::relu(v), ws), &kinky)?);
    for temp in [1.0, 4.0] {
        out.push(check(&format!("log_softmax (temperature {temp})"), |v| weighted_sum(&tensor::log_softmax(v, temp)?, ws), &x)?);
    }
    out.push(check("l2_normalize", |v| weighted_sum(&tensor::l2_normalize(v)?, ws), &x)?);
    out.push(check("sum", |v| Ok(tensor::scale(&tensor::sum(v), 1.7)), &x)?);
    out.push(check("mean", |v| Ok(tensor::scale(&tensor::mean(v), 1.7)), &x)?);
    out.push(check("scale", |v| weighted_sum(&tensor::scale(v, -2.5), ws), &x)?);
    out.push(check("add_scalar", |v| weighted_sum(&tensor::add_scalar(v, 0.3), ws), &x)?);
    out.push(check("neg", |v| weighted_sum(&tensor::neg(v), ws), &x)?);
    let y = t(random_vec(&mut rng, 12, -1.0, 1.0), &[3, 4])?;
    out.push(check("add", |v| weighted_sum(&tensor::add(v, &y)?, ws), &x)?);
    out.push(check("sub (left)", |v| weighted_sum(&tensor::sub(v, &y)?, ws), &x)?);
    out.push(check("sub (right)", |v| weighted_sum(&tensor::sub(&y, v)?, ws), &x)?);
    out.push(check("mul", |v| weighted_sum(&tensor::mul(v, &y)?, ws), &x)?);
    out.push(check("mul (square)", |v| weighted_sum(&tensor::mul(v, v)?, ws), &x)?);
    let wide = t(random_vec(&mut rng, 12, -8.0, 8.0), &[3, 4])?;
    out.push(check("softplus", |v| weighted_sum(&tensor::softplus(v), ws), &wide)?);

    let anchor = t(random_vec(&mut rng, 2 * 3, -1.0, 1.0), &[2, 3])?;
    let others = t(random_vec(&mut rng, 2 * 4 * 3, -1.0, 1.0), &[2, 4, 3])?;
    out.push(check("batched_dot anchor", |v| weighted_sum(&tensor::batched_dot(v, &others)?, ws), &anchor)?);
    out.push(check("batched_dot others", |v| weighted_sum(&tensor::batched_dot(&anchor, v)?, ws), &others)?);
    out.push(check("concat_cols", |v| weighted_sum(&tensor::concat_cols(&[v, &y, v])?, ws), &x)?);
    out.push(check("gather_cols", |v| weighted_sum(&tensor::gather_cols(v, &[3, 0, 3])?, ws), &x)?);
    out.push(check("index_rows", |v| weighted_sum(&tensor::index_rows(v, &[2, 0, 2, 1])?, ws), &x)?);

    let logits = t(random_vec(&mut rng, 3 * 4, -2.0, 2.0), &[3, 4])?;
    out.push(check("cross_entropy", |v| cross_entropy(&[1, 3, 0], v), &logits)?);
    let teacher_logits = t(random_vec(&mut rng, 12, -3.0, 3.0), &[3, 4])?;
    out.push(check("kd_kl student logits", |v| kd_kl(&teacher_logits, v, 4.0), &logits)?);

    let params = CriticParams::new(0.2, 4, 10)?;
    let emb = |v: &Tensor, idx: &[usize]| EmbeddingBatch::new(tensor::l2_normalize(v).unwrap(), idx.to_vec()).unwrap();
    let raw_a = t(random_vec(&mut rng, 2 * 8, -1.0, 1.0), &[2, 8])?;
    let raw_p = t(random_vec(&mut rng, 2 * 8, -1.0, 1.0), &[2, 8])?;
    let negs = t(unit_rows(&mut rng, 2 * 4, 8), &[2, 4, 8])?;
    out.push(check("nce_loss anchor", |v| nce_loss(&emb(v, &[0, 1]), &emb(&raw_p, &[0, 1]), &negs, &params), &raw_a)?);
    out.push(check("nce_loss positive", |v| nce_loss(&emb(&raw_a, &[0, 1]), &emb(v, &[0, 1]), &negs, &params), &raw_p)?);
    out.push(check("nce_loss negatives", |v| nce_loss(&emb(&raw_a, &[0, 1]), &emb(&raw_p, &[0, 1]), v, &params), &negs)?);
    let log_z = estimate_log_z(&emb(&raw_a, &[0, 1]), &emb(&raw_p, &[0, 1]), &negs, &params)?;
    out.push(check(
        "nce_loss normalized anchor",
        |v| nce_loss_normalized(&emb(v, &[0, 1]), &emb(&raw_p, &[0, 1]), &negs, &params, log_z),
        &raw_a,
    )?);

    for kind in [HeadKind::Linear, HeadKind::Mlp] {
        let heads = make_heads(&[5], &[3], (5, 3), 8, kind, seed)?;
        let feats = t(away_from_zero(&mut rng, 2 * 3), &[2, 3])?;
        let teacher_side = heads.modules[0].teacher.project(&t(random_vec(&mut rng, 10, -1.0, 1.0), &[2, 5])?, &[0, 1])?;
        out.push(check(
            &format!("project ({kind}) into nce_loss"),
            |v| nce_loss(&heads.modules[0].student.project(v, &[0, 1])?, &teacher_side, &negs, &params),
            &feats,
        )?);
    }
    Ok(out)
}

/// Finite-difference check of the full loss (γ = 1, θ = 1, α = (0.8, 0.2),
/// M = 2, d = 8, N = 4, B = 2) with respect to every student parameter and
/// every projection-head parameter.
pub fn composite_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let teacher_spec: ModelSpec = "input=2x4x4 stages=4x2,6x2/2 classes=3".parse()?;
    let student_spec: ModelSpec = "input=2x4x4 stages=2x1,3x1/2 classes=3".parse()?;
    let teacher = Model::build(&teacher_spec, seed)?.freeze();
    let student = Model::build(&student_spec, seed.wrapping_add(1))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
    let images = t(random_vec(&mut rng, 2 * 2 * 4 * 4, 0.0, 1.0), &[2, 2, 4, 4])?;
    let labels = [2usize, 0];
    let indices = [1usize, 6];

    let mut loss = LossConfig::compression(CriticParams::new(0.1, 4, 8)?);
    loss.theta = 1.0;
    let heads = HeadSet::for_models(&teacher, &student, 8, HeadKind::Linear, seed.wrapping_add(3))?;
    let state = ContrastiveState::new(2, loss.critic, 8, 0.5, seed.wrapping_add(4))?;
    let t_out = teacher.forward(&images)?;

    // `which` selects a parameter among student parameters followed by head
    // parameters; `value` replaces it.
    let n_student = student.parameters().len();
    let evaluate = |which: usize, value: &Tensor| -> Result<Tensor> {
        let mut s = student.clone();
        let mut h = heads.clone();
        if which < n_student {
            s.parameters_mut()[which].tensor = value.clone();
        } else {
            h.parameters_mut()[which - n_student].tensor = value.clone();
        }
        let s_out = s.forward(&images)?;
        let inputs = StepInputs { labels: Some(&labels), sample_indices: &indices, student: &s_out, teacher: &t_out };
        // same negatives on every evaluation
        let mut st = state.clone();
        Ok(total_loss(&inputs, &h, &mut st, &loss)?.total)
    };

    let names: Vec<String> = student
        .parameters()
        .iter()
        .chain(heads.parameters().iter())
        .map(|p| p.name.clone())
        .collect();
    let points: Vec<Tensor> = student
        .parameters()
        .iter()
        .chain(heads.parameters().iter())
        .map(|p| p.tensor.detach())
        .collect();
    names
        .iter()
        .zip(&points)
        .enumerate()
        .map(|(k, (name, point))| check(&format!("full loss wrt {name}"), |v| evaluate(k, v), point))
        .collect()
}

/// Everything the `gradcheck` subcommand runs.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = op_checks(seed)?;
    out.extend(composite_checks(seed)?);
    Ok(out)
}

/// Direct-summation contrastive loss of one site.
fn brute_force_site(
    t_feat: &[Vec<f64>],
    s_feat: &[Vec<f64>],
    t_head: (&[f64], &[f64]),
    s_head: (&[f64], &[f64]),
    negatives: &[Vec<Vec<f64>>],
    params: &CriticParams,
) -> f64 {
    let project = |x: &[f64], (w, b): (&[f64], &[f64])| -> Vec<f64> {
        let k = b.len();
        let mut y = b.to_vec();
        for (i, xi) in x.iter().enumerate() {
            for j in 0..k {
                y[j] += xi * w[i * k + j];
            }
        }
        let n = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        y.iter().map(|v| v / n).collect()
    };
    let ratio = params.num_negatives as f64 / params.dataset_size as f64;
    let f = |u: &[f64], v: &[f64]| {
        let e = (u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / params.tau).exp();
        e / (e + ratio)
    };
    let b = t_feat.len();
    let mut total = 0.0;
    for i in 0..b {
        let gs = project(&s_feat[i], s_head);
        let gt = project(&t_feat[i], t_head);
        let pos = f(&gs, &gt);
        let mut denom = pos;
        for n in &negatives[i] {
            denom += f(&gs, n);
        }
        total += -(pos / denom).ln();
    }
    total / b as f64
}

fn pooled_rows(rep: &[f64], b: usize, o: usize, k: usize) -> Vec<Vec<f64>> {
    (0..b)
        .map(|i| {
            (0..o)
                .map(|c| {
                    let start = (i * o + c) * k * k;
                    rep[start..start + k * k].iter().sum::<f64>() / (k * k) as f64
                })
                .collect()
        })
        .collect()
}

/// Compares the module-level and penultimate losses with direct summation
/// on `instances` random problems (B <= 8, N <= 16, d <= 16). One result per
/// instance, holding the largest absolute disagreement over its sites and
/// their weighted sum.
pub fn oracle_suite(instances: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(instances);
    for inst in 0..instances {
        let b = rng.random_range(1..=8usize);
        let n = rng.random_range(1..=16usize);
        let d = rng.random_range(1..=16usize);
        let m = rng.random_range(1..=3usize);
        let tau = [0.07, 0.1, 0.5, 1.0][rng.random_range(0..4)];
        // N = N_d - 1 draws every other slot, which the oracle can list
        let nd = (n + 1).max(b);
        let n = nd - 1;
        let params = CriticParams::new(tau, n, nd)?;
        let t_dims: Vec<usize> = (0..m).map(|_| rng.random_range(1..=6)).collect();
        let s_dims: Vec<usize> = (0..m).map(|_| rng.random_range(1..=6)).collect();
        let pen = (rng.random_range(1..=6usize), rng.random_range(1..=6usize));
        let heads = make_heads(&t_dims, &s_dims, pen, d, HeadKind::Linear, rng.random())?;
        let mut state = ContrastiveState::new(m, params, d, 0.5, rng.random())?;
        for site in 0..=m {
            for slot in 0..nd {
                state.bank.set_slot(site, Side::Teacher, slot, &random_vec(&mut rng, d, -1.0, 1.0))?;
            }
        }
        let mut pool: Vec<usize> = (0..nd).collect();
        for i in 0..b {
            let j = rng.random_range(i..nd);
            pool.swap(i, j);
        }
        let indices = pool[..b].to_vec();
        let k = rng.random_range(1..=3usize);
        let rep = |rng: &mut ChaCha8Rng, o: usize| random_vec(rng, b * o * k * k, -1.0, 1.0);
        let t_reps: Vec<Vec<f64>> = t_dims.iter().map(|&o| rep(&mut rng, o)).collect();
        let s_reps: Vec<Vec<f64>> = s_dims.iter().map(|&o| rep(&mut rng, o)).collect();
        let t_pen = random_vec(&mut rng, b * pen.0, -1.0, 1.0);
        let s_pen = random_vec(&mut rng, b * pen.1, -1.0, 1.0);

        let to_t = |v: &[f64], o: usize| Tensor::new(v.to_vec(), &[b, o, k, k]);
        let t_tensors = t_reps.iter().zip(&t_dims).map(|(v, &o)| to_t(v, o)).collect::<Result<Vec<_>>>()?;
        let s_tensors = s_reps.iter().zip(&s_dims).map(|(v, &o)| to_t(v, o)).collect::<Result<Vec<_>>>()?;
        let sites = state.l_mckt(&t_tensors, &s_tensors, &heads, &indices)?;
        let pen_site = state.l_pckt(&Tensor::new(t_pen.clone(), &[b, pen.0])?, &Tensor::new(s_pen.clone(), &[b, pen.1])?, &heads, &indices)?;

        let negatives = |site: usize| -> Result<Vec<Vec<Vec<f64>>>> {
            indices
                .iter()
                .map(|&a| (0..nd).filter(|&j| j != a).map(|j| state.bank.slot(site, Side::Teacher, j).map(<[f64]>::to_vec)).collect())
                .collect()
        };
        let head_params = |h: &crate::projection::ProjectionHead| {
            let p = h.parameters();
            (p[0].tensor.to_vec(), p[1].tensor.to_vec())
        };
        let mut worst = 0.0f64;
        let mut oracle_sum = 0.0;
        for (mi, site) in sites.iter().enumerate() {
            let (tw, tb) = head_params(&heads.modules[mi].teacher);
            let (sw, sb) = head_params(&heads.modules[mi].student);
            let expected = brute_force_site(
                &pooled_rows(&t_reps[mi], b, t_dims[mi], k),
                &pooled_rows(&s_reps[mi], b, s_dims[mi], k),
                (&tw, &tb),
                (&sw, &sb),
                &negatives(mi)?,
                &params,
            );
            oracle_sum += expected;
            worst = worst.max((site.loss.item()? - expected).abs());
        }
        let (tw, tb) = head_params(&heads.penultimate.teacher);
        let (sw, sb) = head_params(&heads.penultimate.student);
        let rows = |v: &[f64], w: usize| v.chunks(w).map(<[f64]>::to_vec).collect::<Vec<_>>();
        let expected_pen = brute_force_site(&rows(&t_pen, pen.0), &rows(&s_pen, pen.1), (&tw, &tb), (&sw, &sb), &negatives(m)?, &params);
        worst = worst.max((pen_site.loss.item()? - expected_pen).abs());

        let module_losses: Vec<Tensor> = sites.iter().map(|s| s.loss.clone()).collect();
        let w = crate::contrastive::CktWeights::default();
        let combined = crate::contrastive::l_ckt(&module_losses, &pen_site.loss, &w)?.item()?;
        worst = worst.max((combined - (w.alpha1 * oracle_sum + w.alpha2 * expected_pen)).abs());

        // pooling is part of the path being checked
        debug_assert_eq!(pool_and_flatten(&t_tensors[0])?.shape(), &[b, t_dims[0]]);
        out.push(CheckResult {
            name: format!("instance {inst:02} (B={b} N={n} d={d} M={m} tau={tau})"),
            error: worst,
            tolerance: ORACLE_TOLERANCE,
        });
    }
    Ok(out)
}
