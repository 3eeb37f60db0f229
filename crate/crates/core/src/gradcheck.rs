//! Central finite-difference verification of every analytic gradient.
//!
//! Each check freezes the non-differentiable pieces of a loss (nearest
//! neighbor matches, γ/δ gates, the constant side of each KL term) at the
//! base point and differentiates the remaining smooth function numerically.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand::SeedableRng;

use crate::bank::MemoryBank;
use crate::loss::{
    contrastive_loss, directional_loss, geometric_loss, kd_loss, match_nearest, task_loss,
    ClassWeights, AlignConfig,
};
use crate::tensor::{
    affine_backward, affine_forward, kl_divergence, relu, relu_backward,
    softmax_with_temperature, weighted_cross_entropy, Tensor, KL_FLOOR,
};

const FD_STEP: f64 = 1e-5;

/// Max relative error between an analytic gradient and central finite
/// differences of `f` at `x`.
pub fn check_gradient<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], analytic: &[f64]) -> f64 {
    assert_eq!(x.len(), analytic.len());
    let mut worst = 0.0f64;
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + FD_STEP;
        let plus = f(&probe);
        probe[i] = x[i] - FD_STEP;
        let minus = f(&probe);
        probe[i] = x[i];
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    worst
}

/// Outcome of one named check over many random instances.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub trials: usize,
}

impl CheckResult {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }
}

fn rand_matrix(rng: &mut ChaCha12Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-scale..scale))
        .collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

fn rand_labels(rng: &mut ChaCha12Rng, batch: usize, classes: usize) -> Vec<usize> {
    (0..batch).map(|_| rng.random_range(0..classes)).collect()
}

fn rand_weights(rng: &mut ChaCha12Rng, classes: usize) -> ClassWeights {
    ClassWeights {
        weights: (0..classes).map(|_| rng.random_range(0.3..2.0)).collect(),
        beta: 0.999,
    }
}

fn kl_value(p: &Tensor, q: &Tensor) -> f64 {
    let mut total = 0.0;
    for (&pv, &qv) in p.data().iter().zip(q.data()) {
        if pv > 0.0 {
            total += pv * (pv / qv.max(KL_FLOOR)).ln();
        }
    }
    total / p.rows() as f64
}

fn check_affine(rng: &mut ChaCha12Rng) -> f64 {
    let (b, d_in, d_out) = (
        rng.random_range(1..=4),
        rng.random_range(2..=8),
        rng.random_range(2..=8),
    );
    let x = rand_matrix(rng, b, d_in, 2.0);
    let w = rand_matrix(rng, d_in, d_out, 2.0);
    let bias = rand_matrix(rng, 1, d_out, 2.0);
    let bias_vec = Tensor::new(vec![d_out], bias.data().to_vec()).unwrap();
    let dy = rand_matrix(rng, b, d_out, 1.0);

    let scalarize = |x_t: &Tensor, w_t: &Tensor, b_t: &Tensor| -> f64 {
        let y = affine_forward(x_t, w_t, b_t).unwrap();
        y.data().iter().zip(dy.data()).map(|(a, g)| a * g).sum()
    };
    let (dx, dw, db) = affine_backward(&x, &w, &dy);

    let e_x = check_gradient(
        |v| {
            let xt = Tensor::new(vec![b, d_in], v.to_vec()).unwrap();
            scalarize(&xt, &w, &bias_vec)
        },
        x.data(),
        dx.data(),
    );
    let e_w = check_gradient(
        |v| {
            let wt = Tensor::new(vec![d_in, d_out], v.to_vec()).unwrap();
            scalarize(&x, &wt, &bias_vec)
        },
        w.data(),
        dw.data(),
    );
    let e_b = check_gradient(
        |v| {
            let bt = Tensor::new(vec![d_out], v.to_vec()).unwrap();
            scalarize(&x, &w, &bt)
        },
        bias_vec.data(),
        db.data(),
    );
    e_x.max(e_w).max(e_b)
}

fn check_relu(rng: &mut ChaCha12Rng) -> f64 {
    let (b, d) = (rng.random_range(1..=4), rng.random_range(2..=8));
    // keep a margin around the kink at zero
    let data: Vec<f64> = (0..b * d)
        .map(|_| {
            let v: f64 = rng.random_range(0.05..2.0);
            if rng.random::<bool>() {
                v
            } else {
                -v
            }
        })
        .collect();
    let x = Tensor::new(vec![b, d], data).unwrap();
    let dy = rand_matrix(rng, b, d, 1.0);
    let dx = relu_backward(&x, &dy);
    check_gradient(
        |v| {
            let xt = Tensor::new(vec![b, d], v.to_vec()).unwrap();
            relu(&xt).data().iter().zip(dy.data()).map(|(a, g)| a * g).sum()
        },
        x.data(),
        dx.data(),
    )
}

fn check_wce(rng: &mut ChaCha12Rng) -> f64 {
    let (b, c) = (rng.random_range(1..=4), rng.random_range(2..=4));
    let z = rand_matrix(rng, b, c, 2.0);
    let y = rand_labels(rng, b, c);
    let w = rand_weights(rng, c);
    let (_, dz) = weighted_cross_entropy(&z, &y, &w.weights).unwrap();
    check_gradient(
        |v| {
            let zt = Tensor::new(vec![b, c], v.to_vec()).unwrap();
            weighted_cross_entropy(&zt, &y, &w.weights).unwrap().0
        },
        z.data(),
        dz.data(),
    )
}

fn check_task(rng: &mut ChaCha12Rng) -> f64 {
    let (b, c) = (rng.random_range(1..=4), rng.random_range(2..=4));
    let z_t = rand_matrix(rng, b, c, 2.0);
    let z_s = rand_matrix(rng, b, c, 2.0);
    let y = rand_labels(rng, b, c);
    let w = rand_weights(rng, c);
    let (_, dz_t, dz_s) = task_loss(&z_t, &z_s, &y, &w).unwrap();
    let e_t = check_gradient(
        |v| {
            let zt = Tensor::new(vec![b, c], v.to_vec()).unwrap();
            task_loss(&zt, &z_s, &y, &w).unwrap().0
        },
        z_t.data(),
        dz_t.data(),
    );
    let e_s = check_gradient(
        |v| {
            let zs = Tensor::new(vec![b, c], v.to_vec()).unwrap();
            task_loss(&z_t, &zs, &y, &w).unwrap().0
        },
        z_s.data(),
        dz_s.data(),
    );
    e_t.max(e_s)
}

fn check_kd(rng: &mut ChaCha12Rng) -> f64 {
    let (b, c) = (rng.random_range(1..=4), rng.random_range(2..=4));
    let z_t = rand_matrix(rng, b, c, 2.0);
    let z_s = rand_matrix(rng, b, c, 2.0);
    let y = rand_labels(rng, b, c);
    let w = rand_weights(rng, c);
    let temp = rng.random_range(0.5..4.0);
    let gamma = rng.random_range(0.0..1.0);
    let delta = rng.random_range(0.0..1.0);
    let w_bar = w.batch_mean(&y);
    let scale = w_bar * temp * temp;

    let (_, dz_t, dz_s) = kd_loss(&z_t, &z_s, &y, &w, temp, gamma, delta).unwrap();

    // base-point distributions act as the constant sides of each KL term
    let p_t0 = softmax_with_temperature(&z_t, temp).unwrap();
    let p_s0 = softmax_with_temperature(&z_s, temp).unwrap();

    // student routing: only the (1−γ)·KL(p_S ‖ p_T₀) term moves with z_S
    let e_s = check_gradient(
        |v| {
            let zs = Tensor::new(vec![b, c], v.to_vec()).unwrap();
            let p_s = softmax_with_temperature(&zs, temp).unwrap();
            scale * (1.0 - gamma) * kl_value(&p_s, &p_t0)
        },
        z_s.data(),
        dz_s.data(),
    );
    // teacher routing: only the δ·KL(p_T ‖ p_S₀) term moves with z_T
    let e_t = check_gradient(
        |v| {
            let zt = Tensor::new(vec![b, c], v.to_vec()).unwrap();
            let p_t = softmax_with_temperature(&zt, temp).unwrap();
            scale * delta * kl_value(&p_t, &p_s0)
        },
        z_t.data(),
        dz_t.data(),
    );
    e_s.max(e_t)
}

fn check_geometric(rng: &mut ChaCha12Rng) -> f64 {
    let (b, d) = (rng.random_range(1..=4), rng.random_range(2..=6));
    let hp = rand_matrix(rng, b, d, 2.0);
    let hs = rand_matrix(rng, b, d, 2.0);
    let matches = match_nearest(&hp, &hs).unwrap();
    let (_, d_hp, d_hs) = geometric_loss(&hp, &hs, &matches);
    let e_hp = check_gradient(
        |v| {
            let t = Tensor::new(vec![b, d], v.to_vec()).unwrap();
            geometric_loss(&t, &hs, &matches).0
        },
        hp.data(),
        d_hp.data(),
    );
    let e_hs = check_gradient(
        |v| {
            let t = Tensor::new(vec![b, d], v.to_vec()).unwrap();
            geometric_loss(&hp, &t, &matches).0
        },
        hs.data(),
        d_hs.data(),
    );
    e_hp.max(e_hs)
}

fn check_directional(rng: &mut ChaCha12Rng) -> f64 {
    let (b, d) = (rng.random_range(1..=4), rng.random_range(2..=6));
    // rows bounded away from the origin keep the norm floor inactive
    let offset = |rng: &mut ChaCha12Rng, rows: usize| {
        let data: Vec<f64> = (0..rows * d)
            .map(|_| {
                let v: f64 = rng.random_range(0.3..2.0);
                if rng.random::<bool>() {
                    v
                } else {
                    -v
                }
            })
            .collect();
        Tensor::new(vec![rows, d], data).unwrap()
    };
    let hp = offset(rng, b);
    let hs = offset(rng, b);
    let matches = match_nearest(&hp, &hs).unwrap();
    let (_, _, d_hp, d_hs) = directional_loss(&hp, &hs, &matches);
    let e_hp = check_gradient(
        |v| {
            let t = Tensor::new(vec![b, d], v.to_vec()).unwrap();
            directional_loss(&t, &hs, &matches).0
        },
        hp.data(),
        d_hp.data(),
    );
    let e_hs = check_gradient(
        |v| {
            let t = Tensor::new(vec![b, d], v.to_vec()).unwrap();
            directional_loss(&hp, &t, &matches).0
        },
        hs.data(),
        d_hs.data(),
    );
    e_hp.max(e_hs)
}

fn check_contrastive(rng: &mut ChaCha12Rng) -> f64 {
    let (b, d) = (rng.random_range(1..=4), rng.random_range(2..=6));
    let hp = rand_matrix(rng, b, d, 2.0);
    let hs = rand_matrix(rng, b, d, 2.0);
    let mut bank = MemoryBank::new(16);
    if rng.random::<bool>() {
        let bank_rows = rng.random_range(1..=6);
        let negatives = rand_matrix(rng, bank_rows, d, 2.0);
        bank.push(&negatives).unwrap();
    }
    let tau = rng.random_range(0.1..1.0);
    let (_, d_hp, d_hs) = contrastive_loss(&hp, &hs, &bank, tau).unwrap();
    let e_hp = check_gradient(
        |v| {
            let t = Tensor::new(vec![b, d], v.to_vec()).unwrap();
            contrastive_loss(&t, &hs, &bank, tau).unwrap().0
        },
        hp.data(),
        d_hp.data(),
    );
    let e_hs = check_gradient(
        |v| {
            let t = Tensor::new(vec![b, d], v.to_vec()).unwrap();
            contrastive_loss(&hp, &t, &bank, tau).unwrap().0
        },
        hs.data(),
        d_hs.data(),
    );
    e_hp.max(e_hs)
}

fn check_alignment(rng: &mut ChaCha12Rng) -> f64 {
    let (b, d) = (rng.random_range(1..=4), rng.random_range(2..=6));
    let cfg = AlignConfig::default();
    let offset = |rng: &mut ChaCha12Rng| {
        let data: Vec<f64> = (0..b * d)
            .map(|_| {
                let v: f64 = rng.random_range(0.3..2.0);
                if rng.random::<bool>() {
                    v
                } else {
                    -v
                }
            })
            .collect();
        Tensor::new(vec![b, d], data).unwrap()
    };
    let hp = offset(rng);
    let hs = offset(rng);
    let mut bank = MemoryBank::new(16);
    let negatives = rand_matrix(rng, 3, d, 2.0);
    bank.push(&negatives).unwrap();

    let matches = match_nearest(&hp, &hs).unwrap();
    let composite = |hp_t: &Tensor, hs_t: &Tensor| -> f64 {
        let (g, _, _) = geometric_loss(hp_t, hs_t, &matches);
        let (dir, _, _, _) = directional_loss(hp_t, hs_t, &matches);
        let (s, _, _) = contrastive_loss(hp_t, hs_t, &bank, cfg.tau).unwrap();
        g + cfg.lambda_cos * dir + cfg.lambda_contrast * s
    };

    // analytic gradient from the composite's components at the base point
    let (_, mut d_hp, mut d_hs) = geometric_loss(&hp, &hs, &matches);
    let (_, _, d_hp_dir, d_hs_dir) = directional_loss(&hp, &hs, &matches);
    let (_, d_hp_c, d_hs_c) = contrastive_loss(&hp, &hs, &bank, cfg.tau).unwrap();
    d_hp.add_scaled(&d_hp_dir, cfg.lambda_cos);
    d_hp.add_scaled(&d_hp_c, cfg.lambda_contrast);
    d_hs.add_scaled(&d_hs_dir, cfg.lambda_cos);
    d_hs.add_scaled(&d_hs_c, cfg.lambda_contrast);

    let e_hp = check_gradient(
        |v| composite(&Tensor::new(vec![b, d], v.to_vec()).unwrap(), &hs),
        hp.data(),
        d_hp.data(),
    );
    let e_hs = check_gradient(
        |v| composite(&hp, &Tensor::new(vec![b, d], v.to_vec()).unwrap()),
        hs.data(),
        d_hs.data(),
    );
    e_hp.max(e_hs)
}

fn check_kl_pair(rng: &mut ChaCha12Rng) -> f64 {
    // KL as a function of the logits behind p, with q fixed
    let (b, c) = (rng.random_range(1..=4), rng.random_range(2..=4));
    let z = rand_matrix(rng, b, c, 2.0);
    let q = softmax_with_temperature(&rand_matrix(rng, b, c, 2.0), 1.0).unwrap();
    let p = softmax_with_temperature(&z, 1.0).unwrap();
    // analytic: p_j (log(p_j/q_j) − kl_row) / B
    let mut analytic = Tensor::zeros(vec![b, c]);
    for i in 0..b {
        let pi = p.row(i);
        let qi = q.row(i);
        let row_kl: f64 = pi
            .iter()
            .zip(qi)
            .map(|(&pv, &qv)| if pv > 0.0 { pv * (pv / qv).ln() } else { 0.0 })
            .sum();
        for j in 0..c {
            analytic.row_mut(i)[j] = pi[j] * ((pi[j] / qi[j]).ln() - row_kl) / b as f64;
        }
    }
    check_gradient(
        |v| {
            let zt = Tensor::new(vec![b, c], v.to_vec()).unwrap();
            let pt = softmax_with_temperature(&zt, 1.0).unwrap();
            kl_divergence(&pt, &q).unwrap()
        },
        z.data(),
        analytic.data(),
    )
}

/// Run every gradient check `trials` times; returns per-loss worst errors.
pub fn run_all(trials: usize, seed: u64) -> Vec<CheckResult> {
    let checks: Vec<(&str, fn(&mut ChaCha12Rng) -> f64)> = vec![
        ("affine", check_affine),
        ("relu", check_relu),
        ("kl_divergence", check_kl_pair),
        ("weighted_cross_entropy", check_wce),
        ("task", check_task),
        ("kd_bidirectional", check_kd),
        ("geometric", check_geometric),
        ("directional", check_directional),
        ("contrastive", check_contrastive),
        ("alignment_composite", check_alignment),
    ];
    checks
        .into_iter()
        .enumerate()
        .map(|(idx, (name, check))| {
            let mut rng = ChaCha12Rng::seed_from_u64(seed.wrapping_add(idx as u64 * 7919));
            let mut worst = 0.0f64;
            for _ in 0..trials {
                worst = worst.max(check(&mut rng));
            }
            CheckResult {
                name: name.to_string(),
                max_rel_err: worst,
                trials,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_gradients_agree_with_finite_differences() {
        for result in run_all(25, 13) {
            assert!(
                result.passed(1e-4),
                "{} failed with max rel err {:.3e}",
                result.name,
                result.max_rel_err
            );
        }
    }

    #[test]
    fn sign_flipped_kd_gradient_is_caught() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let z_t = rand_matrix(&mut rng, 2, 3, 2.0);
        let z_s = rand_matrix(&mut rng, 2, 3, 2.0);
        let y = rand_labels(&mut rng, 2, 3);
        let w = rand_weights(&mut rng, 3);
        let (_, _, dz_s) = kd_loss(&z_t, &z_s, &y, &w, 2.0, 0.2, 0.6).unwrap();
        let flipped: Vec<f64> = dz_s.data().iter().map(|g| -g).collect();
        let p_t0 = softmax_with_temperature(&z_t, 2.0).unwrap();
        let scale = w.batch_mean(&y) * 4.0;
        let err = check_gradient(
            |v| {
                let zs = Tensor::new(vec![2, 3], v.to_vec()).unwrap();
                let p_s = softmax_with_temperature(&zs, 2.0).unwrap();
                scale * (1.0 - 0.2) * kl_value(&p_s, &p_t0)
            },
            z_s.data(),
            &flipped,
        );
        assert!(err > 1e-4, "sign flip should fail the check, err = {err}");
    }
}
