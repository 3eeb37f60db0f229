//! The client-side training objective: class-balanced task loss,
//! agreement-gated bidirectional knowledge distillation, multi-component
//! feature alignment, and the EMA controller that adapts the loss weights.
//!
//! Gradient routing in the KD loss is deliberate and asymmetric: the
//! `(1−γ)` KL term treats the teacher distribution as constant and trains
//! the student, while the `δ` term treats the student distribution as
//! constant and trains the teacher. `γ`, `δ` and the mean class weight are
//! always constants in backward.

use serde::{Deserialize, Serialize};

use crate::bank::MemoryBank;
use crate::error::{Result, SentinelError};
use crate::tensor::{
    l2_normalize_rows, l2_normalize_rows_backward, softmax_with_temperature,
    weighted_cross_entropy, Tensor, KL_FLOOR,
};

/// Clamp applied to raw effective-number weights before normalization.
pub const WEIGHT_CLAMP_LO: f64 = 0.2;
pub const WEIGHT_CLAMP_HI: f64 = 5.0;

/// Per-class weights derived from effective sample counts.
#[derive(Debug, Clone)]
pub struct ClassWeights {
    pub weights: Vec<f64>,
    pub beta: f64,
}

impl ClassWeights {
    /// All-ones weights: plain cross-entropy semantics.
    pub fn uniform(num_classes: usize) -> Self {
        ClassWeights {
            weights: vec![1.0; num_classes],
            beta: 0.0,
        }
    }

    /// Mean weight over the labels of a batch.
    pub fn batch_mean(&self, labels: &[usize]) -> f64 {
        if labels.is_empty() {
            return 1.0;
        }
        labels.iter().map(|&y| self.weights[y]).sum::<f64>() / labels.len() as f64
    }
}

/// Effective-number re-weighting: `raw_c = (1−β)/(1−β^{n_c})` for present
/// classes, clamped to `[0.2, 5.0]`, then divided by the mean clamped
/// weight over present classes. Absent classes get weight 1.0 (never used
/// by the local cross-entropy).
pub fn compute_class_weights(counts: &[usize], beta: f64) -> Result<ClassWeights> {
    if !(0.0..1.0).contains(&beta) {
        return Err(SentinelError::InvalidArgument(format!(
            "beta must lie in [0, 1), got {beta}"
        )));
    }
    if counts.iter().all(|&n| n == 0) {
        return Err(SentinelError::InvalidArgument(
            "compute_class_weights requires at least one positive count".into(),
        ));
    }
    let mut raw = vec![1.0; counts.len()];
    let mut mean = 0.0;
    let mut present = 0usize;
    for (c, &n) in counts.iter().enumerate() {
        if n == 0 {
            continue;
        }
        let w = if beta == 0.0 {
            1.0
        } else {
            (1.0 - beta) / (1.0 - beta.powi(n as i32))
        };
        raw[c] = w.clamp(WEIGHT_CLAMP_LO, WEIGHT_CLAMP_HI);
        mean += raw[c];
        present += 1;
    }
    mean /= present as f64;
    for (c, &n) in counts.iter().enumerate() {
        if n > 0 {
            raw[c] /= mean;
        } else {
            raw[c] = 1.0;
        }
    }
    Ok(ClassWeights { weights: raw, beta })
}

/// `½·[WCE(z_T) + WCE(z_S)]`; gradients flow to both models.
pub fn task_loss(
    z_teacher: &Tensor,
    z_student: &Tensor,
    labels: &[usize],
    w: &ClassWeights,
) -> Result<(f64, Tensor, Tensor)> {
    let (loss_t, mut dz_t) = weighted_cross_entropy(z_teacher, labels, &w.weights)?;
    let (loss_s, mut dz_s) = weighted_cross_entropy(z_student, labels, &w.weights)?;
    dz_t.scale(0.5);
    dz_s.scale(0.5);
    Ok((0.5 * (loss_t + loss_s), dz_t, dz_s))
}

/// Distillation temperature schedule, annealed over the first 50 rounds.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct KdSchedule {
    pub t_base: f64,
    pub t_min: f64,
    pub t_decay: f64,
}

impl Default for KdSchedule {
    fn default() -> Self {
        KdSchedule {
            t_base: 3.0,
            t_min: 1.0,
            t_decay: 0.95,
        }
    }
}

impl KdSchedule {
    /// `max(T_min, T_base · T_decay^{min(r/10, 5)})` with a real exponent.
    pub fn temperature(&self, round: u64) -> f64 {
        let exponent = (round as f64 / 10.0).min(5.0);
        (self.t_base * self.t_decay.powf(exponent)).max(self.t_min)
    }
}

/// How the joint confidence δ combines the two max-probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DeltaMode {
    /// Batch mean of `maxp_T · maxp_S` (the symbol-table definition).
    MeanProduct,
    /// Batch mean of `sqrt(maxp_T · maxp_S)`.
    GeometricMean,
}

/// Agreement γ (fraction of matching argmax predictions, ties broken by
/// lowest class index) and joint confidence δ from temperature-T softmaxes.
pub fn agreement_confidence(
    z_teacher: &Tensor,
    z_student: &Tensor,
    temp: f64,
    mode: DeltaMode,
) -> Result<(f64, f64)> {
    let p_t = softmax_with_temperature(z_teacher, temp)?;
    let p_s = softmax_with_temperature(z_student, temp)?;
    let batch = p_t.rows();
    if batch == 0 {
        return Ok((1.0, 0.0));
    }
    let argmax = |row: &[f64]| {
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        best
    };
    let mut agree = 0usize;
    let mut delta = 0.0;
    for i in 0..batch {
        let rt = p_t.row(i);
        let rs = p_s.row(i);
        if argmax(rt) == argmax(rs) {
            agree += 1;
        }
        let prod = rt.iter().cloned().fold(0.0, f64::max) * rs.iter().cloned().fold(0.0, f64::max);
        delta += match mode {
            DeltaMode::MeanProduct => prod,
            DeltaMode::GeometricMean => prod.sqrt(),
        };
    }
    Ok((agree as f64 / batch as f64, delta / batch as f64))
}

fn kl_rows(p: &Tensor, q: &Tensor) -> Vec<f64> {
    (0..p.rows())
        .map(|i| {
            p.row(i)
                .iter()
                .zip(q.row(i))
                .map(|(&pv, &qv)| {
                    if pv > 0.0 {
                        pv * (pv / qv.max(KL_FLOOR)).ln()
                    } else {
                        0.0
                    }
                })
                .sum()
        })
        .collect()
}

/// Gradient of the batch-mean `KL(p ‖ q_const)` with respect to the logits
/// behind `p` (a temperature-`temp` softmax), scaled by `scale`.
fn kl_backward_into_p_logits(p: &Tensor, q: &Tensor, rows_kl: &[f64], temp: f64, scale: f64) -> Tensor {
    let batch = p.rows();
    let mut dz = Tensor::zeros(p.shape().to_vec());
    let factor = scale / (batch as f64 * temp);
    for i in 0..batch {
        let pi = p.row(i);
        let qi = q.row(i);
        let out = dz.row_mut(i);
        for (j, o) in out.iter_mut().enumerate() {
            if pi[j] > 0.0 {
                let log_ratio = pi[j].ln() - qi[j].max(KL_FLOOR).ln();
                *o = factor * pi[j] * (log_ratio - rows_kl[i]);
            }
        }
    }
    dz
}

/// Adaptive bidirectional distillation loss
/// `w̄_y · [(1−γ)·KL(p_S‖p_T) + δ·KL(p_T‖p_S)] · T²`.
///
/// Returns `(value, dz_teacher, dz_student)`. The student gradient comes
/// only from the `(1−γ)` term and the teacher gradient only from the `δ`
/// term.
pub fn kd_loss(
    z_teacher: &Tensor,
    z_student: &Tensor,
    labels: &[usize],
    w: &ClassWeights,
    temp: f64,
    gamma: f64,
    delta: f64,
) -> Result<(f64, Tensor, Tensor)> {
    for (name, v) in [("gamma", gamma), ("delta", delta)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(SentinelError::InvalidArgument(format!(
                "{name} must lie in [0, 1], got {v}"
            )));
        }
    }
    let p_t = softmax_with_temperature(z_teacher, temp)?;
    let p_s = softmax_with_temperature(z_student, temp)?;
    let w_bar = w.batch_mean(labels);
    let t_sq = temp * temp;

    let rows_s_t = kl_rows(&p_s, &p_t);
    let rows_t_s = kl_rows(&p_t, &p_s);
    let batch = p_t.rows().max(1) as f64;
    let kl_s_t: f64 = rows_s_t.iter().sum::<f64>() / batch;
    let kl_t_s: f64 = rows_t_s.iter().sum::<f64>() / batch;

    let value = w_bar * ((1.0 - gamma) * kl_s_t + delta * kl_t_s) * t_sq;

    let dz_student =
        kl_backward_into_p_logits(&p_s, &p_t, &rows_s_t, temp, w_bar * (1.0 - gamma) * t_sq);
    let dz_teacher = kl_backward_into_p_logits(&p_t, &p_s, &rows_t_s, temp, w_bar * delta * t_sq);
    Ok((value, dz_teacher, dz_student))
}

/// For each projected teacher row, the index of the nearest student row by
/// Euclidean distance; ties resolve to the lowest index.
pub fn match_nearest(hp_teacher: &Tensor, h_student: &Tensor) -> Result<Vec<usize>> {
    if hp_teacher.cols() != h_student.cols() {
        return Err(SentinelError::dim(
            "student feature width",
            hp_teacher.cols(),
            h_student.cols(),
        ));
    }
    let mut matches = Vec::with_capacity(hp_teacher.rows());
    for i in 0..hp_teacher.rows() {
        let ti = hp_teacher.row(i);
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for j in 0..h_student.rows() {
            let d: f64 = ti
                .iter()
                .zip(h_student.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if d < best_d {
                best_d = d;
                best = j;
            }
        }
        matches.push(best);
    }
    Ok(matches)
}

/// MSE over matched pairs: `(1/B) Σ ‖hp_T[i] − h_S[m(i)]‖₂²`.
///
/// Returns `(value, d_hp, d_hs)`; the student gradient accumulates into the
/// selected rows only.
pub fn geometric_loss(
    hp_teacher: &Tensor,
    h_student: &Tensor,
    matches: &[usize],
) -> (f64, Tensor, Tensor) {
    let batch = hp_teacher.rows();
    let mut d_hp = Tensor::zeros(hp_teacher.shape().to_vec());
    let mut d_hs = Tensor::zeros(h_student.shape().to_vec());
    if batch == 0 {
        return (0.0, d_hp, d_hs);
    }
    let inv_b = 1.0 / batch as f64;
    let mut value = 0.0;
    for (i, &j) in matches.iter().enumerate() {
        let ti = hp_teacher.row(i);
        let sj = h_student.row(j);
        for (k, (&a, &b)) in ti.iter().zip(sj).enumerate() {
            let diff = a - b;
            value += diff * diff;
            d_hp.row_mut(i)[k] += 2.0 * inv_b * diff;
            d_hs.row_mut(j)[k] -= 2.0 * inv_b * diff;
        }
    }
    (value * inv_b, d_hp, d_hs)
}

/// Cosine misalignment over matched pairs: `1 − (1/B) Σ cos(hp_T[i], h_S[m(i)])`
/// with norms floored at `1e-8`.
///
/// Returns `(value, mean_cosine, d_hp, d_hs)`.
pub fn directional_loss(
    hp_teacher: &Tensor,
    h_student: &Tensor,
    matches: &[usize],
) -> (f64, f64, Tensor, Tensor) {
    let batch = hp_teacher.rows();
    let mut d_hp = Tensor::zeros(hp_teacher.shape().to_vec());
    let mut d_hs = Tensor::zeros(h_student.shape().to_vec());
    if batch == 0 {
        return (0.0, 1.0, d_hp, d_hs);
    }
    let inv_b = 1.0 / batch as f64;
    let mut cos_sum = 0.0;
    for (i, &j) in matches.iter().enumerate() {
        let u = hp_teacher.row(i);
        let v = h_student.row(j);
        let nu_raw: f64 = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nv_raw: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nu = nu_raw.max(1e-8);
        let nv = nv_raw.max(1e-8);
        let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
        let cos = dot / (nu * nv);
        cos_sum += cos;
        // d cos/du = v/(nu·nv) − cos·u/nu² when the floor is inactive
        for k in 0..u.len() {
            let mut du = v[k] / (nu * nv);
            if nu_raw > 1e-8 {
                du -= cos * u[k] / (nu * nu);
            }
            d_hp.row_mut(i)[k] += -inv_b * du;
            let mut dv = u[k] / (nu * nv);
            if nv_raw > 1e-8 {
                dv -= cos * v[k] / (nv * nv);
            }
            d_hs.row_mut(j)[k] += -inv_b * dv;
        }
    }
    let mean_cos = cos_sum * inv_b;
    (1.0 - mean_cos, mean_cos, d_hp, d_hs)
}

/// InfoNCE on ℓ₂-normalized rows. Positives are same-index pairs; the
/// denominator spans all in-batch student rows plus memory-bank negatives
/// (constants, no gradient).
pub fn contrastive_loss(
    hp_teacher: &Tensor,
    h_student: &Tensor,
    bank: &MemoryBank,
    tau: f64,
) -> Result<(f64, Tensor, Tensor)> {
    if !(tau > 0.0) {
        return Err(SentinelError::InvalidArgument(format!(
            "contrastive temperature must be positive, got {tau}"
        )));
    }
    if hp_teacher.shape() != h_student.shape() {
        return Err(SentinelError::dim(
            "h_student rows/width",
            hp_teacher.len(),
            h_student.len(),
        ));
    }
    let batch = hp_teacher.rows();
    let width = hp_teacher.cols();
    let mut d_hp = Tensor::zeros(hp_teacher.shape().to_vec());
    let mut d_hs = Tensor::zeros(h_student.shape().to_vec());
    if batch == 0 {
        return Ok((0.0, d_hp, d_hs));
    }

    let ht = l2_normalize_rows(hp_teacher);
    let hs = l2_normalize_rows(h_student);
    let negatives: Vec<Vec<f64>> = bank
        .rows()
        .map(|r| {
            let n: f64 = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            let inv = 1.0 / (n + 1e-8);
            r.iter().map(|v| v * inv).collect()
        })
        .collect();

    let inv_bt = 1.0 / (batch as f64 * tau);
    let mut d_ht = Tensor::zeros(ht.shape().to_vec());
    let mut d_hsn = Tensor::zeros(hs.shape().to_vec());
    let mut value = 0.0;

    for i in 0..batch {
        let ti = ht.row(i);
        let mut exps = Vec::with_capacity(batch + negatives.len());
        for j in 0..batch {
            let s: f64 = ti.iter().zip(hs.row(j)).map(|(a, b)| a * b).sum();
            exps.push((s / tau).exp());
        }
        for m in &negatives {
            let s: f64 = ti.iter().zip(m).map(|(a, b)| a * b).sum();
            exps.push((s / tau).exp());
        }
        let z: f64 = exps.iter().sum();
        value += -(exps[i] / z).ln();

        // probabilities over candidates drive both gradients
        for (j, &e) in exps.iter().enumerate() {
            let p = e / z;
            if j < batch {
                let coeff = inv_bt * (p - if j == i { 1.0 } else { 0.0 });
                let dt = d_ht.row_mut(i);
                for (k, &hv) in hs.row(j).iter().enumerate() {
                    dt[k] += coeff * hv;
                }
                let ds = d_hsn.row_mut(j);
                for (k, &tv) in ti.iter().enumerate() {
                    ds[k] += coeff * tv;
                }
            } else {
                let m = &negatives[j - batch];
                let dt = d_ht.row_mut(i);
                for (k, &mv) in m.iter().enumerate() {
                    dt[k] += inv_bt * p * mv;
                }
            }
        }
        let _ = width;
    }

    d_hp.add_scaled(&l2_normalize_rows_backward(hp_teacher, &d_ht), 1.0);
    d_hs.add_scaled(&l2_normalize_rows_backward(h_student, &d_hsn), 1.0);
    Ok((value / batch as f64, d_hp, d_hs))
}

/// Fixed weights of the alignment composite plus the contrastive
/// temperature.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AlignConfig {
    pub lambda_cos: f64,
    pub lambda_contrast: f64,
    pub tau: f64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            lambda_cos: 0.5,
            lambda_contrast: 0.2,
            tau: 0.1,
        }
    }
}

/// Result of the composite alignment loss.
#[derive(Debug)]
pub struct AlignOutput {
    pub loss: f64,
    /// `(1 + mean matched cosine)/2`, clamped to `[0, 1]`.
    pub score: f64,
    pub d_hp_teacher: Tensor,
    pub d_h_student: Tensor,
    pub geometric: f64,
    pub directional: f64,
    pub structural: f64,
}

/// `L_geom + λ_cos·L_dir + λ_contrast·L_struct` on nearest-neighbor matched
/// pairs, plus the alignment score fed back into the weight controller.
pub fn alignment_loss(
    hp_teacher: &Tensor,
    h_student: &Tensor,
    bank: &MemoryBank,
    cfg: &AlignConfig,
) -> Result<AlignOutput> {
    let matches = match_nearest(hp_teacher, h_student)?;
    let (geom, d_hp_g, d_hs_g) = geometric_loss(hp_teacher, h_student, &matches);
    let (dir, mean_cos, d_hp_d, d_hs_d) = directional_loss(hp_teacher, h_student, &matches);
    let (strct, d_hp_c, d_hs_c) = contrastive_loss(hp_teacher, h_student, bank, cfg.tau)?;

    let mut d_hp = d_hp_g;
    d_hp.add_scaled(&d_hp_d, cfg.lambda_cos);
    d_hp.add_scaled(&d_hp_c, cfg.lambda_contrast);
    let mut d_hs = d_hs_g;
    d_hs.add_scaled(&d_hs_d, cfg.lambda_cos);
    d_hs.add_scaled(&d_hs_c, cfg.lambda_contrast);

    Ok(AlignOutput {
        loss: geom + cfg.lambda_cos * dir + cfg.lambda_contrast * strct,
        score: ((1.0 + mean_cos) / 2.0).clamp(0.0, 1.0),
        d_hp_teacher: d_hp,
        d_h_student: d_hs,
        geometric: geom,
        directional: dir,
        structural: strct,
    })
}

/// Per-client `(λ_KD, λ_align)` state with EMA smoothing and
/// round-dependent clamp bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptiveWeights {
    pub lambda_kd: f64,
    pub lambda_align: f64,
    pub round: u64,
}

impl AdaptiveWeights {
    /// Fresh per-round state: λ_KD = 0.2, λ_align = 0.08.
    pub fn init(round: u64) -> Self {
        AdaptiveWeights {
            lambda_kd: 0.2,
            lambda_align: 0.08,
            round,
        }
    }

    pub fn kd_bounds(round: u64) -> (f64, f64) {
        (0.03, (0.18 + 0.02 * round as f64).min(0.35))
    }

    pub fn align_bounds(round: u64) -> (f64, f64) {
        (0.01, (0.06 + 0.01 * round as f64).min(0.12))
    }

    pub fn smoothing(round: u64) -> f64 {
        (0.9 - 0.03 * round as f64).max(0.7)
    }
}

/// EMA step of λ_KD toward `(1−γ)`, then the dynamic clamp.
pub fn update_kd_weight(st: &mut AdaptiveWeights, gamma: f64, round: u64) {
    let alpha = AdaptiveWeights::smoothing(round);
    let (lo, hi) = AdaptiveWeights::kd_bounds(round);
    st.lambda_kd = (alpha * st.lambda_kd + (1.0 - alpha) * (1.0 - gamma)).clamp(lo, hi);
    st.round = round;
}

/// EMA step of λ_align toward `(1−score)`, then the dynamic clamp.
pub fn update_align_weight(st: &mut AdaptiveWeights, score_align: f64, round: u64) {
    let alpha = AdaptiveWeights::smoothing(round);
    let (lo, hi) = AdaptiveWeights::align_bounds(round);
    st.lambda_align =
        (alpha * st.lambda_align + (1.0 - alpha) * (1.0 - score_align)).clamp(lo, hi);
    st.round = round;
}

/// One EMA update of both weights followed by the dynamic clamps.
pub fn update_adaptive_weights(st: &mut AdaptiveWeights, gamma: f64, score_align: f64, round: u64) {
    update_kd_weight(st, gamma, round);
    update_align_weight(st, score_align, round);
}

/// `L_task + λ_KD·L_KD + λ_align·L_align` with the weights in effect for
/// this batch.
pub fn total_loss(task: f64, kd: f64, align: f64, st: &AdaptiveWeights) -> f64 {
    task + st.lambda_kd * kd + st.lambda_align * align
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn class_weights_singletons_are_unit() {
        let w = compute_class_weights(&[1, 1], 0.999).unwrap();
        assert_eq!(w.weights, vec![1.0, 1.0]);
    }

    #[test]
    fn class_weights_hand_case() {
        let w = compute_class_weights(&[1, 5], 0.999).unwrap();
        assert_close(w.weights[0], 1.666110, 1e-5);
        assert_close(w.weights[1], 0.333890, 1e-5);
        // present-class mean is exactly one
        assert_close((w.weights[0] + w.weights[1]) / 2.0, 1.0, 1e-9);
    }

    #[test]
    fn class_weights_clamp_then_normalize() {
        // raws ≈ 0.10045 and ≈ 0.00158 both clamp to 0.2
        let w = compute_class_weights(&[10, 1000], 0.999).unwrap();
        assert_close(w.weights[0], 1.0, 1e-12);
        assert_close(w.weights[1], 1.0, 1e-12);
    }

    #[test]
    fn class_weights_absent_class_is_one_and_all_zero_errors() {
        let w = compute_class_weights(&[4, 0, 4], 0.999).unwrap();
        assert_eq!(w.weights[1], 1.0);
        assert!(compute_class_weights(&[0, 0], 0.999).is_err());
    }

    #[test]
    fn task_loss_examples() {
        let z = Tensor::from_rows(&[vec![2.0, 0.0]]).unwrap();
        let w = ClassWeights::uniform(2);
        let (equal, _, _) = task_loss(&z, &z, &[0], &w).unwrap();
        assert_close(equal, 0.12692801104297249, 1e-12);

        let z_s = Tensor::from_rows(&[vec![0.0, 2.0]]).unwrap();
        let (hand, _, _) = task_loss(&z, &z_s, &[0], &w).unwrap();
        assert_close(hand, 1.1269280110429725, 1e-12);
    }

    #[test]
    fn temperature_schedule_values() {
        let sched = KdSchedule::default();
        assert_eq!(sched.temperature(0), 3.0);
        assert_close(sched.temperature(20), 2.7075, 1e-12);
        assert_close(sched.temperature(50), 2.3213428125, 1e-12);
        assert_eq!(sched.temperature(50), sched.temperature(200));
        // monotone non-increasing
        let mut last = f64::INFINITY;
        for r in 0..120 {
            let t = sched.temperature(r);
            assert!(t <= last + 1e-15);
            assert!(t >= sched.t_min);
            last = t;
        }
    }

    #[test]
    fn agreement_confidence_examples() {
        let z = Tensor::from_rows(&[vec![2.0, 0.0]]).unwrap();
        let (gamma, _) = agreement_confidence(&z, &z, 1.0, DeltaMode::MeanProduct).unwrap();
        assert_eq!(gamma, 1.0);

        let z_s = Tensor::from_rows(&[vec![0.0, 2.0]]).unwrap();
        let (gamma, delta) = agreement_confidence(&z, &z_s, 1.0, DeltaMode::MeanProduct).unwrap();
        assert_eq!(gamma, 0.0);
        assert_close(delta, 0.7758034925743759, 1e-12);

        let uniform = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let (_, delta_u) =
            agreement_confidence(&uniform, &uniform, 1.0, DeltaMode::MeanProduct).unwrap();
        assert_close(delta_u, 0.25, 1e-12);

        let (_, delta_g) =
            agreement_confidence(&z, &z_s, 1.0, DeltaMode::GeometricMean).unwrap();
        assert_close(delta_g, 0.7758034925743759f64.sqrt(), 1e-12);
    }

    #[test]
    fn kd_loss_zero_cases_and_hand_value() {
        let z = Tensor::from_rows(&[vec![2.0, 0.0], vec![-1.0, 3.0]]).unwrap();
        let w = ClassWeights::uniform(2);
        let (v, dzt, dzs) = kd_loss(&z, &z, &[0, 1], &w, 2.0, 0.3, 0.5).unwrap();
        assert_eq!(v, 0.0);
        assert!(dzt.data().iter().all(|&g| g == 0.0));
        assert!(dzs.data().iter().all(|&g| g == 0.0));

        // gamma = 1 and delta = 0 kill both terms
        let z_s = Tensor::from_rows(&[vec![0.0, 2.0], vec![5.0, -1.0]]).unwrap();
        let (v2, _, _) = kd_loss(&z, &z_s, &[0, 1], &w, 1.0, 1.0, 0.0).unwrap();
        assert_eq!(v2, 0.0);

        // hand case: KL each way is 1.5231883119, delta 0.775803
        let z_t = Tensor::from_rows(&[vec![2.0, 0.0]]).unwrap();
        let z_s1 = Tensor::from_rows(&[vec![0.0, 2.0]]).unwrap();
        let (v3, _, _) = kd_loss(&z_t, &z_s1, &[0], &w, 1.0, 0.0, 0.7758034925743759).unwrap();
        assert_close(v3, 2.7048831241409625, 1e-12);
    }

    #[test]
    fn kd_routing_structural_zeros() {
        let z_t = Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 0.1]]).unwrap();
        let z_s = Tensor::from_rows(&[vec![-1.0, 0.3], vec![2.0, -0.4]]).unwrap();
        let w = ClassWeights::uniform(2);
        // only the (1−γ) term active: teacher logits receive no gradient
        let (_, dzt, dzs) = kd_loss(&z_t, &z_s, &[0, 1], &w, 2.0, 0.0, 0.0).unwrap();
        assert!(dzt.data().iter().all(|&g| g == 0.0));
        assert!(dzs.data().iter().any(|&g| g != 0.0));
        // only the δ term active: student logits receive no gradient
        let (_, dzt2, dzs2) = kd_loss(&z_t, &z_s, &[0, 1], &w, 2.0, 1.0, 0.9).unwrap();
        assert!(dzt2.data().iter().any(|&g| g != 0.0));
        assert!(dzs2.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn match_nearest_tie_and_identity() {
        let hp = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let hs = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(match_nearest(&hp, &hs).unwrap(), vec![0]);

        let pts = Tensor::from_rows(&[vec![0.0, 1.0], vec![3.0, -1.0]]).unwrap();
        assert_eq!(match_nearest(&pts, &pts).unwrap(), vec![0, 1]);

        let single = Tensor::from_rows(&[vec![9.0, 9.0]]).unwrap();
        assert_eq!(match_nearest(&pts, &single).unwrap(), vec![0, 0]);

        let empty = Tensor::zeros(vec![0, 2]);
        assert!(match_nearest(&empty, &pts).unwrap().is_empty());
    }

    #[test]
    fn geometric_loss_examples() {
        let a = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let (v, _, _) = geometric_loss(&a, &b, &[0]);
        assert_eq!(v, 1.0);
        let (same, _, _) = geometric_loss(&a, &a, &[0]);
        assert_eq!(same, 0.0);

        // homogeneity: scaling both inputs by c scales the loss by c²
        let a2 = Tensor::from_rows(&[vec![3.0, 0.0]]).unwrap();
        let b2 = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let (v2, _, _) = geometric_loss(&a2, &b2, &[0]);
        assert_close(v2, 9.0 * v, 1e-12);
    }

    #[test]
    fn directional_loss_examples() {
        let u = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let (parallel, _, _, _) = directional_loss(&u, &u, &[0]);
        assert_close(parallel, 0.0, 1e-9);

        let v = Tensor::from_rows(&[vec![0.0, 2.0]]).unwrap();
        let (orth, _, _, _) = directional_loss(&u, &v, &[0]);
        assert_close(orth, 1.0, 1e-9);

        let anti = Tensor::from_rows(&[vec![-3.0, 0.0]]).unwrap();
        let (op, _, _, _) = directional_loss(&u, &anti, &[0]);
        assert_close(op, 2.0, 1e-9);
    }

    #[test]
    fn contrastive_loss_examples() {
        let bank = MemoryBank::new(8);
        let single = Tensor::from_rows(&[vec![0.4, -0.3]]).unwrap();
        let (v, d_hp, d_hs) = contrastive_loss(&single, &single, &bank, 0.1).unwrap();
        assert_eq!(v, 0.0);
        assert!(d_hp.data().iter().all(|&g| g == 0.0));
        assert!(d_hs.data().iter().all(|&g| g == 0.0));

        let pair = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let (v2, _, _) = contrastive_loss(&pair, &pair, &bank, 0.1).unwrap();
        // −log(e^10/(e^10+1)) per row (up to the 1e-8 normalization eps)
        assert_close(v2, 4.5398909e-5, 1e-10);
        assert!(v2 >= 0.0);
    }

    #[test]
    fn alignment_loss_composition_and_score() {
        let bank = MemoryBank::new(8);
        let cfg = AlignConfig::default();
        let h = Tensor::from_rows(&[vec![0.5, 1.0]]).unwrap();
        let out = alignment_loss(&h, &h, &bank, &cfg).unwrap();
        assert_close(out.loss, 0.0, 1e-9);
        assert_close(out.score, 1.0, 1e-9);

        let u = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let v = Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap();
        let out2 = alignment_loss(&u, &v, &bank, &cfg).unwrap();
        assert_close(out2.score, 0.5, 1e-9);
        let composite =
            out2.geometric + cfg.lambda_cos * out2.directional + cfg.lambda_contrast * out2.structural;
        assert_close(out2.loss, composite, 1e-12);
    }

    #[test]
    fn adaptive_weight_updates() {
        let mut st = AdaptiveWeights::init(0);
        update_adaptive_weights(&mut st, 0.5, 1.0, 0);
        // 0.9·0.2 + 0.1·0.5 = 0.23, clamped to the r=0 upper bound 0.18
        assert_close(st.lambda_kd, 0.18, 1e-12);

        assert_close(AdaptiveWeights::smoothing(7), 0.7, 1e-12);
        assert_close(AdaptiveWeights::smoothing(3), 0.81, 1e-12);

        // repeated perfect agreement decays both weights to the floors
        let mut st2 = AdaptiveWeights::init(5);
        for _ in 0..500 {
            update_adaptive_weights(&mut st2, 1.0, 1.0, 5);
        }
        assert_close(st2.lambda_kd, 0.03, 1e-9);
        assert_close(st2.lambda_align, 0.01, 1e-9);
    }

    #[test]
    fn total_loss_composition() {
        let mut st = AdaptiveWeights::init(0);
        st.lambda_kd = 0.1;
        st.lambda_align = 0.05;
        let v = total_loss(1.0, 2.0, 4.0, &st);
        assert_close(v, 1.0 + 0.2 + 0.2, 1e-12);
        // linearity in each term
        let v2 = total_loss(1.0, 4.0, 4.0, &st);
        assert_close(v2 - v, 0.2, 1e-12);
    }

    #[test]
    fn alignment_invariant_under_batch_permutation() {
        // permuting the batch (teacher and student rows together) re-derives
        // the same matching up to relabeling and leaves the loss unchanged
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(21);
        let bank = MemoryBank::new(8);
        let cfg = AlignConfig::default();
        let rows = |rng: &mut rand_chacha::ChaCha12Rng| {
            (0..4)
                .map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect())
                .collect::<Vec<Vec<f64>>>()
        };
        let hp_rows = rows(&mut rng);
        let hs_rows = rows(&mut rng);
        let hp = Tensor::from_rows(&hp_rows).unwrap();
        let hs = Tensor::from_rows(&hs_rows).unwrap();
        let out = alignment_loss(&hp, &hs, &bank, &cfg).unwrap();

        let perm = [2usize, 0, 3, 1];
        let hp_p = Tensor::from_rows(&perm.iter().map(|&j| hp_rows[j].clone()).collect::<Vec<_>>())
            .unwrap();
        let hs_p = Tensor::from_rows(&perm.iter().map(|&j| hs_rows[j].clone()).collect::<Vec<_>>())
            .unwrap();
        let out_p = alignment_loss(&hp_p, &hs_p, &bank, &cfg).unwrap();
        assert!((out.loss - out_p.loss).abs() < 1e-12, "{} vs {}", out.loss, out_p.loss);
        assert!((out.score - out_p.score).abs() < 1e-12);
    }

    #[cfg(test)]
    mod proptests {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn adaptive_bounds_hold_after_any_update_sequence(
                updates in proptest::collection::vec((0.0..=1.0f64, 0.0..=1.0f64, 0u64..40), 1..60)
            ) {
                let mut st = AdaptiveWeights::init(0);
                for (gamma, score, r) in updates {
                    update_adaptive_weights(&mut st, gamma, score, r);
                    let (kd_lo, kd_hi) = AdaptiveWeights::kd_bounds(r);
                    let (al_lo, al_hi) = AdaptiveWeights::align_bounds(r);
                    prop_assert!(st.lambda_kd >= kd_lo && st.lambda_kd <= kd_hi);
                    prop_assert!(st.lambda_align >= al_lo && st.lambda_align <= al_hi);
                }
            }

            #[test]
            fn equal_counts_give_unit_weights(n in 1usize..200, c in 2usize..6) {
                let counts = vec![n; c];
                let w = compute_class_weights(&counts, 0.999).unwrap();
                for v in w.weights {
                    prop_assert!((v - 1.0).abs() < 1e-12);
                }
            }
        }
    }
}
