//! Per-round local training: dual-model distillation with feature
//! alignment and adaptive loss weighting on each client, plus the plain
//! single-model baseline path used for federated averaging.
//!
//! Only the student ever leaves a client. Teacher, aligner, optimizer
//! states and memory banks persist across rounds; the student is
//! overwritten by the broadcast at the start of every update.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha12Rng;

use crate::bank::MemoryBank;
use crate::data::{class_counts, TabularDataset};
use crate::error::{Result, SentinelError};
use crate::loss::{
    agreement_confidence, alignment_loss, compute_class_weights, kd_loss, task_loss, total_loss,
    update_align_weight, update_kd_weight, AdaptiveWeights, AlignConfig, AlignOutput,
    ClassWeights, DeltaMode, KdSchedule,
};
use crate::metrics::{confusion, report, ClassificationReport, MacroMode};
use crate::model::{AlignerParams, MlpSpec, ModelParams, StateDict};
use crate::optim::{clip_grad_norm, AdamWConfig, Optimizer};
use crate::tensor::{weighted_cross_entropy, ParamTensor, Tensor};

/// Which model an evaluation row refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelRole {
    Teacher,
    Student,
    Global,
}

impl ModelRole {
    pub fn name(&self) -> &'static str {
        match self {
            ModelRole::Teacher => "teacher",
            ModelRole::Student => "student",
            ModelRole::Global => "global",
        }
    }
}

/// Knobs of one local update, shared by every client in a run.
#[derive(Debug, Clone)]
pub struct ClientConfig {
    pub local_epochs: usize,
    pub batch_size: usize,
    pub clip_max_norm: f64,
    pub use_balanced: bool,
    pub use_kd: bool,
    pub use_align: bool,
    pub delta_mode: DeltaMode,
    pub kd_schedule: KdSchedule,
    pub align: AlignConfig,
    pub lr_decay: f64,
    pub reset_student_opt: bool,
}

impl Default for ClientConfig {
    fn default() -> Self {
        ClientConfig {
            local_epochs: 5,
            batch_size: 64,
            clip_max_norm: 1.0,
            use_balanced: true,
            use_kd: true,
            use_align: true,
            delta_mode: DeltaMode::MeanProduct,
            kd_schedule: KdSchedule::default(),
            align: AlignConfig::default(),
            lr_decay: 1.0,
            reset_student_opt: false,
        }
    }
}

/// Teacher-side state that never leaves the client.
#[derive(Debug, Clone)]
pub struct Personalization {
    pub teacher: ModelParams,
    pub teacher_opt: Optimizer,
    pub aligner: AlignerParams,
    pub aligner_opt: Optimizer,
    pub bank_teacher: MemoryBank,
    pub bank_student: MemoryBank,
}

/// One simulated client: local data, models, optimizer states and RNG.
#[derive(Debug)]
pub struct ClientState {
    pub client_id: usize,
    pub train: TabularDataset,
    pub test: TabularDataset,
    pub class_weights: ClassWeights,
    pub student: ModelParams,
    pub student_opt: Optimizer,
    pub personal: Option<Personalization>,
    pub opt_cfg: AdamWConfig,
    pub rng: ChaCha12Rng,
    pub last_round_wall_time: f64,
}

impl ClientState {
    /// Dual-model client with teacher, aligner and memory banks.
    #[allow(clippy::too_many_arguments)]
    pub fn new_sentinel(
        client_id: usize,
        train: TabularDataset,
        test: TabularDataset,
        teacher_spec: &MlpSpec,
        student_spec: &MlpSpec,
        aligner_dims: (usize, usize),
        opt_cfg: AdamWConfig,
        bank_capacity: usize,
        balanced: bool,
        balance_beta: f64,
        mut rng: ChaCha12Rng,
    ) -> Result<Self> {
        let class_weights = if balanced {
            compute_class_weights(&class_counts(&train), balance_beta)?
        } else {
            ClassWeights::uniform(train.num_classes)
        };
        let teacher = ModelParams::init(teacher_spec, &mut rng);
        let student = ModelParams::init(student_spec, &mut rng);
        let aligner = AlignerParams::init(aligner_dims.0, aligner_dims.1, &mut rng);
        let teacher_opt = teacher.optimizer(&opt_cfg);
        let student_opt = student.optimizer(&opt_cfg);
        let aligner_opt = aligner.optimizer(&opt_cfg);
        Ok(ClientState {
            client_id,
            train,
            test,
            class_weights,
            student,
            student_opt,
            personal: Some(Personalization {
                teacher,
                teacher_opt,
                aligner,
                aligner_opt,
                bank_teacher: MemoryBank::new(bank_capacity),
                bank_student: MemoryBank::new(bank_capacity),
            }),
            opt_cfg,
            rng,
            last_round_wall_time: 0.0,
        })
    }

    /// Single-model baseline client (plain cross-entropy).
    pub fn new_fedavg(
        client_id: usize,
        train: TabularDataset,
        test: TabularDataset,
        student_spec: &MlpSpec,
        opt_cfg: AdamWConfig,
        mut rng: ChaCha12Rng,
    ) -> Result<Self> {
        let class_weights = ClassWeights::uniform(train.num_classes);
        let student = ModelParams::init(student_spec, &mut rng);
        let student_opt = student.optimizer(&opt_cfg);
        Ok(ClientState {
            client_id,
            train,
            test,
            class_weights,
            student,
            student_opt,
            personal: None,
            opt_cfg,
            rng,
            last_round_wall_time: 0.0,
        })
    }

    pub fn train_size(&self) -> usize {
        self.train.len()
    }
}

/// Sums of the loss terms over every batch of a round.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossSums {
    pub task: f64,
    pub kd: f64,
    pub align: f64,
    pub total: f64,
    pub batches: usize,
}

/// What a client hands back to the orchestrator after one round.
#[derive(Debug, Clone)]
pub struct ClientRoundOutput {
    /// Deep copy of the student parameters: the only uplink payload.
    pub student_state: StateDict,
    /// `(λ_KD, λ_align)` after each batch, in execution order.
    pub lambda_trace: Vec<(f64, f64)>,
    pub loss_sums: LossSums,
    pub wall_time_s: f64,
}

fn gather_batch(ds: &TabularDataset, indices: &[usize]) -> (Tensor, Vec<usize>) {
    let d = ds.dim();
    let mut data = Vec::with_capacity(indices.len() * d);
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        data.extend_from_slice(ds.features.row(i));
        labels.push(ds.labels[i]);
    }
    (Tensor::new(vec![indices.len(), d], data).unwrap(), labels)
}

/// One full local round. Loads the broadcast into the student, re-seeds the
/// adaptive weights, runs `E` epochs of shuffled mini-batches (the last
/// partial batch is kept), and returns a deep copy of the student
/// parameters.
pub fn client_update(
    st: &mut ClientState,
    global_student: &[f64],
    round: u64,
    cfg: &ClientConfig,
) -> Result<ClientRoundOutput> {
    let start = Instant::now();
    st.student.load_flat(global_student).map_err(|e| {
        SentinelError::Config(format!(
            "broadcast incompatible with client {} student: {e}",
            st.client_id
        ))
    })?;
    if cfg.reset_student_opt {
        st.student_opt = st.student.optimizer(&st.opt_cfg);
    }

    let mut weights = AdaptiveWeights::init(round);
    let mut trace = Vec::new();
    let mut sums = LossSums::default();

    let n = st.train.len();
    let batch = cfg.batch_size.max(1);
    let mut order: Vec<usize> = (0..n).collect();
    for _epoch in 0..cfg.local_epochs {
        order.shuffle(&mut st.rng);
        for (batch_no, chunk) in order.chunks(batch).enumerate() {
            let (x, y) = gather_batch(&st.train, chunk);
            let step = if st.personal.is_some() {
                let r = sentinel_batch_step(st, &x, &y, round, cfg, &mut weights, &mut sums);
                trace.push((weights.lambda_kd, weights.lambda_align));
                r
            } else {
                fedavg_batch_step(st, &x, &y, &mut sums)
            };
            step.map_err(|e| batch_context(e, st.client_id, round, batch_no))?;
        }
        st.student_opt.decay_lr(cfg.lr_decay);
        if let Some(p) = &mut st.personal {
            p.teacher_opt.decay_lr(cfg.lr_decay);
            p.aligner_opt.decay_lr(cfg.lr_decay);
        }
    }

    let wall = start.elapsed().as_secs_f64();
    st.last_round_wall_time = wall;
    Ok(ClientRoundOutput {
        student_state: st.student.state_dict(),
        lambda_trace: trace,
        loss_sums: sums,
        wall_time_s: wall,
    })
}

fn batch_context(e: SentinelError, client: usize, round: u64, batch: usize) -> SentinelError {
    match e {
        SentinelError::Numeric { context, detail } => SentinelError::Numeric {
            context: format!("client {client}, round {round}, batch {batch}: {context}"),
            detail,
        },
        other => other,
    }
}

fn sentinel_batch_step(
    st: &mut ClientState,
    x: &Tensor,
    y: &[usize],
    round: u64,
    cfg: &ClientConfig,
    weights: &mut AdaptiveWeights,
    sums: &mut LossSums,
) -> Result<()> {
    let ClientState {
        student,
        student_opt,
        personal,
        class_weights,
        ..
    } = st;
    let personal = personal.as_mut().expect("sentinel client has teacher state");

    // forward pass and feature extraction
    let (h_t, fcache_t) = personal.teacher.forward_features_cached(x)?;
    let (z_t, hcache_t) = personal.teacher.forward_head_cached(&h_t)?;
    let (h_s, fcache_s) = student.forward_features_cached(x)?;
    let (z_s, hcache_s) = student.forward_head_cached(&h_s)?;

    // class-balanced task loss
    let (task_v, dz_t_task, dz_s_task) = task_loss(&z_t, &z_s, y, class_weights)?;

    // adaptive knowledge distillation
    let temp = cfg.kd_schedule.temperature(round);
    let mut kd: Option<(f64, Tensor, Tensor, f64)> = None;
    if cfg.use_kd {
        let (gamma, delta) = agreement_confidence(&z_t, &z_s, temp, cfg.delta_mode)?;
        let (v, dz_t_kd, dz_s_kd) = kd_loss(&z_t, &z_s, y, class_weights, temp, gamma, delta)?;
        kd = Some((v, dz_t_kd, dz_s_kd, gamma));
    }

    // feature alignment on detached teacher features
    let mut align: Option<(AlignOutput, Tensor)> = None;
    if cfg.use_align {
        let (hp_t, preact) = personal.aligner.forward_cached(&h_t)?;
        let out = alignment_loss(&hp_t, &h_s, &personal.bank_student, &cfg.align)?;
        align = Some((out, preact));
        // bank updates happen after the loss has read this round's negatives
        personal.bank_teacher.push(&h_t)?;
        personal.bank_student.push(&h_s)?;
    }

    // dynamic weight adaptation, then the combination uses the fresh values
    if let Some((_, _, _, gamma)) = &kd {
        update_kd_weight(weights, *gamma, round);
    }
    if let Some((out, _)) = &align {
        update_align_weight(weights, out.score, round);
    }

    let kd_v = kd.as_ref().map_or(0.0, |k| k.0);
    let align_v = align.as_ref().map_or(0.0, |a| a.0.loss);
    let total = total_loss(task_v, kd_v, align_v, weights);
    if !total.is_finite() {
        return Err(SentinelError::Numeric {
            context: "combined loss".into(),
            detail: format!("task={task_v} kd={kd_v} align={align_v}"),
        });
    }

    // combined backward
    personal.teacher.zero_grads();
    student.zero_grads();
    personal.aligner.zero_grads();

    let mut dz_t = dz_t_task;
    let mut dz_s = dz_s_task;
    if let Some((_, dz_t_kd, dz_s_kd, _)) = &kd {
        dz_t.add_scaled(dz_t_kd, weights.lambda_kd);
        dz_s.add_scaled(dz_s_kd, weights.lambda_kd);
    }

    // teacher sees task and KD only; alignment is detached from it
    let dh_t = personal.teacher.backward_head(&hcache_t, &dz_t);
    personal.teacher.backward_features(&fcache_t, &dh_t);

    let mut dh_s = student.backward_head(&hcache_s, &dz_s);
    if let Some((out, preact)) = &align {
        dh_s.add_scaled(&out.d_h_student, weights.lambda_align);
        let mut d_hp = out.d_hp_teacher.clone();
        d_hp.scale(weights.lambda_align);
        personal.aligner.backward(&h_t, preact, &d_hp);
    }
    student.backward_features(&fcache_s, &dh_s);

    // one global clip across teacher, student and aligner
    {
        let mut params: Vec<&mut ParamTensor> = personal.teacher.params_mut();
        params.extend(student.params_mut());
        if cfg.use_align {
            params.extend(personal.aligner.params_mut());
        }
        clip_grad_norm(&mut params, cfg.clip_max_norm);
    }

    let teacher_names = personal.teacher.param_names();
    personal
        .teacher_opt
        .step(&mut personal.teacher.params_mut(), &teacher_names)?;
    let student_names = student.param_names();
    student_opt.step(&mut student.params_mut(), &student_names)?;
    if cfg.use_align {
        let aligner_names = personal.aligner.param_names();
        personal
            .aligner_opt
            .step(&mut personal.aligner.params_mut(), &aligner_names)?;
    }

    sums.task += task_v;
    sums.kd += kd_v;
    sums.align += align_v;
    sums.total += total;
    sums.batches += 1;
    Ok(())
}

fn fedavg_batch_step(
    st: &mut ClientState,
    x: &Tensor,
    y: &[usize],
    sums: &mut LossSums,
) -> Result<()> {
    let (h, fcache) = st.student.forward_features_cached(x)?;
    let (z, hcache) = st.student.forward_head_cached(&h)?;
    let (loss, dz) = weighted_cross_entropy(&z, y, &st.class_weights.weights)?;
    if !loss.is_finite() {
        return Err(SentinelError::Numeric {
            context: "baseline cross-entropy".into(),
            detail: format!("loss = {loss}"),
        });
    }
    st.student.zero_grads();
    let dh = st.student.backward_head(&hcache, &dz);
    st.student.backward_features(&fcache, &dh);
    let names = st.student.param_names();
    st.student_opt.step(&mut st.student.params_mut(), &names)?;
    sums.task += loss;
    sums.total += loss;
    sums.batches += 1;
    Ok(())
}

/// Argmax predictions of one of the client's own models on its local test
/// split.
pub fn evaluate_client(
    st: &ClientState,
    which: ModelRole,
    mode: MacroMode,
) -> Result<ClassificationReport> {
    let model = match which {
        ModelRole::Teacher => {
            &st.personal
                .as_ref()
                .ok_or_else(|| {
                    SentinelError::InvalidArgument(format!(
                        "client {} has no teacher model",
                        st.client_id
                    ))
                })?
                .teacher
        }
        ModelRole::Student => &st.student,
        ModelRole::Global => {
            return Err(SentinelError::InvalidArgument(
                "global evaluation goes through evaluate_model".into(),
            ))
        }
    };
    evaluate_model(model, &st.test, mode)
}

/// Argmax predictions of an arbitrary model on a test split.
pub fn evaluate_model(
    model: &ModelParams,
    test: &TabularDataset,
    mode: MacroMode,
) -> Result<ClassificationReport> {
    if test.is_empty() {
        return Err(SentinelError::Data("cannot evaluate on an empty test split".into()));
    }
    let z = model.logits(&test.features)?;
    let preds: Vec<usize> = (0..z.rows())
        .map(|i| {
            let row = z.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect();
    let cm = confusion(&test.labels, &preds, test.num_classes)?;
    report(&cm, mode)
}

/// FIFO append of detached feature rows into a bank.
pub fn bank_push(bank: &mut MemoryBank, rows: &Tensor) -> Result<()> {
    bank.push(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_imbalanced;
    use crate::model::build_variant;
    use rand::SeedableRng;

    fn toy_client(seed: u64, balanced: bool, variant: crate::model::Variant) -> ClientState {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let ds = synth_imbalanced(&[40, 20, 10], 6, 3.0, &mut rng).unwrap();
        let (train, test) =
            crate::data::split_train_test(&ds, 0.8, &mut ChaCha12Rng::seed_from_u64(seed + 1))
                .unwrap();
        let (teacher, student, aligner) = build_variant(variant, 6, 3).unwrap();
        ClientState::new_sentinel(
            0,
            train,
            test,
            &teacher,
            &student,
            aligner,
            AdamWConfig::default(),
            64,
            balanced,
            0.999,
            ChaCha12Rng::seed_from_u64(seed + 2),
        )
        .unwrap()
    }

    #[test]
    fn zero_epochs_returns_broadcast_unchanged() {
        let mut st = toy_client(1, true, crate::model::Variant::SentinelI);
        let global: Vec<f64> = (0..st.student.param_count())
            .map(|i| (i as f64) * 1e-3)
            .collect();
        let cfg = ClientConfig {
            local_epochs: 0,
            ..ClientConfig::default()
        };
        let out = client_update(&mut st, &global, 1, &cfg).unwrap();
        assert_eq!(out.student_state.flatten(), global);
        assert!(out.lambda_trace.is_empty());
    }

    #[test]
    fn update_is_bitwise_deterministic() {
        let run = |seed: u64| {
            let mut st = toy_client(seed, true, crate::model::Variant::SentinelI);
            let global = vec![0.01; st.student.param_count()];
            let cfg = ClientConfig {
                local_epochs: 2,
                batch_size: 16,
                ..ClientConfig::default()
            };
            client_update(&mut st, &global, 3, &cfg)
                .unwrap()
                .student_state
                .flatten()
        };
        assert_eq!(run(9), run(9));
    }

    #[test]
    fn teacher_trains_but_never_leaves() {
        let mut st = toy_client(2, true, crate::model::Variant::SentinelII);
        let before = st.personal.as_ref().unwrap().teacher.flatten();
        let global = st.student.flatten();
        let cfg = ClientConfig {
            local_epochs: 1,
            batch_size: 16,
            ..ClientConfig::default()
        };
        let out = client_update(&mut st, &global, 1, &cfg).unwrap();
        let after = st.personal.as_ref().unwrap().teacher.flatten();
        assert_ne!(before, after, "teacher parameters should move");
        // the uplink payload carries student layers only
        assert_eq!(out.student_state.param_count(), st.student.param_count());
        assert!(out
            .student_state
            .entries
            .iter()
            .all(|e| e.name.starts_with("fe") || e.name.starts_with("head")));
        assert!(st.last_round_wall_time > 0.0);
    }

    #[test]
    fn alignment_path_is_detached_from_teacher() {
        // identical clients, one with alignment on and one off: with KD
        // disabled and no clipping, teacher trajectories must coincide
        let run = |use_align: bool| {
            let mut st = toy_client(4, true, crate::model::Variant::SentinelII);
            let global = st.student.flatten();
            let cfg = ClientConfig {
                local_epochs: 1,
                batch_size: 16,
                use_kd: false,
                use_align,
                clip_max_norm: 1e12,
                ..ClientConfig::default()
            };
            client_update(&mut st, &global, 1, &cfg).unwrap();
            (
                st.personal.as_ref().unwrap().teacher.flatten(),
                st.student.flatten(),
            )
        };
        let (teacher_on, student_on) = run(true);
        let (teacher_off, student_off) = run(false);
        assert_eq!(teacher_on, teacher_off);
        assert_ne!(student_on, student_off);
    }

    #[test]
    fn ablated_run_reduces_to_task_loss() {
        let mut st = toy_client(5, false, crate::model::Variant::SentinelI);
        let global = st.student.flatten();
        let cfg = ClientConfig {
            local_epochs: 1,
            batch_size: 16,
            use_kd: false,
            use_align: false,
            use_balanced: false,
            ..ClientConfig::default()
        };
        let out = client_update(&mut st, &global, 0, &cfg).unwrap();
        assert_eq!(out.loss_sums.kd, 0.0);
        assert_eq!(out.loss_sums.align, 0.0);
        assert_eq!(out.loss_sums.total, out.loss_sums.task);
    }

    #[test]
    fn lambda_trace_respects_bounds() {
        let mut st = toy_client(6, true, crate::model::Variant::SentinelI);
        let global = st.student.flatten();
        let cfg = ClientConfig {
            local_epochs: 2,
            batch_size: 8,
            ..ClientConfig::default()
        };
        let round = 2;
        let out = client_update(&mut st, &global, round, &cfg).unwrap();
        assert!(!out.lambda_trace.is_empty());
        let (kd_lo, kd_hi) = AdaptiveWeights::kd_bounds(round);
        let (al_lo, al_hi) = AdaptiveWeights::align_bounds(round);
        for (kd, al) in out.lambda_trace {
            assert!(kd >= kd_lo && kd <= kd_hi);
            assert!(al >= al_lo && al <= al_hi);
        }
    }

    #[test]
    fn broadcast_shape_mismatch_is_config_error() {
        let mut st = toy_client(7, true, crate::model::Variant::SentinelI);
        let bad = vec![0.0; 3];
        let err = client_update(&mut st, &bad, 0, &ClientConfig::default()).unwrap_err();
        assert!(matches!(err, SentinelError::Config(_)));
    }

    #[test]
    fn evaluation_reports_sane_metrics() {
        let st = toy_client(8, true, crate::model::Variant::SentinelI);
        let rep = evaluate_client(&st, ModelRole::Teacher, MacroMode::AllClasses).unwrap();
        assert!(rep.accuracy >= 0.0 && rep.accuracy <= 1.0);
        let rep_s = evaluate_client(&st, ModelRole::Student, MacroMode::AllClasses).unwrap();
        assert_eq!(rep.per_class.len(), rep_s.per_class.len());
    }

    #[test]
    fn majority_predictor_metrics() {
        // a model that always answers the majority class on a 90/10 split
        let mut rng = ChaCha12Rng::seed_from_u64(40);
        let ds = synth_imbalanced(&[90, 10], 4, 0.0, &mut rng).unwrap();
        let spec = MlpSpec::new(4, vec![3], vec![2], 2).unwrap();
        let mut model = ModelParams::init(&spec, &mut rng);
        let mut flat = vec![0.0; model.param_count()];
        // bias the final layer hard toward class 0
        let n = flat.len();
        flat[n - 2] = 10.0;
        flat[n - 1] = -10.0;
        model.load_flat(&flat).unwrap();
        let rep = evaluate_model(&model, &ds, MacroMode::AllClasses).unwrap();
        assert!((rep.accuracy - 0.9).abs() < 1e-12);
        assert!((rep.macro_recall - 0.5).abs() < 1e-12);
    }
}
