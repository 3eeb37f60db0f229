//! Server side: client selection, dropout/straggler filtering, normalized
//! equal-weight gradient aggregation with momentum, the plain federated
//! averaging baseline, and the multi-round orchestration loop.

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

use crate::client::{
    client_update, evaluate_client, evaluate_model, ClientConfig, ClientRoundOutput, ClientState,
    ModelRole,
};
use crate::error::{Result, SentinelError};
use crate::metrics::MacroMode;
use crate::model::ModelParams;

/// Bytes per transmitted parameter value.
pub const VALUE_WIDTH_BYTES: u64 = 8;

const AGG_EPS: f64 = 1e-8;
const SILENT_CLIENT_NORM: f64 = 1e-12;

/// Global student parameters plus the server-side momentum state.
#[derive(Debug)]
pub struct ServerState {
    pub global_student: ModelParams,
    pub momentum: Vec<f64>,
    pub eta: f64,
    pub beta_m: f64,
    pub round: u64,
}

impl ServerState {
    pub fn new(global_student: ModelParams, eta: f64, beta_m: f64) -> Self {
        let momentum = vec![0.0; global_student.param_count()];
        ServerState {
            global_student,
            momentum,
            eta,
            beta_m,
            round: 0,
        }
    }
}

/// Participation and reliability-filter settings.
#[derive(Debug, Clone)]
pub struct SelectionConfig {
    pub rho: f64,
    pub p_drop: f64,
    pub t_thresh: f64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            rho: 1.0,
            p_drop: 0.0,
            t_thresh: 10_000.0,
        }
    }
}

/// Uniform sample without replacement of `ceil(rho·N)` clients, returned in
/// ascending id order.
pub fn select_clients(ids: &[usize], rho: f64, rng: &mut ChaCha12Rng) -> Result<Vec<usize>> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(SentinelError::InvalidArgument(format!(
            "join ratio must lie in (0, 1], got {rho}"
        )));
    }
    let k = ((rho * ids.len() as f64).ceil() as usize).clamp(1, ids.len());
    let mut picked: Vec<usize> = sample(rng, ids.len(), k)
        .into_iter()
        .map(|i| ids[i])
        .collect();
    picked.sort_unstable();
    Ok(picked)
}

/// Dropout survivors followed by the straggler cut `t_c ≤ T_thresh`.
/// An empty result is a handled outcome: the round is skipped upstream.
pub fn filter_reliable(
    selected: &[usize],
    rng: &mut ChaCha12Rng,
    p_drop: f64,
    times: &[(usize, f64)],
    t_thresh: f64,
) -> Vec<usize> {
    selected
        .iter()
        .filter(|_| rng.random::<f64>() >= p_drop)
        .filter(|&&c| {
            times
                .iter()
                .find(|&&(id, _)| id == c)
                .is_none_or(|&(_, t)| t <= t_thresh)
        })
        .copied()
        .collect()
}

/// Normalized equal-weight aggregation of pseudo-gradients
/// `g_i = θ_global − θ_i`: each scaled to unit ℓ₂ norm, then averaged.
/// Clients whose update norm is below `1e-12` contribute a zero vector.
pub fn aggregate_normalized(global_flat: &[f64], client_flats: &[Vec<f64>]) -> Result<Vec<f64>> {
    if client_flats.is_empty() {
        return Err(SentinelError::InvalidArgument(
            "aggregate_normalized needs at least one client update".into(),
        ));
    }
    let mut g_bar = vec![0.0; global_flat.len()];
    for (i, client) in client_flats.iter().enumerate() {
        if client.len() != global_flat.len() {
            return Err(SentinelError::dim(
                format!("client {i} parameter layout"),
                global_flat.len(),
                client.len(),
            ));
        }
        let mut norm_sq = 0.0;
        for (g, c) in global_flat.iter().zip(client) {
            let d = g - c;
            norm_sq += d * d;
        }
        let norm = norm_sq.sqrt();
        if norm <= SILENT_CLIENT_NORM {
            continue;
        }
        let scale = 1.0 / (norm + AGG_EPS);
        for ((acc, g), c) in g_bar.iter_mut().zip(global_flat).zip(client) {
            *acc += (g - c) * scale;
        }
    }
    let inv = 1.0 / client_flats.len() as f64;
    for v in &mut g_bar {
        *v *= inv;
    }
    Ok(g_bar)
}

/// `v ← β_m·v + (1−β_m)·ḡ;  θ ← θ − η·v;  round ← round + 1`.
pub fn momentum_update(st: &mut ServerState, g_bar: &[f64]) -> Result<()> {
    if g_bar.len() != st.momentum.len() {
        return Err(SentinelError::dim("aggregated gradient layout", st.momentum.len(), g_bar.len()));
    }
    let mut theta = st.global_student.flatten();
    for ((v, g), t) in st.momentum.iter_mut().zip(g_bar).zip(theta.iter_mut()) {
        *v = st.beta_m * *v + (1.0 - st.beta_m) * g;
        *t -= st.eta * *v;
    }
    st.global_student.load_flat(&theta)?;
    st.round += 1;
    Ok(())
}

/// Parameter-wise weighted mean with weights `n_i / Σn`.
pub fn fedavg_aggregate(client_flats: &[Vec<f64>], sample_counts: &[usize]) -> Result<Vec<f64>> {
    if client_flats.is_empty() || client_flats.len() != sample_counts.len() {
        return Err(SentinelError::InvalidArgument(format!(
            "fedavg_aggregate needs matching non-empty lists, got {} updates and {} counts",
            client_flats.len(),
            sample_counts.len()
        )));
    }
    if sample_counts.iter().any(|&n| n == 0) {
        return Err(SentinelError::InvalidArgument(
            "fedavg_aggregate requires positive sample counts".into(),
        ));
    }
    let width = client_flats[0].len();
    let total: f64 = sample_counts.iter().map(|&n| n as f64).sum();
    let mut out = vec![0.0; width];
    for (i, (flat, &n)) in client_flats.iter().zip(sample_counts).enumerate() {
        if flat.len() != width {
            return Err(SentinelError::dim(
                format!("client {i} parameter layout"),
                width,
                flat.len(),
            ));
        }
        let w = n as f64 / total;
        for (o, &v) in out.iter_mut().zip(flat) {
            *o += w * v;
        }
    }
    Ok(out)
}

/// Aggregation rule used by the orchestrator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggregationRule {
    /// Normalized pseudo-gradients plus the server momentum update.
    NormalizedMomentum,
    /// Weighted parameter mean assigned directly as the new global model.
    FedAvg,
}

/// One evaluation row of the per-round report.
#[derive(Debug, Clone)]
pub struct EvalRow {
    pub round: u64,
    pub client_id: usize,
    pub model: ModelRole,
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub wall_time_s: f64,
    pub lambda_kd_last: Option<f64>,
    pub lambda_align_last: Option<f64>,
}

/// Everything recorded about one communication round.
#[derive(Debug, Clone)]
pub struct RoundReport {
    pub round: u64,
    pub selected: Vec<usize>,
    pub reliable: Vec<usize>,
    /// True when the reliable set came back empty and the global model was
    /// left untouched.
    pub skipped: bool,
    pub rows: Vec<EvalRow>,
    pub downlink_bytes: u64,
    pub uplink_bytes: u64,
    /// Full per-batch `(λ_KD, λ_align)` traces of the selected clients.
    pub lambda_traces: Vec<(usize, Vec<(f64, f64)>)>,
    /// Loss-term sums of the selected clients.
    pub loss_sums: Vec<(usize, crate::client::LossSums)>,
}

/// Orchestration settings independent of any one client.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub rounds: u64,
    pub selection: SelectionConfig,
    pub rule: AggregationRule,
    pub client: ClientConfig,
    pub macro_mode: MacroMode,
    /// Replaces measured wall time as `t_c` when present (indexed by
    /// client id); makes runs and reports time-deterministic.
    pub synthetic_times: Option<Vec<f64>>,
}

/// The full federated loop: select, broadcast, parallel local updates,
/// filter, aggregate, evaluate every client, append one report per round.
pub fn run_training(
    clients: &mut [ClientState],
    server: &mut ServerState,
    cfg: &TrainConfig,
    rng: &mut ChaCha12Rng,
) -> Result<Vec<RoundReport>> {
    if clients.is_empty() {
        return Err(SentinelError::InvalidArgument("run_training needs at least one client".into()));
    }
    let ids: Vec<usize> = clients.iter().map(|c| c.client_id).collect();
    let param_count = server.global_student.param_count() as u64;
    let mut reports = Vec::with_capacity(cfg.rounds as usize);

    for round in 1..=cfg.rounds {
        let selected = select_clients(&ids, cfg.selection.rho, rng)?;
        let downlink_bytes = selected.len() as u64 * param_count * VALUE_WIDTH_BYTES;

        // parallel client training on the broadcast parameters
        let global_flat = server.global_student.flatten();
        let outputs: Vec<Option<(usize, ClientRoundOutput)>> = clients
            .par_iter_mut()
            .map(|client| {
                if !selected.contains(&client.client_id) {
                    return Ok(None);
                }
                let out = client_update(client, &global_flat, round, &cfg.client)
                    .map_err(|e| round_context(e, round, client.client_id))?;
                Ok(Some((client.client_id, out)))
            })
            .collect::<Result<_>>()?;
        let outputs: Vec<(usize, ClientRoundOutput)> = outputs.into_iter().flatten().collect();

        // reliability filtering on dropout draws and per-round times
        let times: Vec<(usize, f64)> = outputs
            .iter()
            .map(|(id, out)| {
                let t = cfg
                    .synthetic_times
                    .as_ref()
                    .and_then(|v| v.get(*id).copied())
                    .unwrap_or(out.wall_time_s);
                (*id, t)
            })
            .collect();
        let reliable = filter_reliable(
            &selected,
            rng,
            cfg.selection.p_drop,
            &times,
            cfg.selection.t_thresh,
        );
        let uplink_bytes = reliable.len() as u64 * param_count * VALUE_WIDTH_BYTES;

        // aggregation
        let mut skipped = false;
        if reliable.is_empty() {
            skipped = true;
            server.round += 1;
        } else {
            let updates: Vec<Vec<f64>> = reliable
                .iter()
                .map(|id| {
                    outputs
                        .iter()
                        .find(|(oid, _)| oid == id)
                        .expect("reliable clients are a subset of the trained set")
                        .1
                        .student_state
                        .flatten()
                })
                .collect();
            match cfg.rule {
                AggregationRule::NormalizedMomentum => {
                    let g_bar = aggregate_normalized(&global_flat, &updates)?;
                    momentum_update(server, &g_bar)?;
                }
                AggregationRule::FedAvg => {
                    let counts: Vec<usize> = reliable
                        .iter()
                        .map(|id| clients.iter().find(|c| c.client_id == *id).unwrap().train_size())
                        .collect();
                    let new_global = fedavg_aggregate(&updates, &counts)?;
                    server.global_student.load_flat(&new_global)?;
                    server.round += 1;
                }
            }
        }

        // evaluate every client
        let mut rows = Vec::new();
        for client in clients.iter() {
            let t_c = times
                .iter()
                .find(|&&(id, _)| id == client.client_id)
                .map_or(0.0, |&(_, t)| t);
            let out = outputs.iter().find(|(id, _)| *id == client.client_id);
            let (kd_last, al_last) = out
                .and_then(|(_, o)| o.lambda_trace.last().copied())
                .map_or((None, None), |(kd, al)| (Some(kd), Some(al)));
            match cfg.rule {
                AggregationRule::NormalizedMomentum => {
                    for role in [ModelRole::Teacher, ModelRole::Student] {
                        let rep = evaluate_client(client, role, cfg.macro_mode)
                            .map_err(|e| round_context(e, round, client.client_id))?;
                        rows.push(EvalRow {
                            round,
                            client_id: client.client_id,
                            model: role,
                            accuracy: rep.accuracy,
                            macro_precision: rep.macro_precision,
                            macro_recall: rep.macro_recall,
                            macro_f1: rep.macro_f1,
                            wall_time_s: t_c,
                            lambda_kd_last: kd_last,
                            lambda_align_last: al_last,
                        });
                    }
                }
                AggregationRule::FedAvg => {
                    let rep = evaluate_model(&server.global_student, &client.test, cfg.macro_mode)
                        .map_err(|e| round_context(e, round, client.client_id))?;
                    rows.push(EvalRow {
                        round,
                        client_id: client.client_id,
                        model: ModelRole::Global,
                        accuracy: rep.accuracy,
                        macro_precision: rep.macro_precision,
                        macro_recall: rep.macro_recall,
                        macro_f1: rep.macro_f1,
                        wall_time_s: t_c,
                        lambda_kd_last: None,
                        lambda_align_last: None,
                    });
                }
            }
        }

        let lambda_traces = outputs
            .iter()
            .map(|(id, o)| (*id, o.lambda_trace.clone()))
            .collect();
        let loss_sums = outputs.iter().map(|(id, o)| (*id, o.loss_sums)).collect();
        reports.push(RoundReport {
            round,
            selected,
            reliable,
            skipped,
            rows,
            downlink_bytes,
            uplink_bytes,
            lambda_traces,
            loss_sums,
        });
    }
    Ok(reports)
}

fn round_context(e: SentinelError, round: u64, client: usize) -> SentinelError {
    match e {
        SentinelError::Numeric { context, detail } => SentinelError::Numeric { context, detail },
        SentinelError::Config(msg) => {
            SentinelError::Config(format!("round {round}, client {client}: {msg}"))
        }
        SentinelError::Data(msg) => {
            SentinelError::Data(format!("round {round}, client {client}: {msg}"))
        }
        other => other,
    }
}
