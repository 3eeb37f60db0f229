//! From a parsed configuration to a finished experiment: dataset
//! construction, partitioning, per-client splits and scaling, model
//! assembly, and the federated training loop on a sized thread pool.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::client::{ClientConfig, ClientState};
use crate::config::RunConfig;
use crate::data::{
    apply_scaler, dirichlet_partition, fit_scaler, iid_partition, load_csv, split_train_test,
    synth_imbalanced, PartitionPlan, TabularDataset,
};
use crate::error::{Result, SentinelError};
use crate::model::{build_variant, ModelParams, Variant};
use crate::optim::AdamWConfig;
use crate::server::{
    run_training, AggregationRule, RoundReport, SelectionConfig, ServerState, TrainConfig,
};

// rng stream tags; every consumer gets its own derived stream
const TAG_DATA: u64 = 1;
const TAG_PARTITION: u64 = 2;
const TAG_SERVER: u64 = 3;
const TAG_GLOBAL_INIT: u64 = 4;
const TAG_SPLIT_BASE: u64 = 1_000;
const TAG_CLIENT_BASE: u64 = 100_000;

/// SplitMix64 fold of a master seed and a stream tag.
pub fn derive_seed(master: u64, tag: u64) -> u64 {
    let mut z = master ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn stream(master: u64, tag: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(derive_seed(master, tag))
}

/// Everything a finished run hands to the report writer and the tests.
#[derive(Debug)]
pub struct RunArtifacts {
    pub reports: Vec<RoundReport>,
    pub label_names: Vec<String>,
    pub student_param_count: usize,
    pub teacher_param_count: usize,
    pub variant: Variant,
}

/// Materialize the configured dataset (deterministic in the seed).
pub fn build_dataset(cfg: &RunConfig) -> Result<TabularDataset> {
    match cfg.source.as_str() {
        "synthetic" => {
            let mut rng = stream(cfg.seed, TAG_DATA);
            synth_imbalanced(
                &cfg.synth_counts,
                cfg.synth_features,
                cfg.synth_separation,
                &mut rng,
            )
        }
        "csv" => {
            let path = cfg.csv_path.as_deref().ok_or_else(|| {
                SentinelError::Config("csv_path is required when source=csv".into())
            })?;
            let label = cfg.label_column.as_deref().ok_or_else(|| {
                SentinelError::Config("label_column is required when source=csv".into())
            })?;
            load_csv(path, label)
        }
        other => Err(SentinelError::Config(format!("unknown source '{other}'"))),
    }
}

/// Assign samples to clients: Dirichlet draw, or uniform equal-size when
/// `alpha = inf`.
pub fn build_partition(cfg: &RunConfig, ds: &TabularDataset) -> Result<PartitionPlan> {
    let mut rng = stream(cfg.seed, TAG_PARTITION);
    if cfg.alpha.is_infinite() {
        iid_partition(ds.len(), cfg.num_clients, &mut rng, cfg.min_per_client)
    } else {
        dirichlet_partition(
            &ds.labels,
            cfg.num_clients,
            cfg.alpha,
            &mut rng,
            cfg.min_per_client,
        )
    }
}

fn client_config(cfg: &RunConfig) -> Result<ClientConfig> {
    let (use_balanced, use_kd, use_align) = cfg.effective_flags();
    Ok(ClientConfig {
        local_epochs: cfg.local_epochs,
        batch_size: cfg.batch_size,
        clip_max_norm: cfg.clip_max_norm,
        use_balanced,
        use_kd,
        use_align,
        delta_mode: cfg.parse_delta_mode()?,
        kd_schedule: Default::default(),
        align: Default::default(),
        lr_decay: cfg.lr_decay,
        reset_student_opt: cfg.reset_student_opt,
    })
}

/// Run the full experiment described by `cfg` and return its reports.
pub fn execute_run(cfg: &RunConfig) -> Result<RunArtifacts> {
    cfg.validate()?;
    let variant = cfg.parse_variant()?;
    let dataset = build_dataset(cfg)?;
    let plan = build_partition(cfg, &dataset)?;

    let (teacher_spec, student_spec, aligner_dims) =
        build_variant(variant, dataset.dim(), dataset.num_classes)?;

    // per-client splits, then scaling fitted on training data only
    let mut locals: Vec<(TabularDataset, TabularDataset)> = Vec::with_capacity(cfg.num_clients);
    for (c, indices) in plan.client_indices().into_iter().enumerate() {
        let local = dataset.subset(&indices);
        let mut split_rng = stream(cfg.seed, TAG_SPLIT_BASE + c as u64);
        locals.push(split_train_test(&local, cfg.train_fraction, &mut split_rng)?);
    }
    if cfg.scaler_scope == "global" {
        let mut union_rows = Vec::new();
        for (train, _) in &locals {
            for i in 0..train.len() {
                union_rows.push(train.features.row(i).to_vec());
            }
        }
        let union = TabularDataset {
            features: crate::tensor::Tensor::from_rows(&union_rows)?,
            labels: vec![0; union_rows.len()],
            num_classes: 1,
            feature_names: None,
            label_names: None,
        };
        let scaler = fit_scaler(&union)?;
        for (train, test) in &mut locals {
            *train = apply_scaler(&scaler, train);
            *test = apply_scaler(&scaler, test);
        }
    } else {
        for (train, test) in &mut locals {
            let scaler = fit_scaler(train)?;
            *train = apply_scaler(&scaler, train);
            *test = apply_scaler(&scaler, test);
        }
    }

    let opt_cfg = AdamWConfig {
        lr: cfg.lr,
        ..AdamWConfig::default()
    };
    let ccfg = client_config(cfg)?;
    let mut clients = Vec::with_capacity(cfg.num_clients);
    for (c, (train, test)) in locals.into_iter().enumerate() {
        let rng = stream(cfg.seed, TAG_CLIENT_BASE + c as u64);
        let client = match variant {
            Variant::FedAvg => {
                ClientState::new_fedavg(c, train, test, &student_spec, opt_cfg, rng)?
            }
            _ => ClientState::new_sentinel(
                c,
                train,
                test,
                &teacher_spec,
                &student_spec,
                aligner_dims,
                opt_cfg,
                cfg.bank_capacity,
                ccfg.use_balanced,
                cfg.balance_beta,
                rng,
            )?,
        };
        clients.push(client);
    }

    let mut global_rng = stream(cfg.seed, TAG_GLOBAL_INIT);
    let global = ModelParams::init(&student_spec, &mut global_rng);
    let mut server = ServerState::new(global, cfg.eta, cfg.beta_momentum);

    let train_cfg = TrainConfig {
        rounds: cfg.rounds,
        selection: SelectionConfig {
            rho: cfg.rho,
            p_drop: cfg.p_drop,
            t_thresh: cfg.t_thresh,
        },
        rule: match variant {
            Variant::FedAvg => AggregationRule::FedAvg,
            _ => AggregationRule::NormalizedMomentum,
        },
        client: ccfg,
        macro_mode: cfg.parse_macro_mode()?,
        synthetic_times: cfg.synthetic_time_s.map(|t| vec![t; cfg.num_clients]),
    };

    let mut server_rng = stream(cfg.seed, TAG_SERVER);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| SentinelError::Config(format!("thread pool: {e}")))?;
    let reports =
        pool.install(|| run_training(&mut clients, &mut server, &train_cfg, &mut server_rng))?;

    Ok(RunArtifacts {
        reports,
        label_names: dataset
            .label_names
            .clone()
            .unwrap_or_else(|| (0..dataset.num_classes).map(|c| c.to_string()).collect()),
        student_param_count: student_spec.param_count(),
        teacher_param_count: teacher_spec.param_count(),
        variant,
    })
}
