//! Report files: the per-round CSV, the mean±std summary, the effective
//! configuration echo and the label-mapping sidecar. All writes go through
//! a temp file plus rename.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::client::ModelRole;
use crate::config::RunConfig;
use crate::data::{partition_heterogeneity, PartitionPlan};
use crate::error::{Result, SentinelError};
use crate::metrics::mean_std;
use crate::model::Variant;
use crate::run::RunArtifacts;
use crate::server::RoundReport;

/// Atomic text write: temp file in the same directory, then rename.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).map_err(|e| SentinelError::io(tmp.display().to_string(), e))?;
    fs::rename(&tmp, path).map_err(|e| SentinelError::io(path.display().to_string(), e))?;
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:.6}"))
}

/// One row per (round, client, model) with fixed six-decimal formatting,
/// so identical runs produce identical bytes.
pub fn rounds_csv(reports: &[RoundReport]) -> String {
    let mut out = String::from(
        "round,client_id,model,accuracy,macro_precision,macro_recall,macro_f1,\
         wall_time_s,lambda_kd_last,lambda_align_last\n",
    );
    for report in reports {
        for row in &report.rows {
            out.push_str(&format!(
                "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{},{}\n",
                row.round,
                row.client_id,
                row.model.name(),
                row.accuracy,
                row.macro_precision,
                row.macro_recall,
                row.macro_f1,
                row.wall_time_s,
                fmt_opt(row.lambda_kd_last),
                fmt_opt(row.lambda_align_last),
            ));
        }
    }
    out
}

#[derive(Debug, Serialize)]
struct RoundSummary {
    round: u64,
    model: &'static str,
    mean_accuracy: f64,
    std_accuracy: f64,
    mean_macro_precision: f64,
    std_macro_precision: f64,
    mean_macro_recall: f64,
    std_macro_recall: f64,
    mean_macro_f1: f64,
    std_macro_f1: f64,
    downlink_bytes: u64,
    uplink_bytes: u64,
    skipped: bool,
}

#[derive(Debug, Serialize)]
struct RunSummary {
    variant: String,
    student_param_count: usize,
    teacher_param_count: usize,
    rounds: Vec<RoundSummary>,
}

/// Mean±std across clients per round, over the headline model of the run
/// (teacher rows for the dual-model variants, global rows for the
/// baseline).
pub fn summary_json(artifacts: &RunArtifacts) -> Result<String> {
    let headline = match artifacts.variant {
        Variant::FedAvg => ModelRole::Global,
        _ => ModelRole::Teacher,
    };
    let mut rounds = Vec::with_capacity(artifacts.reports.len());
    for report in &artifacts.reports {
        let pick = |f: fn(&crate::server::EvalRow) -> f64| -> Vec<f64> {
            report
                .rows
                .iter()
                .filter(|r| r.model == headline)
                .map(f)
                .collect()
        };
        let (mean_accuracy, std_accuracy) = mean_std(&pick(|r| r.accuracy))?;
        let (mean_macro_precision, std_macro_precision) = mean_std(&pick(|r| r.macro_precision))?;
        let (mean_macro_recall, std_macro_recall) = mean_std(&pick(|r| r.macro_recall))?;
        let (mean_macro_f1, std_macro_f1) = mean_std(&pick(|r| r.macro_f1))?;
        rounds.push(RoundSummary {
            round: report.round,
            model: headline.name(),
            mean_accuracy,
            std_accuracy,
            mean_macro_precision,
            std_macro_precision,
            mean_macro_recall,
            std_macro_recall,
            mean_macro_f1,
            std_macro_f1,
            downlink_bytes: report.downlink_bytes,
            uplink_bytes: report.uplink_bytes,
            skipped: report.skipped,
        });
    }
    let summary = RunSummary {
        variant: artifacts.variant.name().to_string(),
        student_param_count: artifacts.student_param_count,
        teacher_param_count: artifacts.teacher_param_count,
        rounds,
    };
    serde_json::to_string_pretty(&summary)
        .map_err(|e| SentinelError::Config(format!("summary serialization: {e}")))
}

/// `name → code` sidecar for the label encoding used by a run.
pub fn label_mapping_json(label_names: &[String]) -> Result<String> {
    let map: BTreeMap<&str, usize> = label_names
        .iter()
        .enumerate()
        .map(|(code, name)| (name.as_str(), code))
        .collect();
    serde_json::to_string_pretty(&map)
        .map_err(|e| SentinelError::Config(format!("label mapping serialization: {e}")))
}

/// Write every artifact of a finished run into `out_dir`.
pub fn write_run_artifacts(cfg: &RunConfig, artifacts: &RunArtifacts, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| SentinelError::io(out_dir.display().to_string(), e))?;
    write_atomic(&out_dir.join("rounds.csv"), &rounds_csv(&artifacts.reports))?;
    write_atomic(&out_dir.join("summary.json"), &summary_json(artifacts)?)?;
    write_atomic(
        &out_dir.join("effective_config.toml"),
        &cfg.effective().to_toml()?,
    )?;
    write_atomic(
        &out_dir.join("label_mapping.json"),
        &label_mapping_json(&artifacts.label_names)?,
    )?;
    Ok(())
}

/// Per-client class-count table plus a TV-distance column; returned as
/// `(human-readable table, csv)`.
pub fn partition_table(plan: &PartitionPlan, labels: &[usize], num_classes: usize) -> (String, String) {
    let per_client = plan.client_indices();
    let mut global = vec![0.0; num_classes];
    for &y in labels {
        global[y] += 1.0;
    }
    for g in &mut global {
        *g /= labels.len() as f64;
    }

    let mut table = format!("{:>8}", "client");
    let mut csv = String::from("client");
    for c in 0..num_classes {
        table.push_str(&format!("{:>10}", format!("class_{c}")));
        csv.push_str(&format!(",class_{c}"));
    }
    table.push_str(&format!("{:>12}\n", "tv_dist"));
    csv.push_str(",tv_distance\n");

    for (client, indices) in per_client.iter().enumerate() {
        let mut counts = vec![0usize; num_classes];
        for &i in indices {
            counts[labels[i]] += 1;
        }
        let mut dist = vec![0.0; num_classes];
        if !indices.is_empty() {
            for (d, &c) in dist.iter_mut().zip(&counts) {
                *d = c as f64 / indices.len() as f64;
            }
        }
        let tv = crate::data::tv_distance(&dist, &global);
        table.push_str(&format!("{client:>8}"));
        csv.push_str(&client.to_string());
        for &c in &counts {
            table.push_str(&format!("{c:>10}"));
            csv.push_str(&format!(",{c}"));
        }
        table.push_str(&format!("{tv:>12.4}\n"));
        csv.push_str(&format!(",{tv:.6}\n"));
    }
    table.push_str(&format!(
        "mean TV distance to the global label distribution: {:.4}\n",
        partition_heterogeneity(plan, labels, num_classes)
    ));
    (table, csv)
}
