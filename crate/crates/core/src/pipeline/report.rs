//! Report emitter: ablation grid, pooling comparison, and modality
//! metrics as CSV plus a combined markdown summary.

use crate::error::Result;
use crate::fusion::monte_carlo::{MonteCarloReport, POOLING_KEYS};
use crate::fusion::ModalityCombo;
use crate::metrics::mean_sd;
use crate::pipeline::config::PipelineConfig;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

fn cell(mean: f64, sd: f64) -> String {
    format!("{mean:.3}±{sd:.3}")
}

/// Writes every report artifact; returns the produced paths.
pub fn write_report(
    dir: &Path,
    report: &MonteCarloReport,
    cfg: &PipelineConfig,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut outputs = Vec::new();

    // raw per-fold numbers for downstream consumers
    let raw_path = dir.join("raw_metrics.json");
    std::fs::write(&raw_path, serde_json::to_string_pretty(report)?)?;
    outputs.push(raw_path);

    // ablation grid: 7 modality rows x 6 pooling columns (accuracy)
    let grid_path = dir.join("ablation_grid.csv");
    {
        let mut w = csv::Writer::from_path(&grid_path)?;
        let mut header = vec!["modality".to_string()];
        for key in POOLING_KEYS {
            header.push(format!("{key}_acc_mean"));
            header.push(format!("{key}_acc_sd"));
        }
        w.write_record(&header)?;
        for combo in ModalityCombo::ALL {
            let mut rec = vec![combo.key()];
            for key in POOLING_KEYS {
                let (m, s) = report.grid_accuracy(&combo.key(), key);
                rec.push(format!("{m:.4}"));
                rec.push(format!("{s:.4}"));
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
    }
    outputs.push(grid_path);

    // pooling comparison across classifier heads (unimodal H&E)
    let pooling_path = dir.join("pooling_comparison.csv");
    {
        let mut w = csv::Writer::from_path(&pooling_path)?;
        let mut header = vec!["classifier".to_string()];
        header.extend(POOLING_KEYS.iter().map(|k| format!("{k}_acc_mean")));
        w.write_record(&header)?;
        let heads: Vec<String> =
            report.folds[0].pooling_heads.keys().cloned().collect();
        for head in &heads {
            let mut rec = vec![head.clone()];
            for key in POOLING_KEYS {
                let (m, _) = report.pooling_head_accuracy(head, key);
                rec.push(format!("{m:.4}"));
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
    }
    outputs.push(pooling_path);

    // modality metrics: unimodal bag networks + fused rows
    let modality_path = dir.join("modality_metrics.csv");
    {
        let mut w = csv::Writer::from_path(&modality_path)?;
        w.write_record(["row", "acc_mean", "acc_sd", "auc_mean", "auc_sd"])?;
        for m in ["HE", "IHC", "REC_HE"] {
            let (am, asd) = report.unimodal_accuracy(m);
            let aucs: Vec<f64> = report
                .folds
                .iter()
                .filter_map(|f| f.unimodal_mil[m].auc)
                .collect();
            let (um, usd) = if aucs.is_empty() { (f64::NAN, 0.0) } else { mean_sd(&aucs) };
            w.write_record([
                &format!("bag-net {m}"),
                &format!("{am:.4}"),
                &format!("{asd:.4}"),
                &format!("{um:.4}"),
                &format!("{usd:.4}"),
            ])?;
        }
        for combo in ModalityCombo::ALL {
            let (am, asd) = report.fused_default_accuracy(&combo.key());
            let (um, usd) = report.fused_default_auc(&combo.key());
            w.write_record([
                &format!("fused {} ({})", combo.key(), cfg.final_head.head),
                &format!("{am:.4}"),
                &format!("{asd:.4}"),
                &format!("{um:.4}"),
                &format!("{usd:.4}"),
            ])?;
        }
        for combo in [ModalityCombo::Triple] {
            let (am, asd) = report.grid_accuracy(&combo.key(), "SHAP");
            let (um, usd) = report.grid_auc(&combo.key(), "SHAP");
            w.write_record([
                &format!("fused {} (forest)", combo.key()),
                &format!("{am:.4}"),
                &format!("{asd:.4}"),
                &format!("{um:.4}"),
                &format!("{usd:.4}"),
            ])?;
        }
        w.flush()?;
    }
    outputs.push(modality_path);

    // markdown summary
    let md_path = dir.join("report.md");
    {
        let mut md = String::new();
        writeln!(md, "# Ablation report").unwrap();
        writeln!(md).unwrap();
        writeln!(
            md,
            "{} folds, master seed {}, {} patients, {} classes.",
            report.folds.len(),
            cfg.master_seed,
            cfg.synth.patients,
            cfg.synth.classes
        )
        .unwrap();
        writeln!(md).unwrap();

        writeln!(md, "## Modality ablation (accuracy, test part)").unwrap();
        writeln!(md).unwrap();
        write!(md, "| modality |").unwrap();
        for key in POOLING_KEYS {
            write!(md, " {key} |").unwrap();
        }
        writeln!(md).unwrap();
        write!(md, "|---|").unwrap();
        for _ in POOLING_KEYS {
            write!(md, "---|").unwrap();
        }
        writeln!(md).unwrap();
        for combo in ModalityCombo::ALL {
            write!(md, "| {} |", combo.key()).unwrap();
            for key in POOLING_KEYS {
                let (m, s) = report.grid_accuracy(&combo.key(), key);
                write!(md, " {} |", cell(m, s)).unwrap();
            }
            writeln!(md).unwrap();
        }
        writeln!(md).unwrap();

        writeln!(md, "## Bag-network test metrics (single modality)").unwrap();
        writeln!(md).unwrap();
        writeln!(md, "| modality | ACC | AUC |").unwrap();
        writeln!(md, "|---|---|---|").unwrap();
        for m in ["HE", "IHC", "REC_HE"] {
            let (am, asd) = report.unimodal_accuracy(m);
            let aucs: Vec<f64> =
                report.folds.iter().filter_map(|f| f.unimodal_mil[m].auc).collect();
            let (um, usd) = if aucs.is_empty() { (f64::NAN, 0.0) } else { mean_sd(&aucs) };
            writeln!(md, "| {m} | {} | {} |", cell(am, asd), cell(um, usd)).unwrap();
        }
        writeln!(md).unwrap();

        writeln!(md, "## Pooling comparison across classifier heads (H&E, accuracy)").unwrap();
        writeln!(md).unwrap();
        write!(md, "| classifier |").unwrap();
        for key in POOLING_KEYS {
            write!(md, " {key} |").unwrap();
        }
        writeln!(md).unwrap();
        write!(md, "|---|").unwrap();
        for _ in POOLING_KEYS {
            write!(md, "---|").unwrap();
        }
        writeln!(md).unwrap();
        let heads: Vec<String> = report.folds[0].pooling_heads.keys().cloned().collect();
        for head in &heads {
            write!(md, "| {head} |").unwrap();
            for key in POOLING_KEYS {
                let (m, s) = report.pooling_head_accuracy(head, key);
                write!(md, " {} |", cell(m, s)).unwrap();
            }
            writeln!(md).unwrap();
        }
        writeln!(md).unwrap();

        writeln!(md, "## Fused rows under attribution pooling ({} head)", cfg.final_head.head)
            .unwrap();
        writeln!(md).unwrap();
        writeln!(md, "| modality | ACC | AUC |").unwrap();
        writeln!(md, "|---|---|---|").unwrap();
        for combo in ModalityCombo::ALL {
            let (am, asd) = report.fused_default_accuracy(&combo.key());
            let (um, usd) = report.fused_default_auc(&combo.key());
            writeln!(md, "| {} | {} | {} |", combo.key(), cell(am, asd), cell(um, usd)).unwrap();
        }
        std::fs::write(&md_path, md)?;
    }
    outputs.push(md_path);

    Ok(outputs)
}
