//! Plain-text and JSON reports built from a run directory's artifacts.

use std::fmt::Write as _;

use negrec_core::eval::MetricRow;
use serde_json::{json, Map, Value};

use crate::error::CliResult;
use crate::pipeline::{Run, Variant};

/// Printed (and stored) in place of a metric with no eligible samples.
pub const NO_ELIGIBLE: &str = "no eligible samples";

/// Fixed four-decimal rendering shared by both report formats.
pub fn fmt_metric(v: Option<f64>) -> String {
    v.map_or_else(|| NO_ELIGIBLE.to_string(), |x| format!("{x:.4}"))
}

fn metric_value(v: Option<f64>) -> Value {
    match v {
        Some(x) => {
            let rounded: f64 = format!("{x:.4}").parse().expect("formatted float");
            json!(rounded)
        }
        None => json!(NO_ELIGIBLE),
    }
}

fn fixed(x: f64, decimals: usize) -> Value {
    json!(format!("{x:.decimals$}").parse::<f64>().expect("formatted float"))
}

fn row_json(row: &MetricRow, columns: &[String]) -> Value {
    let mut m = Map::new();
    for (name, v) in columns.iter().zip(row.values()) {
        m.insert(name.clone(), metric_value(v));
    }
    Value::Object(m)
}

pub struct Report {
    pub text: String,
    pub json: String,
}

/// Builds both reports. Ablation rows appear for every variant whose
/// evaluation exists.
pub fn emit_report(run: &Run) -> CliResult<Report> {
    let mut text = String::new();
    let mut doc = Map::new();
    let w = &mut text;
    let columns = MetricRow::columns(run.cfg.eval.k);
    writeln!(w, "negrec report").unwrap();
    writeln!(w, "config_hash {}", run.config_hash()).unwrap();
    doc.insert("config_hash".into(), json!(run.config_hash()));

    let full = run.eval_report(Variant::Full)?;
    let mut rows: Vec<(String, MetricRow)> = vec![("untrained".into(), full.untrained), ("full".into(), full.metrics)];
    for v in [Variant::NoAlignment, Variant::NoCurriculum] {
        if run.has_variant(v) {
            rows.push((v.name().into(), run.eval_report(v)?.metrics));
        }
    }
    writeln!(
        w,
        "\n== held-out metrics (K={}, {} samples, {} candidate tasks) ==",
        run.cfg.eval.k, full.heldout_samples, full.candidate_tasks
    )
    .unwrap();
    write!(w, "{:<14}", "model").unwrap();
    for c in &columns {
        write!(w, " {c:>10}").unwrap();
    }
    writeln!(w).unwrap();
    let mut metrics = Map::new();
    for (name, row) in &rows {
        write!(w, "{name:<14}").unwrap();
        for v in row.values() {
            write!(w, " {:>10}", fmt_metric(v)).unwrap();
        }
        writeln!(w).unwrap();
        metrics.insert(name.clone(), row_json(row, &columns));
    }
    doc.insert("metrics".into(), Value::Object(metrics));
    doc.insert("heldout_samples".into(), json!(full.heldout_samples));
    doc.insert("candidate_tasks".into(), json!(full.candidate_tasks));

    let mut variants = vec![Variant::Full];
    variants.extend([Variant::NoAlignment, Variant::NoCurriculum].into_iter().filter(|v| run.has_variant(*v)));

    writeln!(w, "\n== alignment ==").unwrap();
    writeln!(w, "{:<14} {:>10} {:>10} {:>10} {:>10}", "model", "before", "after_sft", "final", "forgetting").unwrap();
    let mut align = Map::new();
    for &v in &variants {
        let a = run.align_report(v)?;
        let e = run.eval_report(v)?;
        let after = a.trainable_parameters.map(|_| a.accuracy_after);
        writeln!(
            w,
            "{:<14} {:>10} {:>10} {:>10} {:>10}",
            v.name(),
            fmt_metric(Some(a.accuracy_before)),
            fmt_metric(after),
            fmt_metric(Some(e.align_accuracy)),
            fmt_metric(e.forgetting)
        )
        .unwrap();
        align.insert(
            v.name().into(),
            json!({
                "before": metric_value(Some(a.accuracy_before)),
                "after_sft": metric_value(after),
                "final": metric_value(Some(e.align_accuracy)),
                "forgetting": metric_value(e.forgetting),
            }),
        );
    }
    doc.insert("alignment".into(), Value::Object(align));

    writeln!(w, "\n== curriculum stages (held-out, stage context) ==").unwrap();
    write!(w, "{:<14} {:<14} {:>9}", "model", "stage", "augmented").unwrap();
    for c in &columns[..4] {
        write!(w, " {c:>10}").unwrap();
    }
    writeln!(w).unwrap();
    let mut stages = Map::new();
    let mut curves = Vec::new();
    for &v in &variants {
        let mut list = Vec::new();
        for r in run.stage_results(v)? {
            write!(w, "{:<14} {:<14} {:>9}", v.name(), r.log.stage.to_string(), r.augmented).unwrap();
            for x in &r.heldout.values()[..4] {
                write!(w, " {:>10}", fmt_metric(*x)).unwrap();
            }
            writeln!(w).unwrap();
            let mut entry = row_json(&r.heldout, &columns);
            entry.as_object_mut().expect("object").remove("CandAcc");
            entry.as_object_mut().expect("object").insert("stage".into(), json!(r.log.stage));
            entry.as_object_mut().expect("object").insert("augmented".into(), json!(r.augmented));
            list.push(entry);
            for s in &r.log.steps {
                curves.push((v, s.clone()));
            }
        }
        stages.insert(v.name().into(), Value::Array(list));
    }
    doc.insert("stages".into(), Value::Object(stages));

    writeln!(w, "\n== offline filtering (held-out exposures) ==").unwrap();
    writeln!(w, "{:<14} {:>9} {:>9} {:>14} {:>14}", "model", "exposures", "kept", "disliked_before", "disliked_after")
        .unwrap();
    let mut filt = Map::new();
    for &v in &variants {
        let f = run.filter_report(v)?;
        writeln!(
            w,
            "{:<14} {:>9} {:>9} {:>14} {:>14}",
            v.name(),
            f.total,
            f.kept,
            fmt_metric(f.rate_before()),
            fmt_metric(f.rate_after())
        )
        .unwrap();
        filt.insert(
            v.name().into(),
            json!({
                "exposures": f.total,
                "kept": f.kept,
                "disliked_before": metric_value(f.rate_before()),
                "disliked_after": metric_value(f.rate_after()),
            }),
        );
    }
    doc.insert("filter".into(), Value::Object(filt));

    writeln!(w, "\n== training curves ==").unwrap();
    writeln!(
        w,
        "{:<14} {:<14} {:>5} {:>12} {:>12} {:>12} {:>8}",
        "model", "stage", "step", "mean_reward", "loss", "kl", "clipped"
    )
    .unwrap();
    let mut curve_rows = Vec::new();
    for (v, s) in &curves {
        writeln!(
            w,
            "{:<14} {:<14} {:>5} {:>12.6} {:>12.6} {:>12.6} {:>8.4}",
            v.name(),
            s.stage.to_string(),
            s.step,
            s.mean_reward,
            s.loss,
            s.kl,
            s.clip_fraction
        )
        .unwrap();
        curve_rows.push(json!({
            "model": v.name(),
            "stage": s.stage,
            "step": s.step,
            "mean_reward": fixed(s.mean_reward, 6),
            "loss": fixed(s.loss, 6),
            "kl": fixed(s.kl, 6),
            "clip_fraction": fixed(s.clip_fraction, 4),
        }));
    }
    doc.insert("curves".into(), Value::Array(curve_rows));

    let mut json_text = serde_json::to_string_pretty(&Value::Object(doc)).expect("json");
    json_text.push('\n');
    Ok(Report { text, json: json_text })
}
