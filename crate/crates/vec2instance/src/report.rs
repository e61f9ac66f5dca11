//! Text tables and JSON documents for evaluation reports and loss logs.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use vec2instance_core::evaluation::{ConfusionMatrix, DecoderComparison, EvalReport};
use vec2instance_core::training::{LossLog, LossRecord};

use crate::error::{Error, Result};
use crate::io::{write_bytes, write_json};
use crate::plot::{write_curves, Series};

/// 2×2 table of percentages of the total, truth in rows.
pub fn render_matrix(title: &str, m: &ConfusionMatrix) -> String {
    let [tn, fp, fn_, tp] = m.percentages();
    let mut s = String::new();
    writeln!(s, "{title}").unwrap();
    writeln!(s, "                 predicted 0   predicted 1").unwrap();
    writeln!(s, "  actual 0       {tn:>10.2}%  {fp:>10.2}%").unwrap();
    writeln!(s, "  actual 1       {fn_:>10.2}%  {tp:>10.2}%").unwrap();
    writeln!(s, "  total accuracy {:.2}% over {} pixels", 100.0 * m.accuracy(), m.total()).unwrap();
    s
}

pub fn render_report(r: &EvalReport) -> String {
    let mut s = String::new();
    s.push_str(&render_matrix("Centroid stage (32x32 grid)", &r.centroid));
    s.push('\n');
    s.push_str(&render_matrix("Instance stage (ground-truth centered 64x64 patches)", &r.instance));
    s.push('\n');
    s.push_str(&render_matrix("Overall (256x256 tiles)", &r.overall));
    s.push('\n');
    writeln!(s, "Foreground IoU {:.4} ({} / {} pixels)", r.iou, r.iou_counts.intersection, r.iou_counts.union).unwrap();
    writeln!(s, "Tiles {}", r.tiles.len()).unwrap();
    s
}

/// Report with the configuration that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportDocument {
    pub report: EvalReport,
    pub run: serde_json::Value,
}

/// Writes `report.json` and `report.txt` into `dir`.
pub fn write_report(dir: &Path, report: &EvalReport, run: serde_json::Value) -> Result<()> {
    write_json(
        &dir.join("report.json"),
        &ReportDocument {
            report: report.clone(),
            run,
        },
    )?;
    write_bytes(&dir.join("report.txt"), render_report(report).as_bytes())
}

pub const LOSS_CSV_HEADER: &str = "epoch,train_loss,test_loss,seconds";

/// Values are written in shortest round-trip form, so parsing restores
/// them exactly.
pub fn loss_log_csv(log: &LossLog) -> String {
    let mut s = String::from(LOSS_CSV_HEADER);
    s.push('\n');
    for r in &log.records {
        writeln!(s, "{},{},{},{}", r.epoch, r.train_loss, r.test_loss, r.seconds).unwrap();
    }
    s
}

pub fn parse_loss_log(text: &str, origin: &Path) -> Result<LossLog> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(LOSS_CSV_HEADER) {
        return Err(Error::format(origin, format!("expected header `{LOSS_CSV_HEADER}`")));
    }
    let mut records = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = || Error::format(origin, format!("malformed row {}", i + 2));
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 4 {
            return Err(bad());
        }
        records.push(LossRecord {
            epoch: f[0].parse().map_err(|_| bad())?,
            train_loss: f[1].parse().map_err(|_| bad())?,
            test_loss: f[2].parse().map_err(|_| bad())?,
            seconds: f[3].parse().map_err(|_| bad())?,
        });
    }
    Ok(LossLog { records })
}

pub fn read_loss_log(path: &Path) -> Result<LossLog> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_loss_log(&text, path)
}

pub fn write_loss_log(path: &Path, log: &LossLog) -> Result<()> {
    write_bytes(path, loss_log_csv(log).as_bytes())
}

/// Train and test curves of one log.
pub fn loss_series(name: &str, log: &LossLog) -> Vec<Series> {
    let pick = |f: fn(&LossRecord) -> f64| log.records.iter().map(|r| (r.epoch as f64, f(r))).collect();
    vec![
        Series {
            name: format!("{name}_train"),
            points: pick(|r| r.train_loss),
        },
        Series {
            name: format!("{name}_test"),
            points: pick(|r| r.test_loss),
        },
    ]
}

/// `comparison.json`, the test-loss curves (`comparison.png`/`.csv`) and
/// one loss log per decoder.
pub fn write_comparison(dir: &Path, cmp: &DecoderComparison, run: serde_json::Value) -> Result<()> {
    write_json(&dir.join("comparison.json"), &serde_json::json!({ "comparison": cmp, "run": run }))?;
    let series: Vec<Series> = cmp
        .runs
        .iter()
        .map(|r| Series {
            name: r.decoder.arch_id(),
            points: r.log.records.iter().map(|e| (e.epoch as f64, e.test_loss)).collect(),
        })
        .collect();
    write_curves(&dir.join("comparison"), "epoch", &series)?;
    for r in &cmp.runs {
        write_loss_log(&dir.join(format!("{}_loss.csv", r.decoder.arch_id())), &r.log)?;
    }
    Ok(())
}

pub fn render_comparison(cmp: &DecoderComparison) -> String {
    let mut s = String::from("decoder                      trainable   final test loss\n");
    for r in &cmp.runs {
        let last = r.log.last().map(|e| e.test_loss).unwrap_or(f64::NAN);
        writeln!(s, "{:<28} {:>9}   {:.6}", r.decoder.arch_id(), r.trainable_params, last).unwrap();
    }
    s
}
