//! Summary tables over run directories.
//!
//! A run directory may hold any of `metrics.jsonl`, `probes.csv`,
//! `erank.csv`, `probe_frozen.jsonl` and `finetune.jsonl`; missing files leave
//! blank cells. The output is Markdown with one table per topic and one row
//! per run.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;

use crate::train::{final_window_mean, EpochMetrics, StepMetrics};
use crate::Error;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunSummary {
    pub name: String,
    pub steps: usize,
    pub first_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub visible_tokens: Option<usize>,
    /// Latest accuracy per probe label (`last`, `layer:2`, ...).
    pub probes: BTreeMap<String, f64>,
    /// Effective rank per inference masking mode.
    pub erank: BTreeMap<String, f64>,
    pub frozen_accuracy: Option<f64>,
    pub finetune_accuracy: Option<f64>,
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Option<Vec<T>>, Error> {
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Invalid(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect::<Result<Vec<T>, _>>()
        .map(Some)
}

fn read_csv(path: &Path) -> Result<Option<Vec<csv::StringRecord>>, Error> {
    if !path.exists() {
        return Ok(None);
    }
    let bad = |e: csv::Error| Error::Invalid(format!("{}: {e}", path.display()));
    let mut r = csv::ReaderBuilder::new().flexible(true).from_path(path).map_err(bad)?;
    r.records().collect::<Result<Vec<_>, _>>().map(Some).map_err(bad)
}

fn number(path: &Path, field: Option<&str>) -> Result<f64, Error> {
    field
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Invalid(format!("{}: malformed number {field:?}", path.display())))
}

impl RunSummary {
    pub fn load(dir: &Path) -> Result<Self, Error> {
        let mut s = RunSummary {
            name: dir
                .file_name()
                .map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned()),
            ..Default::default()
        };
        if let Some(m) = read_jsonl::<StepMetrics>(&dir.join("metrics.jsonl"))? {
            s.steps = m.len();
            s.first_loss = m.first().map(|x| x.loss);
            s.final_loss = final_window_mean(&m);
            s.visible_tokens = m.first().map(|x| x.visible_tokens);
        }
        let path = dir.join("probes.csv");
        for rec in read_csv(&path)?.unwrap_or_default() {
            let label = match (rec.get(0), rec.get(1)) {
                (Some("layer"), Some(l)) => format!("layer:{l}"),
                (Some(k), _) => k.to_string(),
                _ => continue,
            };
            s.probes.insert(label, number(&path, rec.get(2))?);
        }
        let path = dir.join("erank.csv");
        for rec in read_csv(&path)?.unwrap_or_default() {
            if let Some(mode) = rec.get(0) {
                s.erank.insert(mode.to_string(), number(&path, rec.get(3))?);
            }
        }
        let last_acc = |name: &str| -> Result<Option<f64>, Error> {
            Ok(read_jsonl::<EpochMetrics>(&dir.join(name))?.and_then(|m| m.last().map(|e| e.test_accuracy)))
        };
        s.frozen_accuracy = last_acc("probe_frozen.jsonl")?;
        s.finetune_accuracy = last_acc("finetune.jsonl")?;
        Ok(s)
    }
}

fn cell(x: Option<f64>, digits: usize) -> String {
    x.map_or_else(|| "-".into(), |v| format!("{v:.digits$}"))
}

fn table(out: &mut String, title: &str, header: &[String], rows: &[Vec<String>]) {
    let _ = writeln!(out, "## {title}\n");
    let _ = writeln!(out, "| {} |", header.join(" | "));
    let _ = writeln!(out, "|{}", "---|".repeat(header.len()));
    for r in rows {
        let _ = writeln!(out, "| {} |", r.join(" | "));
    }
    out.push('\n');
}

/// Pre-training, probe, effective-rank and supervised tables.
pub fn render_report(runs: &[RunSummary]) -> String {
    let mut out = String::new();
    let head = |cols: &[&str]| cols.iter().map(|c| c.to_string()).collect::<Vec<_>>();

    let rows: Vec<Vec<String>> = runs
        .iter()
        .map(|r| {
            vec![
                r.name.clone(),
                r.steps.to_string(),
                r.visible_tokens.map_or_else(|| "-".into(), |v| v.to_string()),
                cell(r.first_loss, 4),
                cell(r.final_loss, 4),
            ]
        })
        .collect();
    table(
        &mut out,
        "Pre-training",
        &head(&["run", "steps", "visible tokens", "step-0 loss", "final-window loss"]),
        &rows,
    );

    let keyed = |pick: fn(&RunSummary) -> &BTreeMap<String, f64>, title: &str, out: &mut String| {
        let mut keys: Vec<&String> = runs.iter().flat_map(|r| pick(r).keys()).collect();
        keys.sort();
        keys.dedup();
        if keys.is_empty() {
            return;
        }
        let mut header = vec!["run".to_string()];
        header.extend(keys.iter().map(|k| k.to_string()));
        let rows: Vec<Vec<String>> = runs
            .iter()
            .map(|r| {
                let mut row = vec![r.name.clone()];
                row.extend(keys.iter().map(|k| cell(pick(r).get(*k).copied(), 4)));
                row
            })
            .collect();
        table(out, title, &header, &rows);
    };
    keyed(|r| &r.probes, "Probe accuracy", &mut out);
    keyed(|r| &r.erank, "Effective rank by inference masking", &mut out);

    if runs.iter().any(|r| r.frozen_accuracy.is_some() || r.finetune_accuracy.is_some()) {
        let rows: Vec<Vec<String>> = runs
            .iter()
            .map(|r| vec![r.name.clone(), cell(r.frozen_accuracy, 4), cell(r.finetune_accuracy, 4)])
            .collect();
        table(&mut out, "Supervised", &head(&["run", "frozen probe", "fine-tuned"]), &rows);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summaries_read_every_artifact() {
        let dir = tempfile::tempdir().unwrap();
        let run = dir.path().join("base");
        fs::create_dir(&run).unwrap();
        let metrics: String = (0..3)
            .map(|i| format!("{{\"step\":{i},\"loss\":{},\"lr\":0.1,\"visible_tokens\":15,\"seconds\":null}}\n", 4 - i))
            .collect();
        fs::write(run.join("metrics.jsonl"), metrics).unwrap();
        fs::write(run.join("probes.csv"), "kind,layer,accuracy\nlast,4,0.5\nlayer,2,0.75\nlast,4,0.625\n").unwrap();
        fs::write(run.join("erank.csv"), "mode,B,d,erank,sigma_1\nnone,256,96,7.5,1.0\n").unwrap();
        fs::write(
            run.join("finetune.jsonl"),
            "{\"epoch\":0,\"train_loss\":null,\"test_loss\":1.0,\"test_accuracy\":0.2}\n{\"epoch\":1,\"train_loss\":0.5,\"test_loss\":0.4,\"test_accuracy\":0.9}\n",
        )
        .unwrap();

        let s = RunSummary::load(&run).unwrap();
        assert_eq!(s.steps, 3);
        assert_eq!((s.first_loss, s.final_loss), (Some(4.0), Some(3.0)));
        assert_eq!(s.probes["last"], 0.625);
        assert_eq!(s.probes["layer:2"], 0.75);
        assert_eq!(s.erank["none"], 7.5);
        assert_eq!((s.frozen_accuracy, s.finetune_accuracy), (None, Some(0.9)));

        let empty = RunSummary::load(dir.path()).unwrap();
        let text = render_report(&[s, empty]);
        assert!(text.contains("| base | 3 | 15 | 4.0000 | 3.0000 |"));
        assert!(text.contains("| run | last | layer:2 |"));
        assert!(text.contains("| base | - | 0.9000 |"));
    }

    #[test]
    fn malformed_rows_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("probes.csv"), "kind,layer,accuracy\nlast,,high\n").unwrap();
        let err = RunSummary::load(dir.path()).unwrap_err();
        assert!(err.to_string().contains("probes.csv"));
    }
}
