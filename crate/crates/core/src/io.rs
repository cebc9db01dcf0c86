//! CSV ingestion/export and versioned JSON documents for models.
//!
//! CSV is long format with header `task_id,t,y[,label]`, times in original units.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{Dataset, TaskSeries};
use crate::dp::{expected_log_sticks, DpState};
use crate::em::GmtModel;
use crate::error::{Error, Result};
use crate::inference::ClassifierModel;

pub const MODEL_VERSION: &str = "gmtgp-model/1";
pub const CLASSIFIER_VERSION: &str = "gmtgp-classifier/1";

/// Reads a long-format CSV; times are divided by `period`.
pub fn ingest_csv(path: impl AsRef<Path>, period: f64) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    read_csv(file, period)
}

pub fn read_csv<R: Read>(reader: R, period: f64) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse { line: 1, reason: e.to_string() })?
        .clone();
    let names: Vec<&str> = headers.iter().collect();
    let has_label = match names.as_slice() {
        ["task_id", "t", "y"] => false,
        ["task_id", "t", "y", "label"] => true,
        _ => {
            return Err(Error::Parse {
                line: 1,
                reason: format!("expected header task_id,t,y[,label], got {}", names.join(",")),
            })
        }
    };
    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, (Vec<(f64, f64)>, Option<String>)> = HashMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Parse { line, reason: e.to_string() })?;
        let expected = if has_label { 4 } else { 3 };
        if rec.len() != expected {
            return Err(Error::Parse {
                line,
                reason: format!("expected {expected} fields, found {}", rec.len()),
            });
        }
        let num = |k: usize, what: &str| -> Result<f64> {
            let v: f64 = rec[k].parse().map_err(|_| Error::Parse {
                line,
                reason: format!("{what} `{}` is not a number", &rec[k]),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse { line, reason: format!("{what} is not finite") });
            }
            Ok(v)
        };
        let t = num(1, "t")?;
        let y = num(2, "y")?;
        if !(t >= 0.0 && t < period) {
            return Err(Error::Parse {
                line,
                reason: format!("time {t} outside [0, {period})"),
            });
        }
        let id = rec[0].to_string();
        let label = (has_label && !rec[3].is_empty()).then(|| rec[3].to_string());
        let entry = rows.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            (Vec::new(), label.clone())
        });
        if entry.1 != label {
            return Err(Error::Parse {
                line,
                reason: format!("task `{id}` has conflicting labels"),
            });
        }
        entry.0.push((t, y));
    }
    if order.is_empty() {
        return Err(Error::Empty("csv rows"));
    }
    let tasks = order
        .into_iter()
        .map(|id| {
            let (mut pts, label) = rows.remove(&id).expect("inserted above");
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            TaskSeries {
                id,
                times: pts.iter().map(|p| p.0).collect(),
                values: pts.iter().map(|p| p.1).collect(),
                label,
            }
        })
        .collect();
    Dataset::from_original_units(tasks, period)
}

/// Writes a dataset as long-format CSV in original time units.
pub fn export_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_csv(dataset, file)
}

pub fn write_csv<W: Write>(dataset: &Dataset, writer: W) -> Result<()> {
    let labeled = dataset.tasks().iter().any(|t| t.label.is_some());
    let mut w = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    if labeled {
        w.write_record(["task_id", "t", "y", "label"]).map_err(io)?;
    } else {
        w.write_record(["task_id", "t", "y"]).map_err(io)?;
    }
    let p = dataset.period();
    for task in dataset.tasks() {
        for (&t, &y) in task.times.iter().zip(&task.values) {
            let time = if p == 1.0 { t } else { t * p };
            let mut rec = vec![task.id.clone(), time.to_string(), y.to_string()];
            if labeled {
                rec.push(task.label.clone().unwrap_or_default());
            }
            w.write_record(&rec).map_err(io)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub version: String,
    /// Period in original time units.
    pub period: f64,
    pub model: GmtModel,
    pub dp: Option<DpState>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierDocument {
    pub version: String,
    pub period: f64,
    pub classifier: ClassifierModel,
}

fn check_version(value: &Value, expected: &str) -> Result<()> {
    match value.get("version").and_then(Value::as_str) {
        Some(v) if v == expected => Ok(()),
        Some(v) => Err(Error::Version(v.to_string())),
        None => Err(Error::Schema("missing `version` field".into())),
    }
}

pub fn model_to_json(model: &GmtModel, dp: Option<&DpState>, period: f64) -> Result<String> {
    let doc = ModelDocument {
        version: MODEL_VERSION.to_string(),
        period,
        model: model.clone(),
        dp: dp.cloned(),
    };
    Ok(serde_json::to_string_pretty(&doc)?)
}

pub fn model_from_json(text: &str) -> Result<ModelDocument> {
    let value: Value = serde_json::from_str(text)?;
    check_version(&value, MODEL_VERSION)?;
    let mut doc: ModelDocument = serde_json::from_value(value).map_err(|e| Error::Schema(e.to_string()))?;
    doc.model.rebuild_basis()?;
    if let Some(dp) = &mut doc.dp {
        dp.expected_log_sticks = expected_log_sticks(&dp.beta_params);
    }
    Ok(doc)
}

pub fn classifier_to_json(classifier: &ClassifierModel, period: f64) -> Result<String> {
    let doc = ClassifierDocument {
        version: CLASSIFIER_VERSION.to_string(),
        period,
        classifier: classifier.clone(),
    };
    Ok(serde_json::to_string_pretty(&doc)?)
}

pub fn classifier_from_json(text: &str) -> Result<ClassifierDocument> {
    let value: Value = serde_json::from_str(text)?;
    check_version(&value, CLASSIFIER_VERSION)?;
    let mut doc: ClassifierDocument = serde_json::from_value(value).map_err(|e| Error::Schema(e.to_string()))?;
    for m in &mut doc.classifier.models {
        m.rebuild_basis()?;
    }
    Ok(doc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_grouping_and_sorting() {
        let text = "task_id,t,y\na,0.5,1.0\nb,0.1,2.0\na,0.2,3.0\n";
        let ds = read_csv(text.as_bytes(), 1.0).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.task(0).times, vec![0.2, 0.5]);
        assert_eq!(ds.task(0).values, vec![3.0, 1.0]);
    }

    #[test]
    fn csv_errors_carry_line_numbers() {
        let text = "task_id,t,y\na,0.5,1.0\na,zz,3.0\n";
        match read_csv(text.as_bytes(), 1.0) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(matches!(read_csv("task_id,t,y\na,2.0,1\n".as_bytes(), 2.0), Err(Error::Parse { .. })));
        assert!(matches!(read_csv("task_id,t,y\n".as_bytes(), 1.0), Err(Error::Empty(_))));
        assert!(read_csv("id,x\n".as_bytes(), 1.0).is_err());
    }

    #[test]
    fn csv_period_division() {
        let ds = read_csv("task_id,t,y,label\na,5,1,x\n".as_bytes(), 10.0).unwrap();
        assert_eq!(ds.task(0).times, vec![0.5]);
        assert_eq!(ds.task(0).label.as_deref(), Some("x"));
    }

    #[test]
    fn unknown_version_rejected() {
        assert!(matches!(
            model_from_json(r#"{"version":"gmtgp-model/0"}"#),
            Err(Error::Version(_))
        ));
        assert!(matches!(model_from_json(r#"{"period":1}"#), Err(Error::Schema(_))));
    }
}
