//! Aggregation of evaluation results into dimensional means, overall
//! averages, CSV reports and comparison charts.

mod charts;

pub use charts::{emit_charts, ChartDoc};

use std::collections::BTreeMap;

use thiserror::Error;

use crate::config::{FieldType, MetricField};
use crate::judge::EvaluationResult;

#[derive(Debug, Error, PartialEq)]
pub enum ReportError {
    #[error("cannot aggregate zero results")]
    EmptyResults,
    #[error("case '{case_id}' does not carry field '{field}'")]
    FieldMismatch { case_id: String, field: String },
    #[error("case '{case_id}' carries unexpected field '{field}'")]
    ExtraField { case_id: String, field: String },
    #[error("field '{field}' of case '{case_id}' is not numeric")]
    NotNumeric { case_id: String, field: String },
    #[error("run '{label}' is missing scenario '{scenario}'")]
    MissingScenario { label: String, scenario: String },
    #[error("no numeric fields to average")]
    NoNumericFields,
    #[error("malformed report CSV: {0}")]
    Csv(String),
}

/// Rounds half-up to two decimals. Means of two-decimal inputs land exactly
/// on x.xx5 boundaries up to float noise, so a small epsilon keeps the
/// half-up direction stable.
pub fn round_half_up2(x: f64) -> f64 {
    ((x * 100.0) + 0.5 + 1e-7).floor() / 100.0
}

/// One aggregated row: unrounded per-field means plus their unrounded mean.
/// Rounding happens only at presentation.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub label: String,
    pub n_cases: usize,
    pub means: Vec<f64>,
    pub avg: f64,
}

impl ReportRow {
    pub fn rounded_means(&self) -> Vec<f64> {
        self.means.iter().copied().map(round_half_up2).collect()
    }

    pub fn rounded_avg(&self) -> f64 {
        round_half_up2(self.avg)
    }
}

/// Per-dimension means for one or more run labels over a shared field list.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportTable {
    pub fields: Vec<String>,
    pub rows: Vec<ReportRow>,
}

impl ReportTable {
    pub fn new(fields: Vec<String>) -> Self {
        Self {
            fields,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: ReportRow) {
        assert_eq!(row.means.len(), self.fields.len(), "row shape mismatch");
        self.rows.push(row);
    }
}

fn numeric_value(
    case_id: &str,
    field: &MetricField,
    values: &serde_json::Map<String, serde_json::Value>,
) -> Result<f64, ReportError> {
    let value = values
        .get(&field.name)
        .ok_or_else(|| ReportError::FieldMismatch {
            case_id: case_id.to_string(),
            field: field.name.clone(),
        })?;
    let number = match field.value_type {
        FieldType::Bool => value.as_bool().map(|b| if b { 1.0 } else { 0.0 }),
        _ => value.as_f64(),
    };
    number.ok_or_else(|| ReportError::NotNumeric {
        case_id: case_id.to_string(),
        field: field.name.clone(),
    })
}

/// Names of the fields that contribute mean columns (strings carry no mean).
pub fn numeric_field_names(fields: &[MetricField]) -> Vec<String> {
    fields
        .iter()
        .filter(|f| f.value_type != FieldType::Str)
        .map(|f| f.name.clone())
        .collect()
}

/// Computes one table row: per-field means in full precision and their
/// unrounded mean as AVG.
pub fn aggregate(
    label: &str,
    results: &[EvaluationResult],
    fields: &[MetricField],
) -> Result<ReportRow, ReportError> {
    if results.is_empty() {
        return Err(ReportError::EmptyResults);
    }
    for result in results {
        for field in fields {
            if !result.values.contains_key(&field.name) {
                return Err(ReportError::FieldMismatch {
                    case_id: result.case_id.clone(),
                    field: field.name.clone(),
                });
            }
        }
        for key in result.values.keys() {
            if !fields.iter().any(|f| &f.name == key) {
                return Err(ReportError::ExtraField {
                    case_id: result.case_id.clone(),
                    field: key.clone(),
                });
            }
        }
    }

    let numeric: Vec<&MetricField> = fields
        .iter()
        .filter(|f| f.value_type != FieldType::Str)
        .collect();
    if numeric.is_empty() {
        return Err(ReportError::NoNumericFields);
    }
    let mut means = Vec::with_capacity(numeric.len());
    for field in &numeric {
        let mut sum = 0.0;
        for result in results {
            sum += numeric_value(&result.case_id, field, &result.values)?;
        }
        means.push(sum / results.len() as f64);
    }
    let avg = means.iter().sum::<f64>() / means.len() as f64;
    Ok(ReportRow {
        label: label.to_string(),
        n_cases: results.len(),
        means,
        avg,
    })
}

/// Cross-scenario synthesis: unweighted mean of each label's scenario AVGs.
#[derive(Debug, Clone, PartialEq)]
pub struct OverallRow {
    pub label: String,
    pub overall: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverallTable {
    pub scenarios: Vec<String>,
    pub rows: Vec<OverallRow>,
}

/// Averages per-scenario AVG values per run label, unweighted, and ranks the
/// rows by overall score. Every label must appear in every scenario.
pub fn overall(
    per_scenario: &BTreeMap<String, BTreeMap<String, f64>>,
) -> Result<OverallTable, ReportError> {
    let scenarios: Vec<String> = per_scenario.keys().cloned().collect();
    let mut labels: Vec<String> = Vec::new();
    for avgs in per_scenario.values() {
        for label in avgs.keys() {
            if !labels.contains(label) {
                labels.push(label.clone());
            }
        }
    }
    let mut rows = Vec::with_capacity(labels.len());
    for label in labels {
        let mut sum = 0.0;
        for (scenario, avgs) in per_scenario {
            let avg = avgs
                .get(&label)
                .ok_or_else(|| ReportError::MissingScenario {
                    label: label.clone(),
                    scenario: scenario.clone(),
                })?;
            sum += avg;
        }
        rows.push(OverallRow {
            overall: sum / per_scenario.len() as f64,
            label,
        });
    }
    rows.sort_by(|a, b| {
        b.overall
            .partial_cmp(&a.overall)
            .expect("scores are finite")
            .then_with(|| a.label.cmp(&b.label))
    });
    Ok(OverallTable { scenarios, rows })
}

/// Serializes the table as RFC-4180 CSV: `label`, one column per field, and
/// `AVG`, all values rounded to two decimals, rows in input order.
pub fn to_csv(table: &ReportTable) -> String {
    let mut writer = csv::Writer::from_writer(Vec::new());
    let mut header = Vec::with_capacity(table.fields.len() + 2);
    header.push("label".to_string());
    header.extend(table.fields.iter().cloned());
    header.push("AVG".to_string());
    writer.write_record(&header).expect("in-memory write");
    for row in &table.rows {
        let mut record = Vec::with_capacity(header.len());
        record.push(row.label.clone());
        record.extend(row.rounded_means().iter().map(|m| format!("{m:.2}")));
        record.push(format!("{:.2}", row.rounded_avg()));
        writer.write_record(&record).expect("in-memory write");
    }
    String::from_utf8(writer.into_inner().expect("in-memory flush")).expect("csv is utf-8")
}

/// Reads a report CSV back into a table (inverse of [`to_csv`] on the
/// rounded presentation values). Used by `visualize` and tests.
pub fn parse_csv(text: &str) -> Result<ReportTable, ReportError> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| ReportError::Csv(e.to_string()))?
        .clone();
    if headers.len() < 3 || &headers[0] != "label" || &headers[headers.len() - 1] != "AVG" {
        return Err(ReportError::Csv(
            "expected header 'label,<fields...>,AVG'".into(),
        ));
    }
    let fields: Vec<String> = headers
        .iter()
        .skip(1)
        .take(headers.len() - 2)
        .map(str::to_string)
        .collect();
    let mut table = ReportTable::new(fields);
    for record in reader.records() {
        let record = record.map_err(|e| ReportError::Csv(e.to_string()))?;
        if record.len() != headers.len() {
            return Err(ReportError::Csv(format!(
                "row has {} cells, expected {}",
                record.len(),
                headers.len()
            )));
        }
        let label = record[0].to_string();
        let mut numbers = Vec::with_capacity(record.len() - 1);
        for cell in record.iter().skip(1) {
            numbers.push(
                cell.parse::<f64>()
                    .map_err(|e| ReportError::Csv(format!("bad number '{cell}': {e}")))?,
            );
        }
        let avg = numbers.pop().expect("at least AVG present");
        table.push(ReportRow {
            label,
            n_cases: 0,
            means: numbers,
            avg,
        });
    }
    Ok(table)
}
