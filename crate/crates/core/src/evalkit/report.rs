//! Result tables: one row per model, one column per decoding setup.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{relative_improvement, WerReport};
use crate::error::{Error, Result};

/// Row order of the rendered tables; other model names follow alphabetically.
pub const MODEL_ORDER: [&str; 4] = ["BASELINE", "E-ALL", "E-DL", "E-RECON"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Column {
    /// No language model.
    NoLm,
    ShallowFusion,
    /// Shallow fusion with internal-LM subtraction.
    InternalLm,
}

impl Column {
    pub const ALL: [Column; 3] = [Column::NoLm, Column::ShallowFusion, Column::InternalLm];

    pub fn header(self) -> &'static str {
        match self {
            Column::NoLm => "Baseline",
            Column::ShallowFusion => "Shallow Fusion",
            Column::InternalLm => "Internal LM",
        }
    }
}

/// One evaluated cell, as appended to `evals.jsonl` in a run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalCell {
    pub model: String,
    pub testset: String,
    pub column: Column,
    pub report: WerReport,
}

pub fn append_cell(run_dir: &Path, cell: &EvalCell) -> Result<()> {
    std::fs::create_dir_all(run_dir)?;
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(run_dir.join("evals.jsonl"))?;
    writeln!(f, "{}", serde_json::to_string(cell)?)?;
    Ok(())
}

/// Cells of a run directory; later entries replace earlier ones for the same
/// (model, test set, column).
pub fn read_cells(run_dir: &Path) -> Result<Vec<EvalCell>> {
    let path = run_dir.join("evals.jsonl");
    let text = std::fs::read_to_string(&path)?;
    let mut latest: BTreeMap<(String, String, Column), EvalCell> = BTreeMap::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let c: EvalCell = serde_json::from_str(line).map_err(|e| Error::Format { path: path.clone(), reason: format!("line {}: {e}", i + 1) })?;
        latest.insert((c.model.clone(), c.testset.clone(), c.column), c);
    }
    Ok(latest.into_values().collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub model: String,
    /// WER per [`Column::ALL`] entry; `None` where not evaluated.
    pub cells: [Option<f64>; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub title: String,
    pub rows: Vec<TableRow>,
}

fn fmt_cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |w| format!("{w:.2}"))
}

impl ResultTable {
    pub fn from_cells(title: &str, cells: &[EvalCell]) -> Self {
        let mut rows: BTreeMap<String, [Option<f64>; 3]> = BTreeMap::new();
        for c in cells {
            let i = Column::ALL.iter().position(|&k| k == c.column).expect("every column is listed");
            rows.entry(c.model.clone()).or_default()[i] = Some(c.report.wer);
        }
        let mut ordered: Vec<TableRow> = MODEL_ORDER
            .iter()
            .filter_map(|m| rows.remove(*m).map(|cells| TableRow { model: m.to_string(), cells }))
            .collect();
        ordered.extend(rows.into_iter().map(|(model, cells)| TableRow { model, cells }));
        Self { title: title.to_string(), rows: ordered }
    }

    /// Relative improvement of each non-baseline row over BASELINE, per column.
    pub fn improvements(&self) -> Vec<(String, [Option<f64>; 3])> {
        let Some(base) = self.rows.iter().find(|r| r.model == "BASELINE") else {
            return Vec::new();
        };
        self.rows
            .iter()
            .filter(|r| r.model != "BASELINE")
            .map(|r| {
                let cells = std::array::from_fn(|i| match (base.cells[i], r.cells[i]) {
                    (Some(b), Some(n)) => relative_improvement(b, n).ok(),
                    _ => None,
                });
                (r.model.clone(), cells)
            })
            .collect()
    }

    /// Fixed-width text rendering with a relative-improvement footer.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{}", self.title);
        let _ = writeln!(s, "{:<10} | {:>14} {:>14} {:>14}", "Model", Column::NoLm.header(), Column::ShallowFusion.header(), Column::InternalLm.header());
        let _ = writeln!(s, "{}", "-".repeat(58));
        for r in &self.rows {
            let _ = writeln!(s, "{:<10} | {:>14} {:>14} {:>14}", r.model, fmt_cell(r.cells[0]), fmt_cell(r.cells[1]), fmt_cell(r.cells[2]));
        }
        let imps = self.improvements();
        if !imps.is_empty() {
            let _ = writeln!(s, "relative improvement over BASELINE (%):");
            for (m, c) in imps {
                let _ = writeln!(s, "{:<10} | {:>14} {:>14} {:>14}", m, fmt_cell(c[0]), fmt_cell(c[1]), fmt_cell(c[2]));
            }
        }
        s
    }

    /// CSV with a `title` column so the table survives a round trip.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["title", "model", "baseline", "shallow_fusion", "internal_lm"])?;
        for r in &self.rows {
            let mut rec = vec![self.title.clone(), r.model.clone()];
            rec.extend(r.cells.iter().map(|c| c.map(|v| v.to_string()).unwrap_or_default()));
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let mut title = String::new();
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            if rec.len() != 5 {
                return Err(Error::Input(format!("table CSV rows need 5 fields, got {}", rec.len())));
            }
            title = rec[0].to_string();
            let cell = |s: &str| -> Result<Option<f64>> {
                if s.is_empty() {
                    Ok(None)
                } else {
                    s.parse().map(Some).map_err(|e| Error::Input(format!("bad WER '{s}': {e}")))
                }
            };
            rows.push(TableRow { model: rec[1].to_string(), cells: [cell(&rec[2])?, cell(&rec[3])?, cell(&rec[4])?] });
        }
        Ok(Self { title, rows })
    }
}

fn title_for(testset: &str) -> String {
    match testset {
        "clean" => "WER (%), test-clean".into(),
        "other" => "WER (%), test-other".into(),
        "tail" => "WER (%), synthesized tail set".into(),
        other => format!("WER (%), {other}"),
    }
}

/// Renders one table per test set found in `run_dir/evals.jsonl` and
/// writes `table-<testset>.txt` and `.csv` next to it. Cells never
/// evaluated are shown as absent.
pub fn report_tables(run_dir: &Path) -> Result<Vec<ResultTable>> {
    let cells = read_cells(run_dir)?;
    let mut by_set: BTreeMap<String, Vec<EvalCell>> = BTreeMap::new();
    for c in cells {
        by_set.entry(c.testset.clone()).or_default().push(c);
    }
    let mut tables = Vec::new();
    for (set, cells) in by_set {
        let t = ResultTable::from_cells(&title_for(&set), &cells);
        std::fs::write(run_dir.join(format!("table-{set}.txt")), t.render())?;
        std::fs::write(run_dir.join(format!("table-{set}.csv")), t.to_csv()?)?;
        tables.push(t);
    }
    Ok(tables)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell(model: &str, column: Column, wer: f64) -> EvalCell {
        EvalCell { model: model.into(), testset: "clean".into(), column, report: WerReport { wer, ..WerReport::default() } }
    }

    #[test]
    fn rows_follow_model_order_and_missing_cells_stay_empty() {
        let t = ResultTable::from_cells(
            "t",
            &[cell("E-RECON", Column::NoLm, 10.3), cell("BASELINE", Column::NoLm, 8.4), cell("E-ALL", Column::ShallowFusion, 5.6)],
        );
        let names: Vec<_> = t.rows.iter().map(|r| r.model.as_str()).collect();
        assert_eq!(names, ["BASELINE", "E-ALL", "E-RECON"]);
        assert_eq!(t.rows[1].cells, [None, Some(5.6), None]);
        assert!(t.render().contains("-"));
    }

    #[test]
    fn header_order_matches_columns() {
        let t = ResultTable::from_cells("t", &[cell("BASELINE", Column::NoLm, 1.0)]);
        let header = t.render().lines().nth(1).unwrap().to_string();
        let a = header.find("Baseline").unwrap();
        let b = header.find("Shallow Fusion").unwrap();
        let c = header.find("Internal LM").unwrap();
        assert!(a < b && b < c);
    }

    #[test]
    fn csv_roundtrip_renders_identically() {
        let t = ResultTable::from_cells(
            "WER (%), test-clean",
            &[cell("BASELINE", Column::NoLm, 8.4), cell("E-ALL", Column::NoLm, 7.5), cell("E-ALL", Column::InternalLm, 5.5)],
        );
        let back = ResultTable::from_csv(&t.to_csv().unwrap()).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.render(), t.render());
    }

    #[test]
    fn footer_uses_relative_improvement() {
        let t = ResultTable::from_cells("t", &[cell("BASELINE", Column::NoLm, 8.4), cell("E-ALL", Column::NoLm, 7.5)]);
        let imp = t.improvements();
        assert!((imp[0].1[0].unwrap() - relative_improvement(8.4, 7.5).unwrap()).abs() < 1e-12);
        assert!(t.render().contains("10.71"));
    }

    #[test]
    fn run_directory_tables() {
        let dir = tempfile::tempdir().unwrap();
        append_cell(dir.path(), &cell("BASELINE", Column::NoLm, 9.0)).unwrap();
        append_cell(dir.path(), &cell("BASELINE", Column::NoLm, 8.0)).unwrap();
        let tables = report_tables(dir.path()).unwrap();
        assert_eq!(tables.len(), 1);
        assert_eq!(tables[0].rows[0].cells[0], Some(8.0));
        assert!(dir.path().join("table-clean.csv").exists());
    }
}
