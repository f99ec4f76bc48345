//! Result tables, run directories and cross-run aggregation.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::online::OnlineRun;
use crate::error::{OndaError, Result};
use crate::storm::{hmean, Pass, CLASS_NAMES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub section: Pass,
    pub method: String,
    /// mIoU per level in `[0, 1]`; `None` where the run has no such evaluation.
    pub values: Vec<Option<f64>>,
    pub hmean: Option<f64>,
}

impl ResultRow {
    pub fn new(section: Pass, method: &str, values: Vec<Option<f64>>) -> Self {
        let hmean = values
            .iter()
            .copied()
            .collect::<Option<Vec<f64>>>()
            .and_then(|v| hmean(&v).ok())
            .map(|h| h.value);
        ResultRow {
            section,
            method: method.to_string(),
            values,
            hmean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub levels: Vec<String>,
    pub rows: Vec<ResultRow>,
}

impl ResultTable {
    pub fn new(levels: usize) -> Self {
        ResultTable {
            levels: (0..levels).map(|l| format!("L{l}")).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: ResultRow) -> Result<()> {
        if row.values.len() != self.levels.len() {
            return Err(OndaError::InvalidArgument(format!(
                "row '{}' has {} values for {} levels",
                row.method,
                row.values.len(),
                self.levels.len()
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    /// Cell value for `method` in `section` at `level`.
    pub fn get(&self, section: Pass, method: &str, level: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.section == section && r.method == method)
            .and_then(|r| r.values[level])
    }

    /// Cell-wise mean over tables with the same layout; rows are matched by
    /// section and method and ordered by first appearance.
    pub fn mean_of(tables: &[ResultTable]) -> Result<ResultTable> {
        let first = tables
            .first()
            .ok_or_else(|| OndaError::InvalidArgument("no tables to aggregate".into()))?;
        let mut out = ResultTable {
            levels: first.levels.clone(),
            rows: Vec::new(),
        };
        let mut keys: Vec<(Pass, String)> = Vec::new();
        for t in tables {
            if t.levels != first.levels {
                return Err(OndaError::InvalidArgument(
                    "tables use different levels".into(),
                ));
            }
            for r in &t.rows {
                if !keys.iter().any(|(s, m)| *s == r.section && *m == r.method) {
                    keys.push((r.section, r.method.clone()));
                }
            }
        }
        for (section, method) in keys {
            let rows: Vec<&ResultRow> = tables
                .iter()
                .flat_map(|t| &t.rows)
                .filter(|r| r.section == section && r.method == method)
                .collect();
            let values = (0..out.levels.len())
                .map(|l| {
                    let v: Vec<f64> = rows.iter().filter_map(|r| r.values[l]).collect();
                    (v.len() == rows.len()).then(|| v.iter().sum::<f64>() / v.len() as f64)
                })
                .collect();
            out.rows.push(ResultRow::new(section, &method, values));
        }
        Ok(out)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("section,method,{},hmean\n", self.levels.join(","));
        for r in &self.rows {
            let _ = write!(s, "{},{}", section_name(r.section), r.method);
            for v in r.values.iter().chain(std::iter::once(&r.hmean)) {
                match v {
                    Some(x) => {
                        let _ = write!(s, ",{:.4}", x * 100.0);
                    }
                    None => s.push(','),
                }
            }
            s.push('\n');
        }
        s
    }

    /// Fixed-width text with per-section column maxima wrapped in `**`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let width = self
            .rows
            .iter()
            .map(|r| r.method.len())
            .max()
            .unwrap_or(6)
            .max(6);
        for section in [Pass::Forward, Pass::Backward] {
            let rows: Vec<&ResultRow> = self.rows.iter().filter(|r| r.section == section).collect();
            if rows.is_empty() {
                continue;
            }
            let _ = write!(s, "{:<width$}", section_name(section));
            for l in self
                .levels
                .iter()
                .chain(std::iter::once(&"hmean".to_string()))
            {
                let _ = write!(s, " {l:>9}");
            }
            s.push('\n');
            let ncol = self.levels.len() + 1;
            let cell = |r: &ResultRow, c: usize| if c < ncol - 1 { r.values[c] } else { r.hmean };
            let maxima: Vec<Option<f64>> = (0..ncol)
                .map(|c| rows.iter().filter_map(|r| cell(r, c)).reduce(f64::max))
                .collect();
            for r in &rows {
                let _ = write!(s, "{:<width$}", r.method);
                for (c, max) in maxima.iter().enumerate() {
                    let text = match cell(r, c) {
                        Some(v) if Some(v) == *max && rows.len() > 1 => {
                            format!("**{:.1}**", v * 100.0)
                        }
                        Some(v) => format!("{:.1}", v * 100.0),
                        None => "-".into(),
                    };
                    let _ = write!(s, " {text:>9}");
                }
                s.push('\n');
            }
            s.push('\n');
        }
        s
    }
}

fn section_name(p: Pass) -> &'static str {
    match p {
        Pass::Forward => "forward",
        Pass::Backward => "backward",
    }
}

/// Forward and backward rows of an online run: a level's forward cell comes
/// from the end of its first forward segment, its backward cell from the end
/// of its last backward segment (or the peak segment for the hardest level).
pub fn online_rows(method: &str, run: &OnlineRun, levels: usize) -> Vec<ResultRow> {
    let forward = (0..levels)
        .map(|l| {
            run.evals
                .iter()
                .find(|e| e.pass == Pass::Forward && e.level == l)
                .map(|e| e.miou[l])
        })
        .collect();
    let backward = (0..levels)
        .map(|l| {
            run.evals
                .iter()
                .rev()
                .find(|e| e.pass == Pass::Backward && e.level == l)
                .or_else(|| {
                    let peak = run.evals.iter().rfind(|e| e.pass == Pass::Forward)?;
                    (peak.level == l && run.evals.iter().any(|e| e.pass == Pass::Backward))
                        .then_some(peak)
                })
                .map(|e| e.miou[l])
        })
        .collect();
    vec![
        ResultRow::new(Pass::Forward, method, forward),
        ResultRow::new(Pass::Backward, method, backward),
    ]
}

/// Row for a model evaluated once on every level.
pub fn static_row(method: &str, miou: &[f64]) -> ResultRow {
    ResultRow::new(
        Pass::Forward,
        method,
        miou.iter().map(|&v| Some(v)).collect(),
    )
}

/// Writes logs, confusion matrices, the mIoU-vs-step series and the table of one online run.
pub fn write_online_run(dir: &Path, run: &OnlineRun, table: &ResultTable) -> Result<()> {
    std::fs::create_dir_all(dir.join("confusion"))?;
    let jsonl = |items: Vec<String>| items.into_iter().map(|l| l + "\n").collect::<String>();
    std::fs::write(
        dir.join("steps.jsonl"),
        jsonl(
            run.steps
                .iter()
                .map(|s| serde_json::to_string(s).expect("serializes"))
                .collect(),
        ),
    )?;
    std::fs::write(
        dir.join("events.jsonl"),
        jsonl(
            run.events
                .iter()
                .map(|e| serde_json::to_string(e).expect("serializes"))
                .collect(),
        ),
    )?;
    std::fs::write(
        dir.join("promotions.json"),
        serde_json::to_string_pretty(&run.promotions)?,
    )?;
    std::fs::write(
        dir.join("objective.json"),
        serde_json::to_string(&run.objective)?,
    )?;
    if let Some(p) = &run.policy {
        std::fs::write(dir.join("policy.json"), serde_json::to_string_pretty(p)?)?;
    }
    let mut series = String::from("end_step,segment,current_level");
    if let Some(e) = run.evals.first() {
        for l in 0..e.miou.len() {
            let _ = write!(series, ",L{l}");
        }
    }
    series.push('\n');
    for e in &run.evals {
        let _ = write!(series, "{},{},{}", e.end_step, e.segment, e.level);
        for v in &e.miou {
            let _ = write!(series, ",{v:.6}");
        }
        series.push('\n');
        for (l, cm) in e.confusions.iter().enumerate() {
            std::fs::write(
                dir.join("confusion")
                    .join(format!("seg{:02}_L{l}.csv", e.segment)),
                cm.to_csv(&CLASS_NAMES),
            )?;
        }
    }
    std::fs::write(dir.join("series.csv"), series)?;
    write_table(dir, table)
}

pub fn write_table(dir: &Path, table: &ResultTable) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("table.json"), serde_json::to_string_pretty(table)?)?;
    std::fs::write(dir.join("table.csv"), table.to_csv())?;
    std::fs::write(dir.join("table.txt"), table.to_text())?;
    Ok(())
}

/// Mean table over run directories, each holding a `table.json`.
pub fn aggregate(run_dirs: &[&Path]) -> Result<ResultTable> {
    let tables = run_dirs
        .iter()
        .map(|d| {
            let p = d.join("table.json");
            let text = std::fs::read_to_string(&p)
                .map_err(|e| OndaError::InvalidArgument(format!("{}: {e}", p.display())))?;
            Ok(serde_json::from_str(&text)?)
        })
        .collect::<Result<Vec<ResultTable>>>()?;
    ResultTable::mean_of(&tables)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(v: f64) -> ResultTable {
        let mut t = ResultTable::new(3);
        t.push(ResultRow::new(
            Pass::Forward,
            "a",
            vec![Some(v), Some(0.5), Some(0.25)],
        ))
        .unwrap();
        t.push(ResultRow::new(
            Pass::Forward,
            "b",
            vec![Some(0.1), None, Some(0.3)],
        ))
        .unwrap();
        t
    }

    #[test]
    fn hmean_recomputes_from_values() {
        let t = table(0.4);
        let h = t.rows[0].hmean.unwrap();
        assert!((h - 3.0 / (1.0 / 0.4 + 2.0 + 4.0)).abs() < 1e-12);
        assert_eq!(t.rows[1].hmean, None);
    }

    #[test]
    fn mean_of_tables() {
        let m = ResultTable::mean_of(&[table(0.2), table(0.6)]).unwrap();
        assert!((m.get(Pass::Forward, "a", 0).unwrap() - 0.4).abs() < 1e-12);
        assert_eq!(m.get(Pass::Forward, "b", 1), None);
        assert!(ResultTable::mean_of(&[]).is_err());
    }

    #[test]
    fn text_marks_maxima() {
        let text = table(0.4).to_text();
        assert!(text.contains("**40.0**"));
        assert!(text.contains("**30.0**"));
        assert!(!text.contains("**10.0**"));
    }

    #[test]
    fn row_length_checked() {
        let mut t = ResultTable::new(2);
        assert!(t
            .push(ResultRow::new(Pass::Forward, "x", vec![Some(1.0)]))
            .is_err());
    }

    #[test]
    fn aggregation_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        write_table(&a, &table(0.2)).unwrap();
        write_table(&b, &table(0.7)).unwrap();
        let x = aggregate(&[&a, &b]).unwrap().to_csv();
        let y = aggregate(&[&a, &b]).unwrap().to_csv();
        assert_eq!(x, y);
        assert!(aggregate(&[&dir.path().join("missing")]).is_err());
    }
}
