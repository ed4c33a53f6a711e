//! Per-target-age comparison tables and grouped bar charts built from one or
//! more evaluation directories.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{EvalRow, ROWS_FILE};

/// Metrics rendered by the report, in output order.
pub const REPORT_METRICS: [&str; 4] = ["age_mae", "trwc", "t_age", "identity"];

/// One compared method: a label and its evaluation directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportInput {
    pub label: String,
    pub dir: PathBuf,
}

impl ReportInput {
    /// Parses `label=dir`, or a bare directory labelled by its file name.
    pub fn parse(spec: &str) -> Result<Self> {
        let (label, dir) = match spec.split_once('=') {
            Some((l, d)) => (l.to_string(), PathBuf::from(d)),
            None => {
                let dir = PathBuf::from(spec);
                let label = dir
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .ok_or_else(|| Error::config(format!("cannot derive a label from {spec:?}")))?;
                (label, dir)
            }
        };
        if label.is_empty() {
            return Err(Error::config(format!("empty label in {spec:?}")));
        }
        Ok(ReportInput { label, dir })
    }
}

/// Rows are target ages, columns are methods; `None` where a method has no
/// successful clip for that target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub metric: String,
    pub methods: Vec<String>,
    pub targets: Vec<f64>,
    pub values: Vec<Vec<Option<f64>>>,
}

pub fn load_rows(dir: &Path) -> Result<Vec<EvalRow>> {
    let path = dir.join(ROWS_FILE);
    if !path.exists() {
        return Err(Error::config(format!("{} not found", path.display())));
    }
    let mut rows = Vec::new();
    for row in csv::Reader::from_path(&path)?.deserialize() {
        rows.push(row?);
    }
    Ok(rows)
}

fn metric_value(row: &EvalRow, metric: &str) -> Option<f64> {
    if row.error.is_some() {
        return None;
    }
    match metric {
        "age_mae" => row.age_mae,
        "trwc" => row.trwc,
        "t_age" => row.t_age,
        "identity" => row.identity,
        _ => None,
    }
}

/// Mean of each metric per (target age, method) over successful rows.
pub fn build_tables(methods: &[(String, Vec<EvalRow>)]) -> Result<Vec<MetricTable>> {
    if methods.is_empty() {
        return Err(Error::config("report needs at least one evaluation"));
    }
    let mut seen = BTreeSet::new();
    for (label, _) in methods {
        if !seen.insert(label.as_str()) {
            return Err(Error::config(format!("duplicate method label {label:?}")));
        }
    }
    let mut targets: Vec<f64> = methods.iter().flat_map(|(_, rows)| rows.iter().map(|r| r.target_age)).collect();
    targets.sort_by(f64::total_cmp);
    targets.dedup();
    Ok(REPORT_METRICS
        .iter()
        .map(|&metric| {
            let values = targets
                .iter()
                .map(|&t| {
                    methods
                        .iter()
                        .map(|(_, rows)| {
                            let v: Vec<f64> = rows
                                .iter()
                                .filter(|r| r.target_age == t)
                                .filter_map(|r| metric_value(r, metric))
                                .collect();
                            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
                        })
                        .collect()
                })
                .collect();
            MetricTable {
                metric: metric.to_string(),
                methods: methods.iter().map(|(l, _)| l.clone()).collect(),
                targets: targets.clone(),
                values,
            }
        })
        .collect())
}

pub fn write_table_csv(table: &MetricTable, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["target_age".to_string()];
    header.extend(table.methods.iter().cloned());
    w.write_record(&header)?;
    for (t, row) in table.targets.iter().zip(&table.values) {
        let mut rec = vec![format!("{t}")];
        rec.extend(row.iter().map(|v| v.map(|x| format!("{x}")).unwrap_or_default()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
];

/// Grouped bars: one group per target age (ascending, left to right), one
/// bar per method in column order, colored by `PALETTE`. Heights share a
/// zero baseline and are scaled to the largest absolute value; negative
/// values hang below the baseline. Missing values leave a gap.
pub fn render_bar_chart(table: &MetricTable) -> RgbImage {
    const BAR: u32 = 14;
    const GAP: u32 = 12;
    const MARGIN: u32 = 16;
    const PLOT_H: u32 = 150;
    let n_methods = table.methods.len().max(1) as u32;
    let groups = table.targets.len().max(1) as u32;
    let width = 2 * MARGIN + groups * n_methods * BAR + (groups - 1) * GAP;
    let all: Vec<f64> = table.values.iter().flatten().flatten().copied().collect();
    let max_pos = all.iter().copied().fold(0.0f64, f64::max);
    let max_neg = all.iter().copied().fold(0.0f64, |m, v| m.max(-v));
    let span = (max_pos + max_neg).max(f64::MIN_POSITIVE);
    let base = MARGIN + (PLOT_H as f64 * max_pos / span).round() as u32;
    let height = 2 * MARGIN + PLOT_H + 1;
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    for (g, row) in table.values.iter().enumerate() {
        for (m, v) in row.iter().enumerate() {
            let Some(v) = v else { continue };
            let px = (PLOT_H as f64 * v.abs() / span).round() as u32;
            let x0 = MARGIN + g as u32 * (n_methods * BAR + GAP) + m as u32 * BAR;
            let (y0, y1) = if *v >= 0.0 { (base - px, base) } else { (base, base + px) };
            let c = Rgb(PALETTE[m % PALETTE.len()]);
            for y in y0..y1 {
                for x in x0..x0 + BAR - 2 {
                    img.put_pixel(x, y, c);
                }
            }
        }
    }
    for x in MARGIN / 2..width - MARGIN / 2 {
        img.put_pixel(x, base, Rgb([0, 0, 0]));
    }
    img
}

/// Writes `<metric>.csv` and `<metric>.png` per metric into `out`, plus
/// `report.json` with every table. Returns the written paths.
pub fn write_report(inputs: &[ReportInput], out: &Path) -> Result<Vec<PathBuf>> {
    let methods = inputs
        .iter()
        .map(|i| Ok((i.label.clone(), load_rows(&i.dir)?)))
        .collect::<Result<Vec<_>>>()?;
    let tables = build_tables(&methods)?;
    fs::create_dir_all(out).map_err(|e| Error::io(format!("creating {}", out.display()), e))?;
    let mut written = Vec::new();
    for t in &tables {
        let csv_path = out.join(format!("{}.csv", t.metric));
        write_table_csv(t, &csv_path)?;
        let png_path = out.join(format!("{}.png", t.metric));
        render_bar_chart(t)
            .save(&png_path)
            .map_err(|e| Error::io(format!("writing {}", png_path.display()), std::io::Error::other(e)))?;
        written.push(csv_path);
        written.push(png_path);
    }
    let json_path = out.join("report.json");
    crate::datamodel::io::write_json(&tables, &json_path)?;
    written.push(json_path);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(target: f64, mae: Option<f64>, error: Option<&str>) -> EvalRow {
        EvalRow {
            subject_id: "s".into(),
            input_age: 18.0,
            target_age: target,
            frames: 3,
            trwc: Some(1.0),
            trwc_skipped: Some(0),
            t_age: Some(0.5),
            age_mae: mae,
            identity: Some(0.9),
            error: error.map(String::from),
        }
    }

    #[test]
    fn tables_average_successful_rows_per_target() {
        let a = vec![row(65.0, Some(2.0), None), row(65.0, Some(4.0), None), row(85.0, Some(9.0), Some("boom"))];
        let b = vec![row(85.0, Some(1.0), None)];
        let tables = build_tables(&[("a".into(), a), ("b".into(), b)]).unwrap();
        let mae = &tables[0];
        assert_eq!(mae.metric, "age_mae");
        assert_eq!(mae.targets, vec![65.0, 85.0]);
        assert_eq!(mae.values, vec![vec![Some(3.0), None], vec![None, Some(1.0)]]);
    }

    #[test]
    fn duplicate_labels_are_rejected() {
        let r = vec![row(65.0, Some(1.0), None)];
        assert!(build_tables(&[("x".into(), r.clone()), ("x".into(), r)]).is_err());
        assert!(build_tables(&[]).is_err());
    }

    #[test]
    fn input_spec_parsing() {
        assert_eq!(ReportInput::parse("ours=runs/a").unwrap().label, "ours");
        assert_eq!(ReportInput::parse("runs/eval_b").unwrap().label, "eval_b");
        assert!(ReportInput::parse("=x").is_err());
    }

    #[test]
    fn chart_draws_one_bar_per_value() {
        let t = MetricTable {
            metric: "age_mae".into(),
            methods: vec!["a".into(), "b".into()],
            targets: vec![65.0, 85.0],
            values: vec![vec![Some(2.0), Some(1.0)], vec![None, Some(-1.0)]],
        };
        let img = render_bar_chart(&t);
        let colored = |c: [u8; 3]| img.pixels().filter(|p| p.0 == c).count();
        assert!(colored(PALETTE[0]) > 0);
        assert!(colored(PALETTE[1]) > 0);
        // the taller bar is twice the shorter one in the same group
        let col_height = |x: u32, c: [u8; 3]| (0..img.height()).filter(|&y| img.get_pixel(x, y).0 == c).count();
        assert_eq!(col_height(16, PALETTE[0]), 2 * col_height(30, PALETTE[1]));
    }
}
