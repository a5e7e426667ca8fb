//! Minimal standalone SVG line plots for training histories and sweeps.

use dtkd_core::{Error, Result};
use std::path::Path;

const COLORS: &[&str] = &["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

const W: f64 = 640.0;
const H: f64 = 440.0;
const ML: f64 = 64.0; // left margin
const MR: f64 = 24.0;
const MT: f64 = 28.0;
const MB: f64 = 52.0;

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// Reads `epoch,train_loss,val_acc,lr` and returns (epoch, val_acc) points.
pub fn parse_history_csv(path: &Path) -> Result<Vec<(f64, f64)>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::MalformedCsv("empty file".into()))?;
    if header.trim() != "epoch,train_loss,val_acc,lr" {
        return Err(Error::MalformedCsv(format!("unexpected header {header:?}")));
    }
    let mut points = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 4 {
            return Err(Error::MalformedCsv(format!(
                "row {}: expected 4 columns, got {}",
                i + 2,
                cols.len()
            )));
        }
        let epoch: f64 = cols[0]
            .parse()
            .map_err(|_| Error::MalformedCsv(format!("row {}: bad epoch", i + 2)))?;
        let acc: f64 = cols[2]
            .parse()
            .map_err(|_| Error::MalformedCsv(format!("row {}: bad val_acc", i + 2)))?;
        points.push((epoch, acc));
    }
    if points.is_empty() {
        return Err(Error::MalformedCsv("no data rows".into()));
    }
    Ok(points)
}

fn bounds(series: &[Series]) -> ((f64, f64), (f64, f64)) {
    let mut xmin = f64::INFINITY;
    let mut xmax = f64::NEG_INFINITY;
    let mut ymin = f64::INFINITY;
    let mut ymax = f64::NEG_INFINITY;
    for s in series {
        for &(x, y) in &s.points {
            xmin = xmin.min(x);
            xmax = xmax.max(x);
            ymin = ymin.min(y);
            ymax = ymax.max(y);
        }
    }
    if xmax == xmin {
        xmax = xmin + 1.0;
    }
    if ymax == ymin {
        ymax = ymin + 1.0;
    }
    ((xmin, xmax), (ymin, ymax))
}

/// Renders one or more line series into a standalone SVG string.
pub fn line_plot(series: &[Series], title: &str, x_label: &str, y_label: &str) -> Result<String> {
    if series.is_empty() || series.iter().any(|s| s.points.is_empty()) {
        return Err(Error::MalformedCsv("nothing to plot".into()));
    }
    let ((xmin, xmax), (ymin, ymax)) = bounds(series);
    let sx = |x: f64| ML + (x - xmin) / (xmax - xmin) * (W - ML - MR);
    let sy = |y: f64| H - MB - (y - ymin) / (ymax - ymin) * (H - MT - MB);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n"
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"18\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">{title}</text>\n",
        W / 2.0
    ));
    // axes
    svg.push_str(&format!(
        "<line x1=\"{ML}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"black\"/>\n<line x1=\"{ML}\" y1=\"{MT}\" x2=\"{ML}\" y2=\"{0}\" stroke=\"black\"/>\n",
        H - MB,
        W - MR
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">{x_label}</text>\n",
        (ML + W - MR) / 2.0,
        H - 12.0
    ));
    svg.push_str(&format!(
        "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\" transform=\"rotate(-90 16 {0})\">{y_label}</text>\n",
        (MT + H - MB) / 2.0
    ));
    // min/max tick labels
    for (x, anchor) in [(xmin, ML), (xmax, W - MR)] {
        svg.push_str(&format!(
            "<text x=\"{anchor}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"10\">{x:.3}</text>\n",
            H - MB + 16.0
        ));
    }
    for (y, pos) in [(ymin, H - MB), (ymax, MT)] {
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">{y:.3}</text>\n",
            ML - 6.0,
            pos + 4.0
        ));
    }
    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            pts.join(" ")
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" fill=\"{color}\">{}</text>\n",
            W - MR - 150.0,
            MT + 16.0 * (i as f64 + 1.0),
            s.name
        ));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// One SVG with a polyline per history CSV.
pub fn history_plot(csvs: &[(String, std::path::PathBuf)]) -> Result<String> {
    let mut series = Vec::new();
    for (name, path) in csvs {
        series.push(Series {
            name: name.clone(),
            points: parse_history_csv(path)?,
        });
    }
    line_plot(&series, "Validation accuracy per epoch", "epoch", "val_acc")
}

/// Parsed sweep rows: (value, seed, tl_acc, kd_acc, improvement).
pub fn parse_sweep_csv(path: &Path) -> Result<Vec<(f64, u64, f64, f64, f64)>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::MalformedCsv("empty file".into()))?;
    if header.trim() != "param,value,seed,tl_acc,kd_acc,improvement" {
        return Err(Error::MalformedCsv(format!("unexpected header {header:?}")));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 6 {
            return Err(Error::MalformedCsv(format!("row {}: bad column count", i + 2)));
        }
        let bad = |what: &str| Error::MalformedCsv(format!("row {}: bad {what}", i + 2));
        rows.push((
            cols[1].parse().map_err(|_| bad("value"))?,
            cols[2].parse().map_err(|_| bad("seed"))?,
            cols[3].parse().map_err(|_| bad("tl_acc"))?,
            cols[4].parse().map_err(|_| bad("kd_acc"))?,
            cols[5].parse().map_err(|_| bad("improvement"))?,
        ));
    }
    if rows.is_empty() {
        return Err(Error::MalformedCsv("no data rows".into()));
    }
    Ok(rows)
}

fn mean_by_value(rows: &[(f64, u64, f64, f64, f64)], col: fn(&(f64, u64, f64, f64, f64)) -> f64) -> Vec<(f64, f64)> {
    let mut values: Vec<f64> = rows.iter().map(|r| r.0).collect();
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    values.dedup();
    values
        .into_iter()
        .map(|v| {
            let sel: Vec<f64> = rows.iter().filter(|r| r.0 == v).map(col).collect();
            (v, sel.iter().sum::<f64>() / sel.len() as f64)
        })
        .collect()
}

/// Accuracy-vs-fraction plot plus the KD-minus-TL delta plot.
pub fn sweep_plots(path: &Path, param: &str) -> Result<(String, String)> {
    let rows = parse_sweep_csv(path)?;
    let acc = line_plot(
        &[
            Series {
                name: "TL".into(),
                points: mean_by_value(&rows, |r| r.2),
            },
            Series {
                name: "TL+KD".into(),
                points: mean_by_value(&rows, |r| r.3),
            },
        ],
        "Final validation accuracy",
        param,
        "accuracy",
    )?;
    let delta = line_plot(
        &[Series {
            name: "TL+KD - TL".into(),
            points: mean_by_value(&rows, |r| r.4),
        }],
        "Accuracy improvement of TL+KD over TL",
        param,
        "delta",
    )?;
    Ok((acc, delta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn history_csv_round_trip() {
        let dir = std::env::temp_dir().join("dtkd_plot_test");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("h.csv");
        std::fs::write(&p, "epoch,train_loss,val_acc,lr\n1,0.5,0.6,0.01\n2,0.4,0.7,0.01\n")
            .unwrap();
        let pts = parse_history_csv(&p).unwrap();
        assert_eq!(pts, vec![(1.0, 0.6), (2.0, 0.7)]);

        let svg = history_plot(&[("a".into(), p.clone()), ("b".into(), p.clone())]).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("val_acc"));
    }

    #[test]
    fn empty_history_is_an_error() {
        let dir = std::env::temp_dir().join("dtkd_plot_test");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("empty.csv");
        std::fs::write(&p, "epoch,train_loss,val_acc,lr\n").unwrap();
        assert!(parse_history_csv(&p).is_err());
    }

    #[test]
    fn sweep_plot_aggregates_seeds() {
        let dir = std::env::temp_dir().join("dtkd_plot_test");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("s.csv");
        std::fs::write(
            &p,
            "param,value,seed,tl_acc,kd_acc,improvement\n\
             f,0,0,0.5,0.6,0.1\nf,0,7,0.7,0.6,-0.1\nf,1,0,0.4,0.5,0.1\nf,1,7,0.4,0.7,0.3\n",
        )
        .unwrap();
        let (acc, delta) = sweep_plots(&p, "f").unwrap();
        assert_eq!(acc.matches("<polyline").count(), 2);
        assert_eq!(delta.matches("<polyline").count(), 1);
        let rows = parse_sweep_csv(&p).unwrap();
        let deltas = mean_by_value(&rows, |r| r.4);
        assert_eq!(deltas, vec![(0.0, 0.0), (1.0, 0.2)]);
    }
}
