//! Metric evaluation over image directories, aggregate tables and static
//! plots for a run directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use crate::error::{Error, Result};
use crate::imageops::Plane;
use crate::metrics::{evaluate_pair, MetricConfig, MetricReport, METRIC_COLUMNS};

use super::ingest::{decode, load_image};

const IMAGE_EXTENSIONS: [&str; 5] = ["png", "bmp", "jpg", "jpeg", "tif"];

/// Image files of `dir` keyed by id. When some stems end in `_<tag>`, only
/// those are used (with the suffix stripped), so one directory can hold
/// `<id>_A` and `<id>_B` files side by side.
fn index_images(dir: &Path, tag: &str) -> Result<BTreeMap<String, PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut all = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if !ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            all.insert(stem.to_string(), path);
        }
    }
    let suffix = format!("_{tag}");
    let tagged: BTreeMap<String, PathBuf> = all
        .iter()
        .filter_map(|(stem, p)| {
            stem.strip_suffix(&suffix)
                .map(|id| (id.to_string(), p.clone()))
        })
        .collect();
    Ok(if tagged.is_empty() { all } else { tagged })
}

fn luminance(path: &Path) -> Result<Plane> {
    Ok(decode(&load_image(path)?).0)
}

/// Scores fused images against their sources. Each argument is either a
/// single image or a directory; directories are matched by id (see
/// [`index_images`]). Fused images without both sources are skipped with a
/// warning.
pub fn evaluate_paths(
    fused: &Path,
    src_a: &Path,
    src_b: &Path,
    config: &MetricConfig,
) -> Result<MetricReport> {
    let missing: Vec<PathBuf> = [fused, src_a, src_b]
        .iter()
        .filter(|p| !p.exists())
        .map(|p| p.to_path_buf())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingFiles(missing));
    }
    let mut pairs = Vec::new();
    if fused.is_file() {
        let id = fused
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("pair")
            .to_string();
        pairs.push(evaluate_pair(
            &id,
            &luminance(fused)?,
            &luminance(src_a)?,
            &luminance(src_b)?,
            config,
        )?);
        return Ok(MetricReport { pairs, model: None });
    }
    let (fi, ai, bi) = (
        index_images(fused, "F")?,
        index_images(src_a, "A")?,
        index_images(src_b, "B")?,
    );
    for (id, fp) in &fi {
        match (ai.get(id), bi.get(id)) {
            (Some(ap), Some(bp)) => {
                let (f, a, b) = (luminance(fp)?, luminance(ap)?, luminance(bp)?);
                if !(f.same_size(&a) && f.same_size(&b)) {
                    log::warn!("skipping `{id}`: fused and source sizes differ");
                    continue;
                }
                pairs.push(evaluate_pair(id, &f, &a, &b, config)?);
            }
            _ => log::warn!("skipping `{id}`: no matching source images"),
        }
    }
    if pairs.is_empty() {
        return Err(Error::Dataset(format!(
            "no fused image in {} matched a source pair",
            fused.display()
        )));
    }
    Ok(MetricReport { pairs, model: None })
}

/// One row of the aggregate table.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    /// File stem of the per-pair CSV.
    pub source: String,
    /// `mean` or `median`.
    pub stat: &'static str,
    pub pairs: usize,
    pub values: [f64; 6],
}

#[derive(Debug, Clone)]
pub struct ReportOutput {
    pub rows: Vec<AggregateRow>,
    pub aggregate_csv: PathBuf,
    pub plots: Vec<PathBuf>,
}

pub const HISTORY_FILES: [&str; 3] = [
    "search_history.csv",
    "meta_history.csv",
    "joint_history.csv",
];

/// Reads every `metrics/*.csv` of `run_dir` and writes
/// `report/aggregate.csv`, `report/metrics.svg` and, when history files
/// exist, `report/loss_curves.svg`.
pub fn report(run_dir: &Path) -> Result<ReportOutput> {
    let metrics_dir = run_dir.join("metrics");
    let mut csvs: Vec<PathBuf> = match std::fs::read_dir(&metrics_dir) {
        Ok(entries) => entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "csv"))
            .collect(),
        Err(_) => vec![],
    };
    if csvs.is_empty() {
        return Err(Error::MissingFiles(vec![metrics_dir.join("*.csv")]));
    }
    csvs.sort();

    let mut rows = Vec::new();
    for path in &csvs {
        let report = MetricReport::read_csv(path)?;
        let source = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        let (Some(mean), Some(median)) = (report.mean(), report.median()) else {
            log::warn!("{} has no pairs", path.display());
            continue;
        };
        let pairs = report.pairs.len();
        rows.push(AggregateRow {
            source: source.clone(),
            stat: "mean",
            pairs,
            values: mean,
        });
        rows.push(AggregateRow {
            source,
            stat: "median",
            pairs,
            values: median,
        });
    }
    if rows.is_empty() {
        return Err(Error::Dataset(format!(
            "metric CSVs in {} contain no pairs",
            metrics_dir.display()
        )));
    }

    let out = run_dir.join("report");
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let aggregate_csv = out.join("aggregate.csv");
    write_aggregate(&aggregate_csv, &rows)?;

    let mut plots = vec![out.join("metrics.svg")];
    plot_metric_bars(&plots[0], &rows)?;
    let histories: Vec<(String, PathBuf)> = HISTORY_FILES
        .iter()
        .map(|f| (f.trim_end_matches(".csv").to_string(), run_dir.join(f)))
        .filter(|(_, p)| p.exists())
        .collect();
    if !histories.is_empty() {
        let path = out.join("loss_curves.svg");
        plot_loss_curves(&path, &histories)?;
        plots.push(path);
    }
    Ok(ReportOutput {
        rows,
        aggregate_csv,
        plots,
    })
}

fn write_aggregate(path: &Path, rows: &[AggregateRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["source", "stat", "pairs"];
    header.extend(&METRIC_COLUMNS[1..]);
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.source.clone(), r.stat.to_string(), r.pairs.to_string()];
        rec.extend(r.values.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::Plot(e.to_string())
}

fn value_range(values: impl IntoIterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .into_iter()
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v), hi.max(v))
        });
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-9);
    (lo - pad, hi + pad)
}

/// One panel per metric, one bar per source CSV (means).
fn plot_metric_bars(path: &Path, rows: &[AggregateRow]) -> Result<()> {
    let means: Vec<&AggregateRow> = rows.iter().filter(|r| r.stat == "mean").collect();
    let root = SVGBackend::new(path, (960, 560)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    for (m, panel) in root.split_evenly((2, 3)).iter().enumerate() {
        let (lo, hi) = value_range(means.iter().map(|r| r.values[m]));
        let (lo, hi) = (lo.min(0.0), hi.max(0.0));
        let mut chart = ChartBuilder::on(panel)
            .caption(METRIC_COLUMNS[m + 1], ("sans-serif", 18))
            .margin(8)
            .x_label_area_size(20)
            .y_label_area_size(44)
            .build_cartesian_2d(0.0..means.len() as f64, lo..hi)
            .map_err(plot_err)?;
        chart
            .configure_mesh()
            .disable_x_mesh()
            .x_labels(0)
            .draw()
            .map_err(plot_err)?;
        chart
            .draw_series(means.iter().enumerate().map(|(i, r)| {
                let x = i as f64;
                Rectangle::new(
                    [(x + 0.15, 0.0), (x + 0.85, r.values[m])],
                    Palette99::pick(i).filled(),
                )
            }))
            .map_err(plot_err)?;
    }
    root.present().map_err(plot_err)
}

fn read_history(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        rows.push(rec?.iter().map(|v| v.parse().unwrap_or(f64::NAN)).collect());
    }
    Ok((header, rows))
}

/// One panel per history file; every loss column against the first column.
fn plot_loss_curves(path: &Path, histories: &[(String, PathBuf)]) -> Result<()> {
    let root = SVGBackend::new(path, (960, 300 * histories.len() as u32)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    for ((name, file), panel) in histories
        .iter()
        .zip(root.split_evenly((histories.len(), 1)))
    {
        let (header, rows) = read_history(file)?;
        let columns: Vec<usize> = (1..header.len())
            .filter(|&c| header[c] != "wall_time")
            .collect();
        let xmax = rows.iter().map(|r| r[0]).fold(1.0f64, f64::max);
        let (lo, hi) = value_range(rows.iter().flat_map(|r| columns.iter().map(move |&c| r[c])));
        let mut chart = ChartBuilder::on(&panel)
            .caption(name, ("sans-serif", 18))
            .margin(8)
            .x_label_area_size(28)
            .y_label_area_size(60)
            .build_cartesian_2d(0.0..xmax, lo..hi)
            .map_err(plot_err)?;
        chart
            .configure_mesh()
            .x_desc(header[0].as_str())
            .draw()
            .map_err(plot_err)?;
        for (k, &c) in columns.iter().enumerate() {
            let color = Palette99::pick(k);
            chart
                .draw_series(LineSeries::new(
                    rows.iter().map(|r| (r[0], r[c])),
                    color.stroke_width(2),
                ))
                .map_err(plot_err)?
                .label(header[c].as_str())
                .legend(move |(x, y)| {
                    PathElement::new(vec![(x, y), (x + 16, y)], Palette99::pick(k))
                });
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(plot_err)?;
    }
    root.present().map_err(plot_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::PairMetrics;

    fn pair(id: &str, v: f64) -> PairMetrics {
        PairMetrics {
            pair_id: id.into(),
            mi: v,
            fmi: v / 2.0,
            vif: v / 4.0,
            qabf: 0.5,
            en: 7.0,
            scd: -v,
        }
    }

    fn write_metrics(dir: &Path, name: &str, pairs: Vec<PairMetrics>) {
        std::fs::create_dir_all(dir.join("metrics")).unwrap();
        let file = std::fs::File::create(dir.join("metrics").join(name)).unwrap();
        MetricReport { pairs, model: None }.write_csv(file).unwrap();
    }

    #[test]
    fn empty_metrics_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("metrics")).unwrap();
        assert!(matches!(report(dir.path()), Err(Error::MissingFiles(_))));
    }

    #[test]
    fn single_pair_aggregate_equals_pair() {
        let dir = tempfile::tempdir().unwrap();
        write_metrics(dir.path(), "run.csv", vec![pair("p", 1.5)]);
        let out = report(dir.path()).unwrap();
        assert_eq!(out.rows.len(), 2);
        for r in &out.rows {
            assert_eq!(r.values, pair("p", 1.5).values());
        }
        assert!(out.plots.iter().all(|p| p.exists()));
    }

    #[test]
    fn two_pairs_mean_and_median() {
        let dir = tempfile::tempdir().unwrap();
        write_metrics(dir.path(), "run.csv", vec![pair("p", 1.0), pair("q", 3.0)]);
        std::fs::write(
            dir.path().join("joint_history.csv"),
            "epoch,task_loss\n0,1.0\n1,0.5\n",
        )
        .unwrap();
        let out = report(dir.path()).unwrap();
        assert_eq!(out.rows[0].values[0], 2.0);
        assert_eq!(out.rows[1].values[0], 2.0);
        assert_eq!(out.rows[0].values[5], -2.0);
        assert_eq!(out.plots.len(), 2);
        let text = std::fs::read_to_string(&out.aggregate_csv).unwrap();
        assert!(
            text.starts_with(
                "source,stat,pairs,MI,FMI,VIF,Qabf,EN,SCD\nrun,mean,2,2,1,0.5,0.5,7,-2\n"
            ),
            "{text}"
        );
    }
}
