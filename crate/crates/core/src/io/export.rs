//! Plot-ready CSV export.
//!
//! One file per panel: a per-scenario indicator time series, a per-scenario
//! loss curve when the scenario was optimized, and one risk histogram over
//! the whole document set. Values are written with round-trip-exact decimal
//! encoding so re-plotting from the CSVs loses nothing; unbounded indicator
//! values become empty cells rather than sentinel numbers.

use super::{IoError, ScenarioDocument};
use crate::metrics::RiskHistogram;
use crate::risk_field::TimeToEvent;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Header of the indicator time-series files.
pub const INDICATOR_HEADER: &str = "t,ttc,thw,tlc,min_distance";
/// Header of the loss-curve files.
pub const LOSS_HEADER: &str = "iteration,total_loss";

/// Write `indicators_NNNN.csv` (and `loss_NNNN.csv` where a loss history
/// exists) per document, plus one `risk_histogram.csv`, into `dir`.
/// Returns the written paths. Deterministic: the same documents produce
/// byte-identical files.
pub fn export_plot_data(
    docs: &[ScenarioDocument],
    dir: &Path,
) -> Result<Vec<PathBuf>, IoError> {
    if docs.is_empty() {
        return Err(IoError::InvalidDocument(
            "nothing to export: empty document set".into(),
        ));
    }
    std::fs::create_dir_all(dir).map_err(|source| IoError::File {
        path: dir.to_path_buf(),
        source,
    })?;

    let mut written = Vec::new();
    for (idx, doc) in docs.iter().enumerate() {
        let dt = doc.scene.dt();
        let mut csv = String::from(INDICATOR_HEADER);
        csv.push('\n');
        for (k, ind) in doc.indicators.iter().enumerate() {
            writeln!(
                csv,
                "{:.3},{},{},{},{:?}",
                k as f64 * dt,
                cell(ind.ttc),
                cell(ind.thw),
                cell(ind.tlc),
                ind.min_distance,
            )
            .expect("writing to a String cannot fail");
        }
        let path = dir.join(format!("indicators_{idx:04}.csv"));
        super::write_file(&path, csv.as_bytes())?;
        written.push(path);

        if let Some(history) = &doc.loss_history {
            let mut csv = String::from(LOSS_HEADER);
            csv.push('\n');
            for (iteration, loss) in history.iter().enumerate() {
                writeln!(csv, "{iteration},{loss:?}").expect("writing to a String cannot fail");
            }
            let path = dir.join(format!("loss_{idx:04}.csv"));
            super::write_file(&path, csv.as_bytes())?;
            written.push(path);
        }
    }

    let hist = RiskHistogram::from_levels(docs.iter().map(|d| d.risk_label));
    let csv = format!(
        "level,count\nlow,{}\nintermediate,{}\nhigh,{}\nlong_tail,{}\n",
        hist.low, hist.intermediate, hist.high, hist.long_tail
    );
    let path = dir.join("risk_histogram.csv");
    super::write_file(&path, csv.as_bytes())?;
    written.push(path);
    Ok(written)
}

/// Round-trip-exact cell; unbounded times become an empty cell.
fn cell(t: TimeToEvent<f64>) -> String {
    match t.finite() {
        Some(v) => format!("{v:?}"),
        None => String::new(),
    }
}
