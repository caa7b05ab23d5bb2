//! Ingestion, normalization, windowing, extreme labeling and chronological
//! splitting of hourly multivariate time series.
//!
//! Row indices used throughout (window origins, split cut points) refer to
//! rows of the ingested [`TimeSeriesFrame`], i.e. after rows carrying
//! non-finite values have been dropped.

use std::ops::Range;
use std::path::Path;

use chrono::{DateTime, NaiveDateTime};
use log::warn;
use ndarray::{s, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Batch;

const SECONDS_PER_HOUR: i64 = 3600;

/// Column layout expected in an input CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    #[serde(default = "default_timestamp_column")]
    pub timestamp_column: String,
    pub features: Vec<String>,
    pub targets: Vec<String>,
}

fn default_timestamp_column() -> String {
    "timestamp".to_string()
}

/// Timestamped observation matrix with named features and designated targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesFrame {
    timestamps: Vec<i64>,
    values: Array2<f64>,
    feature_names: Vec<String>,
    target_indices: Vec<usize>,
}

impl TimeSeriesFrame {
    /// Builds a frame, checking every structural invariant.
    ///
    /// `timestamps` are epoch hours. Gaps between consecutive timestamps are
    /// allowed and split the frame into contiguous segments.
    pub fn new(
        timestamps: Vec<i64>,
        values: Array2<f64>,
        feature_names: Vec<String>,
        target_indices: Vec<usize>,
    ) -> Result<Self> {
        if values.nrows() != timestamps.len() {
            return Err(Error::Dimension(format!(
                "{} timestamps for {} rows",
                timestamps.len(),
                values.nrows()
            )));
        }
        if values.ncols() != feature_names.len() {
            return Err(Error::Dimension(format!(
                "{} feature names for {} columns",
                feature_names.len(),
                values.ncols()
            )));
        }
        if target_indices.is_empty() || target_indices.len() > feature_names.len() {
            return Err(Error::Schema(format!(
                "need between 1 and {} targets, got {}",
                feature_names.len(),
                target_indices.len()
            )));
        }
        if let Some(&bad) = target_indices.iter().find(|&&t| t >= feature_names.len()) {
            return Err(Error::Schema(format!("target index {bad} out of range")));
        }
        for (i, pair) in timestamps.windows(2).enumerate() {
            if pair[1] <= pair[0] {
                return Err(Error::Integrity {
                    row: i + 2,
                    message: "timestamps must be strictly increasing".into(),
                });
            }
        }
        if let Some(((row, _), _)) = values.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Integrity {
                row: row + 1,
                message: "non-finite value".into(),
            });
        }
        Ok(Self {
            timestamps,
            values,
            feature_names,
            target_indices,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.values.ncols()
    }

    pub fn n_targets(&self) -> usize {
        self.target_indices.len()
    }

    pub fn timestamps(&self) -> &[i64] {
        &self.timestamps
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn target_indices(&self) -> &[usize] {
        &self.target_indices
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.feature_names.iter().position(|f| f == name)
    }

    pub fn column(&self, j: usize) -> ArrayView1<'_, f64> {
        self.values.column(j)
    }

    /// Maximal row ranges with uniform one-hour spacing.
    pub fn segments(&self) -> Vec<Range<usize>> {
        let mut out = Vec::new();
        let n = self.n_rows();
        if n == 0 {
            return out;
        }
        let mut start = 0;
        for i in 1..n {
            if self.timestamps[i] - self.timestamps[i - 1] != 1 {
                out.push(start..i);
                start = i;
            }
        }
        out.push(start..n);
        out
    }

    /// Writes the frame as CSV with an ISO-8601 timestamp column.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut wtr = csv::Writer::from_path(path)?;
        let mut header = vec!["timestamp".to_string()];
        header.extend(self.feature_names.iter().cloned());
        wtr.write_record(&header)?;
        for (i, &ts) in self.timestamps.iter().enumerate() {
            let mut rec = vec![format_timestamp(ts)];
            rec.extend(self.values.row(i).iter().map(|v| v.to_string()));
            wtr.write_record(&rec)?;
        }
        wtr.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

fn format_timestamp(epoch_hours: i64) -> String {
    DateTime::from_timestamp(epoch_hours * SECONDS_PER_HOUR, 0)
        .map(|dt| dt.format("%Y-%m-%dT%H:%M:%SZ").to_string())
        .unwrap_or_else(|| (epoch_hours * SECONDS_PER_HOUR).to_string())
}

/// Parses ISO-8601 or integer epoch seconds into epoch hours.
fn parse_timestamp(raw: &str) -> std::result::Result<i64, String> {
    let raw = raw.trim();
    let seconds = if let Ok(secs) = raw.parse::<i64>() {
        secs
    } else if let Ok(dt) = DateTime::parse_from_rfc3339(raw) {
        dt.timestamp()
    } else {
        ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%d %H:%M"]
            .iter()
            .find_map(|fmt| NaiveDateTime::parse_from_str(raw, fmt).ok())
            .map(|dt| dt.and_utc().timestamp())
            .ok_or_else(|| format!("unparseable timestamp `{raw}`"))?
    };
    if seconds.rem_euclid(SECONDS_PER_HOUR) != 0 {
        return Err(format!("timestamp `{raw}` is not on a whole hour"));
    }
    Ok(seconds.div_euclid(SECONDS_PER_HOUR))
}

fn parse_cell(raw: &str) -> Option<f64> {
    let raw = raw.trim();
    match raw {
        "" | "NA" | "na" | "NaN" | "nan" | "null" => Some(f64::NAN),
        _ => raw.parse::<f64>().ok(),
    }
}

/// Reads a CSV into a frame. Rows with any missing or non-finite value are
/// dropped; the resulting timestamp gaps split the series into segments.
///
/// Row numbers in errors count data rows from 1, excluding the header.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<TimeSeriesFrame> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let locate = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Schema(format!("missing column `{name}`")))
    };
    let ts_col = locate(&schema.timestamp_column)?;

    let mut feature_names = schema.features.clone();
    for t in &schema.targets {
        if !feature_names.contains(t) {
            feature_names.push(t.clone());
        }
    }
    if feature_names.is_empty() || schema.targets.is_empty() {
        return Err(Error::Schema("schema needs at least one target".into()));
    }
    let cols = feature_names
        .iter()
        .map(|f| locate(f))
        .collect::<Result<Vec<_>>>()?;
    let target_indices: Vec<usize> = schema
        .targets
        .iter()
        .map(|t| feature_names.iter().position(|f| f == t).unwrap())
        .collect();

    let d = feature_names.len();
    let mut timestamps = Vec::new();
    let mut flat = Vec::new();
    let mut last_ts: Option<i64> = None;
    let mut dropped = 0usize;
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec?;
        let ts_raw = rec.get(ts_col).unwrap_or("");
        let ts = parse_timestamp(ts_raw).map_err(|message| Error::Integrity { row, message })?;
        if let Some(prev) = last_ts {
            if ts == prev {
                return Err(Error::Integrity {
                    row,
                    message: "duplicate timestamp".into(),
                });
            }
            if ts < prev {
                return Err(Error::Integrity {
                    row,
                    message: "timestamp goes backwards".into(),
                });
            }
        }
        last_ts = Some(ts);

        let mut vals = Vec::with_capacity(d);
        for (f, &c) in feature_names.iter().zip(&cols) {
            let cell = rec.get(c).unwrap_or("");
            let v = parse_cell(cell).ok_or_else(|| Error::Integrity {
                row,
                message: format!("unparseable value `{cell}` in column `{f}`"),
            })?;
            vals.push(v);
        }
        if vals.iter().all(|v| v.is_finite()) {
            timestamps.push(ts);
            flat.extend(vals);
        } else {
            dropped += 1;
        }
    }
    if dropped > 0 {
        warn!("dropped {dropped} rows with missing or non-finite values");
    }
    let n = timestamps.len();
    let values = Array2::from_shape_vec((n, d), flat)
        .map_err(|e| Error::Dimension(e.to_string()))?;
    log::info!("loaded {} rows x {} features from {}", n, d, path.display());
    TimeSeriesFrame::new(timestamps, values, feature_names, target_indices)
}

/// Per-feature min-max scaler fit on the leading training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mins: Vec<f64>,
    pub maxs: Vec<f64>,
    pub feature_names: Vec<String>,
    pub target_indices: Vec<usize>,
}

impl Normalizer {
    pub fn transform(&self, feature: usize, value: f64) -> f64 {
        (value - self.mins[feature]) / (self.maxs[feature] - self.mins[feature])
    }

    pub fn inverse_transform(&self, feature: usize, value: f64) -> f64 {
        value * (self.maxs[feature] - self.mins[feature]) + self.mins[feature]
    }

    /// Maps a normalized prediction for the `k`-th target back to raw units.
    pub fn inverse_target(&self, k: usize, value: f64) -> f64 {
        self.inverse_transform(self.target_indices[k], value)
    }
}

/// Fits min/max on the first `floor(train_fraction * N)` rows only.
pub fn fit_normalizer(frame: &TimeSeriesFrame, train_fraction: f64) -> Result<Normalizer> {
    if !(train_fraction > 0.0 && train_fraction <= 1.0) {
        return Err(Error::Config(format!(
            "train_fraction must lie in (0, 1], got {train_fraction}"
        )));
    }
    let rows = (train_fraction * frame.n_rows() as f64).floor() as usize;
    if rows == 0 {
        return Err(Error::Degenerate("training segment has no rows".into()));
    }
    let head = frame.values.slice(s![..rows, ..]);
    let mut mins = Vec::with_capacity(frame.n_features());
    let mut maxs = Vec::with_capacity(frame.n_features());
    for (j, col) in head.columns().into_iter().enumerate() {
        let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi <= lo {
            return Err(Error::DegenerateFeature(frame.feature_names[j].clone()));
        }
        mins.push(lo);
        maxs.push(hi);
    }
    Ok(Normalizer {
        mins,
        maxs,
        feature_names: frame.feature_names.clone(),
        target_indices: frame.target_indices.clone(),
    })
}

/// One forecasting sample: `lookback x features` input, `horizon x targets` output.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    pub x: Array2<f64>,
    pub y: Array2<f64>,
    /// Frame row of the first look-back step.
    pub origin: usize,
    pub extreme: bool,
    /// Raw-unit aggregate used for extreme labeling and static reweighting.
    pub peak: f64,
}

impl WindowSample {
    pub fn lookback(&self) -> usize {
        self.x.nrows()
    }

    pub fn horizon(&self) -> usize {
        self.y.nrows()
    }

    /// One past the last frame row touched by this window.
    pub fn end(&self) -> usize {
        self.origin + self.lookback() + self.horizon()
    }
}

/// Slides a `lookback + horizon` window over every contiguous segment.
pub fn make_windows(
    frame: &TimeSeriesFrame,
    normalizer: &Normalizer,
    lookback: usize,
    horizon: usize,
) -> Result<Vec<WindowSample>> {
    if lookback == 0 || horizon == 0 {
        return Err(Error::Config("lookback and horizon must be >= 1".into()));
    }
    if normalizer.mins.len() != frame.n_features() {
        return Err(Error::Dimension(format!(
            "normalizer has {} features, frame has {}",
            normalizer.mins.len(),
            frame.n_features()
        )));
    }
    let mut scaled = frame.values.clone();
    for (j, mut col) in scaled.columns_mut().into_iter().enumerate() {
        col.mapv_inplace(|v| normalizer.transform(j, v));
    }
    let targets = &frame.target_indices;
    let span = lookback + horizon;
    let mut out = Vec::new();
    for seg in frame.segments() {
        if seg.len() < span {
            warn!(
                "segment of {} rows at row {} is shorter than lookback+horizon={span}; no windows",
                seg.len(),
                seg.start
            );
            continue;
        }
        for origin in seg.start..=seg.end - span {
            let x = scaled.slice(s![origin..origin + lookback, ..]).to_owned();
            let mut y = Array2::zeros((horizon, targets.len()));
            for (k, &t) in targets.iter().enumerate() {
                y.column_mut(k)
                    .assign(&scaled.slice(s![origin + lookback..origin + span, t]));
            }
            out.push(WindowSample {
                x,
                y,
                origin,
                extreme: false,
                peak: f64::NAN,
            });
        }
    }
    Ok(out)
}

/// Stacks windows into a batch: each input flattened row-major (time, feature).
pub fn to_batch(windows: &[&WindowSample]) -> Batch {
    let n = windows.len();
    let in_dim = windows.first().map_or(0, |w| w.x.len());
    let out_dim = windows.first().map_or(0, |w| w.y.len());
    let mut x = Array2::zeros((n, in_dim));
    let mut y = Array2::zeros((n, out_dim));
    for (i, w) in windows.iter().enumerate() {
        x.row_mut(i)
            .iter_mut()
            .zip(w.x.iter())
            .for_each(|(d, s)| *d = *s);
        y.row_mut(i)
            .iter_mut()
            .zip(w.y.iter())
            .for_each(|(d, s)| *d = *s);
    }
    Batch { x, y }
}

/// Which variable decides whether a window is extreme.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ExtremeMode {
    /// Max of the first target over the prediction window.
    #[default]
    Target,
    /// Max of the named covariate over the look-back window.
    Covariate(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtremeLabeling {
    pub mode: ExtremeMode,
    pub percentile: f64,
    /// Threshold in raw units of `column`.
    pub threshold: f64,
    pub column: usize,
    pub reference_windows: usize,
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(values: &[f64], pct: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let pos = (n - 1) as f64 * pct / 100.0;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Computes each window's raw aggregate and flags windows whose aggregate
/// strictly exceeds the `percentile` of the aggregates of the reference
/// windows (those ending at or before `reference_end`).
pub fn label_extremes(
    frame: &TimeSeriesFrame,
    windows: &mut [WindowSample],
    mode: &ExtremeMode,
    percentile_level: f64,
    reference_end: usize,
) -> Result<ExtremeLabeling> {
    if !(percentile_level > 0.0 && percentile_level < 100.0) {
        return Err(Error::Config(format!(
            "percentile must lie in (0, 100), got {percentile_level}"
        )));
    }
    let (column, over_lookback) = match mode {
        ExtremeMode::Target => (frame.target_indices[0], false),
        ExtremeMode::Covariate(name) => (
            frame
                .feature_index(name)
                .ok_or_else(|| Error::Schema(format!("unknown covariate `{name}`")))?,
            true,
        ),
    };
    let col = frame.column(column);
    for w in windows.iter_mut() {
        let rows = if over_lookback {
            w.origin..w.origin + w.lookback()
        } else {
            w.origin + w.lookback()..w.end()
        };
        w.peak = rows.map(|r| col[r]).fold(f64::NEG_INFINITY, f64::max);
    }
    let reference: Vec<f64> = windows
        .iter()
        .filter(|w| w.end() <= reference_end)
        .map(|w| w.peak)
        .collect();
    if reference.is_empty() {
        return Err(Error::Degenerate(
            "no training windows to derive the extreme threshold from".into(),
        ));
    }
    let threshold = percentile(&reference, percentile_level);
    for w in windows.iter_mut() {
        w.extreme = w.peak > threshold;
    }
    Ok(ExtremeLabeling {
        mode: mode.clone(),
        percentile: percentile_level,
        threshold,
        column,
        reference_windows: reference.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitFractions {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.70,
            validation: 0.15,
            test: 0.15,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.validation, self.test];
        if parts.iter().any(|&p| !(p > 0.0)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions must be positive and sum to 1, got {parts:?}"
            )));
        }
        Ok(())
    }

    /// Frame rows at which validation and test begin.
    pub fn cut_points(&self, n_rows: usize) -> (usize, usize) {
        let n = n_rows as f64;
        (
            (self.train * n).floor() as usize,
            ((self.train + self.validation) * n).floor() as usize,
        )
    }
}

#[derive(Debug, Clone, Default)]
pub struct SplitResult {
    pub train: Vec<WindowSample>,
    pub validation: Vec<WindowSample>,
    pub test: Vec<WindowSample>,
    /// Extreme windows of the validation split.
    pub eval_extreme: Vec<WindowSample>,
    /// Windows discarded because they straddle a cut point.
    pub dropped: usize,
    pub warnings: Vec<String>,
}

/// Window origins per split, written alongside each run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
    pub eval_extreme: Vec<usize>,
    pub dropped: usize,
}

impl SplitResult {
    pub fn manifest(&self) -> SplitManifest {
        let origins = |ws: &[WindowSample]| ws.iter().map(|w| w.origin).collect();
        SplitManifest {
            train: origins(&self.train),
            validation: origins(&self.validation),
            test: origins(&self.test),
            eval_extreme: origins(&self.eval_extreme),
            dropped: self.dropped,
        }
    }
}

/// Assigns each window to the split whose row range fully contains it.
pub fn chrono_split(
    windows: Vec<WindowSample>,
    n_rows: usize,
    fractions: SplitFractions,
) -> Result<SplitResult> {
    fractions.validate()?;
    let (cut_val, cut_test) = fractions.cut_points(n_rows);
    let mut out = SplitResult::default();
    for w in windows {
        if w.end() <= cut_val {
            out.train.push(w);
        } else if w.origin >= cut_val && w.end() <= cut_test {
            out.validation.push(w);
        } else if w.origin >= cut_test && w.end() <= n_rows {
            out.test.push(w);
        } else {
            out.dropped += 1;
        }
    }
    out.eval_extreme = out
        .validation
        .iter()
        .filter(|w| w.extreme)
        .cloned()
        .collect();
    for (name, ws) in [
        ("train", &out.train),
        ("validation", &out.validation),
        ("test", &out.test),
    ] {
        if !ws.iter().any(|w| w.extreme) {
            let msg = format!("{name} split has no extreme windows");
            warn!("{msg}");
            out.warnings.push(msg);
        }
    }
    log::info!(
        "split: train={} validation={} test={} eval_extreme={} dropped={}",
        out.train.len(),
        out.validation.len(),
        out.test.len(),
        out.eval_extreme.len(),
        out.dropped
    );
    Ok(out)
}

/// Everything needed to go from a frame to labeled, split windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrepareConfig {
    pub lookback: usize,
    pub horizon: usize,
    pub mode: ExtremeMode,
    pub percentile: f64,
    pub fractions: SplitFractions,
}

impl Default for PrepareConfig {
    fn default() -> Self {
        Self {
            lookback: 72,
            horizon: 12,
            mode: ExtremeMode::Target,
            percentile: 95.0,
            fractions: SplitFractions::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Prepared {
    pub normalizer: Normalizer,
    pub labeling: ExtremeLabeling,
    pub split: SplitResult,
    pub n_rows: usize,
}

/// Normalize, window, label and split in one leak-free pass.
pub fn prepare(frame: &TimeSeriesFrame, config: &PrepareConfig) -> Result<Prepared> {
    config.fractions.validate()?;
    let normalizer = fit_normalizer(frame, config.fractions.train)?;
    let mut windows = make_windows(frame, &normalizer, config.lookback, config.horizon)?;
    let (train_end, _) = config.fractions.cut_points(frame.n_rows());
    let labeling = label_extremes(
        frame,
        &mut windows,
        &config.mode,
        config.percentile,
        train_end,
    )?;
    let split = chrono_split(windows, frame.n_rows(), config.fractions)?;
    Ok(Prepared {
        normalizer,
        labeling,
        split,
        n_rows: frame.n_rows(),
    })
}
