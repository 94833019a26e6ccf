//! Persistence baseline, denormalized MSE, rain/no-rain classification
//! scores and report artifacts.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::atomic;
use crate::dataset::SampleWindow;
use crate::error::{Error, Result};
use crate::grid::{write_series, GridFrame, VariableSeries};
use crate::model::Network;
use crate::training::{Sample, PRECIP_VARIABLE};

pub const DEFAULT_THRESHOLD: f64 = 0.0047;
pub const PERSISTENCE: &str = "persistence";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Rain/no-rain cut in normalized units; values at or above it are rain.
    pub binarize_threshold: f64,
    pub horizons: Vec<usize>,
    pub include_persistence: bool,
    /// Test-window indices whose fused-model stream maps are exported.
    pub stream_map_samples: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            binarize_threshold: DEFAULT_THRESHOLD,
            horizons: vec![1, 2, 3],
            include_persistence: true,
            stream_map_samples: Vec::new(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.binarize_threshold >= 0.0 && self.binarize_threshold.is_finite()) {
            return Err(Error::Config(format!(
                "binarize_threshold must be finite and >= 0, got {}",
                self.binarize_threshold
            )));
        }
        if self.horizons.is_empty() {
            return Err(Error::Config("at least one horizon is required".into()));
        }
        if let Some(h) = self.horizons.iter().find(|h| !(1..=3).contains(*h)) {
            return Err(Error::Config(format!("horizon {h} is not one of 1, 2, 3")));
        }
        Ok(())
    }
}

/// The most recent precipitation input frame, whatever the horizon.
pub fn persistence_forecast(window: &SampleWindow) -> Result<GridFrame> {
    Ok(window.input(PRECIP_VARIABLE)?.last_frame())
}

fn check_pair(a: &GridFrame, b: &GridFrame) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Consistency(format!(
            "prediction is {:?} but target is {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Mean squared error over all pixels and samples after undoing the
/// normalization. Per-sample sums are added in sorted order, so the result
/// does not depend on sample order.
pub fn evaluate_mse(outputs: &[GridFrame], targets: &[GridFrame], norm_max: Option<f64>) -> Result<f64> {
    let m = norm_max.ok_or_else(|| Error::State("targets carry no normalization scale".into()))?;
    if outputs.len() != targets.len() {
        return Err(Error::Consistency(format!(
            "{} predictions for {} targets",
            outputs.len(),
            targets.len()
        )));
    }
    if outputs.is_empty() {
        return Err(Error::Config("no samples to evaluate".into()));
    }
    let mut sums = Vec::with_capacity(outputs.len());
    let mut pixels = 0usize;
    for (o, t) in outputs.iter().zip(targets) {
        check_pair(o, t)?;
        pixels += o.values().len();
        sums.push(
            o.values()
                .iter()
                .zip(t.values())
                .map(|(&a, &b)| {
                    let d = a * m - b * m;
                    d * d
                })
                .sum::<f64>(),
        );
    }
    sums.sort_by(f64::total_cmp);
    Ok(sums.iter().sum::<f64>() / pixels as f64)
}

/// `value >= threshold`, pixel by pixel.
pub fn binarize(frame: &GridFrame, threshold: f64) -> Vec<bool> {
    frame.values().iter().map(|&v| v >= threshold).collect()
}

/// Confusion counts with rain as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Confusion {
    pub fn from_masks(pred: &[bool], target: &[bool]) -> Result<Self> {
        if pred.len() != target.len() {
            return Err(Error::Consistency(format!(
                "masks have {} and {} pixels",
                pred.len(),
                target.len()
            )));
        }
        let mut c = Confusion::default();
        for (&p, &t) in pred.iter().zip(target) {
            match (p, t) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    pub fn add(&mut self, other: &Confusion) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn metrics(&self) -> ClassificationMetrics {
        let ratio = |num: u64, den: u64| (den > 0).then(|| num as f64 / den as f64);
        ClassificationMetrics {
            accuracy: (self.tp + self.tn) as f64 / self.total() as f64,
            precision: ratio(self.tp, self.tp + self.fp),
            recall: ratio(self.tp, self.tp + self.fn_),
            counts: *self,
        }
    }
}

/// Scores derived from a [`Confusion`]; `None` marks a zero denominator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub counts: Confusion,
}

pub fn classification_metrics(pred: &[bool], target: &[bool]) -> Result<ClassificationMetrics> {
    if pred.is_empty() {
        return Err(Error::Consistency("empty masks".into()));
    }
    Ok(Confusion::from_masks(pred, target)?.metrics())
}

/// Mean of every pixel of every frame of normalized training precipitation.
pub fn compute_threshold(training_tp: &VariableSeries) -> Result<f64> {
    if !training_tp.is_normalized() {
        return Err(Error::State(format!(
            "{} is in physical units; the threshold is defined on normalized values",
            training_tp.variable_name
        )));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for frame in training_tp.frames() {
        sum += frame.values().iter().sum::<f64>();
        count += frame.values().len();
    }
    if count == 0 {
        return Err(Error::Config("cannot take the mean of an empty training set".into()));
    }
    Ok(sum / count as f64)
}

/// One line of a report: one forecaster at one horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub horizon: usize,
    pub mse: f64,
    pub accuracy: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub n_samples: usize,
}

/// Anything that turns a sample window into a normalized precipitation frame.
pub enum Forecaster {
    Persistence,
    Model(Network<f32>),
}

impl Forecaster {
    pub fn forecast(&self, window: &SampleWindow) -> Result<GridFrame> {
        match self {
            Forecaster::Persistence => persistence_forecast(window),
            Forecaster::Model(net) => {
                let sample = Sample::from_window(window)?;
                let out = net.predict(&sample.input())?;
                let (h, w) = window.target.shape();
                GridFrame::new(h, w, out.into_iter().map(f64::from).collect())
            }
        }
    }
}

/// Scores `forecaster` on `windows` (normalized by `norm_max`).
pub fn evaluate_forecaster(
    name: &str,
    horizon: usize,
    forecaster: &Forecaster,
    windows: &[SampleWindow],
    norm_max: Option<f64>,
    threshold: f64,
) -> Result<ReportRow> {
    let mut outputs = Vec::with_capacity(windows.len());
    let mut confusion = Confusion::default();
    for w in windows {
        let pred = forecaster.forecast(w)?;
        check_pair(&pred, &w.target)?;
        confusion.add(&Confusion::from_masks(
            &binarize(&pred, threshold),
            &binarize(&w.target, threshold),
        )?);
        outputs.push(pred);
    }
    let targets: Vec<GridFrame> = windows.iter().map(|w| w.target.clone()).collect();
    let mse = evaluate_mse(&outputs, &targets, norm_max)?;
    let m = confusion.metrics();
    Ok(ReportRow {
        model: name.to_string(),
        horizon,
        mse,
        accuracy: m.accuracy,
        precision: m.precision,
        recall: m.recall,
        tp: confusion.tp,
        fp: confusion.fp,
        tn: confusion.tn,
        fn_: confusion.fn_,
        n_samples: windows.len(),
    })
}

/// Test windows of one horizon and the models trained for it.
pub struct HorizonSuite {
    pub horizon: usize,
    pub windows: Vec<SampleWindow>,
    pub norm_max: Option<f64>,
    pub models: Vec<(String, Forecaster)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<ReportRow>,
}

/// Evaluates every model of every suite, persistence first when enabled.
pub fn build_report(suites: &[HorizonSuite], config: &EvalConfig) -> Result<MetricsReport> {
    config.validate()?;
    let mut rows = Vec::new();
    for suite in suites {
        if !config.horizons.contains(&suite.horizon) {
            continue;
        }
        if config.include_persistence {
            rows.push(evaluate_forecaster(
                PERSISTENCE,
                suite.horizon,
                &Forecaster::Persistence,
                &suite.windows,
                suite.norm_max,
                config.binarize_threshold,
            )?);
        }
        for (name, f) in &suite.models {
            rows.push(evaluate_forecaster(
                name,
                suite.horizon,
                f,
                &suite.windows,
                suite.norm_max,
                config.binarize_threshold,
            )?);
        }
    }
    Ok(MetricsReport { rows })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x:e}"))
}

impl MetricsReport {
    pub fn horizons(&self) -> Vec<usize> {
        let mut h: Vec<usize> = self.rows.iter().map(|r| r.horizon).collect();
        h.sort_unstable();
        h.dedup();
        h
    }

    /// Model names in first-appearance order.
    pub fn models(&self) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        for r in &self.rows {
            if !names.contains(&r.model) {
                names.push(r.model.clone());
            }
        }
        names
    }

    pub fn row(&self, model: &str, horizon: usize) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.model == model && r.horizon == horizon)
    }

    /// Mean MSE over the horizons each model was evaluated at.
    pub fn average_mse(&self) -> Vec<(String, f64)> {
        self.models()
            .into_iter()
            .map(|m| {
                let v: Vec<f64> = self.rows.iter().filter(|r| r.model == m).map(|r| r.mse).collect();
                let avg = v.iter().sum::<f64>() / v.len() as f64;
                (m, avg)
            })
            .collect()
    }

    pub fn table_csv(&self, horizon: usize) -> String {
        let mut s = String::from("model,mse,accuracy,precision,recall,tp,fp,tn,fn,n_samples\n");
        for r in self.rows.iter().filter(|r| r.horizon == horizon) {
            let _ = writeln!(
                s,
                "{},{:e},{},{},{},{},{},{},{},{}",
                r.model,
                r.mse,
                r.accuracy,
                fmt_opt(r.precision),
                fmt_opt(r.recall),
                r.tp,
                r.fp,
                r.tn,
                r.fn_,
                r.n_samples
            );
        }
        s
    }

    pub fn mse_csv(&self) -> String {
        let models = self.models();
        let mut s = format!("horizon,{}\n", models.join(","));
        for h in self.horizons() {
            let cells: Vec<String> = models
                .iter()
                .map(|m| self.row(m, h).map_or(String::new(), |r| format!("{:e}", r.mse)))
                .collect();
            let _ = writeln!(s, "{h},{}", cells.join(","));
        }
        s
    }

    pub fn average_csv(&self) -> String {
        let mut s = String::from("model,average_mse\n");
        for (m, v) in self.average_mse() {
            let _ = writeln!(s, "{m},{v:e}");
        }
        s
    }

    /// Line chart of MSE against horizon, one line per model.
    pub fn mse_svg(&self) -> String {
        const W: f64 = 480.0;
        const H: f64 = 320.0;
        const M: f64 = 50.0;
        const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
        let horizons = self.horizons();
        let (lo_h, hi_h) = (
            *horizons.first().unwrap_or(&1) as f64,
            *horizons.last().unwrap_or(&1) as f64,
        );
        let max = self.rows.iter().map(|r| r.mse).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
        let x = |h: f64| {
            if hi_h > lo_h {
                M + (h - lo_h) / (hi_h - lo_h) * (W - 2.0 * M)
            } else {
                W / 2.0
            }
        };
        let y = |v: f64| H - M - v / max * (H - 2.0 * M);
        let mut s = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"11\">\n\
             <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
             <line x1=\"{M}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
             <line x1=\"{M}\" y1=\"{M}\" x2=\"{M}\" y2=\"{b}\" stroke=\"black\"/>\n\
             <text x=\"{cx}\" y=\"{ty}\" text-anchor=\"middle\">horizon (steps)</text>\n\
             <text x=\"12\" y=\"{cy}\" transform=\"rotate(-90 12 {cy})\" text-anchor=\"middle\">MSE</text>\n\
             <text x=\"{tx}\" y=\"{top}\" text-anchor=\"end\">{max:.3e}</text>\n",
            b = H - M,
            r = W - M,
            cx = W / 2.0,
            ty = H - 12.0,
            cy = H / 2.0,
            tx = M - 4.0,
            top = M + 4.0,
        );
        for &h in &horizons {
            let _ = writeln!(
                s,
                "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{h}</text>",
                x(h as f64),
                H - M + 16.0
            );
        }
        for (i, m) in self.models().iter().enumerate() {
            let color = COLORS[i % COLORS.len()];
            let points: Vec<String> = horizons
                .iter()
                .filter_map(|&h| self.row(m, h))
                .map(|r| format!("{:.2},{:.2}", x(r.horizon as f64), y(r.mse)))
                .collect();
            let _ = writeln!(
                s,
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>",
                points.join(" ")
            );
            let _ = writeln!(
                s,
                "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{m}</text>",
                W - M - 110.0,
                M + 14.0 * i as f64
            );
        }
        s.push_str("</svg>\n");
        s
    }

    /// Writes `report.json`, `table_h{h}.csv`, `mse_by_horizon.csv`,
    /// `mse_by_horizon.svg` and `average_mse.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(&self.rows).map_err(|e| Error::json("metrics report", e))?;
        atomic::write_file(&dir.join("report.json"), &json)?;
        for h in self.horizons() {
            atomic::write_file(&dir.join(format!("table_h{h}.csv")), self.table_csv(h).as_bytes())?;
        }
        atomic::write_file(&dir.join("mse_by_horizon.csv"), self.mse_csv().as_bytes())?;
        atomic::write_file(&dir.join("mse_by_horizon.svg"), self.mse_svg().as_bytes())?;
        atomic::write_file(&dir.join("average_mse.csv"), self.average_csv().as_bytes())
    }
}

/// Writes the pre-fusion precipitation and wind stream maps of a fused model
/// for each window as `stream_precip.rgs` and `stream_wind.rgs` (one frame
/// per window, timestamped at the window anchor spacing of the source).
pub fn export_stream_maps(net: &Network<f32>, windows: &[SampleWindow], dir: &Path) -> Result<()> {
    let first = windows
        .first()
        .ok_or_else(|| Error::Config("no windows selected for export".into()))?;
    let (h, w) = first.target.shape();
    let mut precip = Vec::with_capacity(windows.len());
    let mut wind = Vec::with_capacity(windows.len());
    for win in windows {
        let sample = Sample::from_window(win)?;
        let (p, q) = net.stream_outputs(&sample.input())?;
        let frame = |v: Vec<f32>| GridFrame::new(h, w, v.into_iter().map(f64::from).collect());
        precip.push(frame(p)?);
        wind.push(frame(q)?);
    }
    for (name, frames) in [("stream_precip", precip), ("stream_wind", wind)] {
        let series = VariableSeries::new(name, "normalized", first.anchor_time, 1, frames)?;
        write_series(&series, dir.join(format!("{name}.rgs")))?;
    }
    Ok(())
}
