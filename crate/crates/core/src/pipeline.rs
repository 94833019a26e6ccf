//! File-level workflow: synthesize, build, train, evaluate and predict, all
//! under one output directory.
//!
//! ```text
//! <out>/run_config.json          resolved configuration of the last command
//! <out>/raw/{tp,u,v}.rgs         source grids (written by `synth`)
//! <out>/data/{tp,ws}.rgs         cropped, normalized grids
//! <out>/data/manifest_h{h}.json  one manifest per horizon
//! <out>/models/<kind>_h{h}/      checkpoint/, state/, history.{csv,json}
//! <out>/eval/                    report.json, tables, chart, stream maps
//! <out>/predict/                 single nowcasts
//! ```

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::atomic;
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::dataset::{
    filter_targets, materialize, split_by_year, window_at, DatasetManifest, FilterRule, SampleWindow, SourceRef,
    Split, SplitSpec, WindowSpec,
};
use crate::error::{Error, Result};
use crate::evaluation::{build_report, export_stream_maps, EvalConfig, Forecaster, HorizonSuite, MetricsReport};
use crate::grid::{crop, fit_norm_max, normalize, read_series, wind_speed, write_series, CropSpec, GridFrame, VariableSeries};
use crate::model::{CoreUNetConfig, ModelKind, Network};
use crate::synthetic::{generate, SyntheticConfig};
use crate::training::{train, Sample, TrainConfig, TrainOptions, TrainOutcome, PRECIP_VARIABLE, WIND_VARIABLE};

/// Data preparation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory holding `tp.rgs`, `u.rgs` and `v.rgs`; defaults to `<out>/raw`.
    pub source_dir: Option<PathBuf>,
    pub filter: FilterRule,
    pub split: SplitSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source_dir: None,
            filter: FilterRule::EU50,
            split: SplitSpec::default(),
        }
    }
}

/// Everything a command needs. The run-level `seed` is copied into the
/// synthetic generator, the validation split and training before use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run_id: String,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub synthetic: SyntheticConfig,
    pub data: DataConfig,
    pub model: CoreUNetConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            run_id: "run".into(),
            out_dir: PathBuf::from("out"),
            seed: 0,
            synthetic: SyntheticConfig::default(),
            data: DataConfig::default(),
            model: CoreUNetConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Copies the run seed into every seeded component.
    pub fn resolved(mut self) -> Self {
        self.synthetic.seed = self.seed;
        self.data.split.seed = self.seed;
        self.train.seed = self.seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.run_id.is_empty() {
            return Err(Error::Config("run_id must not be empty".into()));
        }
        self.synthetic.validate()?;
        self.data.filter.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.eval.validate()
    }

    /// Horizons that need a manifest: the evaluation horizons and the
    /// training horizon.
    pub fn horizons(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self.eval.horizons.iter().copied().chain([self.train.horizon]).collect();
        set.into_iter().collect()
    }

    pub fn layout(&self) -> Layout {
        Layout {
            root: self.out_dir.clone(),
        }
    }

    fn source_dir(&self) -> PathBuf {
        self.data.source_dir.clone().unwrap_or_else(|| self.layout().raw_dir())
    }

    fn record(&self) -> Result<()> {
        let json = serde_json::to_vec_pretty(self).map_err(|e| Error::json("run config", e))?;
        atomic::write_file(&self.out_dir.join("run_config.json"), &json)
    }
}

/// Paths inside an output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn raw_dir(&self) -> PathBuf {
        self.root.join("raw")
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn manifest(&self, horizon: usize) -> PathBuf {
        self.data_dir().join(format!("manifest_h{horizon}.json"))
    }

    pub fn model_dir(&self, kind: ModelKind, horizon: usize) -> PathBuf {
        self.root.join("models").join(format!("{kind}_h{horizon}"))
    }

    pub fn checkpoint(&self, kind: ModelKind, horizon: usize) -> PathBuf {
        self.model_dir(kind, horizon).join("checkpoint")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn predict_dir(&self) -> PathBuf {
        self.root.join("predict")
    }
}

fn rgs_name(variable: &str) -> String {
    format!("{variable}.rgs")
}

/// Generates the synthetic source grids into `<out>/raw`.
pub fn cmd_synth(config: &RunConfig) -> Result<Vec<PathBuf>> {
    config.synthetic.validate()?;
    config.record()?;
    let series = generate(&config.synthetic)?;
    let dir = config.layout().raw_dir();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut written = Vec::new();
    for (file, s) in [("tp", &series.tp), ("u", &series.u), ("v", &series.v)] {
        let path = dir.join(rgs_name(file));
        write_series(s, &path)?;
        written.push(path);
    }
    log::info!("wrote {} frames of {}x{} to {}", series.tp.len(), series.tp.height(), series.tp.width(), dir.display());
    Ok(written)
}

/// Frames of `series` whose timestamps fall in `years`.
fn frames_in_years(series: &VariableSeries, years: &[i32]) -> Result<VariableSeries> {
    let frames: Vec<GridFrame> = (0..series.len())
        .filter(|&t| years.contains(&series.year_at(t)))
        .map(|t| series.frame(t).clone())
        .collect();
    if frames.is_empty() {
        return Err(Error::Config(format!(
            "{} has no frames in training years {years:?}",
            series.variable_name
        )));
    }
    series.with_frames(frames)
}

/// Derives wind speed, crops to the model grid, normalizes each variable by
/// its training-years maximum and writes one manifest per horizon.
pub fn cmd_build(config: &RunConfig) -> Result<Vec<DatasetManifest>> {
    config.validate()?;
    config.record()?;
    let src = config.source_dir();
    let tp = read_series(src.join(rgs_name(PRECIP_VARIABLE)))?;
    let u = read_series(src.join(rgs_name("u")))?;
    let v = read_series(src.join(rgs_name("v")))?;
    let ws = wind_speed(&u, &v)?;
    let spec = CropSpec::centered(tp.height(), tp.width(), config.model.height, config.model.width)?;
    let layout = config.layout();
    let data = layout.data_dir();
    std::fs::create_dir_all(&data).map_err(|e| Error::io(&data, e))?;

    let mut normalized = Vec::new();
    let mut sources = Vec::new();
    for series in [tp, ws] {
        let cropped = crop(&series, &spec)?;
        let scale = fit_norm_max(&frames_in_years(&cropped, &config.data.split.train_years)?)?;
        let norm = normalize(&cropped, scale)?;
        let name = rgs_name(&norm.variable_name);
        write_series(&norm, data.join(&name))?;
        // Re-read so samples see exactly the stored (32-bit) values.
        normalized.push(read_series(data.join(&name))?);
        sources.push(SourceRef {
            variable_name: norm.variable_name.clone(),
            path: name,
            norm_max: Some(scale),
        });
    }

    let mut manifests = Vec::new();
    for horizon in config.horizons() {
        let window = WindowSpec {
            lag: config.model.input_lag,
            horizon,
        };
        let anchors = filter_targets(&normalized[0], &config.data.filter, &window)?;
        let mut manifest = split_by_year(&normalized[0], &anchors, &window, &config.data.filter, &config.data.split)?;
        manifest.sources = sources.clone();
        manifest.save(layout.manifest(horizon))?;
        log::info!(
            "horizon {horizon}: {} train, {} val, {} test windows",
            manifest.splits.train.len(),
            manifest.splits.val.len(),
            manifest.splits.test.len()
        );
        manifests.push(manifest);
    }
    Ok(manifests)
}

/// A manifest together with the normalized series it refers to.
pub struct LoadedData {
    pub manifest: DatasetManifest,
    pub variables: Vec<VariableSeries>,
}

impl LoadedData {
    pub fn open(manifest_path: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(manifest_path)?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let mut variables = Vec::new();
        for src in &manifest.sources {
            let series = read_series(base.join(&src.path))?;
            if series.variable_name != src.variable_name || series.norm_max() != src.norm_max {
                return Err(Error::Manifest(format!(
                    "{} does not hold normalized `{}` with scale {:?}",
                    src.path, src.variable_name, src.norm_max
                )));
            }
            variables.push(series);
        }
        manifest.check_bounds(variables.first().map_or(0, |v| v.len()))?;
        Ok(LoadedData { manifest, variables })
    }

    pub fn windows(&self, split: Split) -> Result<Vec<SampleWindow>> {
        materialize(&self.manifest, split, &self.variables)?.collect()
    }

    pub fn samples(&self, split: Split) -> Result<Vec<Sample>> {
        materialize(&self.manifest, split, &self.variables)?
            .map(|w| Sample::from_window(&w?))
            .collect()
    }

    pub fn precip_norm_max(&self) -> Option<f64> {
        self.variables
            .iter()
            .find(|v| v.variable_name == PRECIP_VARIABLE)
            .and_then(|v| v.norm_max())
    }
}

fn manifest_for(config: &RunConfig, horizon: usize) -> Result<LoadedData> {
    let path = config.layout().manifest(horizon);
    if !path.exists() {
        return Err(Error::Config(format!(
            "no dataset for horizon {horizon} at {}; run `build` first",
            path.display()
        )));
    }
    LoadedData::open(&path)
}

/// Trains one model for `config.train.horizon`, resuming from its state
/// directory when an earlier run was interrupted.
pub fn cmd_train(config: &RunConfig, kind: ModelKind, halt_after: Option<usize>) -> Result<TrainOutcome> {
    config.validate()?;
    config.record()?;
    let horizon = config.train.horizon;
    let data = manifest_for(config, horizon)?;
    let train_set = data.samples(Split::Train)?;
    let val_set = data.samples(Split::Val)?;
    if kind == ModelKind::WfUNet && train_set.iter().any(|s| s.wind.is_none()) {
        return Err(Error::Config(format!("{kind} needs the `{WIND_VARIABLE}` input")));
    }
    let layout = config.layout();
    let dir = layout.model_dir(kind, horizon);
    let mut net = Network::new(kind, config.model.clone(), config.seed)?;
    let options = TrainOptions {
        state_dir: Some(dir.join("state")),
        halt_after,
    };
    let outcome = train(&mut net, &train_set, &val_set, &config.train, &options)?;
    outcome.history.write(&dir.join("history.csv"), &dir.join("history.json"))?;
    if outcome.history.stop_reason.is_some() {
        save_checkpoint(&outcome.best, &layout.checkpoint(kind, horizon))?;
    }
    Ok(outcome)
}

/// Evaluates persistence (unless disabled) and each of `kinds` at every
/// configured horizon, writing the report into `<out>/eval`.
pub fn cmd_eval(config: &RunConfig, kinds: &[ModelKind]) -> Result<MetricsReport> {
    config.validate()?;
    config.record()?;
    let layout = config.layout();
    let mut suites = Vec::new();
    for &horizon in &config.eval.horizons {
        let data = manifest_for(config, horizon)?;
        let mut models = Vec::new();
        for &kind in kinds {
            let ckpt = layout.checkpoint(kind, horizon);
            if !ckpt.exists() {
                return Err(Error::Config(format!(
                    "no trained {kind} for horizon {horizon} at {}",
                    ckpt.display()
                )));
            }
            models.push((kind.to_string(), Forecaster::Model(load_checkpoint(&ckpt, Some(kind))?)));
        }
        suites.push(HorizonSuite {
            horizon,
            windows: data.windows(Split::Test)?,
            norm_max: data.precip_norm_max(),
            models,
        });
    }
    let report = build_report(&suites, &config.eval)?;
    let out = layout.eval_dir();
    report.write(&out)?;
    if !config.eval.stream_map_samples.is_empty() {
        for suite in &suites {
            for (_, f) in &suite.models {
                if let Forecaster::Model(net) = f {
                    if net.kind == ModelKind::WfUNet {
                        let picked = config
                            .eval
                            .stream_map_samples
                            .iter()
                            .map(|&i| {
                                suite.windows.get(i).cloned().ok_or_else(|| {
                                    Error::Config(format!(
                                        "stream map sample {i} out of range ({} test windows)",
                                        suite.windows.len()
                                    ))
                                })
                            })
                            .collect::<Result<Vec<_>>>()?;
                        export_stream_maps(net, &picked, &out.join(format!("stream_maps_h{}", suite.horizon)))?;
                    }
                }
            }
        }
    }
    Ok(report)
}

/// One nowcast from the window anchored at frame `anchor`, written as a
/// single-frame normalized RGS file; returns the frame and its path.
pub fn cmd_predict(config: &RunConfig, kind: ModelKind, anchor: usize) -> Result<(GridFrame, PathBuf)> {
    config.validate()?;
    let horizon = config.train.horizon;
    let layout = config.layout();
    let data = manifest_for(config, horizon)?;
    let ckpt = layout.checkpoint(kind, horizon);
    if !ckpt.exists() {
        return Err(Error::Config(format!("no trained {kind} for horizon {horizon} at {}", ckpt.display())));
    }
    let net = load_checkpoint(&ckpt, Some(kind))?;
    let window = window_at(&data.variables, &data.manifest.window, anchor)?;
    let frame = Forecaster::Model(net).forecast(&window)?;
    let tp = &data.variables[0];
    let series = VariableSeries::new(
        PRECIP_VARIABLE,
        tp.units.clone(),
        tp.time_at(data.manifest.window.target_frame(anchor)),
        tp.step_hours,
        vec![frame.clone()],
    )?
    .with_norm_max(tp.norm_max())?;
    let out = layout.predict_dir();
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let path = out.join(format!("{kind}_h{horizon}_a{anchor}.rgs"));
    write_series(&series, &path)?;
    Ok((frame, path))
}
