//! Rain-coverage filtering, year-based splits and sliding-window samples.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use chrono::NaiveDateTime;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridFrame, VariableSeries};

/// Keeps a sample when at least `min_rain_fraction` of its target pixels
/// exceed `rain_pixel_threshold` (physical units).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterRule {
    pub min_rain_fraction: f64,
    pub rain_pixel_threshold: f64,
}

impl FilterRule {
    pub const EU50: FilterRule = FilterRule {
        min_rain_fraction: 0.5,
        rain_pixel_threshold: 0.0,
    };
    pub const EU20: FilterRule = FilterRule {
        min_rain_fraction: 0.2,
        rain_pixel_threshold: 0.0,
    };
    pub const KEEP_ALL: FilterRule = FilterRule {
        min_rain_fraction: 0.0,
        rain_pixel_threshold: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.min_rain_fraction) {
            return Err(Error::Config(format!(
                "min_rain_fraction must lie in [0, 1], got {}",
                self.min_rain_fraction
            )));
        }
        if !(self.rain_pixel_threshold >= 0.0) {
            return Err(Error::Config(format!(
                "rain_pixel_threshold must be >= 0, got {}",
                self.rain_pixel_threshold
            )));
        }
        Ok(())
    }
}

impl Default for FilterRule {
    fn default() -> Self {
        FilterRule::EU50
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub lag: usize,
    pub horizon: usize,
}

impl Default for WindowSpec {
    fn default() -> Self {
        WindowSpec { lag: 12, horizon: 1 }
    }
}

impl WindowSpec {
    pub fn validate(&self) -> Result<()> {
        if self.lag == 0 || self.horizon == 0 {
            return Err(Error::Config(format!(
                "lag and horizon must be positive, got lag={} horizon={}",
                self.lag, self.horizon
            )));
        }
        Ok(())
    }

    /// First frame index covered by the window anchored at `anchor`.
    pub fn first_frame(&self, anchor: usize) -> Option<usize> {
        (anchor + 1).checked_sub(self.lag)
    }

    pub fn target_frame(&self, anchor: usize) -> usize {
        anchor + self.horizon
    }

    pub fn in_bounds(&self, anchor: usize, len: usize) -> bool {
        self.first_frame(anchor).is_some() && self.target_frame(anchor) < len
    }

    /// Every anchor with a complete window in a series of `len` frames.
    pub fn anchors(&self, len: usize) -> std::ops::Range<usize> {
        let first = self.lag - 1;
        let end = len.saturating_sub(self.horizon).max(first);
        first..end
    }
}

/// `(lag, H, W)` stack of consecutive frames, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct InputBlock {
    pub lag: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl InputBlock {
    pub fn from_frames(frames: &[GridFrame]) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::Invariant("input block needs at least one frame".into()))?;
        let (height, width) = first.shape();
        let mut values = Vec::with_capacity(frames.len() * height * width);
        for f in frames {
            if f.shape() != (height, width) {
                return Err(Error::Invariant("input frames differ in shape".into()));
            }
            values.extend_from_slice(f.values());
        }
        Ok(InputBlock {
            lag: frames.len(),
            height,
            width,
            values,
        })
    }

    pub fn frame(&self, k: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.values[k * n..(k + 1) * n]
    }

    pub fn last_frame(&self) -> GridFrame {
        GridFrame::new(self.height, self.width, self.frame(self.lag - 1).to_vec())
            .expect("block frame has consistent shape")
    }
}

/// One supervised example.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleWindow {
    pub inputs: BTreeMap<String, InputBlock>,
    pub target: GridFrame,
    pub anchor: usize,
    pub anchor_time: NaiveDateTime,
}

impl SampleWindow {
    pub fn input(&self, variable: &str) -> Result<&InputBlock> {
        self.inputs
            .get(variable)
            .ok_or_else(|| Error::Config(format!("sample has no `{variable}` input")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    pub fn get(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceRef {
    pub variable_name: String,
    pub path: String,
    pub norm_max: Option<f64>,
}

/// Which anchors belong to which split, and how they were chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub filter: FilterRule,
    pub window: WindowSpec,
    pub splits: Splits,
    pub sources: Vec<SourceRef>,
    pub validation_seed: u64,
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        manifest.check_disjoint()?;
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text =
            serde_json::to_string_pretty(self).map_err(|e| Error::json("dataset manifest", e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (name, list) in [
            ("train", &self.splits.train),
            ("val", &self.splits.val),
            ("test", &self.splits.test),
        ] {
            for &a in list {
                if !seen.insert(a) {
                    return Err(Error::Manifest(format!(
                        "anchor {a} appears twice (second time in {name})"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn check_bounds(&self, len: usize) -> Result<()> {
        for split in [Split::Train, Split::Val, Split::Test] {
            if let Some(&a) = self
                .splits
                .get(split)
                .iter()
                .find(|&&a| !self.window.in_bounds(a, len))
            {
                return Err(Error::Manifest(format!(
                    "{split:?} anchor {a} has no complete window in {len} frames"
                )));
            }
        }
        Ok(())
    }
}

/// Share of pixels strictly above `threshold`.
pub fn rain_fraction(frame: &GridFrame, threshold: f64) -> f64 {
    let wet = frame.values().iter().filter(|&&v| v > threshold).count();
    wet as f64 / frame.values().len() as f64
}

/// Anchors whose target frame passes `rule`, ascending. On a normalized
/// series the pixel threshold is rescaled into normalized units.
pub fn filter_targets(tp: &VariableSeries, rule: &FilterRule, spec: &WindowSpec) -> Result<Vec<usize>> {
    rule.validate()?;
    spec.validate()?;
    if tp.len() < spec.lag + spec.horizon {
        log::warn!(
            "{} has {} frames, fewer than lag {} + horizon {}; no samples",
            tp.variable_name,
            tp.len(),
            spec.lag,
            spec.horizon
        );
        return Ok(Vec::new());
    }
    let threshold = match tp.norm_max() {
        Some(m) => rule.rain_pixel_threshold / m,
        None => rule.rain_pixel_threshold,
    };
    Ok(spec
        .anchors(tp.len())
        .filter(|&t| rain_fraction(tp.frame(spec.target_frame(t)), threshold) >= rule.min_rain_fraction)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub train_years: Vec<i32>,
    pub test_year: i32,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_years: (2016..=2020).collect(),
            test_year: 2021,
            validation_fraction: 0.1,
            seed: 0,
        }
    }
}

/// Partitions `anchors` by the calendar year of their frames.
///
/// A window belongs to a split only if every frame it touches (inputs and
/// target) falls in that split's years; windows straddling a train/test
/// boundary are dropped. The validation set is a seeded uniform draw of
/// `floor(fraction * n_train)` training anchors.
pub fn split_by_year(
    tp: &VariableSeries,
    anchors: &[usize],
    window: &WindowSpec,
    filter: &FilterRule,
    spec: &SplitSpec,
) -> Result<DatasetManifest> {
    if !(0.0..1.0).contains(&spec.validation_fraction) {
        return Err(Error::Config(format!(
            "validation_fraction must lie in [0, 1), got {}",
            spec.validation_fraction
        )));
    }
    if spec.train_years.contains(&spec.test_year) {
        return Err(Error::Config(format!(
            "test year {} is also a training year",
            spec.test_year
        )));
    }
    let present: BTreeSet<i32> = (0..tp.len()).map(|t| tp.year_at(t)).collect();
    for year in spec.train_years.iter().chain([&spec.test_year]) {
        if !present.contains(year) {
            return Err(Error::Config(format!(
                "year {year} not covered by {} ({} .. {})",
                tp.variable_name,
                tp.start_time,
                tp.time_at(tp.len() - 1)
            )));
        }
    }

    let train_years: BTreeSet<i32> = spec.train_years.iter().copied().collect();
    let mut pool = Vec::new();
    let mut test = Vec::new();
    for &a in anchors {
        let Some(first) = window.first_frame(a) else {
            return Err(Error::Manifest(format!("anchor {a} precedes the first full window")));
        };
        let last = window.target_frame(a);
        if last >= tp.len() {
            return Err(Error::Manifest(format!("anchor {a} target beyond series end")));
        }
        let (y0, y1) = (tp.year_at(first), tp.year_at(last));
        if y0 == spec.test_year && y1 == spec.test_year {
            test.push(a);
        } else if (first..=last).all(|t| train_years.contains(&tp.year_at(t))) {
            pool.push(a);
        }
    }

    let n_val = (spec.validation_fraction * pool.len() as f64 + 1e-9).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let picked: BTreeSet<usize> = rand::seq::index::sample(&mut rng, pool.len(), n_val)
        .into_iter()
        .collect();
    let mut train = Vec::with_capacity(pool.len() - n_val);
    let mut val = Vec::with_capacity(n_val);
    for (i, a) in pool.into_iter().enumerate() {
        if picked.contains(&i) {
            val.push(a);
        } else {
            train.push(a);
        }
    }

    Ok(DatasetManifest {
        filter: *filter,
        window: *window,
        splits: Splits { train, val, test },
        sources: Vec::new(),
        validation_seed: spec.seed,
    })
}

fn check_variables(variables: &[VariableSeries]) -> Result<()> {
    let first = variables
        .first()
        .ok_or_else(|| Error::Config("no variables to sample from".into()))?;
    for v in variables {
        if !v.is_normalized() {
            return Err(Error::State(format!(
                "{} must be normalized before sampling",
                v.variable_name
            )));
        }
        if (v.len(), v.height(), v.width()) != (first.len(), first.height(), first.width())
            || v.start_time != first.start_time
            || v.step_hours != first.step_hours
        {
            return Err(Error::Alignment(format!(
                "{} and {} cover different grids or times",
                first.variable_name, v.variable_name
            )));
        }
    }
    if !variables.iter().any(|v| v.variable_name == "tp") {
        return Err(Error::Config("precipitation (`tp`) is required as the target".into()));
    }
    Ok(())
}

/// Builds the sample anchored at `anchor` directly from the series.
pub fn window_at(variables: &[VariableSeries], spec: &WindowSpec, anchor: usize) -> Result<SampleWindow> {
    let tp = variables
        .iter()
        .find(|v| v.variable_name == "tp")
        .ok_or_else(|| Error::Config("precipitation (`tp`) is required as the target".into()))?;
    if !spec.in_bounds(anchor, tp.len()) {
        return Err(Error::Manifest(format!(
            "anchor {anchor} (lag {}, horizon {}) outside {} frames",
            spec.lag,
            spec.horizon,
            tp.len()
        )));
    }
    let first = anchor + 1 - spec.lag;
    let inputs = variables
        .iter()
        .map(|v| {
            InputBlock::from_frames(&v.frames()[first..=anchor]).map(|b| (v.variable_name.clone(), b))
        })
        .collect::<Result<_>>()?;
    Ok(SampleWindow {
        inputs,
        target: tp.frame(spec.target_frame(anchor)).clone(),
        anchor,
        anchor_time: tp.time_at(anchor),
    })
}

/// Windows of `split` in manifest order.
pub fn materialize<'a>(
    manifest: &'a DatasetManifest,
    split: Split,
    variables: &'a [VariableSeries],
) -> Result<impl Iterator<Item = Result<SampleWindow>> + 'a> {
    check_variables(variables)?;
    Ok(manifest
        .splits
        .get(split)
        .iter()
        .map(move |&a| window_at(variables, &manifest.window, a)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::normalize;
    use chrono::{Duration, NaiveDate};
    use proptest::prelude::*;

    fn start(y: i32, m: u32, d: u32) -> NaiveDateTime {
        NaiveDate::from_ymd_opt(y, m, d).unwrap().and_hms_opt(0, 0, 0).unwrap()
    }

    fn ramp(name: &str, t: usize, start_time: NaiveDateTime) -> VariableSeries {
        let frames = (0..t)
            .map(|k| GridFrame::new(2, 2, vec![k as f64, k as f64 + 0.25, 1.0, 0.0]).unwrap())
            .collect();
        VariableSeries::new(name, "m", start_time, 1, frames).unwrap()
    }

    #[test]
    fn rain_fraction_cases() {
        assert_eq!(rain_fraction(&GridFrame::filled(3, 3, 0.0), 0.0), 0.0);
        let half = GridFrame::new(2, 2, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(rain_fraction(&half, 0.0), 0.5);
        assert_eq!(rain_fraction(&half, 1.0), 0.0);
    }

    #[test]
    fn vacuous_filter_keeps_every_window() {
        let tp = ramp("tp", 30, start(2020, 1, 1));
        let spec = WindowSpec { lag: 4, horizon: 2 };
        let anchors = filter_targets(&tp, &FilterRule::KEEP_ALL, &spec).unwrap();
        assert_eq!(anchors.len(), 30 - 4 - 2 + 1);
        assert_eq!(anchors[0], 3);
        assert_eq!(*anchors.last().unwrap(), 27);
    }

    #[test]
    fn short_series_gives_no_anchors() {
        let tp = ramp("tp", 3, start(2020, 1, 1));
        let spec = WindowSpec { lag: 4, horizon: 1 };
        assert!(filter_targets(&tp, &FilterRule::KEEP_ALL, &spec).unwrap().is_empty());
    }

    #[test]
    fn filter_uses_the_target_frame() {
        // Frame k has pixels [k, k+0.25, 1, 0]; with threshold 1.5 only
        // frames with k >= 2 have 2/4 rainy pixels.
        let tp = ramp("tp", 10, start(2020, 1, 1));
        let rule = FilterRule {
            min_rain_fraction: 0.5,
            rain_pixel_threshold: 1.5,
        };
        let spec = WindowSpec { lag: 1, horizon: 1 };
        let anchors = filter_targets(&tp, &rule, &spec).unwrap();
        assert_eq!(anchors, (1..9).collect::<Vec<_>>());
    }

    #[test]
    fn normalized_series_filters_like_physical() {
        let tp = ramp("tp", 12, start(2020, 1, 1));
        let rule = FilterRule {
            min_rain_fraction: 0.5,
            rain_pixel_threshold: 4.0,
        };
        let spec = WindowSpec { lag: 2, horizon: 1 };
        let raw = filter_targets(&tp, &rule, &spec).unwrap();
        let scaled = filter_targets(&normalize(&tp, 8.0).unwrap(), &rule, &spec).unwrap();
        assert_eq!(raw, scaled);
    }

    #[test]
    fn year_split_partitions_by_target_year() {
        // 40 hourly frames straddling new year 2021.
        let tp = ramp("tp", 40, start(2020, 12, 31) + Duration::hours(4));
        let spec = WindowSpec { lag: 3, horizon: 1 };
        let anchors = filter_targets(&tp, &FilterRule::KEEP_ALL, &spec).unwrap();
        let split = SplitSpec {
            train_years: vec![2020],
            test_year: 2021,
            validation_fraction: 0.25,
            seed: 1,
        };
        let m = split_by_year(&tp, &anchors, &spec, &FilterRule::KEEP_ALL, &split).unwrap();
        // Frame 20 is 2021-01-01T00:00.
        assert_eq!(tp.year_at(20), 2021);
        assert_eq!(tp.year_at(19), 2020);
        for &a in &m.splits.test {
            assert_eq!(tp.year_at(a + 1), 2021);
            assert_eq!(tp.year_at(a - 2), 2021);
        }
        for &a in m.splits.train.iter().chain(&m.splits.val) {
            assert_eq!(tp.year_at(a + 1), 2020);
        }
        // Train pool: anchors 2..=18 (17); test: 22..=38 (17); 19..=21 straddle.
        assert_eq!(m.splits.train.len() + m.splits.val.len(), 17);
        assert_eq!(m.splits.val.len(), 4);
        assert_eq!(m.splits.test, (22..=38).collect::<Vec<_>>());
        m.check_disjoint().unwrap();
        m.check_bounds(tp.len()).unwrap();
    }

    #[test]
    fn validation_is_floor_of_fraction() {
        let tp = ramp("tp", 1010, start(2019, 12, 1));
        let spec = WindowSpec { lag: 1, horizon: 1 };
        let anchors: Vec<usize> = (0..1000).collect();
        let split = SplitSpec {
            train_years: vec![2019, 2020],
            test_year: 2021,
            validation_fraction: 0.1,
            seed: 3,
        };
        // 2021 is absent from a series that ends in January 2020.
        assert!(matches!(
            split_by_year(&tp, &anchors, &spec, &FilterRule::KEEP_ALL, &split),
            Err(Error::Config(_))
        ));
        let split = SplitSpec {
            train_years: vec![2019],
            test_year: 2020,
            ..split
        };
        let anchors: Vec<usize> = (0..700).collect();
        let m = split_by_year(&tp, &anchors, &spec, &FilterRule::KEEP_ALL, &split).unwrap();
        let pool = m.splits.train.len() + m.splits.val.len();
        assert_eq!(m.splits.val.len(), pool / 10);
    }

    #[test]
    fn exactly_one_hundred_of_a_thousand() {
        // Frames 0..1464 fall in 2020, the rest in 2021.
        let tp = ramp("tp", 1600, start(2020, 11, 1));
        let spec = WindowSpec { lag: 1, horizon: 1 };
        let anchors: Vec<usize> = (0..1000).collect();
        let split = SplitSpec {
            train_years: vec![2020],
            test_year: 2021,
            validation_fraction: 0.1,
            seed: 3,
        };
        let m = split_by_year(&tp, &anchors, &spec, &FilterRule::KEEP_ALL, &split).unwrap();
        assert_eq!(m.splits.val.len(), 100);
        assert_eq!(m.splits.train.len(), 900);
    }

    #[test]
    fn split_is_seed_deterministic() {
        let tp = ramp("tp", 9000, start(2020, 1, 1));
        let spec = WindowSpec { lag: 2, horizon: 1 };
        let anchors = filter_targets(&tp, &FilterRule::KEEP_ALL, &spec).unwrap();
        let mk = |seed| {
            let s = SplitSpec {
                train_years: vec![2020],
                test_year: 2021,
                validation_fraction: 0.1,
                seed,
            };
            split_by_year(&tp, &anchors, &spec, &FilterRule::KEEP_ALL, &s).unwrap()
        };
        assert_eq!(mk(7), mk(7));
        assert_ne!(mk(7).splits.val, mk(8).splits.val);
    }

    #[test]
    fn materialized_window_indices() {
        let tp = normalize(&ramp("tp", 10, start(2020, 1, 1)), 10.0).unwrap();
        let manifest = DatasetManifest {
            filter: FilterRule::KEEP_ALL,
            window: WindowSpec { lag: 3, horizon: 1 },
            splits: Splits {
                train: vec![5, 2],
                val: vec![],
                test: vec![8],
            },
            sources: vec![],
            validation_seed: 0,
        };
        let vars = vec![tp.clone()];
        let windows: Vec<_> = materialize(&manifest, Split::Train, &vars)
            .unwrap()
            .collect::<Result<_>>()
            .unwrap();
        assert_eq!(windows.len(), 2);
        let w = &windows[0];
        assert_eq!(w.anchor, 5);
        let block = w.input("tp").unwrap();
        for (k, frame) in [3, 4, 5].into_iter().enumerate() {
            assert_eq!(block.frame(k), tp.frame(frame).values());
        }
        assert_eq!(&w.target, tp.frame(6));
        assert_eq!(windows[1].anchor, 2);

        let bad = DatasetManifest {
            splits: Splits {
                train: vec![9],
                ..Default::default()
            },
            ..manifest.clone()
        };
        let err = materialize(&bad, Split::Train, &vars).unwrap().next().unwrap();
        assert!(matches!(err, Err(Error::Manifest(_))));
        assert!(matches!(
            materialize(&manifest, Split::Train, &[ramp("tp", 10, start(2020, 1, 1))]).map(|_| ()),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn manifest_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = DatasetManifest {
            filter: FilterRule::EU20,
            window: WindowSpec { lag: 12, horizon: 3 },
            splits: Splits {
                train: vec![11, 12],
                val: vec![13],
                test: vec![20],
            },
            sources: vec![SourceRef {
                variable_name: "tp".into(),
                path: "tp.rgs".into(),
                norm_max: Some(0.01),
            }],
            validation_seed: 42,
        };
        let path = dir.path().join("manifest.json");
        m.save(&path).unwrap();
        assert_eq!(DatasetManifest::load(&path).unwrap(), m);
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(v["filter"]["min_rain_fraction"], 0.2);
        assert_eq!(v["window"]["lag"], 12);
        assert_eq!(v["splits"]["val"][0], 13);
        assert_eq!(v["validation_seed"], 42);
    }

    proptest! {
        #[test]
        fn stricter_fraction_gives_subset(
            seed in any::<u64>(), a in 0.0f64..1.0, b in 0.0f64..1.0, thr in 0.0f64..0.8,
        ) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let mut x = seed | 1;
            let frames = (0..40).map(|_| {
                let vals = (0..16).map(|_| {
                    x ^= x << 13; x ^= x >> 7; x ^= x << 17;
                    (x % 1000) as f64 / 1000.0
                }).collect();
                GridFrame::new(4, 4, vals).unwrap()
            }).collect();
            let tp = VariableSeries::new("tp", "m", start(2020, 1, 1), 1, frames).unwrap();
            let spec = WindowSpec { lag: 3, horizon: 2 };
            let loose = filter_targets(&tp, &FilterRule { min_rain_fraction: lo, rain_pixel_threshold: thr }, &spec).unwrap();
            let strict = filter_targets(&tp, &FilterRule { min_rain_fraction: hi, rain_pixel_threshold: thr }, &spec).unwrap();
            prop_assert!(strict.iter().all(|s| loose.contains(s)));
        }

        #[test]
        fn strictly_positive_frames_are_fully_wet(v in proptest::collection::vec(1e-9f64..10.0, 1..50)) {
            let n = v.len();
            prop_assert_eq!(rain_fraction(&GridFrame::new(1, n, v).unwrap(), 0.0), 1.0);
        }
    }
}
