//! Gridded weather variables: the RGS binary container, its JSON sidecar,
//! and the per-variable preprocessing steps (wind speed, crop, max scaling).
//!
//! An RGS file is a 16-byte header followed by the payload:
//!
//! | bytes   | content                                   |
//! |---------|-------------------------------------------|
//! | 0..4    | magic `RGS1`                              |
//! | 4..16   | `T`, `H`, `W` as little-endian `u32`      |
//! | 16..    | `T*H*W` little-endian `f32`, `[t][row][col]` |
//!
//! Everything else (name, units, timing, normalization, crop provenance)
//! lives in `<name>.json` next to the payload.

use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use chrono::{Datelike, Duration, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const RGS_MAGIC: &[u8; 4] = b"RGS1";
pub const RGS_HEADER_LEN: usize = 16;

/// One 2D field, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFrame {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl GridFrame {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Invariant(format!(
                "frame dimensions must be positive, got {height}x{width}"
            )));
        }
        if values.len() != height * width {
            return Err(Error::Invariant(format!(
                "frame {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        Ok(GridFrame {
            height,
            width,
            values,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        GridFrame {
            height,
            width,
            values: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> GridFrame {
        GridFrame {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Sub-grid selection `[top, top+out_height) x [left, left+out_width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropSpec {
    pub top: usize,
    pub left: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl CropSpec {
    /// Centered window; odd margins put the extra row/column at the bottom/right.
    pub fn centered(
        source_height: usize,
        source_width: usize,
        out_height: usize,
        out_width: usize,
    ) -> Result<Self> {
        if out_height > source_height || out_width > source_width || out_height == 0 || out_width == 0
        {
            return Err(Error::Bounds(format!(
                "cannot take a {out_height}x{out_width} window from a {source_height}x{source_width} grid"
            )));
        }
        Ok(CropSpec {
            top: (source_height - out_height) / 2,
            left: (source_width - out_width) / 2,
            out_height,
            out_width,
        })
    }

    pub fn full(height: usize, width: usize) -> Self {
        CropSpec {
            top: 0,
            left: 0,
            out_height: height,
            out_width: width,
        }
    }

    /// The crop equivalent to applying `self` and then `inner` to its output.
    pub fn then(&self, inner: &CropSpec) -> CropSpec {
        CropSpec {
            top: self.top + inner.top,
            left: self.left + inner.left,
            out_height: inner.out_height,
            out_width: inner.out_width,
        }
    }

    pub fn check(&self, height: usize, width: usize) -> Result<()> {
        if self.out_height == 0
            || self.out_width == 0
            || self.top + self.out_height > height
            || self.left + self.out_width > width
        {
            return Err(Error::Bounds(format!(
                "crop top={} left={} {}x{} does not fit a {height}x{width} grid",
                self.top, self.left, self.out_height, self.out_width
            )));
        }
        Ok(())
    }
}

/// Where a cropped series came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropProvenance {
    pub source_height: usize,
    pub source_width: usize,
    #[serde(flatten)]
    pub spec: CropSpec,
}

/// Time-ordered stack of frames for one variable.
///
/// `norm_max` is `Some(m)` once the values have been divided by `m`;
/// `None` means the values are in physical units.
#[derive(Debug, Clone, PartialEq)]
pub struct VariableSeries {
    pub variable_name: String,
    pub units: String,
    pub start_time: NaiveDateTime,
    pub step_hours: u32,
    pub crop: Option<CropProvenance>,
    frames: Vec<GridFrame>,
    norm_max: Option<f64>,
}

impl VariableSeries {
    pub fn new(
        variable_name: impl Into<String>,
        units: impl Into<String>,
        start_time: NaiveDateTime,
        step_hours: u32,
        frames: Vec<GridFrame>,
    ) -> Result<Self> {
        let series = VariableSeries {
            variable_name: variable_name.into(),
            units: units.into(),
            start_time,
            step_hours,
            crop: None,
            frames,
            norm_max: None,
        };
        series.check_shape()?;
        Ok(series)
    }

    /// Same metadata, different frames (shape checked).
    pub fn with_frames(&self, frames: Vec<GridFrame>) -> Result<Self> {
        let series = VariableSeries {
            frames,
            ..self.metadata_only()
        };
        series.check_shape()?;
        Ok(series)
    }

    fn metadata_only(&self) -> Self {
        VariableSeries {
            variable_name: self.variable_name.clone(),
            units: self.units.clone(),
            start_time: self.start_time,
            step_hours: self.step_hours,
            crop: self.crop,
            frames: Vec::new(),
            norm_max: self.norm_max,
        }
    }

    /// Marks the values as already scaled by `norm_max` (used when loading).
    pub fn with_norm_max(mut self, norm_max: Option<f64>) -> Result<Self> {
        if let Some(m) = norm_max {
            if !(m.is_finite() && m > 0.0) {
                return Err(Error::Invariant(format!(
                    "norm_max must be positive and finite, got {m}"
                )));
            }
        }
        self.norm_max = norm_max;
        Ok(self)
    }

    fn check_shape(&self) -> Result<()> {
        let first = self
            .frames
            .first()
            .ok_or_else(|| Error::Invariant("series needs at least one frame".into()))?;
        if self.step_hours == 0 {
            return Err(Error::Invariant("step_hours must be positive".into()));
        }
        if let Some(i) = self.frames.iter().position(|f| f.shape() != first.shape()) {
            return Err(Error::Invariant(format!(
                "frame {i} is {}x{}, series is {}x{}",
                self.frames[i].height,
                self.frames[i].width,
                first.height,
                first.width
            )));
        }
        Ok(())
    }

    /// Full invariant check, including finiteness of every value.
    pub fn validate(&self) -> Result<()> {
        self.check_shape()?;
        for (t, frame) in self.frames.iter().enumerate() {
            if let Some(i) = frame.values.iter().position(|v| !v.is_finite()) {
                return Err(Error::Invariant(format!(
                    "non-finite value {} in frame {t} at row {} col {}",
                    frame.values[i],
                    i / frame.width,
                    i % frame.width
                )));
            }
        }
        if let Some(m) = self.norm_max {
            if !(m.is_finite() && m > 0.0) {
                return Err(Error::Invariant(format!("norm_max {m} is not positive")));
            }
        }
        Ok(())
    }

    pub fn frames(&self) -> &[GridFrame] {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> &GridFrame {
        &self.frames[t]
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn height(&self) -> usize {
        self.frames[0].height
    }

    pub fn width(&self) -> usize {
        self.frames[0].width
    }

    pub fn norm_max(&self) -> Option<f64> {
        self.norm_max
    }

    pub fn is_normalized(&self) -> bool {
        self.norm_max.is_some()
    }

    pub fn time_at(&self, t: usize) -> NaiveDateTime {
        self.start_time + Duration::hours(t as i64 * self.step_hours as i64)
    }

    pub fn year_at(&self, t: usize) -> i32 {
        self.time_at(t).year()
    }

    /// Frames `range`, with the start time moved accordingly.
    pub fn slice(&self, range: Range<usize>) -> Result<Self> {
        if range.start >= range.end || range.end > self.len() {
            return Err(Error::Invariant(format!(
                "frame range {range:?} outside series of length {}",
                self.len()
            )));
        }
        let start_time = self.time_at(range.start);
        Ok(VariableSeries {
            start_time,
            frames: self.frames[range].to_vec(),
            ..self.metadata_only()
        })
    }

    fn sidecar(&self) -> SeriesMeta {
        SeriesMeta {
            variable_name: self.variable_name.clone(),
            units: self.units.clone(),
            start_time: self.start_time,
            step_hours: self.step_hours,
            norm_max: self.norm_max,
            crop: self.crop,
            frames: self.len(),
            height: self.height(),
            width: self.width(),
        }
    }
}

/// Contents of the JSON sidecar written next to every RGS file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesMeta {
    pub variable_name: String,
    pub units: String,
    pub start_time: NaiveDateTime,
    pub step_hours: u32,
    pub norm_max: Option<f64>,
    pub crop: Option<CropProvenance>,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Size in bytes of an RGS file holding `t*h*w` values.
pub fn rgs_file_len(frames: usize, height: usize, width: usize) -> u64 {
    (RGS_HEADER_LEN + 4 * frames * height * width) as u64
}

/// Serializes the payload only (header and values).
pub fn encode_rgs(series: &VariableSeries) -> Vec<u8> {
    let (t, h, w) = (series.len(), series.height(), series.width());
    let mut out = Vec::with_capacity(rgs_file_len(t, h, w) as usize);
    out.extend_from_slice(RGS_MAGIC);
    for dim in [t, h, w] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for frame in &series.frames {
        for &v in &frame.values {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

/// Parses an RGS payload into `(T, H, W, values)`.
pub fn decode_rgs(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<f32>)> {
    if bytes.len() < 4 {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            message: "file ends before the 4-byte magic".into(),
        });
    }
    if &bytes[..4] != RGS_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad magic {:?}, expected \"RGS1\"", &bytes[..4]),
        });
    }
    if bytes.len() < RGS_HEADER_LEN {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            message: "header truncated (need 16 bytes)".into(),
        });
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (t, h, w) = (dim(0), dim(1), dim(2));
    let count = t
        .checked_mul(h)
        .and_then(|n| n.checked_mul(w))
        .ok_or_else(|| Error::Format {
            offset: 4,
            message: format!("dimensions {t}x{h}x{w} overflow"),
        })?;
    let expected = RGS_HEADER_LEN + 4 * count;
    if bytes.len() < expected {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            message: format!(
                "payload truncated: {t}x{h}x{w} needs {expected} bytes, file has {}",
                bytes.len()
            ),
        });
    }
    if bytes.len() > expected {
        return Err(Error::Format {
            offset: expected as u64,
            message: format!("{} trailing bytes after payload", bytes.len() - expected),
        });
    }
    let values = bytes[RGS_HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((t, h, w, values))
}

/// Loads an RGS file and its sidecar.
pub fn read_series(path: impl AsRef<Path>) -> Result<VariableSeries> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (t, h, w, values) = decode_rgs(&bytes)?;

    let meta_path = sidecar_path(path);
    let meta_text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: SeriesMeta = serde_json::from_str(&meta_text)
        .map_err(|e| Error::json(meta_path.display().to_string(), e))?;
    if (meta.frames, meta.height, meta.width) != (t, h, w) {
        return Err(Error::Consistency(format!(
            "{} declares {}x{}x{} but payload is {t}x{h}x{w}",
            meta_path.display(),
            meta.frames,
            meta.height,
            meta.width
        )));
    }
    if t == 0 || h == 0 || w == 0 {
        return Err(Error::Format {
            offset: 4,
            message: format!("empty grid {t}x{h}x{w}"),
        });
    }

    let frames = values
        .chunks_exact(h * w)
        .map(|c| GridFrame {
            height: h,
            width: w,
            values: c.iter().map(|&v| v as f64).collect(),
        })
        .collect();
    let mut series = VariableSeries::new(
        meta.variable_name,
        meta.units,
        meta.start_time,
        meta.step_hours,
        frames,
    )?
    .with_norm_max(meta.norm_max)?;
    series.crop = meta.crop;
    series.validate()?;
    Ok(series)
}

/// Writes the RGS payload and sidecar. Values are stored as `f32`, so the
/// round trip is exact for any series whose values are `f32`-representable
/// (everything produced by [`read_series`] and the synthetic generator).
pub fn write_series(series: &VariableSeries, path: impl AsRef<Path>) -> Result<()> {
    series.validate()?;
    if let Some((t, v)) = series.frames.iter().enumerate().find_map(|(t, f)| {
        f.values
            .iter()
            .find(|v| !(**v as f32).is_finite())
            .map(|v| (t, *v))
    }) {
        return Err(Error::Invariant(format!(
            "value {v} in frame {t} overflows 32-bit storage"
        )));
    }
    let path = path.as_ref();
    let meta = serde_json::to_string_pretty(&series.sidecar())
        .map_err(|e| Error::json("series sidecar", e))?;
    fs::write(path, encode_rgs(series)).map_err(|e| Error::io(path, e))?;
    let meta_path = sidecar_path(path);
    fs::write(&meta_path, meta).map_err(|e| Error::io(&meta_path, e))?;
    Ok(())
}

fn check_aligned(a: &VariableSeries, b: &VariableSeries) -> Result<()> {
    if (a.len(), a.height(), a.width()) != (b.len(), b.height(), b.width()) {
        return Err(Error::Alignment(format!(
            "{} is {}x{}x{}, {} is {}x{}x{}",
            a.variable_name,
            a.len(),
            a.height(),
            a.width(),
            b.variable_name,
            b.len(),
            b.height(),
            b.width()
        )));
    }
    if a.start_time != b.start_time || a.step_hours != b.step_hours {
        return Err(Error::Alignment(format!(
            "{} starts {} every {}h, {} starts {} every {}h",
            a.variable_name, a.start_time, a.step_hours, b.variable_name, b.start_time, b.step_hours
        )));
    }
    Ok(())
}

/// Wind speed magnitude `sqrt(u^2 + v^2)` from the two horizontal components.
pub fn wind_speed(u: &VariableSeries, v: &VariableSeries) -> Result<VariableSeries> {
    check_aligned(u, v)?;
    if u.is_normalized() || v.is_normalized() {
        return Err(Error::State(
            "wind speed must be derived from physical (denormalized) components".into(),
        ));
    }
    let frames = u
        .frames
        .iter()
        .zip(&v.frames)
        .map(|(fu, fv)| GridFrame {
            height: fu.height,
            width: fu.width,
            values: fu
                .values
                .iter()
                .zip(&fv.values)
                .map(|(&a, &b)| (a * a + b * b).sqrt())
                .collect(),
        })
        .collect();
    let mut ws = VariableSeries::new("ws", u.units.clone(), u.start_time, u.step_hours, frames)?;
    ws.crop = u.crop;
    Ok(ws)
}

pub fn crop(series: &VariableSeries, spec: &CropSpec) -> Result<VariableSeries> {
    let (h, w) = (series.height(), series.width());
    spec.check(h, w)?;
    let frames = series
        .frames
        .iter()
        .map(|f| {
            let mut values = Vec::with_capacity(spec.out_height * spec.out_width);
            for row in spec.top..spec.top + spec.out_height {
                let start = row * w + spec.left;
                values.extend_from_slice(&f.values[start..start + spec.out_width]);
            }
            GridFrame {
                height: spec.out_height,
                width: spec.out_width,
                values,
            }
        })
        .collect();
    let mut out = series.with_frames(frames)?;
    out.crop = Some(match series.crop {
        Some(prev) => CropProvenance {
            spec: prev.spec.then(spec),
            ..prev
        },
        None => CropProvenance {
            source_height: h,
            source_width: w,
            spec: *spec,
        },
    });
    Ok(out)
}

/// Largest value over every pixel of every frame; the per-variable scale.
pub fn fit_norm_max(training: &VariableSeries) -> Result<f64> {
    if training.is_normalized() {
        return Err(Error::State(format!(
            "{} is already normalized; fit the scale on physical values",
            training.variable_name
        )));
    }
    let max = training
        .frames
        .iter()
        .flat_map(|f| f.values.iter().copied())
        .fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0 && max.is_finite()) {
        return Err(Error::DegenerateScale(format!(
            "{} has maximum {max}; cannot divide by it",
            training.variable_name
        )));
    }
    Ok(max)
}

/// Divides every value by `norm_max`. Values above the scale are kept (> 1).
pub fn normalize(series: &VariableSeries, norm_max: f64) -> Result<VariableSeries> {
    if series.is_normalized() {
        return Err(Error::State(format!(
            "{} is already normalized",
            series.variable_name
        )));
    }
    if !(norm_max > 0.0 && norm_max.is_finite()) {
        return Err(Error::DegenerateScale(format!(
            "norm_max must be positive and finite, got {norm_max}"
        )));
    }
    let frames = series.frames.iter().map(|f| f.map(|v| v / norm_max)).collect();
    series.with_frames(frames)?.with_norm_max(Some(norm_max))
}

pub fn denormalize(series: &VariableSeries) -> Result<VariableSeries> {
    let m = series.norm_max.ok_or_else(|| {
        Error::State(format!(
            "{} holds physical values; nothing to denormalize",
            series.variable_name
        ))
    })?;
    let frames = series.frames.iter().map(|f| f.map(|v| v * m)).collect();
    series.with_frames(frames)?.with_norm_max(None)
}
