//! Seeded wind-driven advection sequences.
//!
//! Precipitation is a sum of isotropic Gaussian bumps on a torus. Between
//! frame `t` and `t+1` every bump moves by the wind `(vx, vy)` in force at
//! frame `t`; the wind is constant over a segment of `wind_segment_length`
//! frames and redrawn at each segment start. `u`/`v` frames carry `vx`/`vy`
//! at every pixel.
//!
//! Bump centres are tracked as an integer cell plus a fractional offset and
//! each bump is rendered from `(column - cell) mod W` and the offset alone, so
//! an integer wind shifts a frame by whole cells with no rounding at all.

use chrono::{NaiveDate, NaiveDateTime};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridFrame, VariableSeries};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub height: usize,
    pub width: usize,
    /// Total number of frames.
    pub sequence_length: usize,
    pub n_blobs: usize,
    /// Peak value range, metres of water per step.
    pub blob_amplitude: [f64; 2],
    /// Bump standard deviation range, pixels.
    pub blob_sigma: [f64; 2],
    /// Range of the eastward wind component, pixels per step.
    pub wind_vx: [f64; 2],
    /// Range of the southward (row-increasing) wind component, pixels per step.
    pub wind_vy: [f64; 2],
    /// Frames per constant-wind segment; `None` keeps one wind for the whole run.
    pub wind_segment_length: Option<usize>,
    pub noise_std: f64,
    pub seed: u64,
    pub start_time: NaiveDateTime,
    pub step_hours: u32,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            height: 32,
            width: 32,
            sequence_length: 2000,
            n_blobs: 4,
            blob_amplitude: [5e-4, 3e-3],
            blob_sigma: [1.5, 4.0],
            wind_vx: [-2.0, 2.0],
            wind_vy: [-2.0, 2.0],
            wind_segment_length: Some(48),
            noise_std: 0.0,
            seed: 0,
            start_time: NaiveDate::from_ymd_opt(2020, 1, 1)
                .unwrap()
                .and_hms_opt(0, 0, 0)
                .unwrap(),
            step_hours: 1,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.height < 8 || self.width < 8 {
            return bad(format!(
                "synthetic grid must be at least 8x8, got {}x{}",
                self.height, self.width
            ));
        }
        if self.sequence_length == 0 {
            return bad("sequence_length must be positive".into());
        }
        let ordered = |r: [f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] <= r[1];
        if !ordered(self.blob_amplitude) || self.blob_amplitude[0] < 0.0 {
            return bad(format!("bad amplitude range {:?}", self.blob_amplitude));
        }
        if !ordered(self.blob_sigma) || self.blob_sigma[0] <= 0.0 {
            return bad(format!("sigma range must be positive, got {:?}", self.blob_sigma));
        }
        if !ordered(self.wind_vx) || !ordered(self.wind_vy) {
            return bad(format!("bad wind ranges {:?} {:?}", self.wind_vx, self.wind_vy));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std must be >= 0, got {}", self.noise_std));
        }
        if self.wind_segment_length == Some(0) {
            return bad("wind_segment_length must be positive".into());
        }
        if self.step_hours == 0 {
            return bad("step_hours must be positive".into());
        }
        Ok(())
    }
}

/// Output of [`generate`].
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSeries {
    pub tp: VariableSeries,
    pub u: VariableSeries,
    pub v: VariableSeries,
}

#[derive(Debug, Clone, Copy)]
struct Blob {
    amplitude: f64,
    sigma: f64,
    cell: [i64; 2],
    frac: [f64; 2],
}

/// Position on one axis as whole cells plus an offset in `[0, 1)`.
fn split(x: f64) -> (i64, f64) {
    let cell = x.floor();
    (cell as i64, x - cell)
}

/// Periodic Gaussian profile along one axis of length `n`.
fn profile(n: usize, cell: i64, frac: f64, sigma: f64, out: &mut [f64]) {
    let inv = 1.0 / (2.0 * sigma * sigma);
    let len = n as f64;
    for (x, slot) in out.iter_mut().enumerate() {
        let k = (x as i64 - cell).rem_euclid(n as i64) as f64;
        let d = k - frac;
        *slot = (-2..=2)
            .map(|m| {
                let e = d + m as f64 * len;
                (-e * e * inv).exp()
            })
            .sum();
    }
}

pub fn generate(config: &SyntheticConfig) -> Result<SyntheticSeries> {
    config.validate()?;
    let (h, w, len) = (config.height, config.width, config.sequence_length);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let uniform = |rng: &mut ChaCha8Rng, r: [f64; 2]| {
        if r[0] == r[1] {
            r[0]
        } else {
            rng.random_range(r[0]..r[1])
        }
    };

    let mut blobs: Vec<Blob> = (0..config.n_blobs)
        .map(|_| {
            let cy = rng.random_range(0.0..h as f64);
            let cx = rng.random_range(0.0..w as f64);
            let amplitude = uniform(&mut rng, config.blob_amplitude);
            let sigma = uniform(&mut rng, config.blob_sigma);
            let (iy, fy) = split(cy);
            let (ix, fx) = split(cx);
            Blob {
                amplitude,
                sigma,
                cell: [iy, ix],
                frac: [fy, fx],
            }
        })
        .collect();

    let segment = config.wind_segment_length.unwrap_or(len).max(1);
    let n_segments = len.div_ceil(segment);
    // Stored as f32 in RGS files, so keep them representable.
    let winds: Vec<[f64; 2]> = (0..n_segments)
        .map(|_| {
            let vx = uniform(&mut rng, config.wind_vx) as f32 as f64;
            let vy = uniform(&mut rng, config.wind_vy) as f32 as f64;
            [vy, vx]
        })
        .collect();
    let noise = Normal::new(0.0, config.noise_std.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Config(format!("noise distribution: {e}")))?;

    let mut tp = Vec::with_capacity(len);
    let mut u = Vec::with_capacity(len);
    let mut v = Vec::with_capacity(len);
    let mut py = vec![0.0; h];
    let mut px = vec![0.0; w];
    for t in 0..len {
        let mut values = vec![0.0f64; h * w];
        for blob in &blobs {
            profile(h, blob.cell[0], blob.frac[0], blob.sigma, &mut py);
            profile(w, blob.cell[1], blob.frac[1], blob.sigma, &mut px);
            for (row, &gy) in py.iter().enumerate() {
                let a = blob.amplitude * gy;
                for (slot, &gx) in values[row * w..(row + 1) * w].iter_mut().zip(&px) {
                    *slot += a * gx;
                }
            }
        }
        if config.noise_std > 0.0 {
            for slot in values.iter_mut() {
                *slot = (*slot + noise.sample(&mut rng)).max(0.0);
            }
        }
        for slot in values.iter_mut() {
            *slot = *slot as f32 as f64;
        }
        tp.push(GridFrame::new(h, w, values)?);

        let [vy, vx] = winds[t / segment];
        u.push(GridFrame::filled(h, w, vx));
        v.push(GridFrame::filled(h, w, vy));

        for blob in blobs.iter_mut() {
            for (axis, vel) in [vy, vx].into_iter().enumerate() {
                let (whole, part) = split(vel);
                let (carry, frac) = split(blob.frac[axis] + part);
                blob.cell[axis] += whole + carry;
                blob.frac[axis] = frac;
            }
        }
    }

    let make = |name: &str, units: &str, frames| {
        VariableSeries::new(name, units, config.start_time, config.step_hours, frames)
    };
    Ok(SyntheticSeries {
        tp: make("tp", "m", tp)?,
        u: make("u100", "pixel/step", u)?,
        v: make("v100", "pixel/step", v)?,
    })
}
