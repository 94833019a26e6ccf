//! WebAssembly bindings for the browser demo in `www/`.

use nowcast_core::dataset::{window_at, WindowSpec};
use nowcast_core::evaluation::{binarize, classification_metrics, evaluate_mse, persistence_forecast};
use nowcast_core::grid::{fit_norm_max, normalize, VariableSeries};
use nowcast_core::synthetic::{generate, SyntheticConfig};
use wasm_bindgen::prelude::*;

const LAG: usize = 4;

fn js(e: nowcast_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// A normalized synthetic sequence held in browser memory.
#[wasm_bindgen]
pub struct Demo {
    tp: VariableSeries,
    u: VariableSeries,
    v: VariableSeries,
}

impl Demo {
    pub fn generate(seed: u64, size: usize, length: usize) -> nowcast_core::Result<Demo> {
        let s = generate(&SyntheticConfig {
            height: size,
            width: size,
            sequence_length: length,
            seed,
            ..Default::default()
        })?;
        Ok(Demo {
            tp: normalize(&s.tp, fit_norm_max(&s.tp)?)?,
            u: s.u,
            v: s.v,
        })
    }

    fn check_frame(&self, t: usize) -> nowcast_core::Result<()> {
        if t >= self.tp.len() {
            return Err(nowcast_core::Error::Consistency(format!(
                "frame {t} outside 0..{}",
                self.tp.len()
            )));
        }
        Ok(())
    }

    pub fn forecast(&self, anchor: usize, horizon: usize) -> nowcast_core::Result<Vec<f64>> {
        let spec = WindowSpec { lag: LAG, horizon };
        let w = window_at(std::slice::from_ref(&self.tp), &spec, anchor)?;
        Ok(persistence_forecast(&w)?.into_values())
    }

    /// `[mse, accuracy, precision, recall, tp, fp, tn, fn]`; undefined ratios are NaN.
    pub fn evaluate(&self, anchor: usize, horizon: usize, threshold: f64) -> nowcast_core::Result<Vec<f64>> {
        let spec = WindowSpec { lag: LAG, horizon };
        let w = window_at(std::slice::from_ref(&self.tp), &spec, anchor)?;
        let pred = persistence_forecast(&w)?;
        let mse = evaluate_mse(std::slice::from_ref(&pred), std::slice::from_ref(&w.target), self.tp.norm_max())?;
        let m = classification_metrics(&binarize(&pred, threshold), &binarize(&w.target, threshold))?;
        let c = m.counts;
        Ok(vec![
            mse,
            m.accuracy,
            m.precision.unwrap_or(f64::NAN),
            m.recall.unwrap_or(f64::NAN),
            c.tp as f64,
            c.fp as f64,
            c.tn as f64,
            c.fn_ as f64,
        ])
    }
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, size: usize, length: usize) -> Result<Demo, JsError> {
        Demo::generate(u64::from(seed), size, length).map_err(js)
    }

    pub fn length(&self) -> usize {
        self.tp.len()
    }

    pub fn size(&self) -> usize {
        self.tp.height()
    }

    /// Normalized precipitation at frame `t`, row-major.
    pub fn frame(&self, t: usize) -> Result<Vec<f64>, JsError> {
        self.check_frame(t).map_err(js)?;
        Ok(self.tp.frame(t).values().to_vec())
    }

    /// Wind components `[u, v]` in m/s at frame `t` (uniform over the grid).
    pub fn wind(&self, t: usize) -> Result<Vec<f64>, JsError> {
        self.check_frame(t).map_err(js)?;
        Ok(vec![self.u.frame(t).values()[0], self.v.frame(t).values()[0]])
    }

    /// Rain mask of frame `t` at a normalized threshold, 1 for rain.
    pub fn mask(&self, t: usize, threshold: f64) -> Result<Vec<u8>, JsError> {
        self.check_frame(t).map_err(js)?;
        Ok(binarize(self.tp.frame(t), threshold).into_iter().map(u8::from).collect())
    }

    /// Persistence nowcast for `anchor + horizon`.
    pub fn persistence(&self, anchor: usize, horizon: usize) -> Result<Vec<f64>, JsError> {
        self.forecast(anchor, horizon).map_err(js)
    }

    /// Scores the persistence nowcast against the observed frame.
    pub fn score(&self, anchor: usize, horizon: usize, threshold: f64) -> Result<Vec<f64>, JsError> {
        self.evaluate(anchor, horizon, threshold).map_err(js)
    }
}
