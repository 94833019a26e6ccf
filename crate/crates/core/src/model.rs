//! Core 3D-UNet and the dual-stream WF-UNet.
//!
//! A stream maps a `(lag, H, W)` window to an `H x W` frame: an encoder of
//! `levels - 1` double convolutions each followed by dropout and spatial
//! pooling, a bottleneck double convolution, a decoder of upsample +
//! skip-concatenation + double convolution, and a `(lag, 1, 1)` projection.
//! WF-UNet runs two streams (precipitation, wind speed) and combines their
//! frames with a per-pixel affine layer.

use std::collections::hash_map::DefaultHasher;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    double_conv, double_conv_backward, down, down_backward, final_projection, final_projection_backward,
    split_channels, up_and_concat, upsample_backward, DoubleConvCache, DoubleConvGrads, DoubleConvParams,
    DownCache, KERNEL_VOLUME,
};
use crate::seed::derive_seed;
use crate::tensor::{FeatureBlock, ParameterSet, Scalar, Tensor};

pub const PRECIP_PREFIX: &str = "stream_precip/";
pub const WIND_PREFIX: &str = "stream_wind/";
pub const FUSION_WEIGHT: &str = "fusion/weight";
pub const FUSION_BIAS: &str = "fusion/bias";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoreUNetConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub input_lag: usize,
    pub height: usize,
    pub width: usize,
    pub dropout_rate: f64,
}

impl Default for CoreUNetConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl CoreUNetConfig {
    pub fn full() -> Self {
        CoreUNetConfig {
            levels: 5,
            base_channels: 64,
            input_lag: 12,
            height: 96,
            width: 96,
            dropout_rate: 0.5,
        }
    }

    pub fn desk() -> Self {
        CoreUNetConfig {
            levels: 3,
            base_channels: 4,
            input_lag: 4,
            height: 32,
            width: 32,
            dropout_rate: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.base_channels == 0 || self.input_lag == 0 {
            return Err(Error::Config("levels, base_channels and input_lag must be positive".into()));
        }
        if self.levels > 16 {
            return Err(Error::Config(format!("{} levels is too deep", self.levels)));
        }
        let unit = 1usize << (self.levels - 1);
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(unit) || !self.width.is_multiple_of(unit) {
            return Err(Error::Config(format!(
                "spatial size {}x{} must be positive and divisible by {unit} for {} levels",
                self.height, self.width, self.levels
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate {} outside [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }

    /// Channel width at `level`.
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Input channels of the first convolution at encoder `level`.
    fn encoder_input(&self, level: usize) -> usize {
        if level == 0 {
            1
        } else {
            self.channels(level - 1)
        }
    }

    fn window_len(&self) -> usize {
        self.input_lag * self.height * self.width
    }

    fn frame_len(&self) -> usize {
        self.height * self.width
    }
}

fn conv_count(cin: usize, cout: usize) -> usize {
    KERNEL_VOLUME * cin * cout + cout
}

/// Closed-form parameter count of one Core UNet stream.
pub fn count_parameters(config: &CoreUNetConfig) -> usize {
    let l = config.levels;
    let dc = |cin, cout| conv_count(cin, cout) + conv_count(cout, cout);
    let encoder: usize = (0..l - 1).map(|i| dc(config.encoder_input(i), config.channels(i))).sum();
    let bottleneck = dc(config.encoder_input(l - 1), config.channels(l - 1));
    let decoder: usize = (0..l - 1).map(|i| dc(3 * config.channels(i), config.channels(i))).sum();
    encoder + bottleneck + decoder + config.base_channels * config.input_lag + 1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "core-unet")]
    CoreUNet,
    #[serde(rename = "wf-unet")]
    WfUNet,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::CoreUNet => "core-unet",
            ModelKind::WfUNet => "wf-unet",
        }
    }

    pub fn streams(self) -> usize {
        match self {
            ModelKind::CoreUNet => 1,
            ModelKind::WfUNet => 2,
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "core-unet" => Ok(ModelKind::CoreUNet),
            "wf-unet" => Ok(ModelKind::WfUNet),
            other => Err(Error::Config(format!(
                "unknown model `{other}` (expected core-unet or wf-unet)"
            ))),
        }
    }
}

/// Parameter names and shapes of one stream, in storage order.
pub fn stream_layout(config: &CoreUNetConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    let push_dc = |out: &mut Vec<(String, Vec<usize>)>, name: &str, cin: usize, cout: usize| {
        out.push((format!("{name}.conv1.weight"), vec![cout, cin, 3, 3, 3]));
        out.push((format!("{name}.conv1.bias"), vec![cout]));
        out.push((format!("{name}.conv2.weight"), vec![cout, cout, 3, 3, 3]));
        out.push((format!("{name}.conv2.bias"), vec![cout]));
    };
    let l = config.levels;
    for i in 0..l - 1 {
        push_dc(&mut out, &format!("enc{i}"), config.encoder_input(i), config.channels(i));
    }
    push_dc(&mut out, "bottleneck", config.encoder_input(l - 1), config.channels(l - 1));
    for i in (0..l - 1).rev() {
        push_dc(&mut out, &format!("dec{i}"), 3 * config.channels(i), config.channels(i));
    }
    out.push(("head.weight".into(), vec![1, config.base_channels, config.input_lag, 1, 1]));
    out.push(("head.bias".into(), vec![1]));
    out
}

/// Full parameter layout of a model.
pub fn model_layout(kind: ModelKind, config: &CoreUNetConfig) -> Vec<(String, Vec<usize>)> {
    let stream = stream_layout(config);
    match kind {
        ModelKind::CoreUNet => stream,
        ModelKind::WfUNet => {
            let mut out: Vec<_> = stream
                .iter()
                .map(|(n, s)| (format!("{PRECIP_PREFIX}{n}"), s.clone()))
                .collect();
            out.extend(stream.iter().map(|(n, s)| (format!("{WIND_PREFIX}{n}"), s.clone())));
            out.push((FUSION_WEIGHT.into(), vec![1, 2, 1, 1]));
            out.push((FUSION_BIAS.into(), vec![1]));
            out
        }
    }
}

/// Inputs for one sample: the normalized precipitation window and, for
/// WF-UNet, the normalized wind-speed window, each `lag * H * W` values.
#[derive(Debug, Clone, Copy)]
pub struct ModelInput<'a, T> {
    pub precip: &'a [T],
    pub wind: Option<&'a [T]>,
}

/// Saved activations of one stream.
#[derive(Debug, Clone)]
pub struct StreamTrace<T> {
    encoder: Vec<(DoubleConvCache<T>, DownCache<T>)>,
    bottleneck: DoubleConvCache<T>,
    /// Decoder caches in forward order, deepest level first.
    decoder: Vec<DoubleConvCache<T>>,
}

impl<T: Scalar> StreamTrace<T> {
    fn head_input(&self) -> &FeatureBlock<T> {
        self.decoder.last().map_or(&self.bottleneck.output, |c| &c.output)
    }

    fn hash_pattern(&self, h: &mut DefaultHasher) {
        let mut relu = |b: &FeatureBlock<T>| {
            for chunk in b.data.chunks(64) {
                let bits = chunk
                    .iter()
                    .enumerate()
                    .fold(0u64, |acc, (i, v)| acc | (u64::from(*v > T::zero()) << i));
                bits.hash(h);
            }
        };
        for (dc, _) in &self.encoder {
            relu(&dc.hidden);
            relu(&dc.output);
        }
        relu(&self.bottleneck.hidden);
        relu(&self.bottleneck.output);
        for dc in &self.decoder {
            relu(&dc.hidden);
            relu(&dc.output);
        }
        for (_, dn) in &self.encoder {
            dn.argmax.hash(h);
        }
    }
}

#[derive(Debug, Clone)]
pub enum Trace<T> {
    Core(StreamTrace<T>),
    Wf {
        precip: StreamTrace<T>,
        wind: StreamTrace<T>,
        precip_out: Vec<T>,
        wind_out: Vec<T>,
    },
}

impl<T: Scalar> Trace<T> {
    /// Hash of every rectifier on/off state and pooling choice. Two
    /// parameter vectors with equal signatures lie in the same linear piece.
    pub fn activation_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        match self {
            Trace::Core(s) => s.hash_pattern(&mut h),
            Trace::Wf { precip, wind, .. } => {
                precip.hash_pattern(&mut h);
                wind.hash_pattern(&mut h);
            }
        }
        h.finish()
    }
}

fn dc_params<T>(t: &[Tensor<T>]) -> DoubleConvParams<'_, T> {
    DoubleConvParams {
        w1: &t[0].data,
        b1: &t[1].data,
        w2: &t[2].data,
        b2: &t[3].data,
    }
}

fn dc_grads<T>(t: &mut [Tensor<T>]) -> DoubleConvGrads<'_, T> {
    match t {
        [w1, b1, w2, b2, ..] => DoubleConvGrads {
            w1: &mut w1.data,
            b1: &mut b1.data,
            w2: &mut w2.data,
            b2: &mut b2.data,
        },
        _ => unreachable!("double convolution owns four tensors"),
    }
}

fn at_level(level: usize, e: Error) -> Error {
    match e {
        Error::Config(m) => Error::Config(format!("level {level}: {m}")),
        other => other,
    }
}

fn forward_stream<T: Scalar>(
    tensors: &[Tensor<T>],
    config: &CoreUNetConfig,
    window: &[T],
    dropout_seed: Option<u64>,
) -> Result<(Vec<T>, StreamTrace<T>)> {
    let l = config.levels;
    let x = FeatureBlock::from_vec(1, config.input_lag, config.height, config.width, window.to_vec())
        .ok_or_else(|| {
            Error::Config(format!(
                "window has {} values, expected {}x{}x{}",
                window.len(),
                config.input_lag,
                config.height,
                config.width
            ))
        })?;
    let mut encoder = Vec::with_capacity(l - 1);
    let mut current = x;
    for i in 0..l - 1 {
        let dc = double_conv(current, dc_params(&tensors[4 * i..]), config.channels(i)).map_err(|e| at_level(i, e))?;
        let seed = dropout_seed.map(|s| derive_seed(s, &[i as u64]));
        let (pooled, cache) = down(&dc.output, config.dropout_rate, seed).map_err(|e| at_level(i, e))?;
        encoder.push((dc, cache));
        current = pooled;
    }
    let bottleneck = double_conv(current, dc_params(&tensors[4 * (l - 1)..]), config.channels(l - 1))
        .map_err(|e| at_level(l - 1, e))?;
    let mut decoder: Vec<DoubleConvCache<T>> = Vec::with_capacity(l - 1);
    for (p, level) in (0..l - 1).rev().enumerate() {
        let below = decoder.last().map_or(&bottleneck.output, |c| &c.output);
        let dc = up_and_concat(
            below,
            &encoder[level].0.output,
            dc_params(&tensors[4 * (l + p)..]),
            config.channels(level),
        )
        .map_err(|e| at_level(level, e))?;
        decoder.push(dc);
    }
    let trace = StreamTrace {
        encoder,
        bottleneck,
        decoder,
    };
    let head = &tensors[8 * l - 4..];
    let out = final_projection(trace.head_input(), &head[0].data, head[1].data[0])?;
    Ok((out, trace))
}

fn backward_stream<T: Scalar>(
    tensors: &[Tensor<T>],
    grads: &mut [Tensor<T>],
    config: &CoreUNetConfig,
    trace: &StreamTrace<T>,
    d_out: &[T],
) {
    let l = config.levels;
    let (head, head_grad) = (&tensors[8 * l - 4..], &mut grads[8 * l - 4..]);
    let mut d_block = {
        let (gw, gb) = head_grad.split_at_mut(1);
        final_projection_backward(trace.head_input(), &head[0].data, d_out, &mut gw[0].data, &mut gb[0].data[0])
    };
    let mut d_skip: Vec<Option<FeatureBlock<T>>> = vec![None; l - 1];
    for (p, level) in (0..l - 1).rev().enumerate().collect::<Vec<_>>().into_iter().rev() {
        let base = 4 * (l + p);
        let d_joined = double_conv_backward(
            &trace.decoder[p],
            dc_params(&tensors[base..]),
            d_block,
            dc_grads(&mut grads[base..]),
            true,
        )
        .expect("requested input gradient");
        let (skip, up) = split_channels(d_joined, config.channels(level));
        d_skip[level] = Some(skip);
        d_block = upsample_backward(&up);
    }
    let base = 4 * (l - 1);
    let mut d_pooled = double_conv_backward(
        &trace.bottleneck,
        dc_params(&tensors[base..]),
        d_block,
        dc_grads(&mut grads[base..]),
        l > 1,
    );
    for level in (0..l - 1).rev() {
        let (dc, dn) = &trace.encoder[level];
        let mut d_output = down_backward(dn, &d_pooled.take().expect("pooled gradient"));
        if let Some(skip) = d_skip[level].take() {
            for (g, s) in d_output.data.iter_mut().zip(skip.data) {
                *g += s;
            }
        }
        let base = 4 * level;
        d_pooled = double_conv_backward(
            dc,
            dc_params(&tensors[base..]),
            d_output,
            dc_grads(&mut grads[base..]),
            level > 0,
        );
    }
}

/// A Core UNet or WF-UNet with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    pub kind: ModelKind,
    pub config: CoreUNetConfig,
    pub params: ParameterSet<T>,
    /// Seed used for initialization; recorded in checkpoints.
    pub seed: u64,
}

impl<T: Scalar> Network<T> {
    /// Random fan-in scaled initialization: rectified layers use a standard
    /// deviation of `sqrt(2 / fan_in)`, the linear head and fusion layers
    /// `sqrt(1 / fan_in)`; biases start at zero.
    pub fn new(kind: ModelKind, config: CoreUNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = model_layout(kind, &config);
        let per_stream = stream_layout(&config).len();
        let mut tensors = Vec::with_capacity(layout.len());
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0]));
        for (i, (name, shape)) in layout.into_iter().enumerate() {
            if i % per_stream == 0 && i < 2 * per_stream {
                rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[(i / per_stream) as u64]));
            }
            let mut t = Tensor::zeros(name, shape);
            if t.name.ends_with("weight") {
                let (fan_in, gain) = if t.shape.len() == 5 && t.shape[2..] == [3, 3, 3] {
                    (t.shape[1] * KERNEL_VOLUME, 2.0)
                } else {
                    (t.shape[1..].iter().product::<usize>(), 1.0)
                };
                let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("finite std");
                t.data.iter_mut().for_each(|v| *v = T::of(normal.sample(&mut rng)));
            }
            tensors.push(t);
        }
        Ok(Network {
            kind,
            config,
            params: ParameterSet { tensors },
            seed,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    fn stream_tensors(&self) -> usize {
        8 * self.config.levels - 2
    }

    fn check_input(&self, input: &ModelInput<'_, T>) -> Result<()> {
        let n = self.config.window_len();
        if input.precip.len() != n {
            return Err(Error::Config(format!(
                "precipitation window has {} values, model expects {n}",
                input.precip.len()
            )));
        }
        if self.kind == ModelKind::WfUNet {
            match input.wind {
                None => return Err(Error::Alignment("WF-UNet needs a wind-speed window".into())),
                Some(w) if w.len() != input.precip.len() => {
                    return Err(Error::Alignment(format!(
                        "wind-speed window has {} values, precipitation window {}",
                        w.len(),
                        input.precip.len()
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    /// Full forward pass. `dropout_seed` selects training mode.
    pub fn forward(&self, input: &ModelInput<'_, T>, dropout_seed: Option<u64>) -> Result<(Vec<T>, Trace<T>)> {
        self.check_input(input)?;
        let k = self.stream_tensors();
        let tensors = &self.params.tensors;
        match self.kind {
            ModelKind::CoreUNet => {
                let (out, trace) = forward_stream(&tensors[..k], &self.config, input.precip, dropout_seed)?;
                Ok((out, Trace::Core(trace)))
            }
            ModelKind::WfUNet => {
                let wind = input.wind.expect("checked");
                let (p, precip) = forward_stream(
                    &tensors[..k],
                    &self.config,
                    input.precip,
                    dropout_seed.map(|s| derive_seed(s, &[0])),
                )?;
                let (w, wind) =
                    forward_stream(&tensors[k..2 * k], &self.config, wind, dropout_seed.map(|s| derive_seed(s, &[1])))?;
                let out = fuse(&tensors[2 * k].data, tensors[2 * k + 1].data[0], &p, &w);
                Ok((
                    out,
                    Trace::Wf {
                        precip,
                        wind,
                        precip_out: p,
                        wind_out: w,
                    },
                ))
            }
        }
    }

    /// Evaluation-mode prediction (dropout off).
    pub fn predict(&self, input: &ModelInput<'_, T>) -> Result<Vec<T>> {
        Ok(self.forward(input, None)?.0)
    }

    /// Pre-fusion frames of the precipitation and wind streams.
    pub fn stream_outputs(&self, input: &ModelInput<'_, T>) -> Result<(Vec<T>, Vec<T>)> {
        if self.kind != ModelKind::WfUNet {
            return Err(Error::Config("stream outputs exist only for wf-unet".into()));
        }
        match self.forward(input, None)?.1 {
            Trace::Wf {
                precip_out, wind_out, ..
            } => Ok((precip_out, wind_out)),
            Trace::Core(_) => unreachable!("wf-unet yields a fused trace"),
        }
    }

    /// Accumulates `d loss / d params` into `grads` given `d loss / d output`.
    pub fn backward(&self, trace: &Trace<T>, d_out: &[T], grads: &mut ParameterSet<T>) {
        assert_eq!(d_out.len(), self.config.frame_len(), "output gradient size");
        let k = self.stream_tensors();
        let tensors = &self.params.tensors;
        match trace {
            Trace::Core(s) => backward_stream(&tensors[..k], &mut grads.tensors[..k], &self.config, s, d_out),
            Trace::Wf {
                precip,
                wind,
                precip_out,
                wind_out,
            } => {
                let (a, b) = (tensors[2 * k].data[0], tensors[2 * k].data[1]);
                {
                    let fusion = &mut grads.tensors[2 * k..];
                    let (gw, gb) = fusion.split_at_mut(1);
                    for ((&g, &p), &w) in d_out.iter().zip(precip_out).zip(wind_out) {
                        gw[0].data[0] += g * p;
                        gw[0].data[1] += g * w;
                        gb[0].data[0] += g;
                    }
                }
                let dp: Vec<T> = d_out.iter().map(|&g| g * a).collect();
                let dw: Vec<T> = d_out.iter().map(|&g| g * b).collect();
                let (gp, rest) = grads.tensors.split_at_mut(k);
                backward_stream(&tensors[..k], gp, &self.config, precip, &dp);
                backward_stream(&tensors[k..2 * k], &mut rest[..k], &self.config, wind, &dw);
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            kind: self.kind,
            config: self.config.clone(),
            params: self.params.cast(),
            seed: self.seed,
        }
    }
}

/// `a * p + b * w + c` per pixel.
pub fn fuse<T: Scalar>(weights: &[T], bias: T, p: &[T], w: &[T]) -> Vec<T> {
    let (a, b) = (weights[0], weights[1]);
    p.iter().zip(w).map(|(&p, &w)| a * p + b * w + bias).collect()
}
