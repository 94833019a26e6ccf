//! Checkpoint directories: `meta.json` (model kind, configuration, layer
//! table, creation seed) and `params.bin` (layers concatenated in table
//! order as little-endian `f32`).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::atomic;
use crate::error::{Error, Result};
use crate::model::{model_layout, CoreUNetConfig, ModelKind, Network};
use crate::tensor::{ParameterSet, Scalar, Tensor};

pub const META_FILE: &str = "meta.json";
pub const PARAMS_FILE: &str = "params.bin";
const FORMAT: &str = "nowcast-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub kind: ModelKind,
    pub config: CoreUNetConfig,
    pub seed: u64,
    pub layers: Vec<LayerEntry>,
}

fn encode_params<T: Scalar>(params: &ParameterSet<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(params.count() * 4);
    for v in params.values() {
        out.extend_from_slice(&(v.f64() as f32).to_le_bytes());
    }
    out
}

pub fn save_checkpoint<T: Scalar>(net: &Network<T>, dir: &Path) -> Result<()> {
    let meta = CheckpointMeta {
        format: FORMAT.into(),
        kind: net.kind,
        config: net.config.clone(),
        seed: net.seed,
        layers: net
            .params
            .tensors
            .iter()
            .map(|t| LayerEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_vec_pretty(&meta).map_err(|e| Error::json("checkpoint meta", e))?;
    let bin = encode_params(&net.params);
    atomic::write_dir(dir, |tmp| {
        atomic::write_file(&tmp.join(META_FILE), &json)?;
        atomic::write_file(&tmp.join(PARAMS_FILE), &bin)
    })
}

pub fn read_meta(dir: &Path) -> Result<CheckpointMeta> {
    let path = dir.join(META_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let meta: CheckpointMeta = serde_json::from_slice(&bytes).map_err(|e| Error::json(path.display().to_string(), e))?;
    if meta.format != FORMAT {
        return Err(Error::Corruption {
            layer: "<meta>".into(),
            message: format!("unknown format `{}`", meta.format),
        });
    }
    Ok(meta)
}

/// Loads a checkpoint, refusing one of a different kind when `expected`
/// is given.
pub fn load_checkpoint(dir: &Path, expected: Option<ModelKind>) -> Result<Network<f32>> {
    let meta = read_meta(dir)?;
    if let Some(kind) = expected.filter(|&k| k != meta.kind) {
        return Err(Error::ModelKind {
            expected: kind.to_string(),
            found: meta.kind.to_string(),
        });
    }
    meta.config.validate()?;
    let layout = model_layout(meta.kind, &meta.config);
    if layout.len() != meta.layers.len() {
        return Err(Error::Corruption {
            layer: "<meta>".into(),
            message: format!("layer table has {} entries, configuration implies {}", meta.layers.len(), layout.len()),
        });
    }
    for ((name, shape), entry) in layout.iter().zip(&meta.layers) {
        if *name != entry.name || *shape != entry.shape {
            return Err(Error::Corruption {
                layer: entry.name.clone(),
                message: format!("table says {:?}, configuration implies `{name}` {:?}", entry.shape, shape),
            });
        }
    }
    let path = dir.join(PARAMS_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let mut offset = 0usize;
    let mut tensors = Vec::with_capacity(layout.len());
    for (name, shape) in layout {
        let len: usize = shape.iter().product();
        let end = offset + 4 * len;
        if end > bytes.len() {
            return Err(Error::Corruption {
                layer: name,
                message: format!(
                    "params.bin truncated: layer needs bytes {offset}..{end}, file has {}",
                    bytes.len()
                ),
            });
        }
        let data: Vec<f32> = bytes[offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
            .collect();
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Corruption {
                layer: name,
                message: format!("non-finite value at index {i}"),
            });
        }
        tensors.push(Tensor { name, shape, data });
        offset = end;
    }
    if offset != bytes.len() {
        return Err(Error::Corruption {
            layer: "<end>".into(),
            message: format!("{} trailing bytes after the last layer", bytes.len() - offset),
        });
    }
    Ok(Network {
        kind: meta.kind,
        config: meta.config,
        params: ParameterSet { tensors },
        seed: meta.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelInput;

    fn tiny() -> CoreUNetConfig {
        CoreUNetConfig {
            levels: 2,
            base_channels: 2,
            input_lag: 2,
            height: 4,
            width: 4,
            dropout_rate: 0.5,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("wf");
        let net = Network::<f32>::new(ModelKind::WfUNet, tiny(), 42).unwrap();
        save_checkpoint(&net, &path).unwrap();
        let back = load_checkpoint(&path, Some(ModelKind::WfUNet)).unwrap();
        assert_eq!(back, net);
        let x: Vec<f32> = (0..32).map(|i| i as f32 / 32.0).collect();
        let input = ModelInput { precip: &x, wind: Some(&x) };
        assert_eq!(net.predict(&input).unwrap(), back.predict(&input).unwrap());
        let meta = read_meta(&path).unwrap();
        let decoder = meta.layers.iter().position(|l| l.name == "stream_precip/dec0.conv1.weight").unwrap();
        assert_eq!(meta.layers[decoder].shape, vec![2, 6, 3, 3, 3]);
    }

    #[test]
    fn truncation_names_the_layer() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("core");
        let net = Network::<f32>::new(ModelKind::CoreUNet, tiny(), 1).unwrap();
        save_checkpoint(&net, &path).unwrap();
        let bin = path.join(PARAMS_FILE);
        let bytes = fs::read(&bin).unwrap();
        fs::write(&bin, &bytes[..bytes.len() - 10]).unwrap();
        match load_checkpoint(&path, None) {
            Err(Error::Corruption { layer, .. }) => assert_eq!(layer, "head.weight"),
            other => panic!("{other:?}"),
        }
        fs::write(&bin, [&bytes[..], &[0u8; 4]].concat()).unwrap();
        assert!(matches!(load_checkpoint(&path, None), Err(Error::Corruption { .. })));
    }

    #[test]
    fn kind_mismatch_is_explicit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("wf");
        save_checkpoint(&Network::<f32>::new(ModelKind::WfUNet, tiny(), 1).unwrap(), &path).unwrap();
        match load_checkpoint(&path, Some(ModelKind::CoreUNet)) {
            Err(Error::ModelKind { expected, found }) => {
                assert_eq!(expected, "core-unet");
                assert_eq!(found, "wf-unet");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn shape_table_mismatch_is_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("core");
        save_checkpoint(&Network::<f32>::new(ModelKind::CoreUNet, tiny(), 1).unwrap(), &path).unwrap();
        let mut meta = read_meta(&path).unwrap();
        meta.layers[2].shape[0] = 3;
        fs::write(path.join(META_FILE), serde_json::to_vec(&meta).unwrap()).unwrap();
        match load_checkpoint(&path, None) {
            Err(Error::Corruption { layer, .. }) => assert_eq!(layer, "enc0.conv2.weight"),
            other => panic!("{other:?}"),
        }
    }
}
