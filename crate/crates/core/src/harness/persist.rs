use std::io::Write as _;
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{AdapterMeta, BackboneSpec, Layer, LoraAdapter, LoraLayer, Weights};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MatrixFile {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl MatrixFile {
    fn from(m: &Matrix) -> Self {
        Self { rows: m.rows(), cols: m.cols(), values: m.as_slice().to_vec() }
    }

    fn into_matrix(self, path: &Path) -> Result<Matrix> {
        Matrix::from_vec(self.rows, self.cols, self.values).map_err(|e| malformed(path, e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdapterLayerFile {
    layer: usize,
    b: MatrixFile,
    a: MatrixFile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdapterFile {
    format_version: u32,
    backbone_fingerprint: String,
    task_id: String,
    protection: String,
    rank: usize,
    alpha: f64,
    seed: u64,
    layers: Vec<AdapterLayerFile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightsLayerFile {
    weight: MatrixFile,
    bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightsFile {
    format_version: u32,
    fingerprint: String,
    spec: BackboneSpec,
    layers: Vec<WeightsLayerFile>,
}

#[derive(Deserialize)]
struct VersionProbe {
    format_version: u32,
}

fn malformed(path: &Path, reason: impl Into<String>) -> Error {
    Error::Malformed { path: path.display().to_string(), reason: reason.into() }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// SHA-256 over the architecture and the exact bit patterns of every
/// parameter.
pub fn fingerprint(w: &Weights) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&w.spec).expect("spec serialises"));
    for l in &w.layers {
        for v in l.weight.as_slice().iter().chain(&l.bias) {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    hex(&h.finalize())
}

fn write_atomic(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(text.as_bytes())?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn read_versioned<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    let probe: VersionProbe = serde_json::from_str(&text).map_err(|e| malformed(path, e.to_string()))?;
    if probe.format_version != FORMAT_VERSION {
        return Err(Error::VersionMismatch { found: probe.format_version, expected: FORMAT_VERSION });
    }
    serde_json::from_str(&text).map_err(|e| malformed(path, e.to_string()))
}

/// Writes `a` as JSON; `base` supplies the fingerprint of the frozen weights.
pub fn save_adapter(a: &LoraAdapter, base: &Weights, path: &Path) -> Result<()> {
    let file = AdapterFile {
        format_version: FORMAT_VERSION,
        backbone_fingerprint: fingerprint(base),
        task_id: a.meta.task_id.clone(),
        protection: a.meta.protection.clone(),
        rank: a.rank,
        alpha: a.alpha,
        seed: a.meta.seed,
        layers: a
            .layers
            .iter()
            .map(|l| AdapterLayerFile { layer: l.layer, b: MatrixFile::from(&l.b), a: MatrixFile::from(&l.a) })
            .collect(),
    };
    write_atomic(path, &serde_json::to_string_pretty(&file).expect("adapter serialises"))
}

/// Loads an adapter; a fingerprint that disagrees with `base` is logged
/// as a warning.
pub fn load_adapter(path: &Path, base: Option<&Weights>) -> Result<LoraAdapter> {
    let file: AdapterFile = read_versioned(path)?;
    if let Some(w) = base {
        if fingerprint(w) != file.backbone_fingerprint {
            log::warn!("{}: adapter was trained on a different base model", path.display());
        }
    }
    let mut layers = Vec::with_capacity(file.layers.len());
    for l in file.layers {
        let b = l.b.into_matrix(path)?;
        let a = l.a.into_matrix(path)?;
        if b.cols() != file.rank || a.rows() != file.rank {
            return Err(malformed(path, format!("layer {} factors disagree with rank {}", l.layer, file.rank)));
        }
        layers.push(LoraLayer { layer: l.layer, b, a });
    }
    if layers.is_empty() {
        return Err(malformed(path, "adapter has no layers"));
    }
    Ok(LoraAdapter {
        rank: file.rank,
        alpha: file.alpha,
        layers,
        meta: AdapterMeta { task_id: file.task_id, seed: file.seed, protection: file.protection },
    })
}

pub fn save_weights(w: &Weights, path: &Path) -> Result<()> {
    let file = WeightsFile {
        format_version: FORMAT_VERSION,
        fingerprint: fingerprint(w),
        spec: w.spec.clone(),
        layers: w
            .layers
            .iter()
            .map(|l| WeightsLayerFile { weight: MatrixFile::from(&l.weight), bias: l.bias.clone() })
            .collect(),
    };
    write_atomic(path, &serde_json::to_string_pretty(&file).expect("weights serialise"))
}

pub fn load_weights(path: &Path) -> Result<Weights> {
    let file: WeightsFile = read_versioned(path)?;
    let layers = file
        .layers
        .into_iter()
        .map(|l| Ok(Layer { weight: l.weight.into_matrix(path)?, bias: l.bias }))
        .collect::<Result<Vec<_>>>()?;
    let w = Weights { spec: file.spec, layers };
    w.validate().map_err(|e| malformed(path, e.to_string()))?;
    if fingerprint(&w) != file.fingerprint {
        return Err(malformed(path, "fingerprint does not match the stored parameters"));
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneSpec;
    use rand_distr::{Distribution, StandardNormal};

    fn sample() -> (Weights, LoraAdapter) {
        let spec = BackboneSpec { input_dim: 4, hidden_dims: vec![5], num_classes: 2, ..Default::default() };
        let w = Weights::init(&spec, 9).unwrap();
        let mut a = LoraAdapter::init(
            &spec,
            &[0],
            2,
            2.0,
            AdapterMeta { task_id: "t1".into(), seed: 4, protection: "trap2".into() },
        )
        .unwrap();
        let mut r = crate::rng::stream(1, "persist", crate::rng::Purpose::Test);
        a.layers[0].b = Matrix::from_fn(5, 2, |_, _| StandardNormal.sample(&mut r));
        a.layers[0].b.as_mut_slice()[0] = 0.1 + 0.2;
        a.layers[0].b.as_mut_slice()[1] = f64::MIN_POSITIVE / 3.0;
        (w, a)
    }

    #[test]
    fn adapter_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (w, a) = sample();
        let p = dir.path().join("a.json");
        save_adapter(&a, &w, &p).unwrap();
        let back = load_adapter(&p, Some(&w)).unwrap();
        let bits = |x: &LoraAdapter| x.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&a));
        assert_eq!(back, a);
    }

    #[test]
    fn weights_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (w, _) = sample();
        let p = dir.path().join("w.json");
        save_weights(&w, &p).unwrap();
        assert_eq!(load_weights(&p).unwrap(), w);
        assert_eq!(fingerprint(&w), fingerprint(&load_weights(&p).unwrap()));
    }

    #[test]
    fn truncated_and_versioned_files() {
        let dir = tempfile::tempdir().unwrap();
        let (w, a) = sample();
        let p = dir.path().join("a.json");
        save_adapter(&a, &w, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        std::fs::write(&p, &text[..text.len() / 2]).unwrap();
        assert!(matches!(load_adapter(&p, None), Err(Error::Malformed { .. })));
        std::fs::write(&p, text.replace("\"format_version\": 1", "\"format_version\": 7")).unwrap();
        assert!(matches!(load_adapter(&p, None), Err(Error::VersionMismatch { found: 7, .. })));
        std::fs::write(&p, text.replace("\"rows\": 5", "\"rows\": 6")).unwrap();
        assert!(matches!(load_adapter(&p, None), Err(Error::Malformed { .. })));
    }
}
