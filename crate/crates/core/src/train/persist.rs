use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;

use super::{ModelConfig, SmilModel, TrainError};

pub const MODEL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Parameter {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize)]
struct ModelFile<'a> {
    version: u32,
    config: &'a ModelConfig,
    parameters: Vec<Parameter>,
}

#[derive(Deserialize)]
struct VersionProbe {
    version: u32,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFileOwned {
    #[allow(dead_code)]
    version: u32,
    config: ModelConfig,
    parameters: Vec<Parameter>,
}

pub fn model_to_json(model: &SmilModel) -> String {
    let parameters = model
        .params
        .iter()
        .map(|(name, t)| Parameter {
            name: name.clone(),
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        })
        .collect();
    let mut s = serde_json::to_string(&ModelFile {
        version: MODEL_VERSION,
        config: &model.config,
        parameters,
    })
    .expect("model serializes");
    s.push('\n');
    s
}

pub fn model_from_json(text: &str) -> Result<SmilModel, TrainError> {
    let probe: VersionProbe =
        serde_json::from_str(text).map_err(|e| TrainError::Format(e.to_string()))?;
    if probe.version != MODEL_VERSION {
        return Err(TrainError::Version {
            found: probe.version,
            expected: MODEL_VERSION,
        });
    }
    let mut de = serde_json::Deserializer::from_str(text);
    let file: ModelFileOwned = serde_path_to_error::deserialize(&mut de)
        .map_err(|e| TrainError::Format(format!("at `{}`: {}", e.path(), e.inner())))?;
    let mut params = BTreeMap::new();
    for p in file.parameters {
        let t = Tensor::new(p.shape, p.data)
            .map_err(|e| TrainError::Format(format!("parameter `{}`: {e}", p.name)))?;
        if params.insert(p.name.clone(), t).is_some() {
            return Err(TrainError::Format(format!(
                "duplicate parameter `{}`",
                p.name
            )));
        }
    }
    SmilModel::from_parts(file.config, params)
}

pub fn save_model(model: &SmilModel, path: &Path) -> Result<(), TrainError> {
    std::fs::write(path, model_to_json(model)).map_err(|source| TrainError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_model(path: &Path) -> Result<SmilModel, TrainError> {
    let text = std::fs::read_to_string(path).map_err(|source| TrainError::Io {
        path: path.display().to_string(),
        source,
    })?;
    model_from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::Aggregator;

    fn model() -> SmilModel {
        let mut cfg = ModelConfig::new(4, vec![1, 2, 3], Aggregator::SmilWeighted);
        cfg.hidden = 5;
        cfg.filters = 3;
        SmilModel::init(cfg, 11).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let m = model();
        let text = model_to_json(&m);
        let back = model_from_json(&text).unwrap();
        assert_eq!(back, m);
        assert_eq!(model_to_json(&back), text);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let text = model_to_json(&model());
        assert!(matches!(
            model_from_json(&text[..text.len() / 2]),
            Err(TrainError::Format(_))
        ));
    }

    #[test]
    fn version_mismatch_names_both() {
        let text = model_to_json(&model()).replacen("\"version\":1", "\"version\":7", 1);
        let err = model_from_json(&text).unwrap_err().to_string();
        assert!(err.contains('7') && err.contains("expected 1"), "{err}");
    }

    #[test]
    fn unknown_aggregator_is_named() {
        let text = model_to_json(&model()).replace("smil_weighted", "median_pool");
        let err = model_from_json(&text).unwrap_err().to_string();
        assert!(err.contains("median_pool"), "{err}");
    }

    #[test]
    fn wrong_shape_is_rejected() {
        let mut m = model();
        m.params.insert("fusion".into(), Tensor::zeros(&[2]));
        let err = model_from_json(&model_to_json(&m)).unwrap_err().to_string();
        assert!(err.contains("fusion"), "{err}");
    }
}
