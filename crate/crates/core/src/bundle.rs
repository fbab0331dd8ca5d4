//! A trained model on disk: the binary parameter checkpoint plus a JSON
//! sidecar (`<checkpoint>.json`) with the model configuration and, for face
//! scenes, the scene description needed to rebuild SECC inputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::checkpoint;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::renderer::Model;
use crate::scene::SceneSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub model: ModelConfig,
    #[serde(default)]
    pub scene: Option<SceneSpec>,
}

pub fn sidecar_path(checkpoint: impl AsRef<Path>) -> PathBuf {
    let mut s = checkpoint.as_ref().as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save_model(model: &Model, scene: Option<&SceneSpec>, path: impl AsRef<Path>) -> Result<()> {
    checkpoint::save(&model.params, path.as_ref())?;
    let side = Sidecar {
        model: model.config.clone(),
        scene: scene.cloned(),
    };
    std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&side)?)?;
    Ok(())
}

/// Loads and checks that every parameter the configuration calls for is
/// present with the right shape.
pub fn load_model(path: impl AsRef<Path>) -> Result<(Model, Option<SceneSpec>)> {
    let side: Sidecar = serde_json::from_str(&std::fs::read_to_string(sidecar_path(path.as_ref()))?)?;
    let params = checkpoint::load(path.as_ref())?;
    let reference = Model::init(side.model.clone(), 0)?;
    for (name, t) in reference.params.iter() {
        let got = params.get(name)?;
        if got.shape() != t.shape() {
            return Err(Error::Format(format!(
                "parameter {name} has shape {:?}, configuration needs {:?}",
                got.shape(),
                t.shape()
            )));
        }
    }
    if params.len() != reference.params.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} parameters, configuration needs {}",
            params.len(),
            reference.params.len()
        )));
    }
    Ok((
        Model {
            config: side.model,
            params,
        },
        side.scene,
    ))
}
