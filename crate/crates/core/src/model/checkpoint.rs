use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FastPitch, ModelConfig};
use crate::dsp::MelConfig;
use crate::error::{Error, Result};
use crate::prosody::PitchStats;
use crate::tensor_file::{read_tensor, write_tensor};
use crate::text::Vocabulary;

const MANIFEST: &str = "manifest.json";
const PARAMS_DIR: &str = "params";

/// A model with everything needed to synthesize from text.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: FastPitch,
    pub pitch_stats: PitchStats,
    pub vocabulary: Vocabulary,
    /// Feature extraction settings the model was trained on; needed to turn
    /// its output back into audio.
    pub audio: MelConfig,
    pub step: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    pitch_stats: PitchStats,
    vocabulary: Vocabulary,
    audio: MelConfig,
    step: u64,
    parameters: Vec<String>,
}

impl Checkpoint {
    /// Writes `manifest.json` and one tensor file pair per parameter under
    /// `params/`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let params_dir = dir.join(PARAMS_DIR);
        fs::create_dir_all(&params_dir).map_err(|e| Error::io(&params_dir, e))?;
        let store = self.model.params();
        for (name, tensor) in store.iter() {
            write_tensor(&params_dir.join(name), tensor, None)?;
        }
        let manifest = Manifest {
            config: self.model.config().clone(),
            pitch_stats: self.pitch_stats,
            vocabulary: self.vocabulary.clone(),
            audio: self.audio.clone(),
            step: self.step,
            parameters: store.iter().map(|(n, _)| n.to_string()).collect(),
        };
        let path = dir.join(MANIFEST);
        fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_slice(&bytes).map_err(|e| Error::Format {
            path: path.clone(),
            msg: e.to_string(),
        })?;
        if manifest.vocabulary.len() != manifest.config.vocab_size {
            return Err(Error::Format {
                path,
                msg: format!(
                    "vocabulary has {} symbols but config expects {}",
                    manifest.vocabulary.len(),
                    manifest.config.vocab_size
                ),
            });
        }
        if manifest.audio.n_mels != manifest.config.n_mels {
            return Err(Error::Format {
                path,
                msg: format!(
                    "audio settings give {} mel bands but the model emits {}",
                    manifest.audio.n_mels, manifest.config.n_mels
                ),
            });
        }
        manifest.audio.validate()?;
        PitchStats::new(manifest.pitch_stats.mean_hz, manifest.pitch_stats.std_hz)?;
        let mut model = FastPitch::new(manifest.config, 0)?;
        let params_dir = dir.join(PARAMS_DIR);
        let expected: Vec<String> = model.params().iter().map(|(n, _)| n.to_string()).collect();
        if expected != manifest.parameters {
            return Err(Error::Format {
                path,
                msg: "parameter list does not match the configured architecture".into(),
            });
        }
        for name in &expected {
            let (tensor, _) = read_tensor(&params_dir.join(name))?;
            let store = model.params_mut();
            let id = store.id_of(name).expect("name taken from this store");
            if tensor.shape() != store.get(id).shape() {
                return Err(Error::shape(
                    "checkpoint parameter",
                    format!("{name} {:?}", store.get(id).shape()),
                    format!("{:?}", tensor.shape()),
                ));
            }
            store.set(id, tensor.into_data())?;
        }
        Ok(Self {
            model,
            pitch_stats: manifest.pitch_stats,
            vocabulary: manifest.vocabulary,
            audio: manifest.audio,
            step: manifest.step,
        })
    }
}
