//! Run configuration: built-in defaults, overlaid by a JSON file, overlaid
//! by command flags. The resolved value is what gets persisted.

use std::path::{Path, PathBuf};

use dbenet_core::fusion::ModelConfig;
use dbenet_core::io::SynthSceneConfig;
use dbenet_core::registration::{MatchMode, RansacConfig};
use dbenet_core::training::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::exit::{At, Failure, CONFIG};

/// Default output directory when neither `--out` nor the config names one.
pub const OUT_DIR_ENV: &str = "DBENET_OUT_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Global seed; copied into the training and RANSAC seeds.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub synth: SynthSceneConfig,
    pub train: TrainConfig,
    pub ransac: RansacConfig,
    pub match_mode: MatchMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::desk();
        let voxel = model.sfcn.voxel_size;
        Self {
            seed: 0,
            out_dir: std::env::var_os(OUT_DIR_ENV).map_or_else(|| PathBuf::from("dbenet-out"), PathBuf::from),
            model,
            synth: SynthSceneConfig::desk(),
            train: TrainConfig::for_voxel(voxel),
            ransac: RansacConfig::for_voxel(voxel),
            match_mode: MatchMode::Mutual,
        }
    }
}

/// Overlays `over` onto `base`. Objects merge key by key; anything else is
/// replaced. Keys absent from `base` are rejected so typos surface.
fn merge(base: &mut Value, over: Value, path: &str) -> Result<(), String> {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                let here = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &here)?,
                    None => return Err(format!("unknown config key `{here}`")),
                }
            }
            Ok(())
        }
        (b, o) => {
            *b = o;
            Ok(())
        }
    }
}

impl RunConfig {
    /// Defaults overlaid by `file`, if given. Flags are applied by the caller,
    /// which then calls [`RunConfig::finish`].
    pub fn load(file: Option<&Path>) -> Result<Self, Failure> {
        let mut value = serde_json::to_value(Self::default()).at(CONFIG)?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Failure::new(CONFIG, format!("{}: {e}", path.display())))?;
            let over: Value = serde_json::from_str(&text).map_err(|e| Failure::new(CONFIG, format!("{}: {e}", path.display())))?;
            merge(&mut value, over, "").map_err(|e| Failure::new(CONFIG, format!("{}: {e}", path.display())))?;
        }
        serde_json::from_value(value).at(CONFIG)
    }

    /// Propagates the global seed and validates every section.
    pub fn finish(mut self, seed: Option<u64>) -> Result<Self, Failure> {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.train.seed = self.seed;
        self.ransac.seed = self.seed;
        self.model.validate().at(CONFIG)?;
        self.synth.validate().at(CONFIG)?;
        self.train.validate().at(CONFIG)?;
        self.ransac.validate().at(CONFIG)?;
        Ok(self)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn nested_keys_merge_and_typos_fail() {
        let mut base = json!({"a": {"b": 1, "c": 2}, "d": null});
        merge(&mut base, json!({"a": {"c": 5}, "d": {"x": 1}}), "").unwrap();
        assert_eq!(base, json!({"a": {"b": 1, "c": 5}, "d": {"x": 1}}));
        assert_eq!(merge(&mut base, json!({"a": {"q": 0}}), "").unwrap_err(), "unknown config key `a.q`");
    }

    #[test]
    fn defaults_round_trip_through_json() {
        let c = RunConfig::default().finish(Some(3)).unwrap();
        let back: RunConfig = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert_eq!((c.train.seed, c.ransac.seed), (3, 3));
    }
}
