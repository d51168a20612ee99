//! Scenario documents, corpus files, and model checkpoints.
//!
//! Three formats, all versioned through a `schema_version` field that is
//! checked before anything else is decoded:
//!
//! * **Scenario** — one pretty-printed JSON document per file. JSON numbers
//!   are emitted with round-trip-exact decimal encoding, so `load(save(x))`
//!   reproduces every float bit-for-bit.
//! * **Corpus** — JSON lines: a header record carrying the deduplicated
//!   maps, then one record per scene referencing its map by id. Loading
//!   restores map sharing (scenes with the same `map_id` point at one
//!   allocation) and re-runs scene validation.
//! * **Checkpoint** — a single JSON header line (dimensions and parameter
//!   count) followed by the raw little-endian IEEE-754 weight blob, which
//!   keeps weights exact and files compact.

use super::{
    check_schema_version, json_error_offset, read_file, read_file_bytes, write_file, IoError,
    ScenarioDocument, CHECKPOINT_SCHEMA_VERSION, CORPUS_SCHEMA_VERSION,
};
use crate::motion_prior::{ModelConfig, MotionPriorModel};
use crate::scene::{Scene, SceneMap, Trajectory};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

pub fn save_scenario(doc: &ScenarioDocument, path: &Path) -> Result<(), IoError> {
    doc.validate()?;
    let mut text = serde_json::to_string_pretty(doc)
        .map_err(|e| IoError::InvalidDocument(format!("unserializable document: {e}")))?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

pub fn load_scenario(path: &Path) -> Result<ScenarioDocument, IoError> {
    let text = read_file(path)?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| parse_error(path, &text, 0, &e))?;
    check_schema_version(&value, super::SCENARIO_SCHEMA_VERSION, path)?;
    // Decode from the text, not the value, so shape errors keep their
    // line/column information.
    let doc: ScenarioDocument =
        serde_json::from_str(&text).map_err(|e| parse_error(path, &text, 0, &e))?;
    doc.validate()?;
    // Deserialization bypasses the scene constructor; re-run its checks
    // (ego present, shared clock, unique ids) before handing the scene out.
    let ScenarioDocument {
        schema_version,
        scene,
        provenance,
        indicators,
        risk_label,
        loss_history,
    } = doc;
    let scene = Scene::new(
        scene.agents,
        scene.map,
        scene.ego_id,
        scene.history_horizon,
        scene.future_horizon,
    )?;
    Ok(ScenarioDocument {
        schema_version,
        scene,
        provenance,
        indicators,
        risk_label,
        loss_history,
    })
}

#[derive(Serialize)]
struct CorpusHeaderRef<'a> {
    schema_version: u32,
    num_scenes: usize,
    maps: Vec<&'a SceneMap<f64>>,
}

// The version field is checked against the raw JSON before this struct is
// decoded, so it is not repeated here.
#[derive(Deserialize)]
struct CorpusHeader {
    num_scenes: usize,
    maps: Vec<SceneMap<f64>>,
}

#[derive(Serialize)]
struct SceneRecordRef<'a> {
    map_id: u64,
    ego_id: i64,
    history_horizon: usize,
    future_horizon: usize,
    agents: &'a [Trajectory<f64>],
}

#[derive(Deserialize)]
struct SceneRecord {
    map_id: u64,
    ego_id: i64,
    history_horizon: usize,
    future_horizon: usize,
    agents: Vec<Trajectory<f64>>,
}

/// Write scenes as JSON lines, storing each distinct map once in the
/// header. Two scenes may share a `map_id` only if they carry the same map.
pub fn save_corpus(scenes: &[Scene<f64>], path: &Path) -> Result<(), IoError> {
    let mut maps: BTreeMap<u64, &Arc<SceneMap<f64>>> = BTreeMap::new();
    for scene in scenes {
        match maps.entry(scene.map.map_id) {
            Entry::Vacant(slot) => {
                slot.insert(&scene.map);
            }
            Entry::Occupied(slot) => {
                if !Arc::ptr_eq(slot.get(), &scene.map)
                    && slot.get().as_ref() != scene.map.as_ref()
                {
                    return Err(IoError::InvalidDocument(format!(
                        "map_id {} refers to two different maps",
                        scene.map.map_id
                    )));
                }
            }
        }
    }
    let header = CorpusHeaderRef {
        schema_version: CORPUS_SCHEMA_VERSION,
        num_scenes: scenes.len(),
        maps: maps.values().map(|m| m.as_ref()).collect(),
    };
    let serialize_line = |e: serde_json::Error| {
        IoError::InvalidDocument(format!("unserializable corpus entry: {e}"))
    };
    let mut out = serde_json::to_string(&header).map_err(serialize_line)?;
    out.push('\n');
    for scene in scenes {
        let record = SceneRecordRef {
            map_id: scene.map.map_id,
            ego_id: scene.ego_id,
            history_horizon: scene.history_horizon,
            future_horizon: scene.future_horizon,
            agents: &scene.agents,
        };
        out.push_str(&serde_json::to_string(&record).map_err(serialize_line)?);
        out.push('\n');
    }
    write_file(path, out.as_bytes())
}

pub fn load_corpus(path: &Path) -> Result<Vec<Scene<f64>>, IoError> {
    let text = read_file(path)?;
    let mut lines = text.split_inclusive('\n');
    let header_line = lines.next().filter(|l| !l.trim().is_empty()).ok_or_else(|| {
        IoError::Parse {
            path: path.to_path_buf(),
            offset: 0,
            message: "empty corpus file".into(),
        }
    })?;
    let value: serde_json::Value =
        serde_json::from_str(header_line).map_err(|e| parse_error(path, header_line, 0, &e))?;
    check_schema_version(&value, CORPUS_SCHEMA_VERSION, path)?;
    let header: CorpusHeader =
        serde_json::from_str(header_line).map_err(|e| parse_error(path, header_line, 0, &e))?;
    let maps: BTreeMap<u64, Arc<SceneMap<f64>>> = header
        .maps
        .into_iter()
        .map(|m| (m.map_id, Arc::new(m)))
        .collect();

    let mut offset = header_line.len();
    let mut scenes = Vec::with_capacity(header.num_scenes);
    for line in lines {
        if !line.trim().is_empty() {
            let record: SceneRecord =
                serde_json::from_str(line).map_err(|e| parse_error(path, line, offset, &e))?;
            let map = maps.get(&record.map_id).ok_or_else(|| {
                IoError::InvalidDocument(format!(
                    "scene references unknown map_id {}",
                    record.map_id
                ))
            })?;
            scenes.push(Scene::new(
                record.agents,
                Arc::clone(map),
                record.ego_id,
                record.history_horizon,
                record.future_horizon,
            )?);
        }
        offset += line.len();
    }
    if scenes.len() != header.num_scenes {
        return Err(IoError::InvalidDocument(format!(
            "corpus header promises {} scenes, file has {}",
            header.num_scenes,
            scenes.len()
        )));
    }
    Ok(scenes)
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    schema_version: u32,
    config: ModelConfig,
    param_count: usize,
}

/// Write the model as a JSON header line plus the raw little-endian `f64`
/// weight blob, in parameter-iteration order.
pub fn save_checkpoint(model: &MotionPriorModel<f64>, path: &Path) -> Result<(), IoError> {
    let config = ModelConfig {
        history_horizon: model.history_horizon,
        future_horizon: model.future_horizon,
        hidden_dim: model.hidden_dim,
        latent_dim: model.latent_dim,
        encoder_depth: model.graph_encoder.layers.len(),
    };
    let param_count = model.num_params();
    let header = CheckpointHeader {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        config,
        param_count,
    };
    let mut bytes = serde_json::to_string(&header)
        .map_err(|e| IoError::InvalidDocument(format!("unserializable header: {e}")))?
        .into_bytes();
    bytes.push(b'\n');
    bytes.reserve(param_count * 8);
    model.for_each_param(&mut |p| bytes.extend_from_slice(&p.to_le_bytes()));
    write_file(path, &bytes)
}

pub fn load_checkpoint(path: &Path) -> Result<MotionPriorModel<f64>, IoError> {
    let bytes = read_file_bytes(path)?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| IoError::Parse {
            path: path.to_path_buf(),
            offset: bytes.len(),
            message: "missing header line terminator".into(),
        })?;
    let header_text = std::str::from_utf8(&bytes[..nl]).map_err(|e| IoError::Parse {
        path: path.to_path_buf(),
        offset: e.valid_up_to(),
        message: "header is not UTF-8".into(),
    })?;
    let value: serde_json::Value =
        serde_json::from_str(header_text).map_err(|e| parse_error(path, header_text, 0, &e))?;
    check_schema_version(&value, CHECKPOINT_SCHEMA_VERSION, path)?;
    let header: CheckpointHeader =
        serde_json::from_str(header_text).map_err(|e| parse_error(path, header_text, 0, &e))?;

    let blob = &bytes[nl + 1..];
    if blob.len() != header.param_count * 8 {
        return Err(IoError::Parse {
            path: path.to_path_buf(),
            offset: nl + 1,
            message: format!(
                "weight blob is {} bytes, header promises {}",
                blob.len(),
                header.param_count * 8
            ),
        });
    }
    // The seed is irrelevant: every parameter is overwritten from the blob.
    let mut model = MotionPriorModel::<f64>::init(&header.config, &mut ChaCha8Rng::seed_from_u64(0));
    if model.num_params() != header.param_count {
        return Err(IoError::InvalidDocument(format!(
            "param_count {} disagrees with the declared dimensions ({} parameters)",
            header.param_count,
            model.num_params()
        )));
    }
    let mut chunks = blob.chunks_exact(8);
    model.for_each_param_mut(&mut |p| {
        let chunk = chunks.next().expect("blob length checked above");
        *p = f64::from_le_bytes(chunk.try_into().expect("chunks are 8 bytes"));
    });
    Ok(model)
}

fn parse_error(path: &Path, text: &str, base: usize, e: &serde_json::Error) -> IoError {
    IoError::Parse {
        path: path.to_path_buf(),
        offset: base + json_error_offset(text, e),
        message: e.to_string(),
    }
}
