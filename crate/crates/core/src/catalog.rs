//! Scene metadata catalog, frame sampling plans and class-frequency capping.
//!
//! The catalog is a UTF-8 text file with one scene per line:
//!
//! ```text
//! # video_path,begin_frame,frame_count,label
//! episodes/s01e01.mkv,0,200,kitchen
//! episodes/s01e01.mkv,200,35,hallway
//! ```
//!
//! Blank lines and lines starting with `#` are ignored. The label is the
//! last field and may itself contain commas.

use std::collections::HashMap;
use std::io::BufRead;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default undersampling cap: no class keeps more than five times the
/// scene count of the rarest class.
pub const DEFAULT_CAP_FACTOR: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub video_path: String,
    pub begin_frame: u64,
    pub frame_count: u64,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Catalog {
    scenes: Vec<SceneRecord>,
    labels: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Catalog {
    /// Builds a catalog, assigning class ids by first appearance of each label.
    pub fn from_scenes(scenes: Vec<SceneRecord>) -> Self {
        let mut labels = Vec::new();
        let mut ids = HashMap::new();
        for scene in &scenes {
            if !ids.contains_key(&scene.label) {
                ids.insert(scene.label.clone(), labels.len());
                labels.push(scene.label.clone());
            }
        }
        Self { scenes, labels, ids }
    }

    pub fn scenes(&self) -> &[SceneRecord] {
        &self.scenes
    }

    /// Labels indexed by class id.
    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn class_id(&self, label: &str) -> Option<usize> {
        self.ids.get(label).copied()
    }

    pub fn class_of(&self, scene: &SceneRecord) -> usize {
        self.ids[&scene.label]
    }

    /// Number of scenes per class id.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.labels.len()];
        for scene in &self.scenes {
            counts[self.ids[&scene.label]] += 1;
        }
        counts
    }

    pub fn to_text(&self) -> String {
        serialize_catalog(self)
    }
}

pub fn parse_catalog<R: BufRead>(reader: R) -> Result<Catalog> {
    let mut scenes = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        scenes.push(parse_row(trimmed, line_no)?);
    }
    Ok(Catalog::from_scenes(scenes))
}

pub fn parse_catalog_str(text: &str) -> Result<Catalog> {
    parse_catalog(text.as_bytes())
}

fn parse_row(line: &str, line_no: usize) -> Result<SceneRecord> {
    let err = |message: String| Error::Parse {
        line: line_no,
        message,
    };
    let fields: Vec<&str> = line.splitn(4, ',').map(str::trim).collect();
    if fields.len() != 4 {
        return Err(err(format!("expected 4 comma-separated fields, found {}", fields.len())));
    }
    let [video_path, begin, count, label] = [fields[0], fields[1], fields[2], fields[3]];
    if video_path.is_empty() {
        return Err(err("empty video path".into()));
    }
    let begin_frame: u64 = begin
        .parse()
        .map_err(|_| err(format!("begin_frame `{begin}` is not a non-negative integer")))?;
    let frame_count: u64 = count
        .parse()
        .map_err(|_| err(format!("frame_count `{count}` is not a non-negative integer")))?;
    if frame_count < 1 {
        return Err(err("frame_count must be at least 1".into()));
    }
    if label.is_empty() {
        return Err(err("empty label".into()));
    }
    Ok(SceneRecord {
        video_path: video_path.to_string(),
        begin_frame,
        frame_count,
        label: label.to_string(),
    })
}

pub fn serialize_catalog(catalog: &Catalog) -> String {
    let mut out = String::from("# video_path,begin_frame,frame_count,label\n");
    for s in &catalog.scenes {
        out.push_str(&format!(
            "{},{},{},{}\n",
            s.video_path, s.begin_frame, s.frame_count, s.label
        ));
    }
    out
}

/// Absolute frame ordinals selected from one scene, in time order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FramePlan {
    pub indices: Vec<u64>,
}

impl FramePlan {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Picks `frames` ordinals spread over the whole scene:
/// `begin + floor(k * frame_count / frames)` for `k = 0..frames`.
///
/// Scenes shorter than `frames` yield repeated ordinals.
pub fn sample_frame_indices(record: &SceneRecord, frames: usize) -> Result<FramePlan> {
    if frames == 0 {
        return Err(Error::invalid("number of sampled frames must be at least 1"));
    }
    let sf = record.frame_count as u128;
    let f = frames as u128;
    let indices = (0..f)
        .map(|k| record.begin_frame + (k * sf / f) as u64)
        .collect();
    Ok(FramePlan { indices })
}

/// Undersamples frequent classes so that no class keeps more than
/// `floor(cap_factor * min_count)` scenes. Retained scenes keep their order.
pub fn cap_class_frequency(catalog: &Catalog, cap_factor: f64, seed: u64) -> Result<Catalog> {
    if !(cap_factor >= 1.0) || !cap_factor.is_finite() {
        return Err(Error::invalid(format!("cap_factor must be >= 1, got {cap_factor}")));
    }
    let counts = catalog.class_counts();
    let Some(&min) = counts.iter().min() else {
        return Ok(catalog.clone());
    };
    let cap = (cap_factor * min as f64).floor() as usize;
    if counts.iter().all(|&c| c <= cap) {
        return Ok(catalog.clone());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = vec![true; catalog.scenes.len()];
    for (class, &count) in counts.iter().enumerate() {
        if count <= cap {
            continue;
        }
        let members: Vec<usize> = catalog
            .scenes
            .iter()
            .enumerate()
            .filter(|(_, s)| catalog.ids[&s.label] == class)
            .map(|(i, _)| i)
            .collect();
        let mut retained = vec![false; count];
        for j in index::sample(&mut rng, count, cap) {
            retained[j] = true;
        }
        for (member, kept) in members.into_iter().zip(retained) {
            keep[member] = kept;
        }
    }

    let scenes = catalog
        .scenes
        .iter()
        .zip(&keep)
        .filter(|(_, k)| **k)
        .map(|(s, _)| s.clone())
        .collect();
    // Dropping scenes can change which label appears first; class ids stay
    // those of the input catalog.
    Ok(Catalog {
        scenes,
        labels: catalog.labels.clone(),
        ids: catalog.ids.clone(),
    })
}
