//! Synthetic episode generator.
//!
//! Each class owns a random prototype vector. A clean frame is the prototype
//! plus Gaussian noise. With probability `distractor_prob` a frame is
//! replaced by noise plus a few large spikes on random coordinates, the
//! analogue of a foreground object: spikes dominate the elementwise maximum
//! over frames but average out across a scene.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureDataset, FeatureMatrix, FeatureSequence, SceneKey};
use crate::kv;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub frames: usize,
    pub dim: usize,
    pub scenes_per_class: usize,
    pub prototype_scale: f64,
    pub distractor_prob: f64,
    pub distractor_magnitude: f64,
    /// Spiked coordinates per distractor frame.
    pub distractor_spikes: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    /// The adversarial-distractor episode used by the benchmark.
    fn default() -> Self {
        Self {
            classes: 12,
            frames: 20,
            dim: 128,
            scenes_per_class: 60,
            prototype_scale: 1.5,
            distractor_prob: 0.5,
            distractor_magnitude: 30.0,
            distractor_spikes: 64,
            noise_std: 0.5,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.frames == 0 || self.dim == 0 || self.scenes_per_class == 0 {
            return Err(Error::invalid("synthetic counts must all be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.distractor_prob) {
            return Err(Error::invalid("distractor_prob must lie in [0, 1]"));
        }
        if self.distractor_spikes > self.dim {
            return Err(Error::invalid("distractor_spikes cannot exceed dim"));
        }
        for (name, v) in [
            ("prototype_scale", self.prototype_scale),
            ("distractor_magnitude", self.distractor_magnitude),
            ("noise_std", self.noise_std),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be finite and non-negative")));
            }
        }
        Ok(())
    }

    pub fn apply_text(mut self, text: &str) -> Result<Self> {
        for (line, key, value) in kv::parse_pairs(text)? {
            let v = value.as_str();
            match key.as_str() {
                "classes" => self.classes = kv::parse_value(line, &key, v)?,
                "frames" => self.frames = kv::parse_value(line, &key, v)?,
                "dim" => self.dim = kv::parse_value(line, &key, v)?,
                "scenes_per_class" => self.scenes_per_class = kv::parse_value(line, &key, v)?,
                "prototype_scale" => self.prototype_scale = kv::parse_value(line, &key, v)?,
                "distractor_prob" => self.distractor_prob = kv::parse_value(line, &key, v)?,
                "distractor_magnitude" => self.distractor_magnitude = kv::parse_value(line, &key, v)?,
                "distractor_spikes" => self.distractor_spikes = kv::parse_value(line, &key, v)?,
                "noise_std" => self.noise_std = kv::parse_value(line, &key, v)?,
                "seed" => self.seed = kv::parse_value(line, &key, v)?,
                _ => {
                    return Err(Error::Parse {
                        line,
                        message: format!("unknown synthetic key `{key}`"),
                    })
                }
            }
        }
        Ok(self)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let spec = Self::default().apply_text(text)?;
        spec.validate()?;
        Ok(spec)
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<FeatureDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let prototypes: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| {
            (0..spec.dim)
                .map(|_| spec.prototype_scale * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::invalid(e.to_string()))?;
    let video_path = format!("synthetic/seed{}.mkv", spec.seed);
    let scene_len = spec.frames as u64 * 10;

    let mut sequences = Vec::with_capacity(spec.classes * spec.scenes_per_class);
    for s in 0..spec.scenes_per_class {
        for (class_id, prototype) in prototypes.iter().enumerate() {
            let mut values = Vec::with_capacity(spec.frames * spec.dim);
            for _ in 0..spec.frames {
                let row_start = values.len();
                if rng.random_bool(spec.distractor_prob) {
                    values.extend((0..spec.dim).map(|_| noise.sample(&mut rng) as f32));
                    for j in index::sample(&mut rng, spec.dim, spec.distractor_spikes) {
                        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                        values[row_start + j] += (sign * spec.distractor_magnitude) as f32;
                    }
                } else {
                    values.extend(prototype.iter().map(|p| (p + noise.sample(&mut rng)) as f32));
                }
            }
            let ordinal = (s * spec.classes + class_id) as u64;
            sequences.push(FeatureSequence {
                scene: SceneKey {
                    video_path: video_path.clone(),
                    begin_frame: ordinal * scene_len,
                    frame_count: scene_len,
                },
                class_id,
                data: FeatureMatrix::new(spec.frames, spec.dim, values)?,
            });
        }
    }
    Ok(FeatureDataset {
        frames: spec.frames,
        dim: spec.dim,
        labels: (0..spec.classes).map(|c| format!("location_{c:02}")).collect(),
        sequences,
    })
}
