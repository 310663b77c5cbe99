//! Heads x episodes x replicates orchestration with resumable cells.
//!
//! Each finished cell is recorded as `cells/<head>__<episode>__<rep>.json`.
//! A rerun with the same inputs and config skips cells whose record matches,
//! so an interrupted benchmark resumes where it stopped.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::mpsc;

use rayon::prelude::*;
use sceneloc_core::features::load_dataset;
use sceneloc_core::training::train;
use sceneloc_core::{EpisodeRunMatrix, Error as CoreError, FeatureDataset, HeadKind, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{require_file, CliError, CliResult};
use crate::manifest::{sha256_file, RunManifest};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CellRecord {
    head: HeadKind,
    episode: String,
    replicate: usize,
    seed: u64,
    /// SHA-256 of the episode feature file.
    dataset: String,
    /// Training config as `key = value` text.
    config: String,
    test_accuracy: f64,
    train_accuracy: f64,
}

#[derive(Debug, Clone, Serialize)]
struct CellFailure {
    head: HeadKind,
    episode: String,
    replicate: usize,
    diverged: bool,
    error: String,
}

struct Episode {
    name: String,
    fingerprint: String,
    dataset: FeatureDataset,
}

fn episode_names(paths: &[PathBuf]) -> Vec<String> {
    let mut seen = HashSet::new();
    paths
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let stem = p
                .file_stem()
                .map_or_else(|| format!("episode{i}"), |s| s.to_string_lossy().into_owned());
            let name = if seen.contains(&stem) { format!("{stem}_{i}") } else { stem };
            seen.insert(name.clone());
            name
        })
        .collect()
}

fn cell_path(dir: &Path, head: HeadKind, episode: &str, replicate: usize) -> PathBuf {
    dir.join(format!("{}__{}__{}.json", head.name(), episode, replicate))
}

/// Replicates vary both the initialisation and the train/test split.
fn replicate_seed(base: u64, replicate: usize) -> u64 {
    base.wrapping_add(replicate as u64)
}

pub fn run(
    features: &[PathBuf],
    replicates: usize,
    config: &TrainConfig,
    jobs: Option<usize>,
    out: &Path,
) -> CliResult<()> {
    if replicates == 0 {
        return Err(CliError::usage("--replicates must be at least 1"));
    }
    for p in features {
        require_file(p, "feature file")?;
    }
    let names = episode_names(features);
    let episodes = features
        .iter()
        .zip(names)
        .map(|(path, name)| {
            Ok(Episode {
                name,
                fingerprint: sha256_file(path)?,
                dataset: load_dataset(path)?,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;

    let cells_dir = out.join("cells");
    fs::create_dir_all(&cells_dir).map_err(|e| CliError::io(&cells_dir, e))?;

    let mut done: Vec<CellRecord> = Vec::new();
    let mut pending = Vec::new();
    for head in HeadKind::ALL {
        for (e, ep) in episodes.iter().enumerate() {
            for r in 0..replicates {
                let seed = replicate_seed(config.seed, r);
                let path = cell_path(&cells_dir, head, &ep.name, r);
                let existing = fs::read_to_string(&path)
                    .ok()
                    .and_then(|t| serde_json::from_str::<CellRecord>(&t).ok())
                    .filter(|c| c.dataset == ep.fingerprint && c.config == replicate_config(config, seed).to_text());
                match existing {
                    Some(record) => done.push(record),
                    None => pending.push((head, e, r, seed)),
                }
            }
        }
    }
    eprintln!(
        "benchmark: {} cells complete, {} to run",
        done.len(),
        pending.len()
    );

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(|e| CliError::usage(e.to_string()))?;
    let (tx, rx) = mpsc::channel::<Result<CellRecord, CellFailure>>();
    let mut failures = Vec::new();
    let mut write_error = None;
    std::thread::scope(|scope| {
        let episodes = &episodes;
        let pending = &pending;
        scope.spawn(move || {
            pool.install(|| {
                pending.par_iter().for_each_with(tx, |tx, &(head, e, r, seed)| {
                    let ep = &episodes[e];
                    let cfg = replicate_config(config, seed);
                    let result = match train(&ep.dataset, head, &cfg) {
                        Ok((_, report)) => Ok(CellRecord {
                            head,
                            episode: ep.name.clone(),
                            replicate: r,
                            seed,
                            dataset: ep.fingerprint.clone(),
                            config: cfg.to_text(),
                            test_accuracy: report.test_accuracy,
                            train_accuracy: report.train_accuracy,
                        }),
                        Err(err) => Err(CellFailure {
                            head,
                            episode: ep.name.clone(),
                            replicate: r,
                            diverged: matches!(err, CoreError::Divergence { .. }),
                            error: err.to_string(),
                        }),
                    };
                    let _ = tx.send(result);
                });
            });
        });
        // Single writer for all cell records.
        for message in rx {
            match message {
                Ok(record) => {
                    let path = cell_path(&cells_dir, record.head, &record.episode, record.replicate);
                    let text = serde_json::to_string_pretty(&record).expect("cell record serialises") + "\n";
                    if let Err(e) = fs::write(&path, text) {
                        write_error.get_or_insert(CliError::io(&path, e));
                    }
                    done.push(record);
                }
                Err(failure) => {
                    eprintln!(
                        "cell {}/{}/{} failed: {}",
                        failure.head, failure.episode, failure.replicate, failure.error
                    );
                    failures.push(failure);
                }
            }
        }
    });
    if let Some(err) = write_error {
        return Err(err);
    }

    let failures_path = out.join("failures.json");
    if !failures.is_empty() {
        let text = serde_json::to_string_pretty(&failures)? + "\n";
        fs::write(&failures_path, text).map_err(|e| CliError::io(&failures_path, e))?;
        let diverged = failures.iter().any(|f| f.diverged);
        let message = format!(
            "{} benchmark cell(s) failed; see {}",
            failures.len(),
            failures_path.display()
        );
        return Err(if diverged {
            CliError::Divergence(message)
        } else {
            CliError::usage(message)
        });
    }
    let _ = fs::remove_file(&failures_path);

    let lookup = |head: HeadKind, e: usize, r: usize| {
        done.iter()
            .find(|c| c.head == head && c.episode == episodes[e].name && c.replicate == r)
            .map_or(f64::NAN, |c| c.test_accuracy)
    };
    let names: Vec<String> = episodes.iter().map(|e| e.name.clone()).collect();
    let matrix = EpisodeRunMatrix::from_fn(names, replicates, lookup)?;

    let matrix_path = out.join("run_matrix.csv");
    fs::write(&matrix_path, matrix.to_csv()).map_err(|e| CliError::io(&matrix_path, e))?;
    let box_path = out.join("boxplot.csv");
    fs::write(&box_path, matrix.boxplot_csv()).map_err(|e| CliError::io(&box_path, e))?;

    let mut manifest = RunManifest::new(
        "benchmark",
        json!({ "train": config, "replicates": replicates, "replicate_seeds": "seed + replicate" }),
        config.seed,
    );
    for p in features {
        manifest.add_input(p)?;
    }
    manifest.add_output(&matrix_path);
    manifest.add_output(&box_path);
    manifest.write(&out.join("manifest.json"))?;
    eprintln!("wrote {} and {}", matrix_path.display(), box_path.display());
    Ok(())
}

fn replicate_config(config: &TrainConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        ..config.clone()
    }
}
