use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use sceneloc_core::catalog::{cap_class_frequency, parse_catalog, sample_frame_indices};
use sceneloc_core::eval::{compare_heads, render_report};
use sceneloc_core::features::{
    assemble_input, load_dataset, write_labels_sidecar, FeatureFileHeader, FeatureFileWriter,
};
use sceneloc_core::heads::checkpoint::write_checkpoint;
use sceneloc_core::training::train;
use sceneloc_core::{generate_synthetic, BackboneSpec, EpisodeRunMatrix, SyntheticSpec, TrainConfig};
use serde_json::json;

use crate::benchmark;
use crate::error::{require_file, CliError, CliResult};
use crate::manifest::{sidecar_for, RunManifest};
use crate::{Cli, Command};

pub fn run(cli: Cli) -> CliResult<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Extract {
            catalog,
            backbone,
            frames,
            dim,
            cap_factor,
            out,
        } => extract(&catalog, &backbone, frames, dim, cap_factor, seed.unwrap_or(0), &out),
        Command::Train {
            features,
            head,
            config,
            out,
        } => {
            let config = load_train_config(config.as_deref(), seed)?;
            train_one(&features, head, &config, &out)
        }
        Command::Benchmark {
            features,
            replicates,
            config,
            jobs,
            out,
        } => {
            let config = load_train_config(config.as_deref(), seed)?;
            benchmark::run(&features, replicates, &config, jobs, &out)
        }
        Command::Compare { matrix, alpha, out } => compare(&matrix, alpha, &out),
        Command::Synth { config, episodes, out } => synth(config.as_deref(), episodes, seed.unwrap_or(0), &out),
    }
}

pub fn load_train_config(path: Option<&Path>, seed: Option<u64>) -> CliResult<TrainConfig> {
    let mut config = match path {
        Some(p) => {
            require_file(p, "config file")?;
            let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            TrainConfig::default().apply_text(&text)?
        }
        None => TrainConfig::default(),
    };
    if let Some(seed) = seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn extract(
    catalog_path: &Path,
    backbone: &str,
    frames: usize,
    dim: usize,
    cap_factor: Option<f64>,
    seed: u64,
    out: &Path,
) -> CliResult<()> {
    require_file(catalog_path, "catalog")?;
    let file = File::open(catalog_path).map_err(|e| CliError::io(catalog_path, e))?;
    let mut catalog = parse_catalog(BufReader::new(file))?;
    if let Some(factor) = cap_factor {
        catalog = cap_class_frequency(&catalog, factor, seed)?;
    }
    let spec = BackboneSpec::parse(backbone, dim, seed)?;
    if let BackboneSpec::File { path } = &spec {
        require_file(path, "backbone feature file")?;
    }
    let mut backbone = spec.open()?;

    let header = FeatureFileHeader {
        frames,
        dim: backbone.dim(),
        classes: catalog.num_classes(),
        scenes: catalog.scenes().len() as u64,
    };
    let sink = BufWriter::new(File::create(out).map_err(|e| CliError::io(out, e))?);
    let mut writer = FeatureFileWriter::new(sink, header)?;
    for scene in catalog.scenes() {
        let plan = sample_frame_indices(scene, frames)?;
        let seq = assemble_input(scene, catalog.class_of(scene), &plan, &mut backbone)?;
        writer.write_sequence(&seq)?;
    }
    writer.finish()?;
    write_labels_sidecar(out, catalog.labels())?;

    let mut manifest = RunManifest::new(
        "extract",
        json!({ "backbone": spec, "frames": frames, "cap_factor": cap_factor }),
        seed,
    );
    manifest.add_input(catalog_path)?;
    if let BackboneSpec::File { path } = &spec {
        manifest.add_input(path)?;
    }
    manifest.add_output(out);
    manifest.write(&sidecar_for(out))?;
    eprintln!(
        "wrote {} scenes ({} classes, {}x{}) to {}",
        header.scenes,
        header.classes,
        frames,
        header.dim,
        out.display()
    );
    Ok(())
}

pub fn report_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.as_os_str().to_owned();
    name.push(".report.json");
    PathBuf::from(name)
}

fn train_one(features: &Path, head: sceneloc_core::HeadKind, config: &TrainConfig, out: &Path) -> CliResult<()> {
    require_file(features, "feature file")?;
    let dataset = load_dataset(features)?;
    let (model, report) = train(&dataset, head, config)?;

    let sink = BufWriter::new(File::create(out).map_err(|e| CliError::io(out, e))?);
    write_checkpoint(&model, sink)?;
    let manifest_path = sidecar_for(out);
    let report_file = report_path(out);
    let body = json!({
        "manifest": manifest_path.file_name().map(|n| n.to_string_lossy().into_owned()),
        "report": report,
    });
    fs::write(&report_file, serde_json::to_string_pretty(&body)? + "\n").map_err(|e| CliError::io(&report_file, e))?;

    let mut manifest = RunManifest::new("train", json!({ "head": head, "train": config }), config.seed);
    manifest.add_input(features)?;
    manifest.add_output(out);
    manifest.add_output(&report_file);
    manifest.write(&manifest_path)?;
    eprintln!(
        "{head}: train accuracy {:.3}, test accuracy {:.3}",
        report.train_accuracy, report.test_accuracy
    );
    Ok(())
}

fn compare(matrix: &Path, alpha: f64, out: &Path) -> CliResult<()> {
    require_file(matrix, "run matrix")?;
    let file = File::open(matrix).map_err(|e| CliError::io(matrix, e))?;
    let m = EpisodeRunMatrix::from_csv(BufReader::new(file))?;
    let report = compare_heads(&m, alpha)?;
    create_dir(out)?;

    let json_path = out.join("report.json");
    let mut value = serde_json::to_value(&report)?;
    value["manifest"] = json!("manifest.json");
    fs::write(&json_path, serde_json::to_string_pretty(&value)? + "\n").map_err(|e| CliError::io(&json_path, e))?;
    let tables = render_report(&report);
    let tables_path = out.join("tables.txt");
    fs::write(&tables_path, &tables).map_err(|e| CliError::io(&tables_path, e))?;

    let mut manifest = RunManifest::new("compare", json!({ "alpha": alpha }), 0);
    manifest.add_input(matrix)?;
    manifest.add_output(&json_path);
    manifest.add_output(&tables_path);
    manifest.write(&out.join("manifest.json"))?;
    print!("{tables}");
    Ok(())
}

fn synth(config: Option<&Path>, episodes: usize, seed: u64, out: &Path) -> CliResult<()> {
    if episodes == 0 {
        return Err(CliError::usage("--episodes must be at least 1"));
    }
    let base = match config {
        Some(p) => {
            require_file(p, "synthetic spec")?;
            let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            SyntheticSpec::default().apply_text(&text)?
        }
        None => SyntheticSpec::default(),
    };
    create_dir(out)?;
    let mut manifest = RunManifest::new("synth", serde_json::to_value(&base)?, seed);
    for i in 0..episodes {
        let spec = SyntheticSpec {
            seed: seed.wrapping_add(i as u64),
            ..base.clone()
        };
        let dataset = generate_synthetic(&spec)?;
        let path = out.join(format!("episode_{:02}.slrf", i + 1));
        sceneloc_core::features::save_dataset(&path, &dataset)?;
        manifest.add_output(&path);
    }
    manifest.write(&out.join("manifest.json"))?;
    eprintln!("wrote {episodes} synthetic episodes to {}", out.display());
    Ok(())
}
