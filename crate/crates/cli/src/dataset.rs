//! Scene synthesis and dataset manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::info;
use nowcast_core::datapipe::{
    read_field, regrid_nearest, sample_patches, write_field, FieldStore, GridField, GridSpec, PatchSet, DT_MINUTES, PRECIP,
};
use nowcast_core::stormsim::{generate_sequence, SceneConfig};
use serde::{Deserialize, Serialize};

use crate::config::{load_config, output_dir, require_input, usage, write_json, write_manifest};

pub const DATASET_FILE: &str = "dataset.json";

pub fn field_file_name(variable: &str, time: i64) -> String {
    format!("{variable}_t{time}.gfld")
}

#[derive(clap::Args, Debug)]
pub struct SynthArgs {
    /// JSON config or run manifest; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: u64,
    /// Directory receiving one container per variable and step.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub rows: Option<usize>,
    #[arg(long)]
    pub cols: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Number of storm cells.
    #[arg(long)]
    pub cells: Option<usize>,
    /// Mean advection "u,v" in cells per step.
    #[arg(long, value_delimiter = ',', num_args = 1)]
    pub velocity: Option<Vec<f64>>,
    /// Pareto shape for heavy-tailed cell amplitudes.
    #[arg(long)]
    pub heavy_tail: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub out: Option<PathBuf>,
    pub scene: SceneConfig,
}

pub fn synth(args: SynthArgs) -> Result<()> {
    let (mut cfg, _) = load_config::<SynthConfig>(args.config.as_deref(), "synth")?;
    let s = &mut cfg.scene;
    s.seed = args.seed;
    s.rows = args.rows.unwrap_or(s.rows);
    s.cols = args.cols.unwrap_or(s.cols);
    s.steps = args.steps.unwrap_or(s.steps);
    s.n_cells = args.cells.unwrap_or(s.n_cells);
    if let Some(v) = args.velocity {
        if v.len() != 2 {
            return Err(usage("--velocity takes two comma-separated values"));
        }
        s.velocity = (v[0], v[1]);
    }
    if args.heavy_tail.is_some() {
        s.heavy_tail = args.heavy_tail;
    }
    cfg.out = args.out.or(cfg.out);
    s.validate().map_err(|e| usage(e.to_string()))?;
    let out = output_dir(cfg.out.clone())?;
    cfg.out = Some(out.clone());
    let scene = generate_sequence(&cfg.scene)?;
    let fields = scene.to_fields()?;
    for f in &fields {
        write_field(f, &out.join(field_file_name(&f.name, f.valid_time)))?;
    }
    write_json(&out.join("scene.json"), &cfg.scene)?;
    write_manifest(&out, "synth", &cfg)?;
    info!(
        "wrote {} fields ({} steps on {}x{}) to {}",
        fields.len(),
        cfg.scene.steps,
        cfg.scene.rows,
        cfg.scene.cols,
        out.display()
    );
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileRef {
    pub variable: String,
    pub valid_time: i64,
    pub path: PathBuf,
}

/// Blocks available for training and evaluation and the files they read.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub grid: GridSpec,
    pub input_steps: usize,
    pub forecast_steps: usize,
    pub train_anchors: Vec<i64>,
    /// Held-out anchors after the training period.
    pub test_anchors: Vec<i64>,
    pub patches: PatchSet,
    pub files: Vec<FileRef>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        crate::config::read_json(path)
    }

    pub fn store(&self) -> Result<FieldStore> {
        let mut store = FieldStore::new();
        for r in &self.files {
            let f = read_field(&r.path)?;
            if f.name != r.variable || f.valid_time != r.valid_time {
                bail!(
                    "{} holds {} at t={}, manifest expects {} at t={}",
                    r.path.display(),
                    f.name,
                    f.valid_time,
                    r.variable,
                    r.valid_time
                );
            }
            store.insert(f);
        }
        Ok(store)
    }
}

#[derive(clap::Args, Debug)]
pub struct BuildArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory of field containers.
    #[arg(long)]
    pub fields: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub input_steps: Option<usize>,
    #[arg(long)]
    pub forecast_steps: Option<usize>,
    /// Square patch edge in cells.
    #[arg(long)]
    pub patch: Option<usize>,
    /// Number of training plus validation patches.
    #[arg(long)]
    pub patches: Option<usize>,
    /// Fraction of anchors, latest first, held out for evaluation.
    #[arg(long)]
    pub test_fraction: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BuildConfig {
    pub fields: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub input_steps: usize,
    pub forecast_steps: usize,
    pub patch: usize,
    pub patches: usize,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for BuildConfig {
    fn default() -> Self {
        BuildConfig {
            fields: None,
            out: None,
            input_steps: 12,
            forecast_steps: 8,
            patch: 32,
            patches: 256,
            test_fraction: 0.3,
            seed: 0,
        }
    }
}

/// Splits sorted anchors into a training prefix and a held-out suffix with no
/// frame shared between a training block and a test block.
pub fn split_anchors(anchors: &[i64], input_steps: usize, forecast_steps: usize, test_fraction: f64) -> (Vec<i64>, Vec<i64>) {
    let n_test = (anchors.len() as f64 * test_fraction).round() as usize;
    let test = anchors[anchors.len() - n_test..].to_vec();
    let Some(&first) = test.first() else {
        return (anchors.to_vec(), test);
    };
    let reach = input_steps.max(forecast_steps) as i64 * DT_MINUTES;
    let earliest = first - (input_steps as i64 - 1) * DT_MINUTES;
    let train = anchors[..anchors.len() - n_test]
        .iter()
        .copied()
        .filter(|&a| a + reach < earliest)
        .collect();
    (train, test)
}

pub fn build(args: BuildArgs) -> Result<()> {
    let (mut cfg, _) = load_config::<BuildConfig>(args.config.as_deref(), "build")?;
    cfg.fields = args.fields.or(cfg.fields);
    cfg.out = args.out.or(cfg.out);
    cfg.input_steps = args.input_steps.unwrap_or(cfg.input_steps);
    cfg.forecast_steps = args.forecast_steps.unwrap_or(cfg.forecast_steps);
    cfg.patch = args.patch.unwrap_or(cfg.patch);
    cfg.patches = args.patches.unwrap_or(cfg.patches);
    cfg.test_fraction = args.test_fraction.unwrap_or(cfg.test_fraction);
    cfg.seed = args.seed.unwrap_or(cfg.seed);
    if !(0.0..1.0).contains(&cfg.test_fraction) {
        return Err(usage(format!("--test-fraction {} must lie in [0, 1)", cfg.test_fraction)));
    }
    if cfg.input_steps == 0 || cfg.forecast_steps == 0 {
        return Err(usage("input and forecast steps must be positive"));
    }
    let fields_dir = require_input(cfg.fields.clone(), "fields")?;
    let fields_dir = fields_dir
        .canonicalize()
        .with_context(|| format!("resolving {}", fields_dir.display()))?;
    cfg.fields = Some(fields_dir.clone());
    let out = output_dir(cfg.out.clone())?;
    cfg.out = Some(out.clone());

    let mut paths: Vec<PathBuf> = fs::read_dir(&fields_dir)
        .with_context(|| format!("listing {}", fields_dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "gfld"))
        .collect();
    paths.sort();
    let loaded: Vec<(PathBuf, GridField)> = paths
        .into_iter()
        .map(|p| read_field(&p).map(|f| (p, f)))
        .collect::<Result<_, _>>()?;
    let grid = loaded
        .iter()
        .find(|(_, f)| f.name == PRECIP)
        .map(|(_, f)| f.grid.clone())
        .ok_or_else(|| usage(format!("{} holds no precipitation fields", fields_dir.display())))?;

    let regrid_dir = out.join("regridded");
    let mut seen = BTreeMap::new();
    let mut store = FieldStore::new();
    let mut files = Vec::new();
    for (path, f) in loaded {
        if let Some(prev) = seen.insert((f.name.clone(), f.valid_time), path.clone()) {
            bail!(
                "{} and {} both hold {} at t={}",
                prev.display(),
                path.display(),
                f.name,
                f.valid_time
            );
        }
        let (field, path) = if f.grid == grid {
            (f, path)
        } else if f.name == PRECIP {
            bail!("{} is on a different grid than the other precipitation fields", path.display());
        } else {
            let g = regrid_nearest(&f, &grid)?;
            fs::create_dir_all(&regrid_dir).with_context(|| format!("creating {}", regrid_dir.display()))?;
            let target = regrid_dir.join(field_file_name(&g.name, g.valid_time));
            write_field(&g, &target)?;
            (g, target)
        };
        files.push(FileRef {
            variable: field.name.clone(),
            valid_time: field.valid_time,
            path,
        });
        store.insert(field);
    }
    let anchors = store.complete_anchors(cfg.input_steps, cfg.forecast_steps);
    let (train_anchors, test_anchors) = split_anchors(&anchors, cfg.input_steps, cfg.forecast_steps, cfg.test_fraction);
    if train_anchors.is_empty() {
        bail!(
            "{} complete blocks leave none for training; add frames or lower --test-fraction",
            anchors.len()
        );
    }
    let patches = sample_patches((grid.rows, grid.cols), &train_anchors, cfg.patch, cfg.patches, cfg.seed)?;
    let manifest = DatasetManifest {
        grid,
        input_steps: cfg.input_steps,
        forecast_steps: cfg.forecast_steps,
        train_anchors,
        test_anchors,
        patches,
        files,
    };
    write_json(&out.join(DATASET_FILE), &manifest)?;
    write_manifest(&out, "build", &cfg)?;
    info!(
        "{} blocks: {} training anchors, {} test anchors, {}/{} patches",
        anchors.len(),
        manifest.train_anchors.len(),
        manifest.test_anchors.len(),
        manifest.patches.train.len(),
        manifest.patches.validation.len()
    );
    Ok(())
}
