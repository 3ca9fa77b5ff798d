//! Training runs and tiled forecasts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::info;
use nowcast_core::checkpoint::Checkpoint;
use nowcast_core::datapipe::{assemble_input, build_samples, tiled_predict_with_coverage, GridField, DT_MINUTES, PRECIP};
use nowcast_core::network::{build, exceedance_probability, map_rates, HeadKind, NetworkConfig};
use nowcast_core::seeds::derive_seed;
use nowcast_core::tensor::Tensor;
use nowcast_core::train::{channel_statistics, train, History, LossKind, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::config::{has_key, load_config, output_dir, read_json, require_input, usage, write_json, write_manifest};
use crate::dataset::DatasetManifest;

pub const CHECKPOINT_FILE: &str = "checkpoint.gnss";
pub const LAST_CHECKPOINT_FILE: &str = "last.gnss";
pub const HISTORY_FILE: &str = "history.csv";
pub const INDEX_FILE: &str = "forecasts.json";

fn parse_loss(s: &str) -> Result<LossKind, String> {
    match s {
        "mse" => Ok(LossKind::Mse),
        "focal" => Ok(LossKind::Focal),
        _ => Err(format!("unknown loss `{s}` (expected mse or focal)")),
    }
}

#[derive(clap::Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset manifest written by `build`.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// `mse` trains a rate regressor, `focal` a class-probability network.
    #[arg(long, value_parser = parse_loss)]
    pub loss: Option<LossKind>,
    #[arg(long)]
    pub blocks: Option<usize>,
    #[arg(long)]
    pub base_channels: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRunConfig {
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: u64,
    pub network: NetworkConfig,
    pub train: TrainConfig,
}

fn history_csv(h: &History) -> String {
    let mut s = String::from("epoch,train_loss,val_loss,lr\n");
    for i in 0..h.train_loss.len() {
        let _ = writeln!(s, "{},{},{},{}", i + 1, h.train_loss[i], h.val_loss[i], h.lr[i]);
    }
    s
}

pub fn train_run(args: TrainArgs) -> Result<()> {
    let (mut cfg, raw) = load_config::<TrainRunConfig>(args.config.as_deref(), "train")?;
    cfg.dataset = args.dataset.or(cfg.dataset);
    cfg.out = args.out.or(cfg.out);
    cfg.seed = args.seed;
    let t = &mut cfg.train;
    t.epochs = args.epochs.unwrap_or(t.epochs);
    t.batch_size = args.batch_size.unwrap_or(t.batch_size);
    t.adam.lr = args.lr.unwrap_or(t.adam.lr);
    t.loss = args.loss.unwrap_or(t.loss);
    let n = &mut cfg.network;
    n.n_blocks = args.blocks.unwrap_or(n.n_blocks);
    n.base_channels = args.base_channels.unwrap_or(n.base_channels);
    n.dropout = args.dropout.unwrap_or(n.dropout);
    if has_key(&raw, &["network", "head"]) && n.head != cfg.train.loss.head() {
        return Err(usage(format!(
            "config conflict: {:?} loss with a {:?} head",
            cfg.train.loss, n.head
        )));
    }
    n.head = cfg.train.loss.head();

    let dataset_path = require_input(cfg.dataset.clone(), "dataset")?;
    let ds = DatasetManifest::load(&dataset_path)?;
    for (key, value) in [("input_steps", ds.input_steps), ("forecast_steps", ds.forecast_steps)] {
        let set = raw.get("network").and_then(|v| v.get(key)).and_then(|v| v.as_u64());
        if set.is_some_and(|s| s != value as u64) {
            return Err(usage(format!("config conflict: network.{key} differs from the dataset's {value}")));
        }
    }
    n.input_steps = ds.input_steps;
    n.forecast_steps = ds.forecast_steps;
    let patch = ds.patches.patch;
    if patch % n.spatial_multiple() != 0 {
        bail!(
            "patch {patch} is not divisible by {} for {} encoder blocks",
            n.spatial_multiple(),
            n.n_blocks
        );
    }
    let out = output_dir(cfg.out.clone())?;
    cfg.out = Some(out.clone());

    let store = ds.store()?;
    let train_set = build_samples(&store, &ds.patches.train, patch, ds.input_steps, ds.forecast_steps)?;
    let val_set = build_samples(&store, &ds.patches.validation, patch, ds.input_steps, ds.forecast_steps)?;
    let (mean, std) = channel_statistics(&train_set)?;
    cfg.network.channel_mean = mean;
    cfg.network.channel_std = std;
    cfg.network.validate().map_err(|e| usage(e.to_string()))?;
    let init = build(&cfg.network, derive_seed(cfg.seed, 1))?;
    info!(
        "training {} parameters on {} patches ({} validation), {} epochs",
        init.parameter_count(),
        train_set.len(),
        val_set.len(),
        cfg.train.epochs
    );
    let outcome = train(init, &train_set, &val_set, &cfg.train, derive_seed(cfg.seed, 2), |r| {
        info!(
            "epoch {:>3}  train {:.6}  val {:.6}  lr {:.2e}{}",
            r.epoch,
            r.train_loss,
            r.val_loss,
            r.lr,
            if r.improved { "  *" } else { "" }
        );
    })?;
    outcome.best.save(&out.join(CHECKPOINT_FILE))?;
    outcome.last.save(&out.join(LAST_CHECKPOINT_FILE))?;
    fs::write(out.join(HISTORY_FILE), history_csv(&outcome.last.history))
        .with_context(|| format!("writing history in {}", out.display()))?;
    write_manifest(&out, "train", &cfg)?;
    info!(
        "best epoch {} written to {}",
        outcome.best.epoch,
        out.join(CHECKPOINT_FILE).display()
    );
    Ok(())
}

#[derive(clap::Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Dataset manifest supplying fields and, by default, the test anchors.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated anchor times in minutes.
    #[arg(long, value_delimiter = ',')]
    pub anchors: Option<Vec<i64>>,
    /// Tile edge; defaults to the dataset patch.
    #[arg(long)]
    pub patch: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Class boundaries for exceedance maps of classification checkpoints.
    #[arg(long, value_delimiter = ',')]
    pub exceedance: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictConfig {
    pub checkpoint: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub anchors: Option<Vec<i64>>,
    pub patch: Option<usize>,
    pub batch_size: usize,
    pub exceedance: Vec<f64>,
}

impl Default for PredictConfig {
    fn default() -> Self {
        PredictConfig {
            checkpoint: None,
            dataset: None,
            out: None,
            anchors: None,
            patch: None,
            batch_size: 8,
            exceedance: vec![1.6, 6.4, 25.6],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExceedanceRef {
    pub threshold: f64,
    pub path: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastEntry {
    pub anchor: i64,
    /// 1-based lead step.
    pub lead: usize,
    pub valid_time: i64,
    /// Rate field, relative to the index file unless absolute.
    pub path: PathBuf,
    #[serde(default)]
    pub exceedance: Vec<ExceedanceRef>,
}

/// Forecast files written by `predict` and read by `evaluate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastIndex {
    pub forecast_steps: usize,
    pub entries: Vec<ForecastEntry>,
}

impl ForecastIndex {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

fn lead_plane(t: &Tensor, k: usize) -> Vec<f32> {
    let s = t.shape();
    let plane = s[s.len() - 2] * s[s.len() - 1];
    t.data()[k * plane..(k + 1) * plane].iter().map(|&v| v as f32).collect()
}

pub fn predict(args: PredictArgs) -> Result<()> {
    let (mut cfg, _) = load_config::<PredictConfig>(args.config.as_deref(), "predict")?;
    cfg.checkpoint = args.checkpoint.or(cfg.checkpoint);
    cfg.dataset = args.dataset.or(cfg.dataset);
    cfg.out = args.out.or(cfg.out);
    cfg.anchors = args.anchors.or(cfg.anchors);
    cfg.patch = args.patch.or(cfg.patch);
    cfg.batch_size = args.batch_size.unwrap_or(cfg.batch_size);
    cfg.exceedance = args.exceedance.unwrap_or(cfg.exceedance);
    let ckpt = Checkpoint::load(&require_input(cfg.checkpoint.clone(), "checkpoint")?)?;
    let ds = DatasetManifest::load(&require_input(cfg.dataset.clone(), "dataset")?)?;
    let net = ckpt.params.config();
    if (net.input_steps, net.forecast_steps) != (ds.input_steps, ds.forecast_steps) {
        return Err(usage(format!(
            "config conflict: checkpoint uses {}/{} steps, dataset {}/{}",
            net.input_steps, net.forecast_steps, ds.input_steps, ds.forecast_steps
        )));
    }
    let patch = cfg.patch.unwrap_or(ds.patches.patch);
    cfg.patch = Some(patch);
    if patch % net.spatial_multiple() != 0 {
        return Err(usage(format!("--patch {patch} is not divisible by {}", net.spatial_multiple())));
    }
    if net.head == HeadKind::Classification {
        if let Some(r) = cfg.exceedance.iter().find(|&&r| ckpt.scheme.boundary_index(r).is_none()) {
            return Err(usage(format!("--exceedance {r} is not a class boundary")));
        }
    }
    let anchors = cfg.anchors.clone().unwrap_or_else(|| ds.test_anchors.clone());
    if anchors.is_empty() {
        return Err(usage("no anchors to forecast: pass --anchors or build with a test fraction"));
    }
    cfg.anchors = Some(anchors.clone());
    let out = output_dir(cfg.out.clone())?;
    cfg.out = Some(out.clone());
    let store = ds.store()?;
    let tf = net.forecast_steps;
    let mut entries = Vec::new();
    for (i, &anchor) in anchors.iter().enumerate() {
        let input = assemble_input(&store, anchor, ds.input_steps)?;
        let (pred, _) = tiled_predict_with_coverage(&ckpt.params, &input.channels_first(), patch, cfg.batch_size)?;
        let (rates, exceed) = match net.head {
            HeadKind::Regression => (pred, Vec::new()),
            HeadKind::Classification => {
                let mut shape = vec![1];
                shape.extend_from_slice(pred.shape());
                let probs = pred.reshape(&shape)?;
                let maps = cfg
                    .exceedance
                    .iter()
                    .map(|&r| exceedance_probability(&probs, &ckpt.scheme, r).map(|m| (r, m)))
                    .collect::<Result<Vec<_>, _>>()?;
                (map_rates(&probs, &ckpt.scheme)?, maps)
            }
        };
        let sub = PathBuf::from(anchor.to_string());
        fs::create_dir_all(out.join(&sub)).with_context(|| format!("creating {}", out.join(&sub).display()))?;
        for k in 0..tf {
            let valid_time = anchor + (k as i64 + 1) * DT_MINUTES;
            let n = ds.grid.len();
            let values = lead_plane(&rates, k).into_iter().map(|v| v.max(0.0)).collect();
            let field = GridField::new(PRECIP, valid_time, ds.grid.clone(), values, vec![false; n])?;
            let path = sub.join(format!("P_lead{:02}.gfld", k + 1));
            nowcast_core::datapipe::write_field(&field, &out.join(&path))?;
            let mut refs = Vec::new();
            for (r, map) in &exceed {
                let field = GridField::new("PEX", valid_time, ds.grid.clone(), lead_plane(map, k), vec![false; n])?;
                let path = sub.join(format!("PEX{r}_lead{:02}.gfld", k + 1));
                nowcast_core::datapipe::write_field(&field, &out.join(&path))?;
                refs.push(ExceedanceRef { threshold: *r, path });
            }
            entries.push(ForecastEntry {
                anchor,
                lead: k + 1,
                valid_time,
                path,
                exceedance: refs,
            });
        }
        info!("forecast {}/{} (anchor t={anchor})", i + 1, anchors.len());
    }
    write_json(
        &out.join(INDEX_FILE),
        &ForecastIndex {
            forecast_steps: tf,
            entries,
        },
    )?;
    write_manifest(&out, "predict", &cfg)?;
    Ok(())
}
