//! Forecast verification, feature scoring and autocorrelation runs.

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use log::info;
use nowcast_core::datapipe::{mrmr_dataset, read_field, FieldStore, PRECIP};
use nowcast_core::losses::default_scheme;
use nowcast_core::verify::{autocorr_fit, mrmr_scores, AutocorrOptions, MrmrForm, NamedReports, ScoreAccumulator, DEFAULT_BINS};
use nowcast_core::CoreError;
use serde::{Deserialize, Serialize};

use crate::config::{load_config, output_dir, require_input, usage, write_json, write_manifest};
use crate::dataset::DatasetManifest;
use crate::model::ForecastIndex;

pub const SCORES_FILE: &str = "scores.json";
pub const MRMR_FILE: &str = "mrmr.json";

#[derive(clap::Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Forecast index written by `predict`.
    #[arg(long)]
    pub forecasts: Option<PathBuf>,
    /// Directory of observed field containers.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated event thresholds in mm/hr.
    #[arg(long, value_delimiter = ',')]
    pub thresholds: Option<Vec<f64>>,
    /// Comma-separated neighbourhood edges in cells.
    #[arg(long, value_delimiter = ',')]
    pub scales: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub forecasts: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub thresholds: Vec<f64>,
    pub scales: Vec<usize>,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        EvaluateConfig {
            forecasts: None,
            truth: None,
            out: None,
            thresholds: vec![0.1, 1.0, 1.6, 6.4, 12.8, 25.6],
            scales: vec![1, 3, 5, 9],
        }
    }
}

pub fn evaluate(args: EvaluateArgs) -> Result<()> {
    let (mut cfg, _) = load_config::<EvaluateConfig>(args.config.as_deref(), "evaluate")?;
    cfg.forecasts = args.forecasts.or(cfg.forecasts);
    cfg.truth = args.truth.or(cfg.truth);
    cfg.out = args.out.or(cfg.out);
    cfg.thresholds = args.thresholds.unwrap_or(cfg.thresholds);
    cfg.scales = args.scales.unwrap_or(cfg.scales);
    let index_path = require_input(cfg.forecasts.clone(), "forecasts")?;
    let truth = FieldStore::load_dir(&require_input(cfg.truth.clone(), "truth")?)?;
    let index = ForecastIndex::load(&index_path)?;
    let base = index_path.parent().map(PathBuf::from).unwrap_or_default();
    let scheme = default_scheme();
    let new_acc = || ScoreAccumulator::new(&cfg.thresholds, &cfg.scales, index.forecast_steps, &scheme).map_err(|e| usage(e.to_string()));
    let (mut model, mut persistence) = (new_acc()?, new_acc()?);
    let out = output_dir(cfg.out.clone())?;
    cfg.out = Some(out.clone());
    let observed = |t: i64| {
        truth.get(PRECIP, t).ok_or(CoreError::MissingFrame {
            variable: PRECIP.to_string(),
            time: t,
        })
    };
    for e in &index.entries {
        if e.lead == 0 || e.lead > index.forecast_steps {
            bail!(
                "forecast for anchor {} has lead {} outside 1..={}",
                e.anchor,
                e.lead,
                index.forecast_steps
            );
        }
        let fc = read_field(&base.join(&e.path))?;
        let obs = observed(e.valid_time)?;
        let last = observed(e.anchor)?;
        if fc.grid != obs.grid || last.grid != obs.grid {
            bail!("forecast {} and its observation are on different grids", e.path.display());
        }
        let (rows, cols) = (obs.grid.rows, obs.grid.cols);
        let truth_vals = obs.filled(0.0);
        let mask: Vec<bool> = obs.fill.iter().map(|f| !f).collect();
        model.add_field(e.lead - 1, &fc.filled(0.0), &truth_vals, rows, cols, Some(&mask))?;
        let both: Vec<bool> = mask.iter().zip(&last.fill).map(|(m, f)| *m && !f).collect();
        persistence.add_field(e.lead - 1, &last.filled(0.0), &truth_vals, rows, cols, Some(&both))?;
    }
    let mut reports = NamedReports::new();
    reports.insert("model".into(), model.finish()?);
    reports.insert("persistence".into(), persistence.finish()?);
    write_json(&out.join(SCORES_FILE), &reports)?;
    for (name, r) in &reports {
        fs::write(out.join(format!("scores_{name}.csv")), r.to_csv()).with_context(|| format!("writing scores in {}", out.display()))?;
    }
    write_manifest(&out, "evaluate", &cfg)?;
    if let Some(&r) = cfg.thresholds.iter().find(|&&r| r == 1.0).or(cfg.thresholds.first()) {
        for lead in 1..=index.forecast_steps {
            let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.3}"));
            info!(
                "lead {lead}: CSI@{r} model {} persistence {}",
                fmt(reports["model"].csi(lead, r)),
                fmt(reports["persistence"].csi(lead, r))
            );
        }
    }
    Ok(())
}

fn parse_form(s: &str) -> Result<MrmrForm, String> {
    match s {
        "quotient" => Ok(MrmrForm::Quotient),
        "difference" => Ok(MrmrForm::Difference),
        _ => Err(format!("unknown form `{s}` (expected quotient or difference)")),
    }
}

#[derive(clap::Args, Debug)]
pub struct MrmrArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Response lead step.
    #[arg(long)]
    pub lead: Option<usize>,
    /// Number of past precipitation frames offered as features.
    #[arg(long)]
    pub lags: Option<usize>,
    /// Pixels sampled per block.
    #[arg(long)]
    pub pixels: Option<usize>,
    #[arg(long)]
    pub bins: Option<usize>,
    #[arg(long, value_parser = parse_form)]
    pub form: Option<MrmrForm>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MrmrConfig {
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub lead: usize,
    pub lags: usize,
    pub pixels: usize,
    pub bins: usize,
    pub form: MrmrForm,
    pub seed: u64,
}

impl Default for MrmrConfig {
    fn default() -> Self {
        MrmrConfig {
            dataset: None,
            out: None,
            lead: 1,
            lags: 3,
            pixels: 1000,
            bins: DEFAULT_BINS,
            form: MrmrForm::Quotient,
            seed: 0,
        }
    }
}

pub fn mrmr(args: MrmrArgs) -> Result<()> {
    let (mut cfg, _) = load_config::<MrmrConfig>(args.config.as_deref(), "mrmr")?;
    cfg.dataset = args.dataset.or(cfg.dataset);
    cfg.out = args.out.or(cfg.out);
    cfg.lead = args.lead.unwrap_or(cfg.lead);
    cfg.lags = args.lags.unwrap_or(cfg.lags);
    cfg.pixels = args.pixels.unwrap_or(cfg.pixels);
    cfg.bins = args.bins.unwrap_or(cfg.bins);
    cfg.form = args.form.unwrap_or(cfg.form);
    cfg.seed = args.seed.unwrap_or(cfg.seed);
    let ds = DatasetManifest::load(&require_input(cfg.dataset.clone(), "dataset")?)?;
    if cfg.lead == 0 || cfg.lead > ds.forecast_steps {
        return Err(usage(format!("--lead {} outside 1..={}", cfg.lead, ds.forecast_steps)));
    }
    let out = output_dir(cfg.out.clone())?;
    cfg.out = Some(out.clone());
    let store = ds.store()?;
    let (features, response) = mrmr_dataset(&store, &ds.train_anchors, ds.input_steps, cfg.lead, cfg.lags, cfg.pixels, cfg.seed)?;
    let result = mrmr_scores(&features, &response, cfg.bins, cfg.form)?;
    write_json(&out.join(MRMR_FILE), &result)?;
    write_manifest(&out, "mrmr", &cfg)?;
    for (rank, &i) in result.order.iter().enumerate() {
        info!(
            "{:>2}. {:<10} score {:.4}  relevance {:.4}",
            rank + 1,
            result.names[i],
            result.scores[i],
            result.relevance[i]
        );
    }
    Ok(())
}

#[derive(clap::Args, Debug)]
pub struct AutocorrArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory of field containers.
    #[arg(long)]
    pub fields: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub variable: Option<String>,
    #[arg(long)]
    pub max_lag: Option<usize>,
    /// Frame pairs drawn per lag.
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AutocorrConfig {
    pub fields: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub variable: String,
    pub options: AutocorrOptions,
}

impl Default for AutocorrConfig {
    fn default() -> Self {
        AutocorrConfig {
            fields: None,
            out: None,
            variable: PRECIP.to_string(),
            options: AutocorrOptions::default(),
        }
    }
}

pub fn autocorr(args: AutocorrArgs) -> Result<()> {
    let (mut cfg, _) = load_config::<AutocorrConfig>(args.config.as_deref(), "autocorr")?;
    cfg.fields = args.fields.or(cfg.fields);
    cfg.out = args.out.or(cfg.out);
    cfg.variable = args.variable.unwrap_or(cfg.variable);
    let o = &mut cfg.options;
    o.max_lag = args.max_lag.unwrap_or(o.max_lag);
    o.samples = args.samples.unwrap_or(o.samples);
    o.seed = args.seed.unwrap_or(o.seed);
    let store = FieldStore::load_dir(&require_input(cfg.fields.clone(), "fields")?)?;
    let times = store.times(&cfg.variable);
    if times.len() < 2 {
        return Err(usage(format!("need at least two {} frames, found {}", cfg.variable, times.len())));
    }
    let step = (cfg.options.step_hours * 60.0).round() as i64;
    if step <= 0 {
        return Err(usage("step_hours must be positive"));
    }
    if let Some(w) = times.windows(2).find(|w| w[1] - w[0] != step) {
        bail!("{} frames at t={} and t={} are not {step} min apart", cfg.variable, w[0], w[1]);
    }
    let out = output_dir(cfg.out.clone())?;
    cfg.out = Some(out.clone());
    let fields: Vec<_> = times.iter().filter_map(|&t| store.get(&cfg.variable, t)).collect();
    let frames: Vec<Vec<f64>> = fields.iter().map(|f| f.filled(0.0)).collect();
    let masks: Vec<Vec<bool>> = fields.iter().map(|f| f.fill.iter().map(|b| !b).collect()).collect();
    let result = autocorr_fit(&frames, Some(&masks), &cfg.options)?;
    let mut csv = String::from("lag,hours,samples,median,lower,upper\n");
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
    for l in &result.lags {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{}",
            l.lag,
            l.hours,
            l.samples,
            opt(l.median),
            opt(l.lower),
            opt(l.upper)
        );
    }
    fs::write(out.join("autocorr.csv"), csv).with_context(|| format!("writing autocorr.csv in {}", out.display()))?;
    write_json(&out.join("autocorr.json"), &result)?;
    write_manifest(&out, "autocorr", &cfg)?;
    println!("alpha={} tau_hours={} fitted_lags={}", result.alpha, result.tau, result.fitted_lags);
    Ok(())
}
