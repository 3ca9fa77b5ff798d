//! Gridded fields, nearest-neighbour regridding, input-block assembly, patch
//! sampling and overlapping tiled inference.
//!
//! Cell `(r, c)` of a grid is centred at `(origin.0 + r·spacing,
//! origin.1 + c·spacing)` in (latitude-like, longitude-like) degrees.

use std::collections::BTreeMap;
use std::path::Path;

use nowcast_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Reader;
use crate::error::{CoreError, Result};
use crate::network::{HeadKind, NetworkParams};
use crate::train::Sample;

pub const FIELD_MAGIC: &[u8; 4] = b"GFLD";
pub const FIELD_VERSION: u8 = 1;
/// Observation cadence in minutes.
pub const DT_MINUTES: i64 = 30;
/// Channel order of input blocks.
pub const VARIABLES: [&str; 4] = ["P", "TPW", "U", "V"];
pub const PRECIP: &str = "P";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub origin: (f64, f64),
    pub spacing: f64,
    pub rows: usize,
    pub cols: usize,
}

impl GridSpec {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn validate(&self) -> Result<()> {
        if !(self.spacing > 0.0) || !self.spacing.is_finite() {
            return Err(CoreError::invalid("grid", format!("spacing {} must be positive", self.spacing)));
        }
        if self.rows == 0 || self.cols == 0 {
            return Err(CoreError::invalid("grid", "extents must be at least 1"));
        }
        if !self.origin.0.is_finite() || !self.origin.1.is_finite() {
            return Err(CoreError::invalid("grid", "origin must be finite"));
        }
        Ok(())
    }
}

/// One raster of a variable at one valid time. `fill[i]` marks missing data.
#[derive(Clone, Debug, PartialEq)]
pub struct GridField {
    pub name: String,
    pub units: String,
    /// Minutes since the epoch.
    pub valid_time: i64,
    pub grid: GridSpec,
    pub values: Vec<f32>,
    pub fill: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
struct FieldHeader {
    name: String,
    units: String,
    valid_time: i64,
    origin: (f64, f64),
    spacing: f64,
    rows: usize,
    cols: usize,
}

pub fn default_units(name: &str) -> &'static str {
    match name {
        "P" => "mm/hr",
        "TPW" => "kg/m^2",
        "U" | "V" => "m/s",
        _ => "1",
    }
}

impl GridField {
    pub fn new(name: &str, valid_time: i64, grid: GridSpec, values: Vec<f32>, fill: Vec<bool>) -> Result<Self> {
        let f = GridField {
            name: name.to_string(),
            units: default_units(name).to_string(),
            valid_time,
            grid,
            values,
            fill,
        };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        let n = self.grid.len();
        if self.values.len() != n || self.fill.len() != n {
            return Err(CoreError::invalid(
                "field",
                format!(
                    "{} values and {} mask bits for a {}x{} grid",
                    self.values.len(),
                    self.fill.len(),
                    self.grid.rows,
                    self.grid.cols
                ),
            ));
        }
        if let Some(i) = (0..n).find(|&i| !self.fill[i] && !self.values[i].is_finite()) {
            return Err(CoreError::invalid(
                "field",
                format!("{} has a non-finite unmasked value at index {i}", self.name),
            ));
        }
        if self.name == PRECIP {
            if let Some(i) = (0..n).find(|&i| !self.fill[i] && self.values[i] < 0.0) {
                return Err(CoreError::invalid(
                    "field",
                    format!("negative precipitation {} at index {i}", self.values[i]),
                ));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&FieldHeader {
            name: self.name.clone(),
            units: self.units.clone(),
            valid_time: self.valid_time,
            origin: self.grid.origin,
            spacing: self.grid.spacing,
            rows: self.grid.rows,
            cols: self.grid.cols,
        })?;
        let n = self.grid.len();
        let mut out = Vec::with_capacity(9 + header.len() + 4 * n + n.div_ceil(8));
        out.extend_from_slice(FIELD_MAGIC);
        out.push(FIELD_VERSION);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let mut bits = vec![0u8; n.div_ceil(8)];
        for (i, &f) in self.fill.iter().enumerate() {
            if f {
                bits[i / 8] |= 1 << (i % 8);
            }
        }
        out.extend_from_slice(&bits);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |pos, reason: String| CoreError::format("field container", pos, reason);
        let mut r = Reader { bytes, pos: 0 };
        let relabel = |e: CoreError| match e {
            CoreError::Format { pos, reason, .. } => fmt(pos, reason),
            other => other,
        };
        if r.take(4).map_err(relabel)? != FIELD_MAGIC {
            return Err(fmt(0, "bad magic, expected GFLD".into()));
        }
        let version = r.take(1).map_err(relabel)?[0];
        if version != FIELD_VERSION {
            return Err(fmt(4, format!("unsupported version {version}")));
        }
        let hlen = r.u32().map_err(relabel)? as usize;
        let hpos = r.pos;
        let h: FieldHeader = serde_json::from_slice(r.take(hlen).map_err(relabel)?)
            .map_err(|e| fmt(hpos + e.column().saturating_sub(1), format!("header JSON: {e}")))?;
        let n = h.rows.checked_mul(h.cols).ok_or_else(|| fmt(hpos, "extent overflow".into()))?;
        let expect = n.checked_mul(4).and_then(|b| b.checked_add(n.div_ceil(8)));
        if expect != Some(r.remaining()) {
            return Err(fmt(
                r.pos,
                format!(
                    "payload is {} bytes, a {}x{} grid needs {}",
                    r.remaining(),
                    h.rows,
                    h.cols,
                    4 * n + n.div_ceil(8)
                ),
            ));
        }
        let values = r
            .take(4 * n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let bits = r.take(n.div_ceil(8))?;
        let fill = (0..n).map(|i| bits[i / 8] >> (i % 8) & 1 == 1).collect();
        let f = GridField {
            name: h.name,
            units: h.units,
            valid_time: h.valid_time,
            grid: GridSpec {
                origin: h.origin,
                spacing: h.spacing,
                rows: h.rows,
                cols: h.cols,
            },
            values,
            fill,
        };
        f.validate().map_err(|e| fmt(hpos, e.to_string()))?;
        Ok(f)
    }

    /// Values as f64 with fill positions set to `fill_value`.
    pub fn filled(&self, fill_value: f64) -> Vec<f64> {
        self.values
            .iter()
            .zip(&self.fill)
            .map(|(&v, &f)| if f { fill_value } else { v as f64 })
            .collect()
    }
}

pub fn write_field(field: &GridField, path: &Path) -> Result<()> {
    std::fs::write(path, field.to_bytes()?).map_err(|e| CoreError::io(path, e))
}

pub fn read_field(path: &Path) -> Result<GridField> {
    let bytes = std::fs::read(path).map_err(|e| CoreError::io(path, e))?;
    GridField::from_bytes(&bytes).map_err(|e| match e {
        CoreError::Format { pos, reason, .. } => CoreError::invalid("field container", format!("{}: byte {pos}: {reason}", path.display())),
        other => other,
    })
}

/// Nearest source cell for each target cell centre. Target cells more than
/// half a source cell outside the source domain are filled.
pub fn regrid_nearest(src: &GridField, target: &GridSpec) -> Result<GridField> {
    target.validate()?;
    let s = &src.grid;
    let index = |coord: f64, origin: f64, n: usize| -> Option<usize> {
        let k = ((coord - origin) / s.spacing + 0.5).floor();
        (k >= 0.0 && k < n as f64).then_some(k as usize)
    };
    let rows: Vec<Option<usize>> = (0..target.rows)
        .map(|r| index(target.origin.0 + r as f64 * target.spacing, s.origin.0, s.rows))
        .collect();
    let cols: Vec<Option<usize>> = (0..target.cols)
        .map(|c| index(target.origin.1 + c as f64 * target.spacing, s.origin.1, s.cols))
        .collect();
    if rows.iter().all(Option::is_none) || cols.iter().all(Option::is_none) {
        return Err(CoreError::invalid("regrid", "target grid does not overlap the source domain"));
    }
    let mut values = Vec::with_capacity(target.len());
    let mut fill = Vec::with_capacity(target.len());
    for r in &rows {
        for c in &cols {
            match (r, c) {
                (Some(r), Some(c)) => {
                    let i = r * s.cols + c;
                    values.push(src.values[i]);
                    fill.push(src.fill[i]);
                }
                _ => {
                    values.push(0.0);
                    fill.push(true);
                }
            }
        }
    }
    Ok(GridField {
        name: src.name.clone(),
        units: src.units.clone(),
        valid_time: src.valid_time,
        grid: target.clone(),
        values,
        fill,
    })
}

/// Fields indexed by (variable, valid time).
#[derive(Clone, Debug, Default)]
pub struct FieldStore {
    fields: BTreeMap<(String, i64), GridField>,
}

impl FieldStore {
    pub fn new() -> Self {
        FieldStore::default()
    }

    pub fn insert(&mut self, field: GridField) {
        self.fields.insert((field.name.clone(), field.valid_time), field);
    }

    pub fn get(&self, variable: &str, time: i64) -> Option<&GridField> {
        self.fields.get(&(variable.to_string(), time))
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    pub fn times(&self, variable: &str) -> Vec<i64> {
        self.fields.keys().filter(|(v, _)| v == variable).map(|(_, t)| *t).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &GridField> {
        self.fields.values()
    }

    /// Loads every `*.gfld` file of a directory.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut paths: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| CoreError::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "gfld"))
            .collect();
        paths.sort();
        let mut store = FieldStore::new();
        for p in paths {
            store.insert(read_field(&p)?);
        }
        Ok(store)
    }

    /// Anchors `t` for which every frame of a block is present.
    pub fn complete_anchors(&self, input_steps: usize, forecast_steps: usize) -> Vec<i64> {
        self.times(PRECIP)
            .into_iter()
            .filter(|&t| {
                frame_times(t, input_steps, forecast_steps)
                    .iter()
                    .all(|(v, ft)| self.get(v, *ft).is_some())
            })
            .collect()
    }
}

/// Valid time of the covariates in input slice `n`: `t + (T − 2n)·Δt`.
pub fn covariate_time(anchor: i64, n: usize, input_steps: usize) -> i64 {
    anchor + (input_steps as i64 - 2 * n as i64) * DT_MINUTES
}

/// Every (variable, valid time) a block anchored at `anchor` reads.
pub fn frame_times(anchor: i64, input_steps: usize, forecast_steps: usize) -> Vec<(String, i64)> {
    let mut out = Vec::new();
    for n in 0..input_steps {
        out.push((PRECIP.to_string(), anchor - n as i64 * DT_MINUTES));
        for v in &VARIABLES[1..] {
            out.push((v.to_string(), covariate_time(anchor, n, input_steps)));
        }
    }
    for k in 1..=forecast_steps {
        out.push((PRECIP.to_string(), anchor + k as i64 * DT_MINUTES));
    }
    out
}

/// Predictors `[M, N, C, T]`; fill values are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct InputBlock {
    pub anchor: i64,
    pub data: Tensor,
}

/// Future precipitation `[M, N, T_f]` with validity per entry.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetBlock {
    pub anchor: i64,
    pub data: Tensor,
    pub valid: Vec<bool>,
}

impl InputBlock {
    /// `[C, T, M, N]` layout used by the network.
    pub fn channels_first(&self) -> Tensor {
        self.data.permute(&[2, 3, 0, 1])
    }
}

impl TargetBlock {
    /// `[T_f, M, N]` rates and the matching mask.
    pub fn channels_first(&self) -> (Tensor, Vec<bool>) {
        let s = self.data.shape();
        let (m, n, t) = (s[0], s[1], s[2]);
        let mut valid = vec![false; self.valid.len()];
        for i in 0..m * n {
            for k in 0..t {
                valid[k * m * n + i] = self.valid[i * t + k];
            }
        }
        (self.data.permute(&[2, 0, 1]), valid)
    }
}

fn lookup<'a>(store: &'a FieldStore, variable: &str, time: i64) -> Result<&'a GridField> {
    store.get(variable, time).ok_or_else(|| CoreError::MissingFrame {
        variable: variable.to_string(),
        time,
    })
}

fn check_grid(f: &GridField, grid: &GridSpec) -> Result<()> {
    if &f.grid != grid {
        return Err(CoreError::invalid(
            "assemble_block",
            format!("{} at t={} is on a different grid than the anchor frame", f.name, f.valid_time),
        ));
    }
    Ok(())
}

/// Assembles the predictor block for anchor `t`: slice `n` holds P at
/// `t − nΔt` and the covariates at `t + (T − 2n)Δt`.
pub fn assemble_input(store: &FieldStore, anchor: i64, input_steps: usize) -> Result<InputBlock> {
    let grid = lookup(store, PRECIP, anchor)?.grid.clone();
    let (m, n) = (grid.rows, grid.cols);
    let c = VARIABLES.len();
    let mut input = vec![0.0; m * n * c * input_steps];
    for s in 0..input_steps {
        for (ci, v) in VARIABLES.iter().enumerate() {
            let t = if ci == 0 {
                anchor - s as i64 * DT_MINUTES
            } else {
                covariate_time(anchor, s, input_steps)
            };
            let f = lookup(store, v, t)?;
            check_grid(f, &grid)?;
            for (i, val) in f.filled(0.0).into_iter().enumerate() {
                input[(i * c + ci) * input_steps + s] = val;
            }
        }
    }
    Ok(InputBlock {
        anchor,
        data: Tensor::new(vec![m, n, c, input_steps], input)?,
    })
}

/// Assembles the predictor block and the target block of P at
/// `t + Δt .. t + T_f·Δt` for anchor `t`.
pub fn assemble_block(store: &FieldStore, anchor: i64, input_steps: usize, forecast_steps: usize) -> Result<(InputBlock, TargetBlock)> {
    let input = assemble_input(store, anchor, input_steps)?;
    let grid = &lookup(store, PRECIP, anchor)?.grid;
    let (m, n) = (grid.rows, grid.cols);
    let mut target = vec![0.0; m * n * forecast_steps];
    let mut valid = vec![false; m * n * forecast_steps];
    for k in 0..forecast_steps {
        let f = lookup(store, PRECIP, anchor + (k as i64 + 1) * DT_MINUTES)?;
        check_grid(f, grid)?;
        for i in 0..m * n {
            target[i * forecast_steps + k] = if f.fill[i] { 0.0 } else { f.values[i] as f64 };
            valid[i * forecast_steps + k] = !f.fill[i];
        }
    }
    Ok((
        input,
        TargetBlock {
            anchor,
            data: Tensor::new(vec![m, n, forecast_steps], target)?,
            valid,
        },
    ))
}

/// A patch location: anchor time and top-left cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchRef {
    pub anchor: i64,
    pub row: usize,
    pub col: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PatchSet {
    pub patch: usize,
    pub train: Vec<PatchRef>,
    pub validation: Vec<PatchRef>,
}

pub const TRAIN_FRACTION: f64 = 0.7;

/// Draws `count` patches with uniformly random anchors and positions, then
/// splits them 70/30 into training and validation.
pub fn sample_patches(domain: (usize, usize), anchors: &[i64], patch: usize, count: usize, seed: u64) -> Result<PatchSet> {
    if patch == 0 || patch > domain.0 || patch > domain.1 {
        return Err(CoreError::invalid(
            "sample_patches",
            format!("patch {patch} does not fit the {}x{} domain", domain.0, domain.1),
        ));
    }
    if count > 0 && anchors.is_empty() {
        return Err(CoreError::invalid("sample_patches", "no complete anchors to sample from"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut all: Vec<PatchRef> = (0..count)
        .map(|_| PatchRef {
            anchor: anchors[rng.random_range(0..anchors.len())],
            row: rng.random_range(0..=domain.0 - patch),
            col: rng.random_range(0..=domain.1 - patch),
        })
        .collect();
    all.shuffle(&mut rng);
    let n_train = (count as f64 * TRAIN_FRACTION).round() as usize;
    let validation = all.split_off(n_train);
    Ok(PatchSet {
        patch,
        train: all,
        validation,
    })
}

/// Crops `[C, T, M, N]` / `[T_f, M, N]` block tensors to a training sample.
pub fn crop_sample(input_cf: &Tensor, target_cf: &Tensor, valid_cf: &[bool], row: usize, col: usize, patch: usize) -> Result<Sample> {
    let is = input_cf.shape();
    let (m, n) = (is[2], is[3]);
    if row + patch > m || col + patch > n {
        return Err(CoreError::invalid(
            "crop",
            format!("patch at ({row}, {col}) of size {patch} exceeds {m}x{n}"),
        ));
    }
    let lead = is[0] * is[1];
    let crop = |data: &[f64], planes: usize| -> Vec<f64> {
        let mut out = Vec::with_capacity(planes * patch * patch);
        for p in 0..planes {
            for r in row..row + patch {
                let start = p * m * n + r * n + col;
                out.extend_from_slice(&data[start..start + patch]);
            }
        }
        out
    };
    let tf = target_cf.shape()[0];
    let mut valid = Vec::with_capacity(tf * patch * patch);
    for p in 0..tf {
        for r in row..row + patch {
            let start = p * m * n + r * n + col;
            valid.extend_from_slice(&valid_cf[start..start + patch]);
        }
    }
    Ok(Sample {
        input: Tensor::new(vec![is[0], is[1], patch, patch], crop(input_cf.data(), lead))?,
        target: Tensor::new(vec![tf, patch, patch], crop(target_cf.data(), tf))?,
        valid: if valid.iter().all(|&v| v) { None } else { Some(valid) },
    })
}

/// Materializes patches, assembling each anchor's block once.
pub fn build_samples(
    store: &FieldStore,
    patches: &[PatchRef],
    patch: usize,
    input_steps: usize,
    forecast_steps: usize,
) -> Result<Vec<Sample>> {
    let mut cache: BTreeMap<i64, (Tensor, Tensor, Vec<bool>)> = BTreeMap::new();
    let mut out = Vec::with_capacity(patches.len());
    for p in patches {
        if !cache.contains_key(&p.anchor) {
            let (ib, tb) = assemble_block(store, p.anchor, input_steps, forecast_steps)?;
            let (t, v) = tb.channels_first();
            cache.insert(p.anchor, (ib.channels_first(), t, v));
        }
        let (i, t, v) = &cache[&p.anchor];
        out.push(crop_sample(i, t, v, p.row, p.col, patch)?);
    }
    Ok(out)
}

/// Name of the seeded pure-noise control feature in [`mrmr_dataset`].
pub const NOISE_FEATURE: &str = "NOISE";

/// Per-pixel feature table for relevance/redundancy scoring.
///
/// Features are P at `t, t−Δt, .., t−(lags−1)Δt` (named `P[t-k]`), the
/// covariates in the two input slices nearest `t` (named `TPW[t+0]`,
/// `U[t+2]`, .. for even input lengths) and a
/// standard-normal control; the response is P at `t + lead·Δt`. Each block
/// contributes up to `pixels_per_block` randomly chosen valid pixels.
pub fn mrmr_dataset(
    store: &FieldStore,
    anchors: &[i64],
    input_steps: usize,
    lead: usize,
    lags: usize,
    pixels_per_block: usize,
    seed: u64,
) -> Result<(Vec<(String, Vec<f64>)>, Vec<f64>)> {
    if lead == 0 || lags == 0 || lags > input_steps || input_steps < 2 {
        return Err(CoreError::invalid(
            "mrmr_dataset",
            format!("need 1 <= lags <= input steps ({input_steps}), input steps >= 2 and lead >= 1"),
        ));
    }
    let c = VARIABLES.len();
    // Covariate slices whose valid time is the anchor and two steps later.
    let cov_slices = [input_steps / 2, input_steps / 2 - 1];
    let mut names: Vec<String> = (0..lags).map(|k| format!("P[t-{k}]")).collect();
    for &s in &cov_slices {
        let off = input_steps as i64 - 2 * s as i64;
        for v in &VARIABLES[1..] {
            names.push(format!("{v}[t+{off}]"));
        }
    }
    names.push(NOISE_FEATURE.to_string());
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); names.len()];
    let mut response = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for &anchor in anchors {
        let (ib, tb) = assemble_block(store, anchor, input_steps, lead)?;
        let s = ib.data.shape();
        let (m, n) = (s[0], s[1]);
        let mut pixels: Vec<usize> = (0..m * n).filter(|&i| tb.valid[i * lead + lead - 1]).collect();
        pixels.shuffle(&mut rng);
        pixels.truncate(pixels_per_block);
        pixels.sort_unstable();
        let x = ib.data.data();
        let at = |i: usize, ci: usize, sl: usize| x[(i * c + ci) * input_steps + sl];
        for &i in &pixels {
            let mut f = 0;
            for k in 0..lags {
                columns[f].push(at(i, 0, k));
                f += 1;
            }
            for &sl in &cov_slices {
                for ci in 1..c {
                    columns[f].push(at(i, ci, sl));
                    f += 1;
                }
            }
            columns[f].push(rng.sample(rand_distr::StandardNormal));
            response.push(tb.data.data()[i * lead + lead - 1]);
        }
    }
    Ok((names.into_iter().zip(columns).collect(), response))
}

/// A forecaster over square patches: `[B, C, T, p, p]` →
/// `[B, K, T_f, p, p]` where `K` is 1 for rates or the class count.
pub trait BlockModel {
    fn predict_batch(&self, batch: &Tensor) -> Result<Tensor>;
}

impl BlockModel for NetworkParams {
    fn predict_batch(&self, batch: &Tensor) -> Result<Tensor> {
        let out = self.predict(batch)?;
        match self.config.head {
            HeadKind::Regression => {
                let s = out.shape();
                Ok(out.reshape(&[s[0], 1, s[1], s[2], s[3]])?)
            }
            HeadKind::Classification => Ok(out),
        }
    }
}

fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Number of tiles per axis for a domain extent.
pub fn tile_count(extent: usize, patch: usize) -> usize {
    extent.div_ceil(patch / 2)
}

/// Tiled inference with 50% overlap. The domain `[C, T, M, N]` is
/// reflection-padded by `p/4` before and enough after; tile `(i, j)` starts
/// at `(i·p/2, j·p/2)` in padded coordinates and contributes only its central
/// `p/2 × p/2` window. Returns `[K, T_f, M, N]` and the per-pixel write count.
pub fn tiled_predict_with_coverage(
    model: &dyn BlockModel,
    input_cf: &Tensor,
    patch: usize,
    batch_size: usize,
) -> Result<(Tensor, Vec<u32>)> {
    if patch < 4 || patch % 4 != 0 {
        return Err(CoreError::invalid(
            "tiled_predict",
            format!("patch {patch} must be a positive multiple of 4"),
        ));
    }
    let s = input_cf.shape();
    if s.len() != 4 {
        return Err(CoreError::invalid(
            "tiled_predict",
            format!("domain input must be [C, T, M, N], got {s:?}"),
        ));
    }
    let (c, t, m, n) = (s[0], s[1], s[2], s[3]);
    let half = patch / 2;
    let quarter = patch / 4;
    let (tr, tc) = (tile_count(m, patch), tile_count(n, patch));
    let mut origins = Vec::with_capacity(tr * tc);
    for i in 0..tr {
        for j in 0..tc {
            origins.push((i * half, j * half));
        }
    }
    let data = input_cf.data();
    let mut out: Option<(usize, usize, Vec<f64>)> = None;
    let mut coverage = vec![0u32; m * n];
    for chunk in origins.chunks(batch_size.max(1)) {
        let mut tiles = Vec::with_capacity(chunk.len() * c * t * patch * patch);
        for &(r0, c0) in chunk {
            for plane in 0..c * t {
                for r in 0..patch {
                    let sr = reflect(r0 as isize + r as isize - quarter as isize, m);
                    for col in 0..patch {
                        let sc = reflect(c0 as isize + col as isize - quarter as isize, n);
                        tiles.push(data[plane * m * n + sr * n + sc]);
                    }
                }
            }
        }
        let batch = Tensor::new(vec![chunk.len(), c, t, patch, patch], tiles)?;
        let pred = model.predict_batch(&batch)?;
        let ps = pred.shape();
        if ps.len() != 5 || ps[0] != chunk.len() || ps[3] != patch || ps[4] != patch {
            return Err(CoreError::invalid(
                "tiled_predict",
                format!("model returned {ps:?} for {} tiles of size {patch}", chunk.len()),
            ));
        }
        let (k, tf) = (ps[1], ps[2]);
        let (ok, otf, buf) = out.get_or_insert_with(|| (k, tf, vec![0.0; k * tf * m * n]));
        if (*ok, *otf) != (k, tf) {
            return Err(CoreError::invalid("tiled_predict", "model output channels changed between tiles"));
        }
        for (b, &(r0, c0)) in chunk.iter().enumerate() {
            for dr in 0..half {
                let orow = r0 + dr;
                if orow >= m {
                    break;
                }
                for dc in 0..half {
                    let ocol = c0 + dc;
                    if ocol >= n {
                        break;
                    }
                    coverage[orow * n + ocol] += 1;
                    for plane in 0..k * tf {
                        let src = ((b * k * tf + plane) * patch + quarter + dr) * patch + quarter + dc;
                        buf[plane * m * n + orow * n + ocol] = pred.data()[src];
                    }
                }
            }
        }
    }
    let (k, tf, buf) = out.expect("at least one tile");
    Ok((Tensor::new(vec![k, tf, m, n], buf)?, coverage))
}

/// [`tiled_predict_with_coverage`] without the coverage map.
pub fn tiled_predict(model: &dyn BlockModel, input: &InputBlock, patch: usize) -> Result<Tensor> {
    Ok(tiled_predict_with_coverage(model, &input.channels_first(), patch, 8)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_indices() {
        let got: Vec<usize> = (-3..8).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0, 1]);
        assert_eq!(reflect(-5, 1), 0);
    }

    #[test]
    fn covariate_lead_decreases_by_two_steps() {
        for n in 0..11 {
            assert_eq!(covariate_time(0, n, 12) - covariate_time(0, n + 1, 12), 2 * DT_MINUTES);
        }
        assert_eq!(covariate_time(0, 0, 12), 360);
        assert_eq!(covariate_time(0, 3, 12), 180);
        assert_eq!(covariate_time(0, 11, 12), -300);
    }

    #[test]
    fn split_is_seventy_thirty() {
        let s = sample_patches((32, 32), &[0, 30], 8, 100, 1).unwrap();
        assert_eq!((s.train.len(), s.validation.len()), (70, 30));
        assert!(sample_patches((32, 32), &[0], 8, 0, 1).unwrap().train.is_empty());
        assert!(sample_patches((32, 32), &[0], 64, 1, 1).is_err());
    }
}
