//! Synthetic storm scenes: Gaussian rain cells advected by a steady,
//! divergence-free wind with exponential growth or decay, a moisture field
//! that leads precipitation, and noisy wind observations.

use nowcast_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Pareto};
use serde::{Deserialize, Serialize};

use crate::datapipe::{GridField, GridSpec, DT_MINUTES};
use crate::error::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    Periodic,
    Open,
}

/// Scene parameters. Distances are in grid cells, velocities in cells per
/// step, rates per step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub rows: usize,
    pub cols: usize,
    pub steps: usize,
    pub n_cells: usize,
    /// Peak-rate range for new cells (mm/hr).
    pub amplitude: (f64, f64),
    /// Pareto shape for heavy-tailed peaks; `amplitude.0` is the scale and
    /// `amplitude.1` the cap.
    pub heavy_tail: Option<f64>,
    pub width: (f64, f64),
    /// Range of the per-step log growth rate.
    pub growth: (f64, f64),
    pub velocity: (f64, f64),
    /// Amplitude of the sinusoidal wind perturbation.
    pub wind_perturbation: f64,
    pub wind_noise: f64,
    pub tpw_base: f64,
    pub tpw_gain: f64,
    /// Steps by which moisture leads precipitation.
    pub tpw_lead: usize,
    /// Extra Gaussian width of the moisture signature.
    pub tpw_spread: f64,
    pub tpw_noise: f64,
    pub boundary: Boundary,
    /// Replace cells whose peak falls below this rate or which leave an open
    /// domain.
    pub respawn_below: Option<f64>,
    pub origin: (f64, f64),
    pub spacing: f64,
    /// Valid time of the first frame in minutes.
    pub start_time: i64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            rows: 64,
            cols: 64,
            steps: 48,
            n_cells: 8,
            amplitude: (2.0, 20.0),
            heavy_tail: None,
            width: (2.0, 4.0),
            growth: (-0.04, 0.04),
            velocity: (1.0, 0.5),
            wind_perturbation: 0.3,
            wind_noise: 0.05,
            tpw_base: 30.0,
            tpw_gain: 1.0,
            tpw_lead: 2,
            tpw_spread: 1.5,
            tpw_noise: 3.0,
            boundary: Boundary::Periodic,
            respawn_below: Some(0.5),
            origin: (0.0, 0.0),
            spacing: 0.1,
            start_time: 0,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(CoreError::invalid("scene config", reason));
        if self.rows == 0 || self.cols == 0 || self.steps == 0 {
            return bad("rows, cols and steps must be positive".into());
        }
        if !(self.amplitude.0 > 0.0 && self.amplitude.0 <= self.amplitude.1) {
            return bad(format!("amplitude range {:?} must be positive and ordered", self.amplitude));
        }
        if !(self.width.0 > 0.0 && self.width.0 <= self.width.1) {
            return bad(format!("width range {:?} must be positive and ordered", self.width));
        }
        if self.growth.0 > self.growth.1 {
            return bad(format!("growth range {:?} is reversed", self.growth));
        }
        if self.heavy_tail.is_some_and(|a| !(a > 0.0)) {
            return bad("heavy-tail shape must be positive".into());
        }
        if self.wind_noise < 0.0 || self.tpw_noise < 0.0 || self.tpw_spread < 0.0 {
            return bad("noise levels and spread must be non-negative".into());
        }
        if !(self.spacing > 0.0) {
            return bad("spacing must be positive".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> GridSpec {
        GridSpec {
            origin: self.origin,
            spacing: self.spacing,
            rows: self.rows,
            cols: self.cols,
        }
    }

    /// Wind `(u, v)` at a position: u is along columns, v along rows.
    /// `u` varies only with row and `v` only with column, so the field is
    /// divergence-free.
    pub fn wind(&self, row: f64, col: f64) -> (f64, f64) {
        let tau = std::f64::consts::TAU;
        (
            self.velocity.0 + self.wind_perturbation * (tau * row / self.rows as f64).sin(),
            self.velocity.1 + self.wind_perturbation * (tau * col / self.cols as f64).cos(),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cell {
    pub row: f64,
    pub col: f64,
    pub amplitude: f64,
    pub width: f64,
    pub growth: f64,
}

/// One time step of a scene; all fields are row-major `rows × cols`.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneFrame {
    pub time: i64,
    pub p: Vec<f64>,
    pub tpw: Vec<f64>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub config: SceneConfig,
    pub frames: Vec<SceneFrame>,
    /// Cell states per step, including the lookahead used by moisture.
    pub cells: Vec<Vec<Cell>>,
}

fn spawn(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Cell {
    let amplitude = match cfg.heavy_tail {
        Some(shape) => Pareto::new(cfg.amplitude.0, shape)
            .expect("validated shape")
            .sample(rng)
            .min(cfg.amplitude.1),
        None => rng.random_range(cfg.amplitude.0..=cfg.amplitude.1),
    };
    Cell {
        row: rng.random_range(0.0..cfg.rows as f64),
        col: rng.random_range(0.0..cfg.cols as f64),
        amplitude,
        width: rng.random_range(cfg.width.0..=cfg.width.1),
        growth: rng.random_range(cfg.growth.0..=cfg.growth.1),
    }
}

fn advance(cfg: &SceneConfig, cell: &Cell) -> Cell {
    let (u, v) = cfg.wind(cell.row, cell.col);
    let (mut row, mut col) = (cell.row + v, cell.col + u);
    if cfg.boundary == Boundary::Periodic {
        row = row.rem_euclid(cfg.rows as f64);
        col = col.rem_euclid(cfg.cols as f64);
    }
    Cell {
        row,
        col,
        amplitude: cell.amplitude * cell.growth.exp(),
        ..*cell
    }
}

fn outside(cfg: &SceneConfig, c: &Cell) -> bool {
    let margin = 3.0 * c.width;
    c.row < -margin || c.col < -margin || c.row > cfg.rows as f64 + margin || c.col > cfg.cols as f64 + margin
}

fn offset(d: f64, n: usize, periodic: bool) -> f64 {
    if periodic {
        let n = n as f64;
        d - n * (d / n).round()
    } else {
        d
    }
}

/// Indices within `reach` of `centre`, each visited once even when the
/// footprint exceeds a periodic domain.
fn window(centre: f64, reach: isize, n: usize, periodic: bool) -> Vec<usize> {
    let c = centre.round() as isize;
    if periodic && 2 * reach + 1 >= n as isize {
        return (0..n).collect();
    }
    (c - reach..=c + reach)
        .filter_map(|i| {
            if periodic {
                Some(i.rem_euclid(n as isize) as usize)
            } else {
                (0..n as isize).contains(&i).then_some(i as usize)
            }
        })
        .collect()
}

/// Adds `Σ scale·A·exp(−d²/(2w²))` over cells with widths widened by
/// `spread` in quadrature and amplitudes rescaled to preserve mass.
fn render(cfg: &SceneConfig, cells: &[Cell], spread: f64, scale: f64, out: &mut [f64]) {
    let periodic = cfg.boundary == Boundary::Periodic;
    for c in cells {
        let w2 = c.width * c.width + spread * spread;
        let amp = scale * c.amplitude * c.width * c.width / w2;
        let reach = (6.0 * w2.sqrt()).ceil() as isize;
        let cols = window(c.col, reach, cfg.cols, periodic);
        for r in window(c.row, reach, cfg.rows, periodic) {
            let dy = offset(r as f64 - c.row, cfg.rows, periodic);
            for &col in &cols {
                let dx = offset(col as f64 - c.col, cfg.cols, periodic);
                out[r * cfg.cols + col] += amp * (-(dx * dx + dy * dy) / (2.0 * w2)).exp();
            }
        }
    }
}

/// Simulates `cfg.steps` frames. Periodic domains wrap both cell positions
/// and their footprints; open domains let cells drift out.
pub fn generate_sequence(cfg: &SceneConfig) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let horizon = cfg.steps + cfg.tpw_lead;
    let mut cells: Vec<Vec<Cell>> = Vec::with_capacity(horizon);
    cells.push((0..cfg.n_cells).map(|_| spawn(cfg, &mut rng)).collect());
    for k in 1..horizon {
        let next = cells[k - 1]
            .iter()
            .map(|c| {
                let moved = advance(cfg, c);
                let faded = cfg.respawn_below.is_some_and(|t| moved.amplitude < t);
                let gone = cfg.boundary == Boundary::Open && outside(cfg, &moved);
                if faded || gone {
                    spawn(cfg, &mut rng)
                } else {
                    moved
                }
            })
            .collect();
        cells.push(next);
    }
    let n = cfg.rows * cfg.cols;
    let wind_noise = Normal::new(0.0, cfg.wind_noise).expect("validated noise");
    let tpw_noise = Normal::new(0.0, cfg.tpw_noise).expect("validated noise");
    let mut frames = Vec::with_capacity(cfg.steps);
    for k in 0..cfg.steps {
        let mut p = vec![0.0; n];
        render(cfg, &cells[k], 0.0, 1.0, &mut p);
        let mut tpw = vec![cfg.tpw_base; n];
        render(cfg, &cells[k + cfg.tpw_lead], cfg.tpw_spread, cfg.tpw_gain, &mut tpw);
        let mut u = Vec::with_capacity(n);
        let mut v = Vec::with_capacity(n);
        for r in 0..cfg.rows {
            for c in 0..cfg.cols {
                let (wu, wv) = cfg.wind(r as f64, c as f64);
                u.push(wu + wind_noise.sample(&mut rng));
                v.push(wv + wind_noise.sample(&mut rng));
            }
        }
        for t in &mut tpw {
            *t += tpw_noise.sample(&mut rng);
        }
        frames.push(SceneFrame {
            time: cfg.start_time + k as i64 * DT_MINUTES,
            p,
            tpw,
            u,
            v,
        });
    }
    Ok(Scene {
        config: cfg.clone(),
        frames,
        cells,
    })
}

impl Scene {
    /// Every frame as P, TPW, U and V fields.
    pub fn to_fields(&self) -> Result<Vec<GridField>> {
        let grid = self.config.grid();
        let n = grid.len();
        let mut out = Vec::with_capacity(4 * self.frames.len());
        for f in &self.frames {
            for (name, vals) in [("P", &f.p), ("TPW", &f.tpw), ("U", &f.u), ("V", &f.v)] {
                let values = vals.iter().map(|&x| x as f32).collect();
                out.push(GridField::new(name, f.time, grid.clone(), values, vec![false; n])?);
            }
        }
        Ok(out)
    }

    /// Precipitation frames `[steps, rows, cols]`.
    pub fn precipitation(&self) -> Tensor {
        let c = &self.config;
        let data = self.frames.iter().flat_map(|f| f.p.iter().copied()).collect();
        Tensor::new(vec![self.frames.len(), c.rows, c.cols], data).expect("consistent frames")
    }
}

/// Repeats the last observed frame `[M, N]` for `horizon` steps.
pub fn persistence_forecast(last: &Tensor, horizon: usize) -> Result<Tensor> {
    if last.rank() != 2 {
        return Err(CoreError::invalid(
            "persistence",
            format!("expected an [M, N] frame, got {:?}", last.shape()),
        ));
    }
    let mut shape = vec![horizon];
    shape.extend_from_slice(last.shape());
    let data = (0..horizon).flat_map(|_| last.data().iter().copied()).collect();
    Ok(Tensor::new(shape, data)?)
}
