use nowcast_core::stormsim::{generate_sequence, persistence_forecast, Boundary, SceneConfig};
use nowcast_core::tensor::Tensor;
use nowcast_core::verify::{categorical_scores, confusion, pearson};

fn still(seed: u64) -> SceneConfig {
    SceneConfig {
        rows: 32,
        cols: 32,
        steps: 20,
        n_cells: 4,
        growth: (0.0, 0.0),
        velocity: (0.0, 0.0),
        wind_perturbation: 0.0,
        seed,
        ..SceneConfig::default()
    }
}

fn argmax(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |b, i| if v[i] > v[b] { i } else { b })
}

#[test]
fn static_scene_is_constant() {
    let s = generate_sequence(&still(1)).unwrap();
    for f in &s.frames[1..] {
        assert_eq!(f.p, s.frames[0].p);
    }
}

#[test]
fn unit_velocity_moves_the_peak_one_column_per_step() {
    let cfg = SceneConfig {
        n_cells: 1,
        velocity: (1.0, 0.0),
        ..still(2)
    };
    let s = generate_sequence(&cfg).unwrap();
    let first = argmax(&s.frames[0].p);
    for (k, f) in s.frames.iter().enumerate() {
        let a = argmax(&f.p);
        assert_eq!(a / 32, first / 32, "row changed at step {k}");
        assert_eq!(a % 32, (first % 32 + k) % 32, "column at step {k}");
    }
}

#[test]
fn decaying_mass_follows_the_exponential() {
    let lambda = 0.1;
    let cfg = SceneConfig {
        n_cells: 5,
        growth: (-lambda, -lambda),
        respawn_below: None,
        velocity: (0.7, -0.4),
        wind_perturbation: 0.2,
        ..still(3)
    };
    let s = generate_sequence(&cfg).unwrap();
    let m0: f64 = s.frames[0].p.iter().sum();
    for (k, f) in s.frames.iter().enumerate() {
        let m: f64 = f.p.iter().sum();
        let expect = m0 * (-lambda * k as f64).exp();
        assert!((m / expect - 1.0).abs() < 0.02, "step {k}: {m} vs {expect}");
    }
}

#[test]
fn generation_is_deterministic_and_nonnegative() {
    let cfg = SceneConfig {
        heavy_tail: Some(1.5),
        amplitude: (1.0, 200.0),
        boundary: Boundary::Open,
        seed: 9,
        ..SceneConfig::default()
    };
    let a = generate_sequence(&cfg).unwrap();
    assert_eq!(a, generate_sequence(&cfg).unwrap());
    assert_ne!(
        a.frames,
        generate_sequence(&SceneConfig { seed: 10, ..cfg.clone() }).unwrap().frames
    );
    for f in &a.frames {
        assert!(f.p.iter().all(|v| v.is_finite() && *v >= 0.0));
        assert!(f.tpw.iter().chain(&f.u).chain(&f.v).all(|v| v.is_finite()));
    }
}

#[test]
fn winds_track_the_advection_field() {
    let cfg = SceneConfig {
        seed: 4,
        ..SceneConfig::default()
    };
    let s = generate_sequence(&cfg).unwrap();
    let (mut tu, mut tv) = (Vec::new(), Vec::new());
    for r in 0..cfg.rows {
        for c in 0..cfg.cols {
            let (u, v) = cfg.wind(r as f64, c as f64);
            tu.push(u);
            tv.push(v);
        }
    }
    for f in &s.frames {
        assert!(pearson(&f.u, &tu, None).unwrap() > 0.9);
        assert!(pearson(&f.v, &tv, None).unwrap() > 0.9);
    }
}

#[test]
fn moisture_leads_precipitation() {
    let cfg = SceneConfig {
        tpw_noise: 0.0,
        seed: 5,
        ..SceneConfig::default()
    };
    let s = generate_sequence(&cfg).unwrap();
    let lag_corr = |lag: usize| {
        let rs: Vec<f64> = (0..s.frames.len() - lag)
            .map(|k| pearson(&s.frames[k].tpw, &s.frames[k + lag].p, None).unwrap())
            .collect();
        rs.iter().sum::<f64>() / rs.len() as f64
    };
    let at = [lag_corr(0), lag_corr(1), lag_corr(2), lag_corr(3)];
    assert!(at[2] > at[0] && at[2] > at[3], "{at:?}");
    assert!(at[1] > at[0]);
}

#[test]
fn scene_fields_carry_metadata() {
    let cfg = SceneConfig {
        start_time: 600,
        ..still(6)
    };
    let s = generate_sequence(&cfg).unwrap();
    let fields = s.to_fields().unwrap();
    assert_eq!(fields.len(), 4 * cfg.steps);
    assert_eq!((fields[0].name.as_str(), fields[0].valid_time), ("P", 600));
    assert_eq!((fields[7].name.as_str(), fields[7].valid_time), ("V", 630));
    assert_eq!(fields[0].grid, cfg.grid());
}

#[test]
fn config_round_trips_through_json() {
    let cfg = SceneConfig {
        heavy_tail: Some(2.0),
        boundary: Boundary::Open,
        ..SceneConfig::default()
    };
    let text = serde_json::to_string(&cfg).unwrap();
    assert_eq!(serde_json::from_str::<SceneConfig>(&text).unwrap(), cfg);
    let partial: SceneConfig = serde_json::from_str(r#"{"rows": 16, "seed": 3}"#).unwrap();
    assert_eq!((partial.rows, partial.cols, partial.seed), (16, 64, 3));
}

#[test]
fn persistence_repeats_the_last_frame() {
    let last = Tensor::from_fn(&[4, 5], |i| (i * i) as f64);
    let p = persistence_forecast(&last, 8).unwrap();
    for k in 0..8 {
        assert_eq!(&p.data()[k * 20..(k + 1) * 20], last.data());
    }
}

fn persistence_csi(cfg: &SceneConfig, leads: usize, r: f64) -> Vec<f64> {
    let s = generate_sequence(cfg).unwrap();
    let n = cfg.rows * cfg.cols;
    let mut counts = vec![Default::default(); leads];
    for t in 0..cfg.steps - leads {
        let last = Tensor::new(vec![cfg.rows, cfg.cols], s.frames[t].p.clone()).unwrap();
        let fc = persistence_forecast(&last, leads).unwrap();
        for (k, c) in counts.iter_mut().enumerate() {
            *c += confusion(&fc.data()[k * n..(k + 1) * n], &s.frames[t + k + 1].p, r, None).unwrap();
        }
    }
    counts.iter().map(|c| categorical_scores(c).csi.unwrap()).collect()
}

#[test]
fn persistence_is_perfect_on_a_static_scene() {
    assert_eq!(persistence_csi(&still(7), 1, 1.0), vec![1.0]);
}

#[test]
fn persistence_skill_falls_with_lead_under_advection() {
    let cfg = SceneConfig {
        velocity: (2.0, 0.0),
        wind_perturbation: 0.0,
        growth: (0.0, 0.0),
        n_cells: 4,
        steps: 40,
        seed: 8,
        ..SceneConfig::default()
    };
    let csi = persistence_csi(&cfg, 8, 1.0);
    for k in 1..8 {
        assert!(csi[k] < csi[k - 1], "{csi:?}");
    }
}
