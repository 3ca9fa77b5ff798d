mod common;

use nowcast_core::checkpoint::Checkpoint;
use nowcast_core::losses::default_scheme;
use nowcast_core::network::{build, exceedance_probability, parameter_count, HeadKind, NetworkConfig};
use nowcast_core::tensor::Tensor;
use nowcast_core::train::LossKind;

fn small(head: HeadKind) -> NetworkConfig {
    NetworkConfig {
        n_blocks: 2,
        base_channels: 3,
        input_steps: 4,
        forecast_steps: 3,
        head,
        ..NetworkConfig::default()
    }
}

#[test]
fn equal_seeds_build_equal_networks() {
    let cfg = small(HeadKind::Regression);
    assert_eq!(build(&cfg, 5).unwrap(), build(&cfg, 5).unwrap());
    assert_ne!(build(&cfg, 5).unwrap(), build(&cfg, 6).unwrap());
}

#[test]
fn channel_ladder_doubles() {
    let cfg = NetworkConfig::default();
    let ladder: Vec<usize> = (1..=3).map(|k| cfg.channels(k)).collect();
    assert_eq!(ladder, vec![16, 32, 64]);
}

#[test]
fn hand_census_of_one_block_network() {
    // enc1 cell 4→2 (288 + 144 + 8) + bn 4, skip1 cell 2→2 (144 + 144 + 8),
    // bottleneck cell 296, dec1 up 16 + 2, conv 216, bn 4, head 2 + bn 2.
    let cfg = NetworkConfig {
        n_blocks: 1,
        base_channels: 2,
        ..NetworkConfig::default()
    };
    assert_eq!(parameter_count(&cfg), 1278);
    let net = build(&cfg, 0).unwrap();
    assert_eq!(net.params.values().map(Tensor::len).sum::<usize>(), 1278);
    assert_eq!(net.parameter_count(), 1278);
}

#[test]
fn census_matches_built_tensors() {
    for head in [HeadKind::Regression, HeadKind::Classification] {
        for blocks in 1..=3 {
            let cfg = NetworkConfig {
                n_blocks: blocks,
                base_channels: 4,
                head,
                ..NetworkConfig::default()
            };
            let net = build(&cfg, 1).unwrap();
            assert_eq!(net.params.values().map(Tensor::len).sum::<usize>(), parameter_count(&cfg));
        }
    }
}

#[test]
fn regression_output_is_nonnegative() {
    let net = build(&small(HeadKind::Regression), 2).unwrap();
    let x = common::random(&[2, 4, 4, 8, 8], 3, -5.0, 5.0);
    let y = net.predict(&x).unwrap();
    assert_eq!(y.shape(), &[2, 3, 8, 8]);
    assert!(y.data().iter().all(|&v| v >= 0.0));
}

#[test]
fn classification_output_is_a_distribution() {
    let net = build(&small(HeadKind::Classification), 4).unwrap();
    let x = common::random(&[2, 4, 4, 8, 8], 5, -5.0, 5.0);
    let y = net.predict(&x).unwrap();
    assert_eq!(y.shape(), &[2, 10, 3, 8, 8]);
    let inner = 3 * 64;
    for b in 0..2 {
        for k in 0..inner {
            let s: f64 = (0..10).map(|c| y.data()[(b * 10 + c) * inner + k]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
    assert!(y.data().iter().all(|&v| v >= 0.0));
}

#[test]
fn default_config_shape_contract() {
    for (head, shape) in [
        (HeadKind::Regression, vec![1, 8, 64, 64]),
        (HeadKind::Classification, vec![1, 10, 8, 64, 64]),
    ] {
        let cfg = NetworkConfig {
            head,
            ..NetworkConfig::default()
        };
        let net = build(&cfg, 7).unwrap();
        let x = common::random(&[1, 4, 12, 64, 64], 8, 0.0, 3.0);
        assert_eq!(net.predict(&x).unwrap().shape(), shape.as_slice());
    }
}

#[test]
fn indivisible_extent_rejected() {
    let net = build(&small(HeadKind::Regression), 9).unwrap();
    let err = net.predict(&Tensor::zeros(&[1, 4, 4, 6, 8])).unwrap_err();
    assert!(err.to_string().contains("divisible"), "{err}");
}

#[test]
fn exceedance_examples() {
    let s = default_scheme();
    let mut top = Tensor::zeros(&[1, 10, 2]);
    top.set(&[0, 9, 0], 1.0);
    top.set(&[0, 9, 1], 1.0);
    for j in 0..9 {
        let e = exceedance_probability(&top, &s, s.boundaries[j]).unwrap();
        assert!(e.data().iter().all(|&v| v == 1.0));
    }
    let uniform = Tensor::full(&[1, 10, 3], 0.1);
    let e = exceedance_probability(&uniform, &s, 1.6).unwrap();
    assert!(e.data().iter().all(|&v| (v - 0.5).abs() < 1e-12));
    assert!(exceedance_probability(&uniform, &s, 1.7).is_err());

    let net = build(&small(HeadKind::Classification), 10).unwrap();
    let p = net.predict(&common::random(&[1, 4, 4, 8, 8], 11, 0.0, 2.0)).unwrap();
    let e = exceedance_probability(&p, &s, 0.1).unwrap();
    let inner = 3 * 64;
    for k in 0..inner {
        assert!((e.data()[k] - (1.0 - p.data()[k])).abs() < 1e-12);
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.ckpt");
    let ck = Checkpoint::from_params(build(&small(HeadKind::Classification), 12).unwrap(), LossKind::Focal);
    ck.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let again = dir.path().join("again.ckpt");
    loaded.save(&again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());

    let x = common::random(&[1, 4, 4, 8, 8], 13, -1.0, 1.0);
    let a = ck.params.predict(&x).unwrap();
    let b = loaded.params.predict(&x).unwrap();
    assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.ckpt");
    let ck = Checkpoint::from_params(build(&small(HeadKind::Regression), 14).unwrap(), LossKind::Mse);
    ck.save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 100]).unwrap();
    let err = Checkpoint::load(&path).unwrap_err().to_string();
    assert!(err.contains("truncated") || err.contains("exceeds"), "{err}");
}
