mod common;

use common::{max_relative_error, random};
use nowcast_tensor::{CustomBackward, DropoutMode, NormMode, Padding, RunningStats, Tensor};

const STEP: f64 = 1e-5;
const FLOOR: f64 = 1e-7;
const TOL: f64 = 1e-6;

#[test]
fn elementwise_chain() {
    let params = vec![random(&[2, 3, 4], 1), random(&[2, 3, 4], 2)];
    let err = max_relative_error(
        &params,
        |g, v| {
            let s = g.sigmoid(v[0]);
            let t = g.tanh(v[1]);
            let m = g.mul(s, t)?;
            let a = g.add(m, v[0])?;
            let d = g.sub(a, v[1])?;
            let sc = g.scale(d, 1.7);
            let sh = g.add_scalar(sc, 0.3);
            let sq = g.mul(sh, sh)?;
            Ok(g.mean(sq))
        },
        STEP,
        FLOOR,
    );
    assert!(err < TOL, "{err}");
}

#[test]
fn relu_away_from_kink() {
    let mut x = random(&[40], 3);
    for v in x.data_mut() {
        if v.abs() < 0.05 {
            *v = 0.5;
        }
    }
    let err = max_relative_error(
        &[x],
        |g, v| {
            let r = g.relu(v[0]);
            let sq = g.mul(r, r)?;
            Ok(g.sum(sq))
        },
        STEP,
        FLOOR,
    );
    assert!(err < TOL, "{err}");
}

#[test]
fn softmax_over_channel_axis() {
    let w = random(&[2, 5, 3, 3], 4);
    let err = max_relative_error(
        &[random(&[2, 5, 3, 3], 5)],
        move |g, v| {
            let p = g.softmax(v[0], 1)?;
            let c = g.input(w.clone());
            let m = g.mul(p, c)?;
            Ok(g.sum(m))
        },
        STEP,
        FLOOR,
    );
    assert!(err < TOL, "{err}");
}

#[test]
fn conv2d_strided_same_and_valid() {
    let params = vec![random(&[2, 3, 7, 6], 6), random(&[4, 3, 3, 3], 7), random(&[4], 8)];
    for padding in [Padding::Same, Padding::Valid] {
        for stride in [1, 2] {
            let err = max_relative_error(
                &params,
                |g, v| {
                    let y = g.conv(v[0], v[1], &[stride, stride], padding, 2)?;
                    let y = g.bias_add(y, v[2])?;
                    let t = g.tanh(y);
                    let sq = g.mul(t, t)?;
                    Ok(g.sum(sq))
                },
                STEP,
                FLOOR,
            );
            assert!(err < TOL, "{padding:?} stride {stride}: {err}");
        }
    }
}

#[test]
fn conv3d_same_padding() {
    let params = vec![random(&[1, 2, 3, 4, 4], 9), random(&[3, 2, 3, 3, 3], 10)];
    let err = max_relative_error(
        &params,
        |g, v| {
            let y = g.conv(v[0], v[1], &[1, 1, 1], Padding::Same, 3)?;
            let s = g.sigmoid(y);
            Ok(g.sum(s))
        },
        STEP,
        FLOOR,
    );
    assert!(err < TOL, "{err}");
}

#[test]
fn conv_transpose_3d_upsampling() {
    let params = vec![random(&[2, 3, 2, 2, 3], 11), random(&[3, 2, 1, 2, 2], 12)];
    let err = max_relative_error(
        &params,
        |g, v| {
            let y = g.conv_transpose(v[0], v[1], &[1, 2, 2], Padding::Same, 3)?;
            assert_eq!(g.shape(y), &[2, 2, 2, 4, 6]);
            let t = g.tanh(y);
            let sq = g.mul(t, y)?;
            Ok(g.sum(sq))
        },
        STEP,
        FLOOR,
    );
    assert!(err < TOL, "{err}");
}

#[test]
fn maxpool_routes_to_argmax() {
    let err = max_relative_error(
        &[random(&[2, 2, 4, 6], 13)],
        |g, v| {
            let p = g.maxpool2d(v[0])?;
            let sq = g.mul(p, p)?;
            Ok(g.sum(sq))
        },
        STEP,
        FLOOR,
    );
    assert!(err < TOL, "{err}");
}

#[test]
fn maxpool_sum_gradient_is_indicator() {
    let mut g = nowcast_tensor::Graph::new();
    let x = g.param(Tensor::new(vec![1, 1, 2, 4], vec![1.0, 5.0, 2.0, 2.0, 3.0, 4.0, 2.0, 2.0]).unwrap());
    let p = g.maxpool2d(x).unwrap();
    let loss = g.sum(p);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
}

#[test]
fn batchnorm_train_and_eval() {
    let params = vec![random(&[3, 2, 4, 4], 14), random(&[2], 15), random(&[2], 16)];
    let weights = random(&[3, 2, 4, 4], 17);
    for train in [true, false] {
        let w = weights.clone();
        let err = max_relative_error(
            &params,
            move |g, v| {
                let mut running = RunningStats {
                    mean: vec![0.1, -0.2],
                    var: vec![0.8, 1.3],
                };
                let mode = if train {
                    NormMode::Train {
                        running: &mut running,
                        momentum: 0.9,
                    }
                } else {
                    NormMode::Eval { running: &running }
                };
                let y = g.batchnorm(v[0], v[1], v[2], mode, 1e-5)?;
                let c = g.input(w.clone());
                let m = g.mul(y, c)?;
                let t = g.tanh(m);
                Ok(g.sum(t))
            },
            STEP,
            FLOOR,
        );
        assert!(err < TOL, "train={train}: {err}");
    }
}

#[test]
fn dropout_with_fixed_seed() {
    let err = max_relative_error(
        &[random(&[50], 18)],
        |g, v| {
            let d = g.dropout(v[0], 0.3, DropoutMode::Train { seed: 9 })?;
            let sq = g.mul(d, d)?;
            Ok(g.sum(sq))
        },
        STEP,
        FLOOR,
    );
    assert!(err < TOL, "{err}");
}

#[test]
fn structural_ops() {
    let params = vec![random(&[2, 3, 4], 19), random(&[2, 2, 4], 20)];
    let err = max_relative_error(
        &params,
        |g, v| {
            let c = g.concat(&[v[0], v[1]], 1)?;
            let s = g.slice(c, 1, 1, 3)?;
            let st = g.stack(&[s, s, v[0]], 1)?;
            let sel = g.select(st, 1, 2)?;
            let parts = g.unstack(st, 1)?;
            let r = g.reshape(parts[0], &[24])?;
            let r2 = g.reshape(sel, &[24])?;
            let m = g.mul(r, r2)?;
            let t = g.tanh(m);
            Ok(g.sum(t))
        },
        STEP,
        FLOOR,
    );
    assert!(err < TOL, "{err}");
}

#[test]
fn concat_sum_gradient_is_ones() {
    let mut g = nowcast_tensor::Graph::new();
    let a = g.param(random(&[1, 3, 4, 4], 21));
    let b = g.param(random(&[1, 5, 4, 4], 22));
    let c = g.concat(&[a, b], 1).unwrap();
    assert_eq!(g.shape(c), &[1, 8, 4, 4]);
    let loss = g.sum(c);
    let grads = g.backward(loss).unwrap();
    assert!(grads.get(a).unwrap().data().iter().all(|&x| x == 1.0));
    assert!(grads.get(b).unwrap().data().iter().all(|&x| x == 1.0));
}

struct Cube;

impl CustomBackward for Cube {
    fn backward(&self, grad_out: &Tensor, inputs: &[&Tensor], _output: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(grad_out.zip_map(inputs[0], |g, x| 3.0 * g * x * x).unwrap())]
    }
}

#[test]
fn custom_operation() {
    let err = max_relative_error(
        &[random(&[6], 23)],
        |g, v| {
            let out = g.value(v[0]).map(|x| x * x * x);
            let c = g.custom(&[v[0]], out, Box::new(Cube));
            Ok(g.sum(c))
        },
        STEP,
        FLOOR,
    );
    assert!(err < TOL, "{err}");
}

#[test]
fn shared_subexpression_accumulates() {
    let err = max_relative_error(
        &[random(&[1, 1, 4, 4], 24), random(&[1, 1, 3, 3], 25)],
        |g, v| {
            let a = g.conv(v[0], v[1], &[1, 1], Padding::Same, 2)?;
            let b = g.conv(a, v[1], &[1, 1], Padding::Same, 2)?;
            let m = g.mul(a, b)?;
            Ok(g.sum(m))
        },
        STEP,
        FLOOR,
    );
    assert!(err < TOL, "{err}");
}
