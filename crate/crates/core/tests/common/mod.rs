//! Oracles shared by the integration and acceptance targets.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sigzsl::loss::*;
use sigzsl::net::{init_params, ArchConfig, BatchForward, ConvLayerConfig, ModelParams};
use sigzsl::nn::*;

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Row-major `rows × cols` matrix times vector.
fn matvec(m: &[f64], cols: usize, v: &[f64]) -> Vec<f64> {
    m.chunks_exact(cols)
        .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

fn transpose(m: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; m.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = m[r * cols + c];
        }
    }
    t
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub struct OracleCase {
    pub input_hw: (usize, usize),
    pub kernel_hw: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

/// Largest absolute deviation between the four kernels and their explicit
/// matrix forms over one random single-channel case:
/// conv `b = M a`, its input gradient `Mᵀ g`, deconv `M̃ b` with `M̃` built
/// like `Mᵀ` from its own kernel, and the deconv input gradient `M̃ᵀ g`.
/// Kernel gradients are checked against `gᵀ E a` where `E` is the matrix of
/// a one-hot kernel.
pub fn matrix_oracle_case(rng: &mut ChaCha8Rng) -> (OracleCase, f64) {
    let (kh, kw) = (rng.random_range(1..=3), rng.random_range(1..=3));
    let (h, w) = (rng.random_range(kh..=6), rng.random_range(kw..=6));
    let stride = (rng.random_range(1..=2), rng.random_range(1..=2));
    let padding = (rng.random_range(0..kh), rng.random_range(0..kw));
    let case = OracleCase {
        input_hw: (h, w),
        kernel_hw: (kh, kw),
        stride,
        padding,
    };

    let conv = ConvSpec::without_bias(random_tensor(&[1, 1, kh, kw], rng), stride, padding).unwrap();
    let deconv = ConvSpec::new(
        random_tensor(&[1, 1, kh, kw], rng),
        Tensor::zeros(&[1]),
        stride,
        padding,
    )
    .unwrap();
    let a = random_tensor(&[1, h, w], rng);
    let m = build_conv_matrix(&conv, &[1, h, w]).unwrap();
    let (oh, ow) = conv2d_output_hw(&conv, (h, w)).unwrap();
    let (rows, cols) = (oh * ow, h * w);
    let mut worst = 0.0f64;

    let b = conv2d(&a, &conv).unwrap();
    worst = worst.max(max_diff(b.data(), &matvec(m.data(), cols, a.data())));

    let g_out = random_tensor(&[1, oh, ow], rng);
    let grads = conv2d_grad(&g_out, &a, &conv).unwrap();
    let mt = transpose(m.data(), rows, cols);
    worst = worst.max(max_diff(grads.input.data(), &matvec(&mt, rows, g_out.data())));

    let one_hot = |i: usize| {
        let mut k = Tensor::zeros(&[1, 1, kh, kw]);
        k.data_mut()[i] = 1.0;
        build_conv_matrix(&ConvSpec::without_bias(k, stride, padding).unwrap(), &[1, h, w]).unwrap()
    };
    for i in 0..kh * kw {
        let e = one_hot(i);
        let want: f64 = g_out
            .data()
            .iter()
            .zip(matvec(e.data(), cols, a.data()))
            .map(|(g, v)| g * v)
            .sum();
        worst = worst.max((grads.kernel.data()[i] - want).abs());
    }

    let small = random_tensor(&[1, oh, ow], rng);
    let m_tilde = build_conv_matrix(&deconv, &[1, h, w]).unwrap();
    let m_tilde_t = transpose(m_tilde.data(), rows, cols);
    let up = deconv2d_to(&small, &deconv, (h, w)).unwrap();
    worst = worst.max(max_diff(up.data(), &matvec(&m_tilde_t, rows, small.data())));

    let g_big = random_tensor(&[1, h, w], rng);
    let dgrads = deconv2d_grad(&g_big, &small, &deconv).unwrap();
    worst = worst.max(max_diff(
        dgrads.input.data(),
        &matvec(m_tilde.data(), cols, g_big.data()),
    ));
    for i in 0..kh * kw {
        let e = one_hot(i);
        let et = transpose(e.data(), rows, cols);
        let want: f64 = g_big
            .data()
            .iter()
            .zip(matvec(&et, rows, small.data()))
            .map(|(g, v)| g * v)
            .sum();
        worst = worst.max((dgrads.kernel.data()[i] - want).abs());
    }
    (case, worst)
}

/// Largest relative error of each primitive's analytic gradient against
/// central differences of `Σ w ⊙ op(x)` with random `w`.
pub fn per_op_gradient_errors(step: f64, seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let weigh = |y: &Tensor<f64>, w: &Tensor<f64>| -> f64 { y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum() };

    // conv2d, with bias, multi-channel, stride and padding
    let x = random_tensor(&[2, 4, 6], &mut rng);
    let spec = ConvSpec::new(
        random_tensor(&[3, 2, 2, 3], &mut rng),
        random_tensor(&[3], &mut rng),
        (1, 2),
        (1, 1),
    )
    .unwrap();
    let y = conv2d(&x, &spec).unwrap();
    let w = random_tensor(y.shape(), &mut rng);
    let g = conv2d_grad(&w, &x, &spec).unwrap();
    let rep = grad_check(
        |v| {
            weigh(
                &conv2d(&Tensor::from_vec(x.shape(), v.to_vec()).unwrap(), &spec).unwrap(),
                &w,
            )
        },
        x.data(),
        g.input.data(),
        step,
        None,
    );
    out.push(("conv2d input", rep.max_rel_error));
    let rep = grad_check(
        |v| {
            let s = ConvSpec::new(
                Tensor::from_vec(spec.kernel.shape(), v.to_vec()).unwrap(),
                spec.bias.clone(),
                spec.stride,
                spec.padding,
            )
            .unwrap();
            weigh(&conv2d(&x, &s).unwrap(), &w)
        },
        spec.kernel.data(),
        g.kernel.data(),
        step,
        None,
    );
    out.push(("conv2d kernel", rep.max_rel_error));
    let rep = grad_check(
        |v| {
            let s = ConvSpec::new(
                spec.kernel.clone(),
                Tensor::from_vec(&[3], v.to_vec()).unwrap(),
                spec.stride,
                spec.padding,
            )
            .unwrap();
            weigh(&conv2d(&x, &s).unwrap(), &w)
        },
        spec.bias.data(),
        g.bias.data(),
        step,
        None,
    );
    out.push(("conv2d bias", rep.max_rel_error));

    // deconv2d: maps 3 channels back to 2
    let dspec = ConvSpec::new(
        random_tensor(&[3, 2, 2, 3], &mut rng),
        random_tensor(&[2], &mut rng),
        (1, 1),
        (0, 1),
    )
    .unwrap();
    let small = random_tensor(&[3, 3, 6], &mut rng);
    let big = deconv2d_to(&small, &dspec, (4, 6)).unwrap();
    let w = random_tensor(big.shape(), &mut rng);
    let g = deconv2d_grad(&w, &small, &dspec).unwrap();
    let rep = grad_check(
        |v| {
            weigh(
                &deconv2d_to(&Tensor::from_vec(small.shape(), v.to_vec()).unwrap(), &dspec, (4, 6)).unwrap(),
                &w,
            )
        },
        small.data(),
        g.input.data(),
        step,
        None,
    );
    out.push(("deconv2d input", rep.max_rel_error));
    let rep = grad_check(
        |v| {
            let s = ConvSpec::new(
                Tensor::from_vec(dspec.kernel.shape(), v.to_vec()).unwrap(),
                dspec.bias.clone(),
                dspec.stride,
                dspec.padding,
            )
            .unwrap();
            weigh(&deconv2d_to(&small, &s, (4, 6)).unwrap(), &w)
        },
        dspec.kernel.data(),
        g.kernel.data(),
        step,
        None,
    );
    out.push(("deconv2d kernel", rep.max_rel_error));
    let rep = grad_check(
        |v| {
            let s = ConvSpec::new(
                dspec.kernel.clone(),
                Tensor::from_vec(&[2], v.to_vec()).unwrap(),
                dspec.stride,
                dspec.padding,
            )
            .unwrap();
            weigh(&deconv2d_to(&small, &s, (4, 6)).unwrap(), &w)
        },
        dspec.bias.data(),
        g.bias.data(),
        step,
        None,
    );
    out.push(("deconv2d bias", rep.max_rel_error));

    // dense
    let params = DenseParams {
        weights: random_tensor(&[4, 7], &mut rng),
        bias: random_tensor(&[4], &mut rng),
    };
    let x = random_tensor(&[7], &mut rng);
    let w = random_tensor(&[4], &mut rng);
    let g = dense_grad(&w, &x, &params).unwrap();
    let rep = grad_check(
        |v| {
            weigh(
                &dense(
                    &Tensor::from_vec(&[7], v.to_vec()).unwrap(),
                    &params.weights,
                    &params.bias,
                )
                .unwrap(),
                &w,
            )
        },
        x.data(),
        g.input.data(),
        step,
        None,
    );
    out.push(("dense input", rep.max_rel_error));
    let rep = grad_check(
        |v| {
            weigh(
                &dense(&x, &Tensor::from_vec(&[4, 7], v.to_vec()).unwrap(), &params.bias).unwrap(),
                &w,
            )
        },
        params.weights.data(),
        g.weights.data(),
        step,
        None,
    );
    out.push(("dense weights", rep.max_rel_error));
    let rep = grad_check(
        |v| {
            weigh(
                &dense(&x, &params.weights, &Tensor::from_vec(&[4], v.to_vec()).unwrap()).unwrap(),
                &w,
            )
        },
        params.bias.data(),
        g.bias.data(),
        step,
        None,
    );
    out.push(("dense bias", rep.max_rel_error));

    // relu, kept away from its kink
    let x = Tensor::from_vec(
        &[12],
        (0..12)
            .map(|i| {
                let m: f64 = rng.random_range(0.05..1.0);
                if i % 2 == 0 {
                    m
                } else {
                    -m
                }
            })
            .collect(),
    )
    .unwrap();
    let w = random_tensor(&[12], &mut rng);
    let g = relu_grad(&w, &x).unwrap();
    let rep = grad_check(
        |v| weigh(&relu(&Tensor::from_vec(&[12], v.to_vec()).unwrap()).unwrap(), &w),
        x.data(),
        g.data(),
        step,
        None,
    );
    out.push(("relu", rep.max_rel_error));

    // softmax
    let x = random_tensor(&[6], &mut rng);
    let w = random_tensor(&[6], &mut rng);
    let s = softmax(&x).unwrap();
    let g = softmax_grad(&w, &s).unwrap();
    let rep = grad_check(
        |v| weigh(&softmax(&Tensor::from_vec(&[6], v.to_vec()).unwrap()).unwrap(), &w),
        x.data(),
        g.data(),
        step,
        None,
    );
    out.push(("softmax", rep.max_rel_error));

    // pooling and unpooling; values spaced so no window is near a tie
    let mut vals: Vec<f64> = (0..48).map(|i| i as f64 * 0.05 - 1.2).collect();
    for i in (1..vals.len()).rev() {
        vals.swap(i, rng.random_range(0..=i));
    }
    let x = Tensor::from_vec(&[2, 4, 6], vals).unwrap();
    for (mode, name, uname) in [
        (PoolMode::Max, "max pool", "max unpool"),
        (PoolMode::Average, "average pool", "average unpool"),
    ] {
        let (y, rec) = pool2d(&x, mode, (2, 2), (2, 2)).unwrap();
        let w = random_tensor(y.shape(), &mut rng);
        let g = pool2d_grad(&w, &rec).unwrap();
        let rep = grad_check(
            |v| {
                weigh(
                    &pool2d(&Tensor::from_vec(x.shape(), v.to_vec()).unwrap(), mode, (2, 2), (2, 2))
                        .unwrap()
                        .0,
                    &w,
                )
            },
            x.data(),
            g.data(),
            step,
            None,
        );
        out.push((name, rep.max_rel_error));
        let wb = random_tensor(x.shape(), &mut rng);
        let gu = unpool2d_grad(&wb, &rec).unwrap();
        let rep = grad_check(
            |v| {
                weigh(
                    &unpool2d(&Tensor::from_vec(y.shape(), v.to_vec()).unwrap(), &rec).unwrap(),
                    &wb,
                )
            },
            y.data(),
            gu.data(),
            step,
            None,
        );
        out.push((uname, rep.max_rel_error));
    }

    // softmax + cross-entropy with respect to logits
    let logits = random_tensor(&[3, 4], &mut rng);
    let labels = [2, 0, 3];
    let rowwise_softmax = |l: &[f64]| -> Tensor<f64> {
        let rows: Vec<f64> = l
            .chunks_exact(4)
            .flat_map(|r| {
                softmax(&Tensor::from_vec(&[4], r.to_vec()).unwrap())
                    .unwrap()
                    .into_vec()
            })
            .collect();
        Tensor::from_vec(&[3, 4], rows).unwrap()
    };
    let g = cross_entropy_grad_logits(&rowwise_softmax(logits.data()), &labels).unwrap();
    let rep = grad_check(
        |v| cross_entropy(&rowwise_softmax(v), &labels).unwrap(),
        logits.data(),
        g.data(),
        step,
        None,
    );
    out.push(("cross-entropy", rep.max_rel_error));

    // center loss with respect to features
    let mut table = CenterTable::zeros(3, 5, 0.5);
    table.centers = random_tensor(&[3, 5], &mut rng);
    let z = random_tensor(&[4, 5], &mut rng);
    let labels = [0, 2, 2, 1];
    let g = center_loss_grad(&z, &labels, &table).unwrap();
    let rep = grad_check(
        |v| center_loss(&Tensor::from_vec(&[4, 5], v.to_vec()).unwrap(), &labels, &table).unwrap(),
        z.data(),
        g.data(),
        step,
        None,
    );
    out.push(("center loss", rep.max_rel_error));

    // reconstruction loss with respect to reconstructions
    let orig = random_tensor(&[3, 1, 2, 4], &mut rng);
    let rec = random_tensor(&[3, 1, 2, 4], &mut rng);
    let g = reconstruction_loss_grad(&rec, &orig).unwrap();
    let rep = grad_check(
        |v| reconstruction_loss(&Tensor::from_vec(rec.shape(), v.to_vec()).unwrap(), &orig).unwrap(),
        rec.data(),
        g.data(),
        step,
        None,
    );
    out.push(("reconstruction loss", rep.max_rel_error));
    out
}

pub fn small_config() -> ArchConfig {
    let layer = |out_channels, kernel: (usize, usize), pool| ConvLayerConfig {
        out_channels,
        kernel,
        padding: (0, kernel.1 / 2),
        pool,
    };
    ArchConfig {
        input_height: 2,
        input_width: 16,
        conv_layers: vec![
            layer(3, (1, 3), Some(PoolMode::Max)),
            layer(4, (2, 3), None),
            layer(3, (1, 3), Some(PoolMode::Average)),
        ],
        pool_window: (1, 2),
        encoder_hidden: vec![10],
        semantic_dim: 5,
        classifier_hidden: vec![6],
        class_names: vec!["a".into(), "b".into(), "c".into()],
    }
}

pub fn small_setup() -> (ModelParams<f64>, Vec<Tensor<f64>>, Vec<usize>) {
    let mut params: ModelParams<f64> = init_params(&small_config(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for c in params.centers.centers.data_mut() {
        *c = rng.random_range(-0.5..0.5);
    }
    // small positive biases keep most relus active
    for t in params.weights.tensors_mut() {
        if t.shape().len() == 1 {
            for v in t.data_mut() {
                *v = rng.random_range(0.0..0.1);
            }
        }
    }
    let frames = (0..4)
        .map(|_| {
            let d: Vec<f64> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
            Tensor::from_vec(&[2, 16], d).unwrap()
        })
        .collect();
    (params, frames, vec![0, 2, 1, 2])
}

/// Central-difference check of the total training loss over every weight
/// of the small network.
pub fn end_to_end_gradient(weights: LossWeights, step: f64) -> GradCheckReport {
    let (params, frames, labels) = small_setup();
    let refs: Vec<&Tensor<f64>> = frames.iter().collect();
    let analytic = BatchForward::run(&params, &refs)
        .unwrap()
        .gradients(&params, &refs, &labels, &params.centers, &weights)
        .unwrap()
        .to_flat();
    let point = params.weights.to_flat();
    let loss = |x: &[f64]| {
        let mut p = params.clone();
        p.weights.set_flat(x);
        BatchForward::run(&p, &refs)
            .unwrap()
            .loss(&refs, &labels, &p.centers, &weights)
            .unwrap()
            .total
    };
    grad_check(loss, &point, &analytic, step, None)
}
