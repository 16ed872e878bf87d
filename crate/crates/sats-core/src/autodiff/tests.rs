use super::check::{max_fd_error, rel_err, standard_suite, FD_STEP, FD_TOL};
use super::kernels::ConvGeom;
use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Direct 7-loop cross-correlation straight from the definition; the
/// independent oracle for the im2col/GEMM path.
fn naive_conv(x: &[f64], w: &[f64], bias: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let [id, ih, iw] = g.input;
    let [od, oh, ow] = g.output;
    let (k, s, p, ci, co) = (g.k, g.stride, g.pad, g.cin, g.cout);
    let mut out = vec![0.0; g.batch * od * oh * ow * co];
    for n in 0..g.batch {
        for zd in 0..od {
            for zh in 0..oh {
                for zw in 0..ow {
                    for c in 0..co {
                        let mut acc = bias.map_or(0.0, |b| b[c]);
                        for kd in 0..k {
                            for kh in 0..k {
                                for kw in 0..k {
                                    let d = (zd * s + kd) as isize - p as isize;
                                    let h = (zh * s + kh) as isize - p as isize;
                                    let wv = (zw * s + kw) as isize - p as isize;
                                    if d < 0
                                        || h < 0
                                        || wv < 0
                                        || d as usize >= id
                                        || h as usize >= ih
                                        || wv as usize >= iw
                                    {
                                        continue;
                                    }
                                    for cc in 0..ci {
                                        let xi = (((n * id + d as usize) * ih + h as usize) * iw
                                            + wv as usize)
                                            * ci
                                            + cc;
                                        let wi = (((kd * k + kh) * k + kw) * ci + cc) * co + c;
                                        acc += x[xi] * w[wi];
                                    }
                                }
                            }
                        }
                        out[(((n * od + zd) * oh + zh) * ow + zw) * co + c] = acc;
                    }
                }
            }
        }
    }
    out
}

/// Direct scatter transposed convolution from the definition.
fn naive_tconv(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let [id, ih, iw] = g.input;
    let [od, oh, ow] = g.output;
    let (k, s, p, ci, co) = (g.k, g.stride, g.pad, g.cin, g.cout);
    let mut out = vec![0.0; g.batch * od * oh * ow * co];
    for n in 0..g.batch {
        for d in 0..id {
            for h in 0..ih {
                for wv in 0..iw {
                    for kd in 0..k {
                        for kh in 0..k {
                            for kw in 0..k {
                                let td = (d * s + kd) as isize - p as isize;
                                let th = (h * s + kh) as isize - p as isize;
                                let tw = (wv * s + kw) as isize - p as isize;
                                if td < 0
                                    || th < 0
                                    || tw < 0
                                    || td as usize >= od
                                    || th as usize >= oh
                                    || tw as usize >= ow
                                {
                                    continue;
                                }
                                for cc in 0..ci {
                                    let xv =
                                        x[(((n * id + d) * ih + h) * iw + wv) * ci + cc];
                                    for c in 0..co {
                                        let wi = (((kd * k + kh) * k + kw) * ci + cc) * co + c;
                                        out[(((n * od + td as usize) * oh + th as usize) * ow
                                            + tw as usize)
                                            * co
                                            + c] += xv * w[wi];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[test]
fn conv_identity_kernel_is_identity() {
    let mut g = Graph::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let xv = rand_vec(&mut rng, 2 * 3 * 4 * 5 * 2, -1.0, 1.0);
    let x = g.leaf(&[2, 3, 4, 5, 2], xv.clone(), false).unwrap();
    // 1×1×1 identity weight per channel, zero bias
    let w = g
        .leaf(&[1, 1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0], false)
        .unwrap();
    let b = g.leaf(&[2], vec![0.0, 0.0], false).unwrap();
    let y = g.conv3d(x, w, Some(b), 1, 0).unwrap();
    assert_eq!(g.values(y), &xv[..]);
}

#[test]
fn all_ones_kernel_center_is_27() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(&[1, 3, 3, 3, 1], vec![1.0; 27], false).unwrap();
    let w = g.leaf(&[3, 3, 3, 1, 1], vec![1.0; 27], false).unwrap();
    let y = g.conv3d(x, w, None, 1, 1).unwrap();
    let center = ((1 * 3 + 1) * 3 + 1) * 1;
    assert_eq!(g.values(y)[center], 27.0);
    // corner sees only the 2×2×2 in-bounds part
    assert_eq!(g.values(y)[0], 8.0);
}

#[test]
fn conv_matches_naive_definition() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for (k, stride, pad) in [(1usize, 1usize, 0usize), (3, 1, 1), (3, 2, 1)] {
        let (ci, co) = (3usize, 4usize);
        let xs = [2usize, 5, 6, 7, ci];
        let xv = rand_vec(&mut rng, xs.iter().product(), -1.0, 1.0);
        let wv = rand_vec(&mut rng, k * k * k * ci * co, -0.6, 0.6);
        let bv = rand_vec(&mut rng, co, -0.2, 0.2);
        let geom = ConvGeom::for_conv(&xs, &[k, k, k, ci, co], stride, pad).unwrap();
        let fast = kernels::conv_forward(&xv, &wv, Some(&bv), &geom);
        let slow = naive_conv(&xv, &wv, Some(&bv), &geom);
        for (a, b) in fast.iter().zip(&slow) {
            assert!(
                (a - b).abs() <= 1e-12 * (1.0 + b.abs()),
                "k={k} s={stride}: {a} vs {b}"
            );
        }
    }
}

#[test]
fn tconv_matches_naive_definition() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for (k, stride, pad) in [(1usize, 1usize, 0usize), (2, 2, 0), (4, 2, 1), (3, 1, 1)] {
        let (ci, co) = (3usize, 2usize);
        let xs = [2usize, 3, 4, 5, ci];
        let xv = rand_vec(&mut rng, xs.iter().product(), -1.0, 1.0);
        let wv = rand_vec(&mut rng, k * k * k * ci * co, -0.6, 0.6);
        let geom = ConvGeom::for_tconv(&xs, &[k, k, k, ci, co], stride, pad).unwrap();
        let fast = kernels::tconv_forward(&xv, &wv, &geom);
        let slow = naive_tconv(&xv, &wv, &geom);
        for (a, b) in fast.iter().zip(&slow) {
            assert!(
                (a - b).abs() <= 1e-12 * (1.0 + b.abs()),
                "k={k} s={stride}: {a} vs {b}"
            );
        }
    }
}

#[test]
fn tconv_doubles_spatial_dims() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(&[1, 2, 3, 3, 1], vec![0.5; 18], false).unwrap();
    for (k, pad) in [(2usize, 0usize), (4, 1)] {
        let w = g
            .leaf(&[k, k, k, 1, 1], vec![0.1; k * k * k], false)
            .unwrap();
        let y = g.conv_transpose3d(x, w, 2, pad).unwrap();
        assert_eq!(g.shape(y), &[1, 4, 6, 6, 1], "k={k}");
    }
}

#[test]
fn tconv_identity_at_k1_s1() {
    let mut g = Graph::<f64>::new();
    let xv: Vec<f64> = (0..24).map(|i| i as f64 * 0.3 - 2.0).collect();
    let x = g.leaf(&[1, 2, 3, 4, 1], xv.clone(), false).unwrap();
    let w = g.leaf(&[1, 1, 1, 1, 1], vec![1.0], false).unwrap();
    let y = g.conv_transpose3d(x, w, 1, 0).unwrap();
    assert_eq!(g.values(y), &xv[..]);
}

#[test]
fn instance_norm_constant_input_returns_shift() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(&[1, 2, 2, 2, 2], vec![3.7; 16], false).unwrap();
    let gain = g.leaf(&[2], vec![1.4, 0.9], false).unwrap();
    let shift = g.leaf(&[2], vec![0.25, -1.0], false).unwrap();
    let y = g.instance_norm(x, gain, shift, 1e-5).unwrap();
    for row in g.values(y).chunks_exact(2) {
        assert!((row[0] - 0.25).abs() < 1e-9);
        assert!((row[1] + 1.0).abs() < 1e-9);
    }
}

#[test]
fn instance_norm_preserves_standardized_input() {
    // spatial pattern with exact mean 0 and variance 1 per channel
    let mut vals = Vec::new();
    for q in 0..8 {
        let v = if q % 2 == 0 { 1.0 } else { -1.0 };
        vals.push(v);
    }
    let mut g = Graph::<f64>::new();
    let x = g.leaf(&[1, 2, 2, 2, 1], vals.clone(), false).unwrap();
    let gain = g.leaf(&[1], vec![1.0], false).unwrap();
    let shift = g.leaf(&[1], vec![0.0], false).unwrap();
    let y = g.instance_norm(x, gain, shift, 1e-5).unwrap();
    for (a, b) in g.values(y).iter().zip(&vals) {
        assert!((a - b).abs() < 2e-5, "{a} vs {b}");
    }
}

#[test]
fn unit_normalize_three_four_five() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(&[1, 1, 1, 1, 2], vec![3.0, 4.0], false).unwrap();
    let y = g.unit_normalize(x, 1e-8).unwrap();
    let v = g.values(y);
    assert!((v[0] - 0.6).abs() < 1e-7);
    assert!((v[1] - 0.8).abs() < 1e-7);

    let z = g.leaf(&[1, 1, 1, 1, 3], vec![0.0; 3], false).unwrap();
    let yz = g.unit_normalize(z, 1e-8).unwrap();
    assert!(g.values(yz).iter().all(|v| *v == 0.0), "eps guard failed");
}

#[test]
fn activation_spot_values() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(&[3], vec![-1.0, 0.0, 2.0], false).unwrap();
    let lr = g.leaky_relu(x, 0.01);
    assert_eq!(g.values(lr), &[-0.01, 0.0, 2.0]);
    let r = g.relu(x);
    assert_eq!(g.values(r), &[0.0, 0.0, 2.0]);
    let m = g.max_with_constant(x, 0.5);
    assert_eq!(g.values(m), &[0.5, 0.5, 2.0]);
    let s = g.sigmoid(x);
    assert!((g.values(s)[1] - 0.5).abs() < 1e-12);
    let sp = g.softplus(x);
    assert!((g.values(sp)[1] - std::f64::consts::LN_2).abs() < 1e-12);
    // stable at large magnitude
    let big = g.leaf(&[2], vec![700.0, -700.0], false).unwrap();
    let spb = g.softplus(big);
    assert!((g.values(spb)[0] - 700.0).abs() < 1e-9);
    assert!(g.values(spb)[1].abs() < 1e-9);
    let sb = g.sigmoid(big);
    assert!(g.values(sb).iter().all(|v| v.is_finite()));
}

#[test]
fn flip_w_reverses_rows() {
    let mut g = Graph::<f64>::new();
    let x = g
        .leaf(&[1, 1, 1, 3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], false)
        .unwrap();
    let y = g.flip_w(x).unwrap();
    assert_eq!(g.values(y), &[5.0, 6.0, 3.0, 4.0, 1.0, 2.0]);
}

#[test]
fn standard_suite_passes_fd_checks() {
    let checks = standard_suite(0, FD_STEP, FD_TOL).unwrap();
    assert!(checks.len() >= 20, "expected full op coverage");
    for c in &checks {
        assert!(
            c.passed(),
            "{} failed gradient check: {} > {}",
            c.name,
            c.max_rel_err,
            c.tol
        );
    }
}

#[test]
fn gradient_of_sum_of_losses_is_sum_of_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let xv = rand_vec(&mut rng, 12, -1.0, 1.0);
    let grads_of = |mode: u8| -> Vec<f64> {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&[3, 4], xv.clone(), true).unwrap();
        let sq = g.square(x);
        let l1 = g.mean(sq);
        let sig = g.sigmoid(x);
        let l2 = g.sum(sig);
        let loss = match mode {
            0 => l1,
            1 => l2,
            _ => g.add(l1, l2).unwrap(),
        };
        g.backward(loss).unwrap();
        g.grad(x).unwrap().to_vec()
    };
    let g1 = grads_of(0);
    let g2 = grads_of(1);
    let gsum = grads_of(2);
    for i in 0..12 {
        assert!(
            (gsum[i] - (g1[i] + g2[i])).abs() <= 1e-10,
            "linearity violated at {i}"
        );
    }
}

#[test]
fn graph_evaluation_is_deterministic() {
    let run = || -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut g = Graph::<f32>::new();
        let xv: Vec<f32> = (0..2 * 4 * 4 * 4 * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wv: Vec<f32> = (0..27 * 2 * 3).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let x = g.leaf(&[2, 4, 4, 4, 2], xv, false).unwrap();
        let w = g.leaf(&[3, 3, 3, 2, 3], wv, false).unwrap();
        let y = g.conv3d(x, w, None, 1, 1).unwrap();
        g.values(y).to_vec()
    };
    assert_eq!(run(), run());
}

#[test]
fn double_backward_is_an_error() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(&[2], vec![1.0, 2.0], true).unwrap();
    let l = g.sum(x);
    g.backward(l).unwrap();
    assert!(matches!(g.backward(l), Err(AutodiffError::DoubleBackward)));
}

#[test]
fn non_finite_loss_is_a_numerical_fault() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(&[1], vec![-1.0], true).unwrap();
    let l = g.log(x); // ln(-1) = NaN
    assert!(matches!(
        g.backward(l),
        Err(AutodiffError::NumericalFault(_))
    ));
}

#[test]
fn backward_frees_intermediates_but_keeps_leaves() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(&[2], vec![1.0, 2.0], true).unwrap();
    let sq = g.square(x);
    let l = g.sum(sq);
    g.backward(l).unwrap();
    assert_eq!(g.values(x), &[1.0, 2.0]);
    assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
    let caught = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
        let _ = g.values(sq);
    }));
    assert!(caught.is_err(), "intermediate values should be freed");
}

#[test]
fn shape_mismatch_errors() {
    let mut g = Graph::<f64>::new();
    let a = g.leaf(&[2, 2], vec![0.0; 4], false).unwrap();
    let b = g.leaf(&[2, 3], vec![0.0; 6], false).unwrap();
    assert!(matches!(g.add(a, b), Err(AutodiffError::ShapeMismatch(_))));
    let x5 = g.leaf(&[1, 2, 2, 2, 2], vec![0.0; 16], false).unwrap();
    let w_bad = g.leaf(&[3, 3, 3, 3, 2], vec![0.0; 162], false).unwrap();
    assert!(matches!(
        g.conv3d(x5, w_bad, None, 1, 1),
        Err(AutodiffError::ShapeMismatch(_))
    ));
}

#[test]
fn composite_fd_check_through_mixed_graph() {
    // a small conv→norm→activation→normalize→margin-like composite
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let xv = rand_vec(&mut rng, 2 * 2 * 4 * 4 * 1, -1.0, 1.0);
    let wv = rand_vec(&mut rng, 27 * 2, -0.5, 0.5);
    let gv = rand_vec(&mut rng, 2, 0.8, 1.2);
    let sv = rand_vec(&mut rng, 2, -0.2, 0.2);
    let err = max_fd_error(
        &|g: &mut Graph<f64>, ids: &[TensorId]| {
            let y = g.conv3d(ids[0], ids[1], None, 1, 1)?;
            let y = g.instance_norm(y, ids[2], ids[3], 1e-5)?;
            let y = g.leaky_relu(y, 0.01);
            let y = g.unit_normalize(y, 1e-8)?;
            let f = g.flip_w(y)?;
            let d = g.sub(y, f)?;
            let d2 = g.square(d);
            let d2 = g.sum_channels(d2)?;
            let hinge = g.affine(d2, -1.0, 0.5);
            let hinge = g.max_with_constant(hinge, 0.0);
            Ok(g.mean(hinge))
        },
        &[
            (vec![2, 2, 4, 4, 1], xv),
            (vec![3, 3, 3, 1, 2], wv),
            (vec![2], gv),
            (vec![2], sv),
        ],
        FD_STEP,
    )
    .unwrap();
    assert!(err <= FD_TOL, "composite check failed: {err}");
}

#[test]
fn rel_err_floors_small_magnitudes() {
    assert!(rel_err(0.0, 1e-7) < 1e-4);
    assert!(rel_err(1.0, 1.1) > 0.05);
}
