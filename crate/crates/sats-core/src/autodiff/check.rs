//! Finite-difference gradient checking for every graph operator.
//!
//! Checks run in double precision with central differences
//! `(f(x+h) − f(x−h)) / 2h` at `h = 1e-4`. The reported error per element
//! is `|a − n| / max(|a|, |n|, 0.01)`, i.e. relative for gradients of
//! ordinary magnitude and absolute (≤ tol·0.01) for near-zero ones.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Result, TensorId};

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOL: f64 = 1e-4;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(0.01)
}

/// One checked operator (or composite) with its worst elementwise error.
#[derive(Debug, Clone)]
pub struct OpCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

/// Maximum finite-difference error over every element of every leaf.
///
/// `build` must construct the same scalar loss from the given leaves on
/// each call; it runs once with tracked leaves for the analytic gradients
/// and then twice per leaf element for the central difference.
pub fn max_fd_error(
    build: &dyn Fn(&mut Graph<f64>, &[TensorId]) -> Result<TensorId>,
    leaves: &[(Vec<usize>, Vec<f64>)],
    step: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let ids: Vec<TensorId> = leaves
        .iter()
        .map(|(s, v)| g.leaf(s, v.clone(), true))
        .collect::<Result<_>>()?;
    let loss = build(&mut g, &ids)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|id| g.grad(*id).map(|v| v.to_vec()).unwrap_or_default())
        .collect();

    let eval = |vals: &[(Vec<usize>, Vec<f64>)]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<TensorId> = vals
            .iter()
            .map(|(s, v)| g.leaf(s, v.clone(), false))
            .collect::<Result<_>>()?;
        let loss = build(&mut g, &ids)?;
        Ok(g.scalar_value(loss))
    };

    let mut worst = 0.0f64;
    let mut vals = leaves.to_vec();
    for li in 0..leaves.len() {
        for ei in 0..leaves[li].1.len() {
            let orig = vals[li].1[ei];
            vals[li].1[ei] = orig + step;
            let fp = eval(&vals)?;
            vals[li].1[ei] = orig - step;
            let fm = eval(&vals)?;
            vals[li].1[ei] = orig;
            let numeric = (fp - fm) / (2.0 * step);
            let a = analytic[li].get(ei).copied().unwrap_or(0.0);
            worst = worst.max(rel_err(a, numeric));
        }
    }
    Ok(worst)
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Values kept away from a kink at `c` so central differences stay valid.
fn away_from(rng: &mut ChaCha8Rng, n: usize, c: f64) -> Vec<f64> {
    (0..n)
        .map(|_| loop {
            let v = rng.gen_range(-2.0..2.0);
            if (v - c).abs() > 0.05 {
                break v;
            }
        })
        .collect()
}

/// A fixed random projection makes the scalar loss sensitive to element
/// order, so permutation bugs in an operator's backward cannot cancel out.
fn projected_loss(
    g: &mut Graph<f64>,
    y: TensorId,
    weights: &[f64],
) -> Result<TensorId> {
    let shape = g.shape(y).to_vec();
    let r = g.leaf(&shape, weights.to_vec(), false)?;
    let weighted = g.mul(y, r)?;
    let lin = g.sum(weighted);
    let sq = g.square(y);
    let quad = g.mean(sq);
    g.add(lin, quad)
}

/// Gradient-check every operator at small random shapes; three seeds of
/// this suite back the first acceptance criterion.
pub fn standard_suite(seed: u64, step: f64, tol: f64) -> Result<Vec<OpCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<OpCheck> = Vec::new();

    macro_rules! check {
        ($name:expr, $leaves:expr, $build:expr) => {{
            let leaves = $leaves;
            let err = max_fd_error(&$build, &leaves, step)?;
            out.push(OpCheck {
                name: $name.to_string(),
                max_rel_err: err,
                tol,
            });
        }};
    }

    let shape2 = vec![3usize, 4];
    let n2 = 12;
    let proj: Vec<f64> = uniform(&mut rng, n2, -1.0, 1.0);

    {
        let p = proj.clone();
        check!(
            "add",
            vec![
                (shape2.clone(), uniform(&mut rng, n2, -2.0, 2.0)),
                (shape2.clone(), uniform(&mut rng, n2, -2.0, 2.0)),
            ],
            move |g: &mut Graph<f64>, ids: &[TensorId]| {
                let y = g.add(ids[0], ids[1])?;
                projected_loss(g, y, &p)
            }
        );
    }
    {
        let p = proj.clone();
        check!(
            "sub",
            vec![
                (shape2.clone(), uniform(&mut rng, n2, -2.0, 2.0)),
                (shape2.clone(), uniform(&mut rng, n2, -2.0, 2.0)),
            ],
            move |g: &mut Graph<f64>, ids: &[TensorId]| {
                let y = g.sub(ids[0], ids[1])?;
                projected_loss(g, y, &p)
            }
        );
    }
    {
        let p = proj.clone();
        check!(
            "mul",
            vec![
                (shape2.clone(), uniform(&mut rng, n2, -2.0, 2.0)),
                (shape2.clone(), uniform(&mut rng, n2, -2.0, 2.0)),
            ],
            move |g: &mut Graph<f64>, ids: &[TensorId]| {
                let y = g.mul(ids[0], ids[1])?;
                projected_loss(g, y, &p)
            }
        );
    }
    {
        let p = proj.clone();
        check!(
            "div",
            vec![
                (shape2.clone(), uniform(&mut rng, n2, -2.0, 2.0)),
                (shape2.clone(), {
                    // keep denominators away from zero
                    let mut v = uniform(&mut rng, n2, 0.5, 2.0);
                    for (i, x) in v.iter_mut().enumerate() {
                        if i % 2 == 0 {
                            *x = -*x;
                        }
                    }
                    v
                }),
            ],
            move |g: &mut Graph<f64>, ids: &[TensorId]| {
                let y = g.div(ids[0], ids[1])?;
                projected_loss(g, y, &p)
            }
        );
    }
    {
        let p = proj.clone();
        check!(
            "affine",
            vec![(shape2.clone(), uniform(&mut rng, n2, -2.0, 2.0))],
            move |g: &mut Graph<f64>, ids: &[TensorId]| {
                let y = g.affine(ids[0], -1.7, 0.4);
                projected_loss(g, y, &p)
            }
        );
    }
    {
        let p = proj.clone();
        check!(
            "square",
            vec![(shape2.clone(), uniform(&mut rng, n2, -2.0, 2.0))],
            move |g: &mut Graph<f64>, ids: &[TensorId]| {
                let y = g.square(ids[0]);
                projected_loss(g, y, &p)
            }
        );
    }
    {
        let p = proj.clone();
        check!(
            "sqrt",
            vec![(shape2.clone(), uniform(&mut rng, n2, 0.3, 3.0))],
            move |g: &mut Graph<f64>, ids: &[TensorId]| {
                let y = g.sqrt(ids[0]);
                projected_loss(g, y, &p)
            }
        );
    }
    {
        let p = proj.clone();
        check!(
            "sigmoid",
            vec![(shape2.clone(), uniform(&mut rng, n2, -4.0, 4.0))],
            move |g: &mut Graph<f64>, ids: &[TensorId]| {
                let y = g.sigmoid(ids[0]);
                projected_loss(g, y, &p)
            }
        );
    }
    {
        let p = proj.clone();
        check!(
            "log",
            vec![(shape2.clone(), uniform(&mut rng, n2, 0.2, 4.0))],
            move |g: &mut Graph<f64>, ids: &[TensorId]| {
                let y = g.log(ids[0]);
                projected_loss(g, y, &p)
            }
        );
    }
    {
        let p = proj.clone();
        check!(
            "softplus",
            vec![(shape2.clone(), uniform(&mut rng, n2, -4.0, 4.0))],
            move |g: &mut Graph<f64>, ids: &[TensorId]| {
                let y = g.softplus(ids[0]);
                projected_loss(g, y, &p)
            }
        );
    }
    {
        let p = proj.clone();
        check!(
            "relu",
            vec![(shape2.clone(), away_from(&mut rng, n2, 0.0))],
            move |g: &mut Graph<f64>, ids: &[TensorId]| {
                let y = g.relu(ids[0]);
                projected_loss(g, y, &p)
            }
        );
    }
    {
        let p = proj.clone();
        check!(
            "leaky_relu",
            vec![(shape2.clone(), away_from(&mut rng, n2, 0.0))],
            move |g: &mut Graph<f64>, ids: &[TensorId]| {
                let y = g.leaky_relu(ids[0], 0.01);
                projected_loss(g, y, &p)
            }
        );
    }
    {
        let p = proj.clone();
        check!(
            "max_with_constant",
            vec![(shape2.clone(), away_from(&mut rng, n2, 0.3))],
            move |g: &mut Graph<f64>, ids: &[TensorId]| {
                let y = g.max_with_constant(ids[0], 0.3);
                projected_loss(g, y, &p)
            }
        );
    }
    check!(
        "sum",
        vec![(shape2.clone(), uniform(&mut rng, n2, -2.0, 2.0))],
        |g: &mut Graph<f64>, ids: &[TensorId]| {
            let y = g.sum(ids[0]);
            Ok(g.square(y))
        }
    );
    check!(
        "mean",
        vec![(shape2.clone(), uniform(&mut rng, n2, -2.0, 2.0))],
        |g: &mut Graph<f64>, ids: &[TensorId]| {
            let y = g.mean(ids[0]);
            Ok(g.square(y))
        }
    );

    let shape5 = vec![1usize, 2, 3, 4, 3];
    let n5 = 72;
    let proj5a: Vec<f64> = uniform(&mut rng, 24, -1.0, 1.0); // after channel sum
    {
        let p = proj5a.clone();
        check!(
            "sum_channels",
            vec![(shape5.clone(), uniform(&mut rng, n5, -2.0, 2.0))],
            move |g: &mut Graph<f64>, ids: &[TensorId]| {
                let y = g.sum_channels(ids[0])?;
                projected_loss(g, y, &p)
            }
        );
    }
    {
        let p: Vec<f64> = uniform(&mut rng, 24 * 5, -1.0, 1.0);
        check!(
            "concat",
            vec![
                (shape5.clone(), uniform(&mut rng, n5, -2.0, 2.0)),
                (vec![1, 2, 3, 4, 2], uniform(&mut rng, 48, -2.0, 2.0)),
            ],
            move |g: &mut Graph<f64>, ids: &[TensorId]| {
                let y = g.concat(ids[0], ids[1])?;
                projected_loss(g, y, &p)
            }
        );
    }
    {
        let p: Vec<f64> = uniform(&mut rng, n5, -1.0, 1.0);
        check!(
            "flip_w",
            vec![(shape5.clone(), uniform(&mut rng, n5, -2.0, 2.0))],
            move |g: &mut Graph<f64>, ids: &[TensorId]| {
                let y = g.flip_w(ids[0])?;
                projected_loss(g, y, &p)
            }
        );
    }
    {
        // channel vectors with norm safely above the eps floor
        let mut vals = uniform(&mut rng, n5, -1.5, 1.5);
        for row in vals.chunks_mut(3) {
            while row.iter().map(|v| v * v).sum::<f64>().sqrt() <= 0.1 {
                for v in row.iter_mut() {
                    *v += 0.3;
                }
            }
        }
        let p: Vec<f64> = uniform(&mut rng, n5, -1.0, 1.0);
        check!(
            "unit_normalize",
            vec![(shape5.clone(), vals)],
            move |g: &mut Graph<f64>, ids: &[TensorId]| {
                let y = g.unit_normalize(ids[0], 1e-8)?;
                projected_loss(g, y, &p)
            }
        );
    }
    {
        let p: Vec<f64> = uniform(&mut rng, n5, -1.0, 1.0);
        check!(
            "instance_norm",
            vec![
                (shape5.clone(), uniform(&mut rng, n5, -2.0, 2.0)),
                (vec![3], uniform(&mut rng, 3, 0.5, 1.5)),
                (vec![3], uniform(&mut rng, 3, -0.5, 0.5)),
            ],
            move |g: &mut Graph<f64>, ids: &[TensorId]| {
                let y = g.instance_norm(ids[0], ids[1], ids[2], 1e-5)?;
                projected_loss(g, y, &p)
            }
        );
    }

    // convolutions: the spec's 2-channel 4×6×6 case plus strides and the
    // decoder's kernel-4 transposed variant
    let xs = vec![1usize, 4, 6, 6, 2];
    let nx = 288;
    for (name, stride) in [("conv3d_s1", 1usize), ("conv3d_s2", 2)] {
        let od = super::kernels::conv_out_dim(4, 3, stride, 1)?;
        let oh = super::kernels::conv_out_dim(6, 3, stride, 1)?;
        let pn = od * oh * oh * 2;
        let p: Vec<f64> = uniform(&mut rng, pn, -1.0, 1.0);
        check!(
            name,
            vec![
                (xs.clone(), uniform(&mut rng, nx, -1.0, 1.0)),
                (vec![3, 3, 3, 2, 2], uniform(&mut rng, 108, -0.5, 0.5)),
                (vec![2], uniform(&mut rng, 2, -0.5, 0.5)),
            ],
            move |g: &mut Graph<f64>, ids: &[TensorId]| {
                let y = g.conv3d(ids[0], ids[1], Some(ids[2]), stride, 1)?;
                projected_loss(g, y, &p)
            }
        );
    }
    {
        let p: Vec<f64> = uniform(&mut rng, 4 * 6 * 6 * 3, -1.0, 1.0);
        check!(
            "conv_transpose3d_k2_s2",
            vec![
                (vec![1, 2, 3, 3, 2], uniform(&mut rng, 36, -1.0, 1.0)),
                (vec![2, 2, 2, 2, 3], uniform(&mut rng, 48, -0.5, 0.5)),
            ],
            move |g: &mut Graph<f64>, ids: &[TensorId]| {
                let y = g.conv_transpose3d(ids[0], ids[1], 2, 0)?;
                projected_loss(g, y, &p)
            }
        );
    }
    {
        let p: Vec<f64> = uniform(&mut rng, 4 * 6 * 6 * 3, -1.0, 1.0);
        check!(
            "conv_transpose3d_k4_s2",
            vec![
                (vec![1, 2, 3, 3, 2], uniform(&mut rng, 36, -1.0, 1.0)),
                (vec![4, 4, 4, 2, 3], uniform(&mut rng, 384, -0.5, 0.5)),
            ],
            move |g: &mut Graph<f64>, ids: &[TensorId]| {
                let y = g.conv_transpose3d(ids[0], ids[1], 2, 1)?;
                projected_loss(g, y, &p)
            }
        );
    }

    Ok(out)
}
