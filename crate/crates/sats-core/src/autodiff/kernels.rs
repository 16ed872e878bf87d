//! Raw numeric kernels shared by the autodiff graph and the eager
//! inference path.
//!
//! Tensor memory layout is channel-last `[N, D, H, W, C]`; convolution
//! weights are `[kd, kh, kw, Cin, Cout]` so that the flattened weight
//! matrix is directly the right-hand side of an im2col GEMM. All kernels
//! run serially with fixed chunk geometry, so results are deterministic.

use super::{AutodiffError, Result, Scalar};

/// Spatial output extent of a convolution along one axis.
pub fn conv_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = input + 2 * pad;
    if padded < k {
        return Err(AutodiffError::ShapeMismatch(format!(
            "kernel {k} larger than padded input {padded}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

/// Spatial output extent of a transposed convolution along one axis.
pub fn tconv_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let grown = (input - 1) * stride + k;
    if grown < 2 * pad {
        return Err(AutodiffError::ShapeMismatch(format!(
            "padding {pad} too large for transposed conv output {grown}"
        )));
    }
    Ok(grown - 2 * pad)
}

#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub batch: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn for_conv(
        xs: &[usize],
        ws: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<ConvGeom> {
        if xs.len() != 5 || ws.len() != 5 {
            return Err(AutodiffError::ShapeMismatch(format!(
                "conv expects 5-axis input/weight, got {xs:?} and {ws:?}"
            )));
        }
        if ws[0] != ws[1] || ws[1] != ws[2] {
            return Err(AutodiffError::ShapeMismatch(format!(
                "only cubic kernels supported, got {:?}",
                &ws[..3]
            )));
        }
        if ws[3] != xs[4] {
            return Err(AutodiffError::ShapeMismatch(format!(
                "input has {} channels but weight expects {}",
                xs[4], ws[3]
            )));
        }
        let k = ws[0];
        Ok(ConvGeom {
            batch: xs[0],
            input: [xs[1], xs[2], xs[3]],
            output: [
                conv_out_dim(xs[1], k, stride, pad)?,
                conv_out_dim(xs[2], k, stride, pad)?,
                conv_out_dim(xs[3], k, stride, pad)?,
            ],
            cin: xs[4],
            cout: ws[4],
            k,
            stride,
            pad,
        })
    }

    pub fn for_tconv(
        xs: &[usize],
        ws: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<ConvGeom> {
        if xs.len() != 5 || ws.len() != 5 {
            return Err(AutodiffError::ShapeMismatch(format!(
                "transposed conv expects 5-axis input/weight, got {xs:?} and {ws:?}"
            )));
        }
        if ws[0] != ws[1] || ws[1] != ws[2] {
            return Err(AutodiffError::ShapeMismatch(format!(
                "only cubic kernels supported, got {:?}",
                &ws[..3]
            )));
        }
        if ws[3] != xs[4] {
            return Err(AutodiffError::ShapeMismatch(format!(
                "input has {} channels but weight expects {}",
                xs[4], ws[3]
            )));
        }
        let k = ws[0];
        Ok(ConvGeom {
            batch: xs[0],
            input: [xs[1], xs[2], xs[3]],
            output: [
                tconv_out_dim(xs[1], k, stride, pad)?,
                tconv_out_dim(xs[2], k, stride, pad)?,
                tconv_out_dim(xs[3], k, stride, pad)?,
            ],
            cin: xs[4],
            cout: ws[4],
            k,
            stride,
            pad,
        })
    }

    pub fn out_shape(&self) -> [usize; 5] {
        [
            self.batch,
            self.output[0],
            self.output[1],
            self.output[2],
            self.cout,
        ]
    }

    fn out_voxels(&self) -> usize {
        self.output.iter().product()
    }

    fn in_voxels(&self) -> usize {
        self.input.iter().product()
    }
}

/// Target chunk footprint for im2col buffers, in scalar elements.
const CHUNK_ELEMS: usize = 2 << 20;

fn chunk_rows(cols: usize) -> usize {
    (CHUNK_ELEMS / cols.max(1)).clamp(1, 16384)
}

/// Gather an im2col chunk for output voxels `[q0, q1)` of batch item `n`.
/// Row layout per voxel: `(kd, kh, kw)` blocks of `cin` contiguous values,
/// zero-filled out of bounds.
fn im2col_chunk<S: Scalar>(x: &[S], g: &ConvGeom, n: usize, q0: usize, q1: usize, col: &mut [S]) {
    let [id, ih, iw] = g.input;
    let [_, oh, ow] = g.output;
    let (k, s, p, ci) = (g.k, g.stride, g.pad, g.cin);
    let row_len = k * k * k * ci;
    let x_base = n * id * ih * iw * ci;
    for q in q0..q1 {
        let od = q / (oh * ow);
        let rem = q % (oh * ow);
        let (oy, ox) = (rem / ow, rem % ow);
        let d0 = (od * s) as isize - p as isize;
        let h0 = (oy * s) as isize - p as isize;
        let w0 = (ox * s) as isize - p as isize;
        let row = &mut col[(q - q0) * row_len..(q - q0 + 1) * row_len];
        let mut idx = 0;
        for kd in 0..k {
            let d = d0 + kd as isize;
            let d_ok = d >= 0 && (d as usize) < id;
            for kh in 0..k {
                let h = h0 + kh as isize;
                let h_ok = h >= 0 && (h as usize) < ih;
                for kw in 0..k {
                    let w = w0 + kw as isize;
                    if d_ok && h_ok && w >= 0 && (w as usize) < iw {
                        let src =
                            x_base + (((d as usize * ih) + h as usize) * iw + w as usize) * ci;
                        row[idx..idx + ci].copy_from_slice(&x[src..src + ci]);
                    } else {
                        row[idx..idx + ci].fill(S::zero());
                    }
                    idx += ci;
                }
            }
        }
    }
}

/// Strided cross-correlation via im2col + GEMM:
/// `out[n,q,co] = bias[co] + Σ_{k,ci} x[n, s·q − p + k, ci]·w[k,ci,co]`.
pub fn conv_forward<S: Scalar>(
    x: &[S],
    w: &[S],
    bias: Option<&[S]>,
    g: &ConvGeom,
) -> Vec<S> {
    let row_len = g.k * g.k * g.k * g.cin;
    let voxels = g.out_voxels();
    let mut out = vec![S::zero(); g.batch * voxels * g.cout];
    let rows = chunk_rows(row_len);
    let mut col = vec![S::zero(); rows * row_len];
    for n in 0..g.batch {
        let mut q0 = 0;
        while q0 < voxels {
            let q1 = (q0 + rows).min(voxels);
            im2col_chunk(x, g, n, q0, q1, &mut col);
            let out_off = (n * voxels + q0) * g.cout;
            if let Some(b) = bias {
                for r in 0..q1 - q0 {
                    out[out_off + r * g.cout..out_off + (r + 1) * g.cout].copy_from_slice(b);
                }
            }
            unsafe {
                S::gemm(
                    q1 - q0,
                    row_len,
                    g.cout,
                    S::one(),
                    col.as_ptr(),
                    row_len as isize,
                    1,
                    w.as_ptr(),
                    g.cout as isize,
                    1,
                    if bias.is_some() { S::one() } else { S::zero() },
                    out.as_mut_ptr().add(out_off),
                    g.cout as isize,
                    1,
                );
            }
            q0 = q1;
        }
    }
    out
}

/// Weight gradient of [`conv_forward`]:
/// `dw[k,ci,co] = Σ_{n,q} x[n, s·q − p + k, ci]·dy[n,q,co]`.
pub fn conv_dw<S: Scalar>(x: &[S], dy: &[S], g: &ConvGeom) -> Vec<S> {
    let row_len = g.k * g.k * g.k * g.cin;
    let voxels = g.out_voxels();
    let mut dw = vec![S::zero(); row_len * g.cout];
    let rows = chunk_rows(row_len);
    let mut col = vec![S::zero(); rows * row_len];
    for n in 0..g.batch {
        let mut q0 = 0;
        while q0 < voxels {
            let q1 = (q0 + rows).min(voxels);
            im2col_chunk(x, g, n, q0, q1, &mut col);
            let dy_off = (n * voxels + q0) * g.cout;
            unsafe {
                // dw (row_len × cout) += colᵀ (row_len × P) · dy (P × cout)
                S::gemm(
                    row_len,
                    q1 - q0,
                    g.cout,
                    S::one(),
                    col.as_ptr(),
                    1,
                    row_len as isize,
                    dy.as_ptr().add(dy_off),
                    g.cout as isize,
                    1,
                    S::one(),
                    dw.as_mut_ptr(),
                    g.cout as isize,
                    1,
                );
            }
            q0 = q1;
        }
    }
    dw
}

/// Bias gradient: per-output-channel sum of `dy`.
pub fn conv_db<S: Scalar>(dy: &[S], cout: usize) -> Vec<S> {
    let mut db = vec![S::zero(); cout];
    for row in dy.chunks_exact(cout) {
        for (acc, v) in db.iter_mut().zip(row) {
            *acc += *v;
        }
    }
    db
}

/// Swap the input/output channel axes of a `[k,k,k,ci,co]` weight tensor,
/// yielding `[k,k,k,co,ci]`.
pub fn swap_weight_io<S: Scalar>(w: &[S], k3: usize, cin: usize, cout: usize) -> Vec<S> {
    let mut out = vec![S::zero(); w.len()];
    for off in 0..k3 {
        let src = off * cin * cout;
        let dst = off * cout * cin;
        for ci in 0..cin {
            for co in 0..cout {
                out[dst + co * cin + ci] = w[src + ci * cout + co];
            }
        }
    }
    out
}

/// Transposed (fractionally-strided) convolution scatter:
/// `out[n, s·q − p + k, co] += Σ_ci x[n,q,ci]·w[k,ci,co]`.
///
/// This is both the decoder upsampling forward and the input-gradient of
/// [`conv_forward`] (with input/output channels of `w` swapped).
pub fn tconv_forward<S: Scalar>(x: &[S], w: &[S], g: &ConvGeom) -> Vec<S> {
    let [id, ih, iw] = g.input;
    let [od, oh, ow] = g.output;
    let (k, s, p, ci, co) = (g.k, g.stride, g.pad, g.cin, g.cout);
    let k3 = k * k * k;
    let in_voxels = g.in_voxels();
    let mut out = vec![S::zero(); g.batch * od * oh * ow * co];

    // wmat: (ci) × (k³·co), so a chunk GEMM produces per-voxel scatter rows
    let mut wmat = vec![S::zero(); ci * k3 * co];
    for off in 0..k3 {
        for c_in in 0..ci {
            for c_out in 0..co {
                wmat[c_in * k3 * co + off * co + c_out] = w[(off * ci + c_in) * co + c_out];
            }
        }
    }

    let row_len = k3 * co;
    let rows = chunk_rows(row_len);
    let mut tmp = vec![S::zero(); rows * row_len];
    for n in 0..g.batch {
        let mut q0 = 0;
        while q0 < in_voxels {
            let q1 = (q0 + rows).min(in_voxels);
            unsafe {
                S::gemm(
                    q1 - q0,
                    ci,
                    row_len,
                    S::one(),
                    x.as_ptr().add((n * in_voxels + q0) * ci),
                    ci as isize,
                    1,
                    wmat.as_ptr(),
                    row_len as isize,
                    1,
                    S::zero(),
                    tmp.as_mut_ptr(),
                    row_len as isize,
                    1,
                );
            }
            for q in q0..q1 {
                let d = q / (ih * iw);
                let rem = q % (ih * iw);
                let (h, wv) = (rem / iw, rem % iw);
                let d0 = (d * s) as isize - p as isize;
                let h0 = (h * s) as isize - p as isize;
                let w0 = (wv * s) as isize - p as isize;
                let row = &tmp[(q - q0) * row_len..(q - q0 + 1) * row_len];
                let mut idx = 0;
                for kd in 0..k {
                    let td = d0 + kd as isize;
                    let d_ok = td >= 0 && (td as usize) < od;
                    for kh in 0..k {
                        let th = h0 + kh as isize;
                        let h_ok = th >= 0 && (th as usize) < oh;
                        for kw in 0..k {
                            let tw = w0 + kw as isize;
                            if d_ok && h_ok && tw >= 0 && (tw as usize) < ow {
                                let dst = ((n * od + td as usize) * oh + th as usize) * ow * co
                                    + tw as usize * co;
                                for c in 0..co {
                                    out[dst + c] += row[idx + c];
                                }
                            }
                            idx += co;
                        }
                    }
                }
            }
            q0 = q1;
        }
    }
    out
}

/// Weight gradient of [`tconv_forward`]:
/// `dw[k,ci,co] = Σ_{n,q} x[n,q,ci]·dy[n, s·q − p + k, co]`.
pub fn tconv_dw<S: Scalar>(x: &[S], dy: &[S], g: &ConvGeom) -> Vec<S> {
    // im2col over dy with the forward's (k, s, p): geometry of a conv whose
    // "output" grid is this tconv's input grid.
    let col_geom = ConvGeom {
        batch: g.batch,
        input: g.output,
        output: g.input,
        cin: g.cout,
        cout: g.cin,
        k: g.k,
        stride: g.stride,
        pad: g.pad,
    };
    let k3 = g.k * g.k * g.k;
    let row_len = k3 * g.cout;
    let voxels = g.in_voxels();
    let mut tmp = vec![S::zero(); g.cin * row_len]; // (ci) × (k³·co)
    let rows = chunk_rows(row_len);
    let mut col = vec![S::zero(); rows * row_len];
    for n in 0..g.batch {
        let mut q0 = 0;
        while q0 < voxels {
            let q1 = (q0 + rows).min(voxels);
            im2col_chunk(dy, &col_geom, n, q0, q1, &mut col);
            unsafe {
                // tmp (ci × row_len) += xᵀ (ci × P) · col (P × row_len)
                S::gemm(
                    g.cin,
                    q1 - q0,
                    row_len,
                    S::one(),
                    x.as_ptr().add((n * voxels + q0) * g.cin),
                    1,
                    g.cin as isize,
                    col.as_ptr(),
                    row_len as isize,
                    1,
                    S::one(),
                    tmp.as_mut_ptr(),
                    row_len as isize,
                    1,
                );
            }
            q0 = q1;
        }
    }
    // permute (ci, k, co) → (k, ci, co)
    let mut dw = vec![S::zero(); k3 * g.cin * g.cout];
    for c_in in 0..g.cin {
        for off in 0..k3 {
            for c_out in 0..g.cout {
                dw[(off * g.cin + c_in) * g.cout + c_out] =
                    tmp[c_in * row_len + off * g.cout + c_out];
            }
        }
    }
    dw
}

// ---------------------------------------------------------------------------
// Normalization kernels
// ---------------------------------------------------------------------------

/// Per-(instance, channel) mean and 1/√(var+eps) over spatial axes.
pub fn instance_stats<S: Scalar>(x: &[S], spatial: usize, channels: usize, batch: usize, eps: S) -> Vec<(S, S)> {
    let mut stats = Vec::with_capacity(batch * channels);
    for n in 0..batch {
        let base = n * spatial * channels;
        let mut sums = vec![S::zero(); channels];
        let mut sq = vec![S::zero(); channels];
        for q in 0..spatial {
            let row = &x[base + q * channels..base + (q + 1) * channels];
            for c in 0..channels {
                sums[c] += row[c];
                sq[c] += row[c] * row[c];
            }
        }
        let m = S::from_f64(spatial as f64);
        for c in 0..channels {
            let mean = sums[c] / m;
            let var = (sq[c] / m - mean * mean).max(S::zero());
            stats.push((mean, (var + eps).sqrt().recip()));
        }
    }
    stats
}

/// `y = (x − mean)·inv_std·gain[c] + shift[c]`.
pub fn instance_norm_forward<S: Scalar>(
    x: &[S],
    stats: &[(S, S)],
    gain: &[S],
    shift: &[S],
    spatial: usize,
    channels: usize,
    batch: usize,
) -> Vec<S> {
    let mut y = vec![S::zero(); x.len()];
    for n in 0..batch {
        let base = n * spatial * channels;
        let st = &stats[n * channels..(n + 1) * channels];
        for q in 0..spatial {
            let off = base + q * channels;
            for c in 0..channels {
                let (mean, inv_std) = st[c];
                y[off + c] = (x[off + c] - mean) * inv_std * gain[c] + shift[c];
            }
        }
    }
    y
}
