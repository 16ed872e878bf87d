//! Minimal reverse-mode automatic differentiation over dense tensors,
//! providing exactly the operator set the segmentation network and losses
//! need.
//!
//! A [`Graph`] is a tape of operation records for one forward pass; tensors
//! are referenced by [`TensorId`] handles. Tensors use channel-last memory
//! layout `[N, D, H, W, C]` for the 5-axis operations. `backward` visits
//! each record exactly once in reverse topological order, accumulates
//! gradients additively, frees intermediate values as it goes, and may run
//! only once per graph.
//!
//! Training runs in `f32`; the same graph code instantiated at `f64` backs
//! the finite-difference gradient checks in [`check`].

pub mod check;
pub mod kernels;

#[cfg(test)]
mod tests;

use thiserror::Error;

use kernels::{ConvGeom, conv_db, conv_dw, conv_forward, instance_norm_forward, instance_stats, swap_weight_io, tconv_dw, tconv_forward};

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("numerical fault: {0}")]
    NumericalFault(String),
    #[error("backward already ran on this graph")]
    DoubleBackward,
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Element type of a graph: `f32` for training, `f64` for gradient checks.
pub trait Scalar:
    'static
    + Copy
    + Send
    + Sync
    + std::fmt::Debug
    + num_traits::Float
    + num_traits::NumAssign
    + std::iter::Sum
{
    /// Row/column-strided `C ← alpha·A·B + beta·C`.
    ///
    /// # Safety
    /// Pointers must cover matrices of the given dimensions and strides.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn from_f64(x: f64) -> Self {
        x as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn from_f64(x: f64) -> Self {
        x
    }

    fn to_f64(self) -> f64 {
        self
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Handle to a tensor in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op<S: Scalar> {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Div(TensorId, TensorId),
    Affine { x: TensorId, a: S, b: S },
    Square(TensorId),
    Sqrt(TensorId),
    Sigmoid(TensorId),
    Log(TensorId),
    Softplus(TensorId),
    Relu(TensorId),
    LeakyRelu { x: TensorId, slope: S },
    MaxConst { x: TensorId, c: S },
    Sum(TensorId),
    Mean(TensorId),
    SumChannels(TensorId),
    Concat { a: TensorId, b: TensorId },
    FlipW(TensorId),
    UnitNormalize { x: TensorId, eps: S },
    InstanceNorm {
        x: TensorId,
        gain: TensorId,
        shift: TensorId,
        stats: Vec<(S, S)>,
    },
    Conv3d {
        x: TensorId,
        w: TensorId,
        bias: Option<TensorId>,
        geom: ConvGeom,
    },
    ConvTranspose3d {
        x: TensorId,
        w: TensorId,
        geom: ConvGeom,
    },
}

struct Node<S: Scalar> {
    shape: Vec<usize>,
    values: Option<Vec<S>>,
    tracked: bool,
    op: Op<S>,
}

/// Tape of operation records for one forward pass.
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
    backward_done: bool,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<S>, tracked: bool, op: Op<S>) -> TensorId {
        debug_assert_eq!(numel(&shape), values.len());
        self.nodes.push(Node {
            shape,
            values: Some(values),
            tracked,
            op,
        });
        self.grads.push(None);
        TensorId(self.nodes.len() - 1)
    }

    /// Insert a leaf tensor; `tracked` leaves receive gradients.
    pub fn leaf(&mut self, shape: &[usize], values: Vec<S>, tracked: bool) -> Result<TensorId> {
        if numel(shape) != values.len() {
            return Err(AutodiffError::ShapeMismatch(format!(
                "leaf shape {shape:?} implies {} values, got {}",
                numel(shape),
                values.len()
            )));
        }
        Ok(self.push(shape.to_vec(), values, tracked, Op::Leaf))
    }

    pub fn scalar(&mut self, v: S) -> TensorId {
        self.push(vec![1], vec![v], false, Op::Leaf)
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Forward values; panics if they were freed by `backward`.
    pub fn values(&self, id: TensorId) -> &[S] {
        self.nodes[id.0]
            .values
            .as_ref()
            .expect("tensor values were freed by backward")
    }

    pub fn scalar_value(&self, id: TensorId) -> S {
        let v = self.values(id);
        debug_assert_eq!(v.len(), 1);
        v[0]
    }

    pub fn grad(&self, id: TensorId) -> Option<&[S]> {
        self.grads[id.0].as_deref()
    }

    pub fn is_tracked(&self, id: TensorId) -> bool {
        self.nodes[id.0].tracked
    }

    fn tracked_any(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].tracked)
    }

    fn same_shape(&self, a: TensorId, b: TensorId, what: &str) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(AutodiffError::ShapeMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        Ok(())
    }

    fn zip2(&mut self, a: TensorId, b: TensorId, op: Op<S>, f: impl Fn(S, S) -> S) -> TensorId {
        let out: Vec<S> = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let tracked = self.tracked_any(&[a, b]);
        self.push(shape, out, tracked, op)
    }

    fn map1(&mut self, x: TensorId, op: Op<S>, f: impl Fn(S) -> S) -> TensorId {
        let out: Vec<S> = self.values(x).iter().map(|v| f(*v)).collect();
        let shape = self.nodes[x.0].shape.clone();
        let tracked = self.nodes[x.0].tracked;
        self.push(shape, out, tracked, op)
    }

    // -- elementwise ---------------------------------------------------------

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip2(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip2(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip2(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape(a, b, "div")?;
        Ok(self.zip2(a, b, Op::Div(a, b), |x, y| x / y))
    }

    /// `a·x + b` with scalar constants.
    pub fn affine(&mut self, x: TensorId, a: S, b: S) -> TensorId {
        self.map1(x, Op::Affine { x, a, b }, |v| a * v + b)
    }

    pub fn square(&mut self, x: TensorId) -> TensorId {
        self.map1(x, Op::Square(x), |v| v * v)
    }

    pub fn sqrt(&mut self, x: TensorId) -> TensorId {
        self.map1(x, Op::Sqrt(x), |v| v.sqrt())
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        self.map1(x, Op::Sigmoid(x), |v| {
            if v >= S::zero() {
                (S::one() + (-v).exp()).recip()
            } else {
                let e = v.exp();
                e / (S::one() + e)
            }
        })
    }

    pub fn log(&mut self, x: TensorId) -> TensorId {
        self.map1(x, Op::Log(x), |v| v.ln())
    }

    /// Numerically stable `ln(1 + eˣ)`.
    pub fn softplus(&mut self, x: TensorId) -> TensorId {
        self.map1(x, Op::Softplus(x), |v| {
            v.max(S::zero()) + (S::one() + (-v.abs()).exp()).ln()
        })
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        self.map1(x, Op::Relu(x), |v| v.max(S::zero()))
    }

    pub fn leaky_relu(&mut self, x: TensorId, slope: S) -> TensorId {
        self.map1(x, Op::LeakyRelu { x, slope }, |v| {
            if v > S::zero() {
                v
            } else {
                slope * v
            }
        })
    }

    /// Elementwise `max(x, c)`; the gradient passes only where `x > c`.
    pub fn max_with_constant(&mut self, x: TensorId, c: S) -> TensorId {
        self.map1(x, Op::MaxConst { x, c }, |v| v.max(c))
    }

    // -- reductions ----------------------------------------------------------

    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let total: S = self.values(x).iter().copied().sum();
        let tracked = self.nodes[x.0].tracked;
        self.push(vec![1], vec![total], tracked, Op::Sum(x))
    }

    pub fn mean(&mut self, x: TensorId) -> TensorId {
        let vals = self.values(x);
        let total: S = vals.iter().copied().sum();
        let m = total / S::from_f64(vals.len() as f64);
        let tracked = self.nodes[x.0].tracked;
        self.push(vec![1], vec![m], tracked, Op::Mean(x))
    }

    /// Sum over the channel axis of a 5-axis tensor: `[N,D,H,W,C] → [N,D,H,W,1]`.
    pub fn sum_channels(&mut self, x: TensorId) -> Result<TensorId> {
        let shape = self.require_5d(x, "sum_channels")?;
        let c = shape[4];
        let out: Vec<S> = self
            .values(x)
            .chunks_exact(c)
            .map(|row| row.iter().copied().sum())
            .collect();
        let mut oshape = shape.to_vec();
        oshape[4] = 1;
        let tracked = self.nodes[x.0].tracked;
        Ok(self.push(oshape, out, tracked, Op::SumChannels(x)))
    }

    // -- structural ----------------------------------------------------------

    fn require_5d(&self, x: TensorId, what: &str) -> Result<[usize; 5]> {
        let s = &self.nodes[x.0].shape;
        if s.len() != 5 {
            return Err(AutodiffError::ShapeMismatch(format!(
                "{what} expects a 5-axis tensor, got {s:?}"
            )));
        }
        Ok([s[0], s[1], s[2], s[3], s[4]])
    }

    /// Concatenate along the channel axis.
    pub fn concat(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let sa = self.require_5d(a, "concat")?;
        let sb = self.require_5d(b, "concat")?;
        if sa[..4] != sb[..4] {
            return Err(AutodiffError::ShapeMismatch(format!(
                "concat spatial dims differ: {sa:?} vs {sb:?}"
            )));
        }
        let (ca, cb) = (sa[4], sb[4]);
        let voxels = sa[0] * sa[1] * sa[2] * sa[3];
        let mut out = Vec::with_capacity(voxels * (ca + cb));
        {
            let va = self.values(a);
            let vb = self.values(b);
            for q in 0..voxels {
                out.extend_from_slice(&va[q * ca..(q + 1) * ca]);
                out.extend_from_slice(&vb[q * cb..(q + 1) * cb]);
            }
        }
        let shape = vec![sa[0], sa[1], sa[2], sa[3], ca + cb];
        let tracked = self.tracked_any(&[a, b]);
        Ok(self.push(shape, out, tracked, Op::Concat { a, b }))
    }

    /// Differentiable sagittal flip: reverses the W axis of `[N,D,H,W,C]`.
    pub fn flip_w(&mut self, x: TensorId) -> Result<TensorId> {
        let s = self.require_5d(x, "flip_w")?;
        let (w, c) = (s[3], s[4]);
        let rows = s[0] * s[1] * s[2];
        let vals = self.values(x);
        let mut out = Vec::with_capacity(vals.len());
        for r in 0..rows {
            let base = r * w * c;
            for wi in (0..w).rev() {
                out.extend_from_slice(&vals[base + wi * c..base + (wi + 1) * c]);
            }
        }
        let tracked = self.nodes[x.0].tracked;
        Ok(self.push(s.to_vec(), out, tracked, Op::FlipW(x)))
    }

    /// Per-voxel division of the channel vector by its L2 norm plus `eps`.
    pub fn unit_normalize(&mut self, x: TensorId, eps: S) -> Result<TensorId> {
        let s = self.require_5d(x, "unit_normalize")?;
        let c = s[4];
        let vals = self.values(x);
        let mut out = Vec::with_capacity(vals.len());
        for row in vals.chunks_exact(c) {
            let r = row.iter().map(|v| *v * *v).sum::<S>().sqrt();
            let inv = (r + eps).recip();
            out.extend(row.iter().map(|v| *v * inv));
        }
        let tracked = self.nodes[x.0].tracked;
        Ok(self.push(s.to_vec(), out, tracked, Op::UnitNormalize { x, eps }))
    }

    /// Per-(instance, channel) standardization over spatial axes followed by
    /// a learned affine; `gain` and `shift` have shape `[C]`.
    pub fn instance_norm(
        &mut self,
        x: TensorId,
        gain: TensorId,
        shift: TensorId,
        eps: S,
    ) -> Result<TensorId> {
        let s = self.require_5d(x, "instance_norm")?;
        let (batch, c) = (s[0], s[4]);
        let spatial = s[1] * s[2] * s[3];
        if spatial < 2 {
            return Err(AutodiffError::ShapeMismatch(
                "instance_norm needs ≥ 2 spatial elements per group".into(),
            ));
        }
        if self.nodes[gain.0].shape != [c] || self.nodes[shift.0].shape != [c] {
            return Err(AutodiffError::ShapeMismatch(format!(
                "instance_norm gain/shift must have shape [{c}]"
            )));
        }
        let stats = instance_stats(self.values(x), spatial, c, batch, eps);
        let out = instance_norm_forward(
            self.values(x),
            &stats,
            self.values(gain),
            self.values(shift),
            spatial,
            c,
            batch,
        );
        let tracked = self.tracked_any(&[x, gain, shift]);
        Ok(self.push(
            s.to_vec(),
            out,
            tracked,
            Op::InstanceNorm {
                x,
                gain,
                shift,
                stats,
            },
        ))
    }

    // -- convolutions --------------------------------------------------------

    /// Strided 3D cross-correlation; weight is `[k,k,k,Cin,Cout]`, optional
    /// bias `[Cout]`.
    pub fn conv3d(
        &mut self,
        x: TensorId,
        w: TensorId,
        bias: Option<TensorId>,
        stride: usize,
        padding: usize,
    ) -> Result<TensorId> {
        if stride != 1 && stride != 2 {
            return Err(AutodiffError::ShapeMismatch(format!(
                "conv3d stride must be 1 or 2, got {stride}"
            )));
        }
        let geom = ConvGeom::for_conv(
            &self.nodes[x.0].shape,
            &self.nodes[w.0].shape,
            stride,
            padding,
        )?;
        if let Some(b) = bias {
            if self.nodes[b.0].shape != [geom.cout] {
                return Err(AutodiffError::ShapeMismatch(format!(
                    "bias must have shape [{}]",
                    geom.cout
                )));
            }
        }
        let out = conv_forward(
            self.values(x),
            self.values(w),
            bias.map(|b| self.values(b)),
            &geom,
        );
        let mut tracked = self.tracked_any(&[x, w]);
        if let Some(b) = bias {
            tracked |= self.nodes[b.0].tracked;
        }
        Ok(self.push(
            geom.out_shape().to_vec(),
            out,
            tracked,
            Op::Conv3d { x, w, bias, geom },
        ))
    }

    /// Transposed (fractionally-strided) 3D convolution; doubles each
    /// spatial dim at stride 2 when `padding == (k − 2)/2`.
    pub fn conv_transpose3d(
        &mut self,
        x: TensorId,
        w: TensorId,
        stride: usize,
        padding: usize,
    ) -> Result<TensorId> {
        if stride != 1 && stride != 2 {
            return Err(AutodiffError::ShapeMismatch(format!(
                "conv_transpose3d stride must be 1 or 2, got {stride}"
            )));
        }
        let geom = ConvGeom::for_tconv(
            &self.nodes[x.0].shape,
            &self.nodes[w.0].shape,
            stride,
            padding,
        )?;
        let out = tconv_forward(self.values(x), self.values(w), &geom);
        let tracked = self.tracked_any(&[x, w]);
        Ok(self.push(
            geom.out_shape().to_vec(),
            out,
            tracked,
            Op::ConvTranspose3d { x, w, geom },
        ))
    }

    // -- backward ------------------------------------------------------------

    fn acc(&mut self, id: TensorId, contrib: Vec<S>) {
        if !self.nodes[id.0].tracked {
            return;
        }
        match &mut self.grads[id.0] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(&contrib) {
                    *a += *b;
                }
            }
            slot => *slot = Some(contrib),
        }
    }

    /// Populate gradients of all tracked leaves reachable from `loss`.
    ///
    /// Intermediate values are freed as the tape unwinds; leaf values and
    /// leaf gradients stay readable. Calling backward twice is an error.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.backward_done {
            return Err(AutodiffError::DoubleBackward);
        }
        let lv = self.values(loss);
        if lv.len() != 1 {
            return Err(AutodiffError::ShapeMismatch(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        if !lv[0].is_finite() {
            return Err(AutodiffError::NumericalFault(format!(
                "loss is {:?}",
                lv[0].to_f64()
            )));
        }
        if !self.nodes[loss.0].tracked {
            self.backward_done = true;
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].tracked {
                continue;
            }
            let Some(gout) = self.grads[i].take() else {
                continue;
            };
            self.dispatch(i, &gout)?;
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.grads[i] = Some(gout);
            } else {
                self.nodes[i].values = None;
            }
        }
        self.backward_done = true;
        Ok(())
    }

    fn dispatch(&mut self, i: usize, gout: &[S]) -> Result<()> {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(a, gout.to_vec());
                self.acc(b, gout.to_vec());
            }
            Op::Sub(a, b) => {
                self.acc(a, gout.to_vec());
                self.acc(b, gout.iter().map(|g| -*g).collect());
            }
            Op::Mul(a, b) => {
                let ga: Vec<S> = gout.iter().zip(self.values(b)).map(|(g, y)| *g * *y).collect();
                let gb: Vec<S> = gout.iter().zip(self.values(a)).map(|(g, x)| *g * *x).collect();
                self.acc(a, ga);
                self.acc(b, gb);
            }
            Op::Div(a, b) => {
                let bv = self.values(b);
                let av = self.values(a);
                let ga: Vec<S> = gout.iter().zip(bv).map(|(g, y)| *g / *y).collect();
                let gb: Vec<S> = gout
                    .iter()
                    .zip(av.iter().zip(bv))
                    .map(|(g, (x, y))| -*g * *x / (*y * *y))
                    .collect();
                self.acc(a, ga);
                self.acc(b, gb);
            }
            Op::Affine { x, a, .. } => {
                self.acc(x, gout.iter().map(|g| a * *g).collect());
            }
            Op::Square(x) => {
                let two = S::from_f64(2.0);
                let gx: Vec<S> = gout
                    .iter()
                    .zip(self.values(x))
                    .map(|(g, v)| two * *v * *g)
                    .collect();
                self.acc(x, gx);
            }
            Op::Sqrt(x) => {
                let half = S::from_f64(0.5);
                let gx: Vec<S> = gout
                    .iter()
                    .zip(self.values(TensorId(i)))
                    .map(|(g, y)| half / *y * *g)
                    .collect();
                self.acc(x, gx);
            }
            Op::Sigmoid(x) => {
                let gx: Vec<S> = gout
                    .iter()
                    .zip(self.values(TensorId(i)))
                    .map(|(g, y)| *g * *y * (S::one() - *y))
                    .collect();
                self.acc(x, gx);
            }
            Op::Log(x) => {
                let gx: Vec<S> = gout
                    .iter()
                    .zip(self.values(x))
                    .map(|(g, v)| *g / *v)
                    .collect();
                self.acc(x, gx);
            }
            Op::Softplus(x) => {
                let gx: Vec<S> = gout
                    .iter()
                    .zip(self.values(x))
                    .map(|(g, v)| {
                        let s = if *v >= S::zero() {
                            (S::one() + (-*v).exp()).recip()
                        } else {
                            let e = v.exp();
                            e / (S::one() + e)
                        };
                        *g * s
                    })
                    .collect();
                self.acc(x, gx);
            }
            Op::Relu(x) => {
                let gx: Vec<S> = gout
                    .iter()
                    .zip(self.values(x))
                    .map(|(g, v)| if *v > S::zero() { *g } else { S::zero() })
                    .collect();
                self.acc(x, gx);
            }
            Op::LeakyRelu { x, slope } => {
                let gx: Vec<S> = gout
                    .iter()
                    .zip(self.values(x))
                    .map(|(g, v)| if *v > S::zero() { *g } else { slope * *g })
                    .collect();
                self.acc(x, gx);
            }
            Op::MaxConst { x, c } => {
                let gx: Vec<S> = gout
                    .iter()
                    .zip(self.values(x))
                    .map(|(g, v)| if *v > c { *g } else { S::zero() })
                    .collect();
                self.acc(x, gx);
            }
            Op::Sum(x) => {
                let g = gout[0];
                let n = numel(&self.nodes[x.0].shape);
                self.acc(x, vec![g; n]);
            }
            Op::Mean(x) => {
                let n = numel(&self.nodes[x.0].shape);
                let g = gout[0] / S::from_f64(n as f64);
                self.acc(x, vec![g; n]);
            }
            Op::SumChannels(x) => {
                let c = self.nodes[x.0].shape[4];
                let mut gx = Vec::with_capacity(numel(&self.nodes[x.0].shape));
                for g in gout {
                    for _ in 0..c {
                        gx.push(*g);
                    }
                }
                self.acc(x, gx);
            }
            Op::Concat { a, b } => {
                let ca = self.nodes[a.0].shape[4];
                let cb = self.nodes[b.0].shape[4];
                let mut ga = Vec::with_capacity(numel(&self.nodes[a.0].shape));
                let mut gb = Vec::with_capacity(numel(&self.nodes[b.0].shape));
                for row in gout.chunks_exact(ca + cb) {
                    ga.extend_from_slice(&row[..ca]);
                    gb.extend_from_slice(&row[ca..]);
                }
                self.acc(a, ga);
                self.acc(b, gb);
            }
            Op::FlipW(x) => {
                let s = &self.nodes[x.0].shape;
                let (w, c) = (s[3], s[4]);
                let rows = s[0] * s[1] * s[2];
                let mut gx = Vec::with_capacity(gout.len());
                for r in 0..rows {
                    let base = r * w * c;
                    for wi in (0..w).rev() {
                        gx.extend_from_slice(&gout[base + wi * c..base + (wi + 1) * c]);
                    }
                }
                self.acc(x, gx);
            }
            Op::UnitNormalize { x, eps } => {
                let c = self.nodes[x.0].shape[4];
                let xv = self.values(x);
                let mut gx = Vec::with_capacity(xv.len());
                for (row, grow) in xv.chunks_exact(c).zip(gout.chunks_exact(c)) {
                    let r = row.iter().map(|v| *v * *v).sum::<S>().sqrt();
                    let den = r + eps;
                    let dot: S = row.iter().zip(grow).map(|(v, g)| *v * *g).sum();
                    let coef = if r > S::zero() {
                        dot / (r * den * den)
                    } else {
                        S::zero()
                    };
                    for (v, g) in row.iter().zip(grow) {
                        gx.push(*g / den - *v * coef);
                    }
                }
                self.acc(x, gx);
            }
            Op::InstanceNorm {
                x,
                gain,
                shift,
                stats,
            } => {
                let s = &self.nodes[x.0].shape;
                let (batch, c) = (s[0], s[4]);
                let spatial = s[1] * s[2] * s[3];
                let xv = self.values(x);
                let gv = self.values(gain);
                let m = S::from_f64(spatial as f64);

                let mut dgain = vec![S::zero(); c];
                let mut dshift = vec![S::zero(); c];
                let mut gx = vec![S::zero(); xv.len()];
                for n in 0..batch {
                    let st = &stats[n * c..(n + 1) * c];
                    let base = n * spatial * c;
                    // per-channel reductions over the spatial group
                    let mut sum_dy = vec![S::zero(); c];
                    let mut sum_dy_xh = vec![S::zero(); c];
                    for q in 0..spatial {
                        let off = base + q * c;
                        for ch in 0..c {
                            let (mean, istd) = st[ch];
                            let xh = (xv[off + ch] - mean) * istd;
                            let dy = gout[off + ch];
                            sum_dy[ch] += dy;
                            sum_dy_xh[ch] += dy * xh;
                        }
                    }
                    for ch in 0..c {
                        dgain[ch] += sum_dy_xh[ch];
                        dshift[ch] += sum_dy[ch];
                    }
                    for q in 0..spatial {
                        let off = base + q * c;
                        for ch in 0..c {
                            let (mean, istd) = st[ch];
                            let xh = (xv[off + ch] - mean) * istd;
                            let dy = gout[off + ch];
                            gx[off + ch] = gv[ch]
                                * istd
                                * (dy - sum_dy[ch] / m - xh * sum_dy_xh[ch] / m);
                        }
                    }
                }
                self.acc(x, gx);
                self.acc(gain, dgain);
                self.acc(shift, dshift);
            }
            Op::Conv3d { x, w, bias, geom } => {
                if self.nodes[x.0].tracked {
                    let wswap = swap_weight_io(
                        self.values(w),
                        geom.k * geom.k * geom.k,
                        geom.cin,
                        geom.cout,
                    );
                    // input grad: transposed conv of dy with io-swapped weight
                    let gx_geom = ConvGeom {
                        batch: geom.batch,
                        input: geom.output,
                        output: geom.input,
                        cin: geom.cout,
                        cout: geom.cin,
                        k: geom.k,
                        stride: geom.stride,
                        pad: geom.pad,
                    };
                    let gx = tconv_forward(gout, &wswap, &gx_geom);
                    self.acc(x, gx);
                }
                if self.nodes[w.0].tracked {
                    let dw = conv_dw(self.values(x), gout, &geom);
                    self.acc(w, dw);
                }
                if let Some(b) = bias {
                    if self.nodes[b.0].tracked {
                        self.acc(b, conv_db(gout, geom.cout));
                    }
                }
            }
            Op::ConvTranspose3d { x, w, geom } => {
                if self.nodes[x.0].tracked {
                    let wswap = swap_weight_io(
                        self.values(w),
                        geom.k * geom.k * geom.k,
                        geom.cin,
                        geom.cout,
                    );
                    // input grad: strided conv of dy with io-swapped weight
                    let gx_geom = ConvGeom {
                        batch: geom.batch,
                        input: geom.output,
                        output: geom.input,
                        cin: geom.cout,
                        cout: geom.cin,
                        k: geom.k,
                        stride: geom.stride,
                        pad: geom.pad,
                    };
                    let gx = conv_forward(gout, &wswap, None, &gx_geom);
                    self.acc(x, gx);
                }
                if self.nodes[w.0].tracked {
                    let dw = tconv_dw(self.values(x), gout, &geom);
                    self.acc(w, dw);
                }
            }
        }
        Ok(())
    }
}
