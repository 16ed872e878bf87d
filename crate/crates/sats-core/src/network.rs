//! The Siamese segmentation model: a shared-weight residual encoder-decoder
//! with a 1×1×1-convolution projection head, plus checkpoint I/O and an
//! eager (graph-free) inference forward.
//!
//! Architecture: per level one residual block (two 3×3×3 convs, each with
//! instance norm and leaky ReLU, identity skip with 1×1×1 projection when
//! channels change); stride-2 3×3×3 convs between encoder levels; stride-2
//! kernel-4 transposed convs, concatenation skips and one residual block
//! per decoder level; a 1×1×1 conv produces the binary logit. Filters double
//! after each downsampling, capped at 256. Both Siamese branches read the
//! same parameter storage, so they cannot diverge.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::check::OpCheck;
use crate::autodiff::{kernels, AutodiffError, Graph, Result as AdResult, Scalar, TensorId};
use crate::losses::{total_loss, LossConfig};
use crate::util::{fnv1a, splitmix64};

pub const CHANNEL_CAP: usize = 256;
pub const LEAKY_SLOPE: f64 = 0.01;
pub const NORM_EPS: f64 = 1e-5;
pub const UNIT_EPS: f64 = 1e-8;
/// Decoder upsampling: kernel-4 stride-2 padding-1 transposed conv
/// (exact doubling).
pub const UP_KERNEL: usize = 4;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NetError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub base_filters: usize,
    pub n_downsamplings: usize,
    pub in_channels: usize,
    pub seg_out_channels: usize,
    pub proj_channels: usize,
    pub proj_layers: usize,
}

impl Default for NetConfig {
    /// Desk-scale default; see [`NetConfig::paper_scale`] for the full-size
    /// configuration.
    fn default() -> Self {
        NetConfig {
            base_filters: 8,
            n_downsamplings: 3,
            in_channels: 1,
            seg_out_channels: 1,
            proj_channels: 16,
            proj_layers: 3,
        }
    }
}

impl NetConfig {
    pub fn paper_scale() -> Self {
        NetConfig {
            base_filters: 32,
            n_downsamplings: 4,
            ..NetConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_filters < 2 {
            return Err(NetError::InvalidConfig(format!(
                "base_filters must be ≥ 2, got {}",
                self.base_filters
            )));
        }
        if self.n_downsamplings == 0 || self.proj_layers == 0 {
            return Err(NetError::InvalidConfig(
                "need ≥ 1 downsampling and ≥ 1 projection layer".into(),
            ));
        }
        Ok(())
    }

    /// Encoder filter counts per level: doubling after each downsampling,
    /// capped at 256.
    pub fn channel_progression(&self) -> Vec<usize> {
        (0..=self.n_downsamplings)
            .map(|l| (self.base_filters << l).min(CHANNEL_CAP))
            .collect()
    }

    pub fn check_divisible(&self, spatial: [usize; 3]) -> Result<()> {
        let f = 1usize << self.n_downsamplings;
        if spatial.iter().any(|s| s % f != 0 || *s == 0) {
            return Err(NetError::InvalidConfig(format!(
                "spatial dims {spatial:?} not divisible by 2^{}",
                self.n_downsamplings
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Param<S> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<S>,
}

/// Named, ordered parameter collection for the encoder-decoder and the
/// projection head. Parameter count is a pure function of the config.
pub struct SatsModel<S: Scalar> {
    pub config: NetConfig,
    pub with_projection: bool,
    params: Vec<Param<S>>,
    index: HashMap<String, usize>,
}

/// Projection-head parameters carry this prefix; stage-2 parameter groups
/// are separated by it.
pub const PROJ_PREFIX: &str = "proj.";

enum Init {
    HeFanIn(usize),
    Zeros,
    Ones,
}

impl<S: Scalar> SatsModel<S> {
    pub fn build(config: &NetConfig, seed: u64) -> Result<Self> {
        Self::build_inner(config, seed, true)
    }

    /// Baseline/margin-only variants never construct projection parameters.
    pub fn build_without_projection(config: &NetConfig, seed: u64) -> Result<Self> {
        Self::build_inner(config, seed, false)
    }

    fn build_inner(config: &NetConfig, seed: u64, with_projection: bool) -> Result<Self> {
        config.validate()?;
        let mut model = SatsModel {
            config: *config,
            with_projection,
            params: Vec::new(),
            index: HashMap::new(),
        };
        let ch = config.channel_progression();

        // encoder
        model.add_block(seed, "enc.block0", config.in_channels, ch[0]);
        for l in 1..=config.n_downsamplings {
            model.add(
                seed,
                format!("enc.down{l}.conv.w"),
                vec![3, 3, 3, ch[l - 1], ch[l]],
                Init::HeFanIn(27 * ch[l - 1]),
            );
            model.add(seed, format!("enc.down{l}.conv.b"), vec![ch[l]], Init::Zeros);
            model.add(seed, format!("enc.down{l}.norm.gain"), vec![ch[l]], Init::Ones);
            model.add(seed, format!("enc.down{l}.norm.shift"), vec![ch[l]], Init::Zeros);
            model.add_block(seed, &format!("enc.block{l}"), ch[l], ch[l]);
        }
        // decoder
        for l in (0..config.n_downsamplings).rev() {
            let k = UP_KERNEL;
            model.add(
                seed,
                format!("dec.up{l}.w"),
                vec![k, k, k, ch[l + 1], ch[l]],
                Init::HeFanIn(k * k * k * ch[l + 1]),
            );
            model.add(seed, format!("dec.up{l}.norm.gain"), vec![ch[l]], Init::Ones);
            model.add(seed, format!("dec.up{l}.norm.shift"), vec![ch[l]], Init::Zeros);
            model.add_block(seed, &format!("dec.block{l}"), 2 * ch[l], ch[l]);
        }
        // segmentation head
        model.add(
            seed,
            "seg.w".into(),
            vec![1, 1, 1, ch[0], config.seg_out_channels],
            Init::HeFanIn(ch[0]),
        );
        model.add(seed, "seg.b".into(), vec![config.seg_out_channels], Init::Zeros);
        // projection head
        if with_projection {
            let mut cin = ch[0];
            for i in 1..=config.proj_layers {
                model.add(
                    seed,
                    format!("{PROJ_PREFIX}conv{i}.w"),
                    vec![1, 1, 1, cin, config.proj_channels],
                    Init::HeFanIn(cin),
                );
                model.add(
                    seed,
                    format!("{PROJ_PREFIX}conv{i}.b"),
                    vec![config.proj_channels],
                    Init::Zeros,
                );
                cin = config.proj_channels;
            }
        }
        Ok(model)
    }

    /// He fan-in init for conv weights, zeros for biases and shifts, ones
    /// for norm gains; each parameter gets an rng derived from the seed and
    /// its name, so the backbone init is identical with or without the
    /// projection head.
    fn add(&mut self, seed: u64, name: String, shape: Vec<usize>, init: Init) {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![S::zero(); n],
            Init::Ones => vec![S::one(); n],
            Init::HeFanIn(fan_in) => {
                let std = (2.0 / fan_in as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("std > 0");
                let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ fnv1a(&name)));
                (0..n)
                    .map(|_| S::from_f64(normal.sample(&mut rng)))
                    .collect()
            }
        };
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param { name, shape, data });
    }

    fn add_block(&mut self, seed: u64, prefix: &str, cin: usize, cout: usize) {
        self.add(
            seed,
            format!("{prefix}.conv1.w"),
            vec![3, 3, 3, cin, cout],
            Init::HeFanIn(27 * cin),
        );
        self.add(seed, format!("{prefix}.conv1.b"), vec![cout], Init::Zeros);
        self.add(seed, format!("{prefix}.norm1.gain"), vec![cout], Init::Ones);
        self.add(seed, format!("{prefix}.norm1.shift"), vec![cout], Init::Zeros);
        self.add(
            seed,
            format!("{prefix}.conv2.w"),
            vec![3, 3, 3, cout, cout],
            Init::HeFanIn(27 * cout),
        );
        self.add(seed, format!("{prefix}.conv2.b"), vec![cout], Init::Zeros);
        self.add(seed, format!("{prefix}.norm2.gain"), vec![cout], Init::Ones);
        self.add(seed, format!("{prefix}.norm2.shift"), vec![cout], Init::Zeros);
        if cin != cout {
            self.add(
                seed,
                format!("{prefix}.skip.w"),
                vec![1, 1, 1, cin, cout],
                Init::HeFanIn(cin),
            );
            self.add(seed, format!("{prefix}.skip.b"), vec![cout], Init::Zeros);
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn params(&self) -> &[Param<S>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<S>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> &Param<S> {
        &self.params[self.index[name]]
    }

    pub fn param_mut(&mut self, name: &str) -> &mut Param<S> {
        let i = self.index[name];
        &mut self.params[i]
    }

    pub fn has_param(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    /// Insert every parameter as a leaf of `g`; `tracked` enables gradients.
    pub fn bind(&self, g: &mut Graph<S>, tracked: bool) -> Bound {
        let mut ids = HashMap::new();
        for p in &self.params {
            let id = g
                .leaf(&p.shape, p.data.clone(), tracked)
                .expect("model shapes are consistent");
            ids.insert(p.name.clone(), id);
        }
        Bound {
            config: self.config,
            with_projection: self.with_projection,
            ids,
        }
    }
}

/// Model parameters bound to a graph as leaves.
pub struct Bound {
    pub config: NetConfig,
    pub with_projection: bool,
    ids: HashMap<String, TensorId>,
}

pub struct SiameseOut {
    pub logits: TensorId,
    pub feat: TensorId,
    pub feat_flip: TensorId,
    /// Projected features `(E, E_flip)`, present when the model has a head.
    pub proj: Option<(TensorId, TensorId)>,
}

impl Bound {
    pub fn id(&self, name: &str) -> TensorId {
        self.ids[name]
    }

    /// Construct from leaf ids in model parameter order (used by gradient
    /// checks that perturb parameters as plain leaves).
    pub fn from_ids<S: Scalar>(model: &SatsModel<S>, ids: &[TensorId]) -> Bound {
        assert_eq!(model.params.len(), ids.len());
        Bound {
            config: model.config,
            with_projection: model.with_projection,
            ids: model
                .params
                .iter()
                .zip(ids)
                .map(|(p, id)| (p.name.clone(), *id))
                .collect(),
        }
    }

    fn block<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        prefix: &str,
        x: TensorId,
        cin: usize,
        cout: usize,
    ) -> AdResult<TensorId> {
        let slope = S::from_f64(LEAKY_SLOPE);
        let eps = S::from_f64(NORM_EPS);
        let h = g.conv3d(
            x,
            self.id(&format!("{prefix}.conv1.w")),
            Some(self.id(&format!("{prefix}.conv1.b"))),
            1,
            1,
        )?;
        let h = g.instance_norm(
            h,
            self.id(&format!("{prefix}.norm1.gain")),
            self.id(&format!("{prefix}.norm1.shift")),
            eps,
        )?;
        let h = g.leaky_relu(h, slope);
        let h = g.conv3d(
            h,
            self.id(&format!("{prefix}.conv2.w")),
            Some(self.id(&format!("{prefix}.conv2.b"))),
            1,
            1,
        )?;
        let h = g.instance_norm(
            h,
            self.id(&format!("{prefix}.norm2.gain")),
            self.id(&format!("{prefix}.norm2.shift")),
            eps,
        )?;
        let skip = if cin == cout {
            x
        } else {
            g.conv3d(
                x,
                self.id(&format!("{prefix}.skip.w")),
                Some(self.id(&format!("{prefix}.skip.b"))),
                1,
                0,
            )?
        };
        let joined = g.add(h, skip)?;
        Ok(g.leaky_relu(joined, slope))
    }

    /// Encoder-decoder forward: returns the binary logits and the
    /// full-resolution decoder feature map feeding the projection head.
    pub fn forward_seg<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        x: TensorId,
    ) -> AdResult<(TensorId, TensorId)> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 5 || shape[4] != self.config.in_channels {
            return Err(AutodiffError::ShapeMismatch(format!(
                "input must be [N,D,H,W,{}], got {shape:?}",
                self.config.in_channels
            )));
        }
        self.config
            .check_divisible([shape[1], shape[2], shape[3]])
            .map_err(|e| AutodiffError::ShapeMismatch(e.to_string()))?;

        let slope = S::from_f64(LEAKY_SLOPE);
        let eps = S::from_f64(NORM_EPS);
        let ch = self.config.channel_progression();
        let downs = self.config.n_downsamplings;

        let mut skips: Vec<TensorId> = Vec::with_capacity(downs);
        let mut h = self.block(g, "enc.block0", x, self.config.in_channels, ch[0])?;
        for l in 1..=downs {
            skips.push(h);
            let d = g.conv3d(
                h,
                self.id(&format!("enc.down{l}.conv.w")),
                Some(self.id(&format!("enc.down{l}.conv.b"))),
                2,
                1,
            )?;
            let d = g.instance_norm(
                d,
                self.id(&format!("enc.down{l}.norm.gain")),
                self.id(&format!("enc.down{l}.norm.shift")),
                eps,
            )?;
            let d = g.leaky_relu(d, slope);
            h = self.block(g, &format!("enc.block{l}"), d, ch[l], ch[l])?;
        }
        for l in (0..downs).rev() {
            let up = g.conv_transpose3d(h, self.id(&format!("dec.up{l}.w")), 2, 1)?;
            let up = g.instance_norm(
                up,
                self.id(&format!("dec.up{l}.norm.gain")),
                self.id(&format!("dec.up{l}.norm.shift")),
                eps,
            )?;
            let up = g.leaky_relu(up, slope);
            let cat = g.concat(up, skips[l])?;
            h = self.block(g, &format!("dec.block{l}"), cat, 2 * ch[l], ch[l])?;
        }
        let logits = g.conv3d(h, self.id("seg.w"), Some(self.id("seg.b")), 1, 0)?;
        Ok((logits, h))
    }

    /// Projection head: 1×1×1 convs with ReLU between, then per-voxel unit
    /// normalization over channels.
    pub fn project<S: Scalar>(&self, g: &mut Graph<S>, feat: TensorId) -> AdResult<TensorId> {
        let layers = self.config.proj_layers;
        let mut h = feat;
        for i in 1..=layers {
            h = g.conv3d(
                h,
                self.id(&format!("{PROJ_PREFIX}conv{i}.w")),
                Some(self.id(&format!("{PROJ_PREFIX}conv{i}.b"))),
                1,
                0,
            )?;
            if i < layers {
                h = g.relu(h);
            }
        }
        g.unit_normalize(h, S::from_f64(UNIT_EPS))
    }

    /// Shared-weight Siamese forward over `x` and its sagittal flip. Voxel
    /// `(i,j,k)` of the flipped branch's features depicts the mirrored
    /// anatomy at the same index, so downstream losses compare equal
    /// indices without re-flipping.
    pub fn siamese_forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        x: TensorId,
    ) -> AdResult<SiameseOut> {
        let (logits, feat) = self.forward_seg(g, x)?;
        let xf = g.flip_w(x)?;
        let (_logits_flip, feat_flip) = self.forward_seg(g, xf)?;
        let proj = if self.with_projection {
            let e = self.project(g, feat)?;
            let ef = self.project(g, feat_flip)?;
            Some((e, ef))
        } else {
            None
        };
        Ok(SiameseOut {
            logits,
            feat,
            feat_flip,
            proj,
        })
    }
}

// ---------------------------------------------------------------------------
// Eager inference forward (no tape, buffers freed as consumed)
// ---------------------------------------------------------------------------

struct Eager<'m> {
    m: &'m SatsModel<f32>,
}

type Feat = (Vec<f32>, [usize; 5]);

impl<'m> Eager<'m> {
    fn conv(&self, x: &Feat, wname: &str, bname: Option<&str>, stride: usize, pad: usize) -> Feat {
        let w = self.m.param(wname);
        let geom = kernels::ConvGeom::for_conv(&x.1, &w.shape, stride, pad)
            .expect("eager conv shapes are pre-validated");
        let bias = bname.map(|b| &self.m.param(b).data[..]);
        let out = kernels::conv_forward(&x.0, &w.data, bias, &geom);
        (out, geom.out_shape())
    }

    fn tconv(&self, x: &Feat, wname: &str, stride: usize, pad: usize) -> Feat {
        let w = self.m.param(wname);
        let geom = kernels::ConvGeom::for_tconv(&x.1, &w.shape, stride, pad)
            .expect("eager tconv shapes are pre-validated");
        let out = kernels::tconv_forward(&x.0, &w.data, &geom);
        (out, geom.out_shape())
    }

    fn norm_act(&self, x: Feat, prefix: &str, act: bool) -> Feat {
        let (data, shape) = x;
        let c = shape[4];
        let spatial = shape[1] * shape[2] * shape[3];
        let gain = &self.m.param(&format!("{prefix}.gain")).data;
        let shift = &self.m.param(&format!("{prefix}.shift")).data;
        let stats =
            kernels::instance_stats(&data, spatial, c, shape[0], NORM_EPS as f32);
        let mut out =
            kernels::instance_norm_forward(&data, &stats, gain, shift, spatial, c, shape[0]);
        if act {
            let slope = LEAKY_SLOPE as f32;
            for v in out.iter_mut() {
                if *v <= 0.0 {
                    *v *= slope;
                }
            }
        }
        (out, shape)
    }

    fn block(&self, x: Feat, prefix: &str, cin: usize, cout: usize) -> Feat {
        let h = self.conv(&x, &format!("{prefix}.conv1.w"), Some(&format!("{prefix}.conv1.b")), 1, 1);
        let h = self.norm_act(h, &format!("{prefix}.norm1"), true);
        let h = self.conv(&h, &format!("{prefix}.conv2.w"), Some(&format!("{prefix}.conv2.b")), 1, 1);
        let (mut h, shape) = self.norm_act(h, &format!("{prefix}.norm2"), false);
        let skip = if cin == cout {
            x.0
        } else {
            self.conv(&x, &format!("{prefix}.skip.w"), Some(&format!("{prefix}.skip.b")), 1, 0)
                .0
        };
        let slope = LEAKY_SLOPE as f32;
        for (a, b) in h.iter_mut().zip(&skip) {
            let v = *a + *b;
            *a = if v > 0.0 { v } else { slope * v };
        }
        (h, shape)
    }
}

/// Graph-free encoder-decoder forward returning the logits only; buffers
/// are dropped as soon as they are consumed, which keeps the paper-scale
/// forward within a few hundred MB of live data.
pub fn infer_logits(model: &SatsModel<f32>, x: Vec<f32>, shape: [usize; 5]) -> Result<Vec<f32>> {
    if shape[4] != model.config.in_channels {
        return Err(NetError::InvalidConfig(format!(
            "input must have {} channels",
            model.config.in_channels
        )));
    }
    model.config.check_divisible([shape[1], shape[2], shape[3]])?;
    let e = Eager { m: model };
    let ch = model.config.channel_progression();
    let downs = model.config.n_downsamplings;

    let mut skips: Vec<Feat> = Vec::with_capacity(downs);
    let mut h = e.block((x, shape), "enc.block0", model.config.in_channels, ch[0]);
    for l in 1..=downs {
        let d = e.conv(&h, &format!("enc.down{l}.conv.w"), Some(&format!("enc.down{l}.conv.b")), 2, 1);
        skips.push(h);
        let d = e.norm_act(d, &format!("enc.down{l}.norm"), true);
        h = e.block(d, &format!("enc.block{l}"), ch[l], ch[l]);
    }
    for l in (0..downs).rev() {
        let up = e.tconv(&h, &format!("dec.up{l}.w"), 2, 1);
        drop(h);
        let up = e.norm_act(up, &format!("dec.up{l}.norm"), true);
        let skip = skips.pop().expect("one skip per decoder level");
        // concat along channels
        let (ud, us) = up;
        let (sd, ss) = skip;
        let voxels = us[0] * us[1] * us[2] * us[3];
        let (ca, cb) = (us[4], ss[4]);
        let mut cat = Vec::with_capacity(voxels * (ca + cb));
        for q in 0..voxels {
            cat.extend_from_slice(&ud[q * ca..(q + 1) * ca]);
            cat.extend_from_slice(&sd[q * cb..(q + 1) * cb]);
        }
        drop(ud);
        drop(sd);
        let cat_shape = [us[0], us[1], us[2], us[3], ca + cb];
        h = e.block((cat, cat_shape), &format!("dec.block{l}"), 2 * ch[l], ch[l]);
    }
    let logits = e.conv(&h, "seg.w", Some("seg.b"), 1, 0);
    Ok(logits.0)
}

// ---------------------------------------------------------------------------
// Checkpoints: <base>.json manifest + <base>.raw little-endian f32 blobs
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct BlobRecord {
    name: String,
    shape: Vec<usize>,
    /// offset into the raw file, in f32 elements
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub config: NetConfig,
    pub with_projection: bool,
    pub stage: u8,
    pub epoch: usize,
    params: Vec<BlobRecord>,
    extra: Vec<BlobRecord>,
    /// trainer state that is not a parameter blob (rng position, etc.)
    pub meta: serde_json::Value,
}

pub struct LoadedCheckpoint {
    pub model: SatsModel<f32>,
    pub stage: u8,
    pub epoch: usize,
    pub extra: Vec<(String, Vec<f32>)>,
    pub meta: serde_json::Value,
}

fn ckpt_paths(base: &Path) -> (PathBuf, PathBuf) {
    let stem = if base.extension().map_or(false, |e| e == "json") {
        base.with_extension("")
    } else {
        base.to_path_buf()
    };
    (stem.with_extension("json"), stem.with_extension("raw"))
}

pub fn save_checkpoint(
    base: &Path,
    model: &SatsModel<f32>,
    stage: u8,
    epoch: usize,
    extra: &[(String, Vec<f32>)],
    meta: serde_json::Value,
) -> Result<()> {
    let (json_path, raw_path) = ckpt_paths(base);
    let mut raw: Vec<u8> = Vec::new();
    let mut offset = 0usize;
    let mut params = Vec::new();
    for p in model.params() {
        params.push(BlobRecord {
            name: p.name.clone(),
            shape: p.shape.clone(),
            offset,
            len: p.data.len(),
        });
        for v in &p.data {
            raw.extend_from_slice(&v.to_le_bytes());
        }
        offset += p.data.len();
    }
    let mut extra_records = Vec::new();
    for (name, data) in extra {
        extra_records.push(BlobRecord {
            name: name.clone(),
            shape: vec![data.len()],
            offset,
            len: data.len(),
        });
        for v in data {
            raw.extend_from_slice(&v.to_le_bytes());
        }
        offset += data.len();
    }
    let manifest = CheckpointManifest {
        format: "sats-ckpt-v1".into(),
        config: model.config,
        with_projection: model.with_projection,
        stage,
        epoch,
        params,
        extra: extra_records,
        meta,
    };
    fs::write(&json_path, serde_json::to_string_pretty(&manifest).unwrap())?;
    fs::write(&raw_path, raw)?;
    Ok(())
}

pub fn load_checkpoint(base: &Path) -> Result<LoadedCheckpoint> {
    let (json_path, raw_path) = ckpt_paths(base);
    let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(&json_path)?)
        .map_err(|e| NetError::Checkpoint(format!("{}: {e}", json_path.display())))?;
    if manifest.format != "sats-ckpt-v1" {
        return Err(NetError::Checkpoint(format!(
            "unknown format {:?}",
            manifest.format
        )));
    }
    let raw = fs::read(&raw_path)?;
    let floats: Vec<f32> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let read_blob = |r: &BlobRecord| -> Result<Vec<f32>> {
        floats
            .get(r.offset..r.offset + r.len)
            .map(|s| s.to_vec())
            .ok_or_else(|| {
                NetError::Checkpoint(format!("blob {} out of range of raw file", r.name))
            })
    };
    let mut model = if manifest.with_projection {
        SatsModel::<f32>::build(&manifest.config, 0)?
    } else {
        SatsModel::<f32>::build_without_projection(&manifest.config, 0)?
    };
    for r in &manifest.params {
        if !model.has_param(&r.name) {
            return Err(NetError::Checkpoint(format!("unexpected parameter {}", r.name)));
        }
        let p = model.param_mut(&r.name);
        if p.shape != r.shape {
            return Err(NetError::Checkpoint(format!(
                "parameter {} shape {:?} != manifest {:?}",
                r.name, p.shape, r.shape
            )));
        }
        p.data = read_blob(r)?;
    }
    let extra = manifest
        .extra
        .iter()
        .map(|r| Ok((r.name.clone(), read_blob(r)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(LoadedCheckpoint {
        model,
        stage: manifest.stage,
        epoch: manifest.epoch,
        extra,
        meta: manifest.meta,
    })
}

// ---------------------------------------------------------------------------
// Composite gradient check through the full network
// ---------------------------------------------------------------------------

/// Finite-difference check of `total_loss` through an entire tiny model
/// (every parameter perturbed), backing the gradient-check acceptance
/// criterion alongside the per-operator suite.
pub fn composite_gradcheck(seed: u64, step: f64, tol: f64) -> Result<OpCheck> {
    use rand::Rng;
    let config = NetConfig {
        base_filters: 2,
        n_downsamplings: 1,
        proj_channels: 4,
        proj_layers: 3,
        ..NetConfig::default()
    };
    let model = SatsModel::<f64>::build(&config, splitmix64(seed))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0FFEE);
    let shape = [1usize, 2, 4, 4, 1];
    let voxels = 32;
    let xv: Vec<f64> = (0..voxels).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let target: Vec<f64> = (0..voxels).map(|_| f64::from(rng.gen_range(0..=1))).collect();
    let m: Vec<u8> = (0..voxels).map(|_| rng.gen_range(0..=1)).collect();
    let cfg = LossConfig {
        margin_t: 1.0,
        ..LossConfig::default()
    };

    let mut leaves: Vec<(Vec<usize>, Vec<f64>)> = model
        .params()
        .iter()
        .map(|p| (p.shape.clone(), p.data.clone()))
        .collect();
    leaves.push((shape.to_vec(), xv));

    let err = crate::autodiff::check::max_fd_error(
        &move |g: &mut Graph<f64>, ids: &[TensorId]| {
            let bound = Bound::from_ids(&model, &ids[..ids.len() - 1]);
            let x = ids[ids.len() - 1];
            let out = bound.siamese_forward(g, x)?;
            let (e, ef) = out.proj.expect("model has projection head");
            let tid = g.leaf(&shape, target.clone(), false)?;
            let loss = total_loss(g, out.logits, tid, e, ef, &m, None, &cfg)?;
            Ok(loss.total)
        },
        &leaves,
        step,
    )?;
    Ok(OpCheck {
        name: "total_loss_through_network".into(),
        max_rel_err: err,
        tol,
    })
}

#[cfg(test)]
mod tests;
