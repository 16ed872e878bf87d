use super::*;
use crate::autodiff::check::{FD_STEP, FD_TOL};
use rand::Rng;

fn tiny_config() -> NetConfig {
    NetConfig {
        base_filters: 4,
        n_downsamplings: 2,
        proj_channels: 16,
        ..NetConfig::default()
    }
}

fn rand_input(rng: &mut ChaCha8Rng, shape: [usize; 5]) -> Vec<f32> {
    (0..shape.iter().product::<usize>())
        .map(|_| rng.gen_range(-1.0f32..1.0))
        .collect()
}

#[test]
fn channel_progression_doubles_with_cap() {
    assert_eq!(
        NetConfig::paper_scale().channel_progression(),
        vec![32, 64, 128, 256, 256]
    );
    assert_eq!(
        NetConfig::default().channel_progression(),
        vec![8, 16, 32, 64]
    );
}

#[test]
fn build_is_deterministic() {
    let cfg = tiny_config();
    let a = SatsModel::<f32>::build(&cfg, 7).unwrap();
    let b = SatsModel::<f32>::build(&cfg, 7).unwrap();
    assert_eq!(a.param_count(), b.param_count());
    for (pa, pb) in a.params().iter().zip(b.params()) {
        assert_eq!(pa.name, pb.name);
        assert_eq!(pa.data, pb.data, "parameter {} differs", pa.name);
    }
    let c = SatsModel::<f32>::build(&cfg, 8).unwrap();
    assert_ne!(a.params()[0].data, c.params()[0].data);
}

#[test]
fn backbone_init_is_shared_across_variants() {
    let cfg = tiny_config();
    let full = SatsModel::<f32>::build(&cfg, 3).unwrap();
    let bare = SatsModel::<f32>::build_without_projection(&cfg, 3).unwrap();
    for p in bare.params() {
        assert_eq!(p.data, full.param(&p.name).data, "{} differs", p.name);
    }
    assert!(bare.params().iter().all(|p| !p.name.starts_with(PROJ_PREFIX)));
    assert!(full.params().iter().any(|p| p.name.starts_with(PROJ_PREFIX)));
}

#[test]
fn paper_scale_parameter_count_in_reported_range() {
    let model = SatsModel::<f32>::build(&NetConfig::paper_scale(), 0).unwrap();
    let count = model.param_count();
    assert!(
        (25_000_000..=40_000_000).contains(&count),
        "paper-scale parameter count {count} outside [25M, 40M]"
    );
}

#[test]
fn forward_shapes_and_feat_channels() {
    let cfg = NetConfig::default(); // base 8, downs 3
    let model = SatsModel::<f32>::build(&cfg, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let shape = [1usize, 16, 32, 32, 1];
    let x = rand_input(&mut rng, shape);
    let mut g = Graph::<f32>::new();
    let bound = model.bind(&mut g, false);
    let xid = g.leaf(&shape, x, false).unwrap();
    let (logits, feat) = bound.forward_seg(&mut g, xid).unwrap();
    assert_eq!(g.shape(logits), &[1, 16, 32, 32, 1]);
    assert_eq!(g.shape(feat), &[1, 16, 32, 32, cfg.base_filters]);
}

#[test]
fn indivisible_input_is_rejected() {
    let model = SatsModel::<f32>::build(&tiny_config(), 1).unwrap();
    let mut g = Graph::<f32>::new();
    let bound = model.bind(&mut g, false);
    let shape = [1usize, 6, 8, 8, 1];
    let x = g.leaf(&shape, vec![0.0; 384], false).unwrap();
    assert!(bound.forward_seg(&mut g, x).is_err());
}

#[test]
fn zeroed_seg_head_gives_zero_logits() {
    let mut model = SatsModel::<f32>::build(&tiny_config(), 5).unwrap();
    model.param_mut("seg.w").data.fill(0.0);
    model.param_mut("seg.b").data.fill(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let shape = [1usize, 4, 8, 8, 1];
    let x = rand_input(&mut rng, shape);
    let mut g = Graph::<f32>::new();
    let bound = model.bind(&mut g, false);
    let xid = g.leaf(&shape, x, false).unwrap();
    let (logits, _) = bound.forward_seg(&mut g, xid).unwrap();
    assert!(g.values(logits).iter().all(|v| *v == 0.0));
}

#[test]
fn projection_outputs_unit_capped_16_channel_vectors() {
    let cfg = NetConfig {
        base_filters: 8,
        n_downsamplings: 1,
        ..NetConfig::default()
    };
    let model = SatsModel::<f32>::build(&cfg, 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let shape = [1usize, 4, 6, 6, 1];
    let x = rand_input(&mut rng, shape);
    let mut g = Graph::<f32>::new();
    let bound = model.bind(&mut g, false);
    let xid = g.leaf(&shape, x, false).unwrap();
    let (_, feat) = bound.forward_seg(&mut g, xid).unwrap();
    let e = bound.project(&mut g, feat).unwrap();
    let es = g.shape(e).to_vec();
    assert_eq!(es[4], 16, "projection output is 16 channels");
    for row in g.values(e).chunks_exact(16) {
        let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!(norm <= 1.0 + 1e-6, "norm {norm} exceeds 1");
    }
}

#[test]
fn zero_features_project_to_zero_without_nan() {
    let cfg = tiny_config();
    let model = SatsModel::<f32>::build(&cfg, 11).unwrap();
    let mut g = Graph::<f32>::new();
    let bound = model.bind(&mut g, false);
    // biases are zero-initialized, so zero features stay zero through the
    // 1×1×1 convs and hit the unit-normalize eps guard
    let feat = g.leaf(&[1, 2, 2, 2, 4], vec![0.0; 32], false).unwrap();
    let e = bound.project(&mut g, feat).unwrap();
    assert!(g.values(e).iter().all(|v| *v == 0.0));
}

fn symmetric_input(shape: [usize; 5], rng: &mut ChaCha8Rng) -> Vec<f32> {
    let mut x = rand_input(rng, shape);
    let (w, c) = (shape[3], shape[4]);
    let rows = shape[0] * shape[1] * shape[2];
    for r in 0..rows {
        for wi in 0..w / 2 {
            for ch in 0..c {
                let a = (r * w + wi) * c + ch;
                let b = (r * w + (w - 1 - wi)) * c + ch;
                x[b] = x[a];
            }
        }
    }
    x
}

#[test]
fn symmetric_input_yields_identical_branches() {
    let cfg = tiny_config();
    let model = SatsModel::<f32>::build(&cfg, 13).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let shape = [1usize, 4, 8, 8, 1];
    let x = symmetric_input(shape, &mut rng);
    let mut g = Graph::<f32>::new();
    let bound = model.bind(&mut g, false);
    let xid = g.leaf(&shape, x, false).unwrap();
    let out = bound.siamese_forward(&mut g, xid).unwrap();
    let (e, ef) = out.proj.unwrap();
    assert_eq!(g.values(e), g.values(ef), "E and E_flip must match bit-exactly");

    // an asymmetric input must produce a difference somewhere
    let mut g2 = Graph::<f32>::new();
    let bound2 = model.bind(&mut g2, false);
    let xa = rand_input(&mut rng, shape);
    let xid2 = g2.leaf(&shape, xa, false).unwrap();
    let out2 = bound2.siamese_forward(&mut g2, xid2).unwrap();
    let (e2, ef2) = out2.proj.unwrap();
    assert_ne!(g2.values(e2), g2.values(ef2));
}

#[test]
fn both_branches_feed_shared_parameter_gradients() {
    let cfg = tiny_config();
    let model = SatsModel::<f64>::build(&cfg, 17).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let shape = [1usize, 4, 8, 8, 1];
    let x: Vec<f64> = symmetric_input(shape, &mut rng).iter().map(|v| *v as f64).collect();

    let grads = |both: bool| -> Vec<Vec<f64>> {
        let mut g = Graph::<f64>::new();
        let bound = model.bind(&mut g, true);
        let xid = g.leaf(&shape, x.clone(), false).unwrap();
        let out = bound.siamese_forward(&mut g, xid).unwrap();
        let (e, ef) = out.proj.unwrap();
        let se = g.sum(e);
        let loss = if both {
            let sf = g.sum(ef);
            g.add(se, sf).unwrap()
        } else {
            se
        };
        g.backward(loss).unwrap();
        model
            .params()
            .iter()
            .map(|p| g.grad(bound.id(&p.name)).map(|v| v.to_vec()).unwrap_or_default())
            .collect()
    };
    let single = grads(false);
    let double = grads(true);
    for (pi, (s, d)) in single.iter().zip(&double).enumerate() {
        for (a, b) in s.iter().zip(d) {
            assert_eq!(
                2.0 * a,
                *b,
                "branch gradient accumulation broken at param {pi}"
            );
        }
    }
}

#[test]
fn constant_input_gives_constant_interior_logits() {
    let cfg = NetConfig {
        base_filters: 2,
        n_downsamplings: 1,
        ..NetConfig::default()
    };
    let model = SatsModel::<f32>::build(&cfg, 19).unwrap();
    let shape = [1usize, 8, 48, 48, 1];
    let x = vec![0.7f32; 8 * 48 * 48];
    let mut g = Graph::<f32>::new();
    let bound = model.bind(&mut g, false);
    let xid = g.leaf(&shape, x, false).unwrap();
    let (logits, _) = bound.forward_seg(&mut g, xid).unwrap();
    let v = g.values(logits);
    let center = ((4 * 48) + 24) * 48 + 24;
    let c0 = v[center];
    for dd in 0..2 {
        for dh in 0..2 {
            for dw in 0..2 {
                let i = (((4 + dd) * 48) + 24 + dh) * 48 + 24 + dw;
                assert!(
                    (v[i] - c0).abs() <= 1e-4,
                    "interior logits vary: {} vs {c0}",
                    v[i]
                );
            }
        }
    }
}

#[test]
fn eager_inference_matches_graph_forward_bit_exactly() {
    let cfg = tiny_config();
    let model = SatsModel::<f32>::build(&cfg, 23).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let shape = [2usize, 4, 8, 8, 1];
    let x = rand_input(&mut rng, shape);

    let mut g = Graph::<f32>::new();
    let bound = model.bind(&mut g, false);
    let xid = g.leaf(&shape, x.clone(), false).unwrap();
    let (logits, _) = bound.forward_seg(&mut g, xid).unwrap();
    let graph_logits = g.values(logits).to_vec();

    let eager_logits = infer_logits(&model, x, shape).unwrap();
    assert_eq!(graph_logits, eager_logits);
}

#[test]
fn checkpoint_roundtrip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let model = SatsModel::<f32>::build(&cfg, 29).unwrap();
    let extra = vec![
        ("opt.momentum.enc.block0.conv1.w".to_string(), vec![0.25f32, -1.5, 3.0]),
        ("opt.rng".to_string(), vec![42.0f32]),
    ];
    let meta = serde_json::json!({"word_pos": 1234, "stage_note": "mid"});
    let base = dir.path().join("ckpt_1_0005");
    save_checkpoint(&base, &model, 1, 5, &extra, meta.clone()).unwrap();

    let loaded = load_checkpoint(&base).unwrap();
    assert_eq!(loaded.stage, 1);
    assert_eq!(loaded.epoch, 5);
    assert_eq!(loaded.meta, meta);
    assert_eq!(loaded.extra, extra);
    assert_eq!(loaded.model.param_count(), model.param_count());
    for (a, b) in loaded.model.params().iter().zip(model.params()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.data, b.data, "round-trip altered {}", a.name);
    }

    // saving the loaded model again must produce identical bytes
    let base2 = dir.path().join("again");
    save_checkpoint(&base2, &loaded.model, 1, 5, &extra, loaded.meta.clone()).unwrap();
    let raw1 = std::fs::read(base.with_extension("raw")).unwrap();
    let raw2 = std::fs::read(base2.with_extension("raw")).unwrap();
    assert_eq!(raw1, raw2);
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = tiny_config();
    cfg.base_filters = 1;
    assert!(SatsModel::<f32>::build(&cfg, 0).is_err());
    let mut cfg = tiny_config();
    cfg.n_downsamplings = 0;
    assert!(SatsModel::<f32>::build(&cfg, 0).is_err());
}

#[test]
fn composite_network_gradcheck_passes() {
    let check = composite_gradcheck(0, FD_STEP, FD_TOL).unwrap();
    assert!(
        check.passed(),
        "composite check failed: {} > {}",
        check.max_rel_err,
        check.tol
    );
}
