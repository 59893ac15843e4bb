//! Model-level contracts: attention against a dense oracle, forward shapes,
//! inference-path parameter isolation, parameter budgets, RoI cropping, the
//! GAN heads, checkpoint round-trips and query similarity.

use ndarray::{Array2, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

use aurec::config::ModelConfig;
use aurec::data::rules::CenterPair;
use aurec::model::checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
use aurec::model::roii::crop_random_au;
use aurec::model::transformer::attention;
use aurec::model::Model;
use aurec::nn::Tape;

fn tiny_cfg() -> ModelConfig {
    ModelConfig {
        au_count: 4,
        image_size: 96,
        width: 0.125,
        embed_dim: 16,
        heads: 2,
    }
}

fn rand_dyn(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-2.0..2.0))
}

/// Scaled dot-product attention written as plain loops, one head at a time.
fn attention_oracle(
    q: &ArrayD<f64>,
    k: &ArrayD<f64>,
    v: &ArrayD<f64>,
    heads: usize,
) -> ArrayD<f64> {
    let (b, nq, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let nk = k.shape()[1];
    let dk = d / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut out = ArrayD::<f64>::zeros(IxDyn(&[b, nq, d]));
    for bi in 0..b {
        for h in 0..heads {
            for i in 0..nq {
                let mut scores = vec![0.0; nk];
                for (j, sc) in scores.iter_mut().enumerate() {
                    let mut dot = 0.0;
                    for c in 0..dk {
                        dot += q[[bi, i, h * dk + c]] * k[[bi, j, h * dk + c]];
                    }
                    *sc = dot * scale;
                }
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                for c in 0..dk {
                    let mut acc = 0.0;
                    for (j, e) in exps.iter().enumerate() {
                        acc += e / z * v[[bi, j, h * dk + c]];
                    }
                    out[[bi, i, h * dk + c]] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn attention_matches_dense_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let mut max_err = 0.0f64;
    for _ in 0..100 {
        let b = rng.gen_range(1..=2);
        let nq = rng.gen_range(3..=6);
        let nk = rng.gen_range(3..=6);
        let heads = *[1usize, 2, 4].iter().filter(|&&h| h <= 4).collect::<Vec<_>>()
            [rng.gen_range(0..3)];
        let dk = rng.gen_range(1..=(16 / heads).min(4));
        let d = heads * dk;

        let q = rand_dyn(&mut rng, &[b, nq, d]);
        let k = rand_dyn(&mut rng, &[b, nk, d]);
        let v = rand_dyn(&mut rng, &[b, nk, d]);

        let t = Tape::<f64>::no_grad();
        let out = attention(
            &t,
            t.constant(q.clone()),
            t.constant(k.clone()),
            t.constant(v.clone()),
            heads,
        );
        let got = t.value(out);
        let want = attention_oracle(&q, &k, &v, heads);
        for (g, w) in got.iter().zip(want.iter()) {
            max_err = max_err.max((g - w).abs());
        }
    }
    assert!(max_err < 1e-5, "max abs error {max_err}");
    assert!(start.elapsed().as_secs_f64() < 5.0);
}

#[test]
fn forward_produces_probabilities() {
    let cfg = tiny_cfg();
    let model = Model::<f32>::new(&cfg, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let images = ArrayD::from_shape_fn(IxDyn(&[2, 3, 96, 96]), |_| rng.gen_range(0.0..1.0));
    let centers = vec![test_centers(&cfg); 2];

    let t = Tape::no_grad();
    let out = model.forward(&t, images, &centers).unwrap();
    let probs = t.value(out.probs);
    assert_eq!(probs.shape(), &[2, cfg.au_count]);
    assert!(probs.iter().all(|&p| p > 0.0 && p < 1.0 && p.is_finite()));
    let logits = t.value(out.fused_logits);
    assert_eq!(logits.shape(), &[2, cfg.au_count]);
    let decoded = t.value(out.decoded.decoded);
    assert_eq!(decoded.shape(), &[2, cfg.au_count, cfg.embed_dim]);
}

fn test_centers(cfg: &ModelConfig) -> Vec<CenterPair> {
    let s = cfg.image_size as i64;
    let half = (cfg.patch_size() / 2) as i64;
    (0..cfg.au_count)
        .map(|i| {
            let y = (half + (i as i64 * 7) % (s - 2 * half + 1)).min(s - half);
            CenterPair {
                left: [half, y],
                right: [s - half, y],
            }
        })
        .collect()
}

#[test]
fn inference_touches_only_backbone_parameters() {
    let cfg = tiny_cfg();
    let model = Model::<f32>::new(&cfg, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(62);
    let images = ArrayD::from_shape_fn(IxDyn(&[1, 3, 96, 96]), |_| rng.gen_range(0.0..1.0));
    let centers = vec![test_centers(&cfg)];

    let t = Tape::new();
    model.forward(&t, images, &centers).unwrap();
    let touched: Vec<usize> = t.touched_params().iter().map(|id| id.index()).collect();
    let backbone: Vec<usize> = model.backbone_ids().iter().map(|id| id.index()).collect();
    assert_eq!(
        touched, backbone,
        "inference must use the backbone group, nothing else"
    );
}

#[test]
fn parameter_budget_matches_reference_scale() {
    let cfg = ModelConfig::default();
    let model = Model::<f32>::new(&cfg, 1).unwrap();
    let inference = model.inference_scalars() as f64;
    let training = model.training_scalars() as f64;
    let inf_target = 19.12e6;
    let train_target = 54.62e6;
    assert!(
        (inference - inf_target).abs() / inf_target < 0.15,
        "inference parameters {inference} vs {inf_target}"
    );
    assert!(
        (training - train_target).abs() / train_target < 0.15,
        "training parameters {training} vs {train_target}"
    );
}

#[test]
fn crop_random_au_cuts_and_preserves() {
    let patch = 24;
    let mut rng = ChaCha8Rng::seed_from_u64(63);
    let images = ArrayD::from_shape_fn(IxDyn(&[3, 3, 96, 96]), |_| rng.gen_range(0.0..0.9f32));
    let centers: Vec<Vec<CenterPair>> = (0..3)
        .map(|_| {
            vec![
                CenterPair { left: [20, 30], right: [70, 30] },
                CenterPair { left: [25, 60], right: [65, 60] },
            ]
        })
        .collect();

    let c = crop_random_au(&images, &centers, patch, &mut ChaCha8Rng::seed_from_u64(9));
    let c2 = crop_random_au(&images, &centers, patch, &mut ChaCha8Rng::seed_from_u64(9));
    assert_eq!(c.au, c2.au, "crop choice must follow the rng");
    assert_eq!(c.images_cropped, c2.images_cropped);

    for bi in 0..3 {
        assert!(c.au[bi] < 2);
        let pair = centers[bi][c.au[bi]];
        for (patches, boxes, center) in [
            (&c.left_patches, &c.left_boxes, pair.left),
            (&c.right_patches, &c.right_boxes, pair.right),
        ] {
            let (b, y0, x0) = boxes[bi];
            assert_eq!(b, bi);
            assert_eq!(y0, (center[1] - 12) as usize);
            assert_eq!(x0, (center[0] - 12) as usize);
            for ch in 0..3 {
                for dy in 0..patch {
                    for dx in 0..patch {
                        assert_eq!(
                            patches[[bi, ch, dy, dx]],
                            images[[bi, ch, y0 + dy, x0 + dx]],
                            "patch must copy the original content"
                        );
                        assert_eq!(
                            c.images_cropped[[bi, ch, y0 + dy, x0 + dx]],
                            1.0,
                            "cropped area must be filled white"
                        );
                    }
                }
            }
        }
        // Pixels outside both boxes are untouched.
        let inside = |y: usize, x: usize, (_, y0, x0): (usize, usize, usize)| {
            y >= y0 && y < y0 + patch && x >= x0 && x < x0 + patch
        };
        for y in 0..96 {
            for x in 0..96 {
                if !inside(y, x, c.left_boxes[bi]) && !inside(y, x, c.right_boxes[bi]) {
                    assert_eq!(c.images_cropped[[bi, 0, y, x]], images[[bi, 0, y, x]]);
                }
            }
        }
    }
}

#[test]
fn generator_and_critics_have_contract_shapes() {
    let cfg = tiny_cfg();
    let model = Model::<f32>::new(&cfg, 7).unwrap();
    let patch = cfg.patch_size();
    let mut rng = ChaCha8Rng::seed_from_u64(64);

    let t = Tape::no_grad();
    let z = t.constant(ArrayD::from_shape_fn(IxDyn(&[5, cfg.embed_dim]), |_| {
        rng.gen_range(-1.0..1.0)
    }));
    let fake = model.generator.apply(&t, &model.store, z);
    let fv = t.value(fake);
    assert_eq!(fv.shape(), &[5, 3, patch, patch]);
    assert!(fv.iter().all(|&v| v > 0.0 && v < 1.0));

    let d = model.disc.apply(&t, &model.store, fake, false);
    let dv = t.value(d);
    assert_eq!(dv.shape(), &[5, 1]);
    assert!(dv.iter().all(|&v| v > 0.0 && v < 1.0));

    let c = model.cls.apply(&t, &model.store, fake, false);
    let cv = t.value(c);
    assert_eq!(cv.shape(), &[5, cfg.au_count]);
    assert!(cv.iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn checkpoint_roundtrip_restores_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.aurc");
    let cfg = tiny_cfg();
    let a = Model::<f32>::new(&cfg, 100).unwrap();
    let ckpt = Checkpoint {
        config_hash: "h".into(),
        meta: serde_json::json!({"iter": 0}),
        tensors: a.export_tensors(),
    };
    write_checkpoint(&path, &ckpt).unwrap();

    let read = read_checkpoint(&path, Some("h")).unwrap();
    assert_eq!(read.meta["iter"], 0);
    let mut b = Model::<f32>::new(&cfg, 200).unwrap();
    let ids: Vec<_> = a.store.ids().collect();
    assert_ne!(
        a.store.group_digest(&ids),
        b.store.group_digest(&ids),
        "different seeds must differ before import"
    );
    b.import_tensors(&read.tensors).unwrap();
    assert_eq!(a.store.group_digest(&ids), b.store.group_digest(&ids));
}

#[test]
fn checkpoint_rejects_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.aurc");
    let cfg = tiny_cfg();
    let model = Model::<f32>::new(&cfg, 3).unwrap();
    write_checkpoint(
        &path,
        &Checkpoint {
            config_hash: "right".into(),
            meta: serde_json::json!({}),
            tensors: model.export_tensors(),
        },
    )
    .unwrap();

    assert!(read_checkpoint(&path, Some("wrong")).is_err(), "hash mismatch");

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] = b'X';
    let bad = dir.path().join("bad.aurc");
    std::fs::write(&bad, &bytes).unwrap();
    assert!(read_checkpoint(&bad, None).is_err(), "bad magic");

    let mut m = Model::<f32>::new(&cfg, 3).unwrap();
    let mut tensors = model.export_tensors();
    tensors[0].1 = ArrayD::zeros(IxDyn(&[1, 2, 3]));
    assert!(m.import_tensors(&tensors).is_err(), "shape mismatch");

    let mut tensors = model.export_tensors();
    tensors.push(("no.such.param".into(), ArrayD::zeros(IxDyn(&[1]))));
    assert!(m.import_tensors(&tensors).is_err(), "unknown name");

    let mut tensors = model.export_tensors();
    tensors.pop();
    assert!(m.import_tensors(&tensors).is_err(), "missing param");
}

#[test]
fn query_similarity_is_symmetric_with_unit_diagonal() {
    let cfg = tiny_cfg();
    let model = Model::<f32>::new(&cfg, 8).unwrap();
    let sim: Array2<f64> = model.relation.query_similarity(&model.store).unwrap();
    assert_eq!(sim.dim(), (cfg.au_count, cfg.au_count));
    for i in 0..cfg.au_count {
        assert!((sim[[i, i]] - 1.0).abs() < 1e-6);
        for j in 0..cfg.au_count {
            assert!((sim[[i, j]] - sim[[j, i]]).abs() < 1e-9);
            assert!(sim[[i, j]] <= 1.0 + 1e-9 && sim[[i, j]] >= -1.0 - 1e-9);
        }
    }
}
