mod common;

use std::collections::BTreeSet;

use incrdet::dataset::{generate_dataset, scene, DomainKind, SceneSpec};
use incrdet::detector::rpn::{flatten_anchors, pyramid_anchors};
use incrdet::detector::*;
use incrdet::geometry::{decode_clamped, BBox};
use incrdet::nn::{sgd_step, OptimizerConfig, ParamGroup, ParameterStore, Tensor};
use incrdet::schedule::{build_param_groups, preset};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;

fn model(config: DetectorConfig, seed: u64) -> (Detector, DomainId) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut d = Detector::new(config, &mut rng).unwrap();
    let s = d.add_domain("S", scene::categories(DomainKind::S), &mut rng).unwrap();
    (d, s)
}

fn noise_image(size: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(vec![size, size, 3], (0..size * size * 3).map(|_| rng.gen()).collect()).unwrap()
}

#[test]
fn pyramid_shapes() {
    let (d, _) = model(DetectorConfig::default(), 1);
    let p = d.extract_features(&noise_image(128, 2)).unwrap();
    let dims: Vec<&[usize]> = p.levels.iter().map(|l| l.shape()).collect();
    assert_eq!(dims, vec![&[32, 32, 32][..], &[32, 16, 16], &[32, 8, 8], &[32, 4, 4]]);
    let expected: usize = (0..4).map(|l| d.config().anchors_per_cell(l) * [1024, 256, 64, 16][l]).sum();
    assert_eq!(d.anchors().len(), expected);
}

#[test]
fn zero_image_gives_zero_features() {
    let (d, _) = model(DetectorConfig::default(), 1);
    let p = d.extract_features(&Tensor::zeros(&[128, 128, 3])).unwrap();
    assert!(p.levels.iter().all(|l| l.data().iter().all(|v| *v == 0.0)));
}

#[test]
fn rejects_bad_image_shapes() {
    let (d, _) = model(DetectorConfig::default(), 1);
    assert!(d.extract_features(&Tensor::zeros(&[100, 128, 3])).is_err());
    assert!(d.extract_features(&Tensor::zeros(&[128, 128, 1])).is_err());
}

#[test]
fn head_outputs_per_domain() {
    let (mut d, s) = model(DetectorConfig::default(), 3);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let before = d.snapshot();
    let t = d.add_domain("T", scene::categories(DomainKind::T), &mut rng).unwrap();
    let after = d.snapshot();
    for (k, v) in &before {
        assert_eq!(after[k], *v, "{k} changed when a domain was added");
    }
    let img = noise_image(128, 4);
    let p = d.extract_features(&img).unwrap();
    let boxes = vec![BBox::new(10.0, 10.0, 50.0, 40.0).unwrap(), BBox::new(60.0, 60.0, 70.0, 75.0).unwrap()];
    let (pooled, _) = d.pool_rois(&p, &boxes).unwrap();
    assert_eq!(d.roi_head_forward(&pooled, &s).unwrap().logits.shape(), &[2, 5]);
    let out_t = d.roi_head_forward(&pooled, &t).unwrap();
    assert_eq!(out_t.logits.shape(), &[2, 7]);
    assert_eq!(out_t.deltas.shape(), &[2, 24]);
    assert!(d.add_domain("T", scene::categories(DomainKind::T), &mut rng).is_err());
    assert!(matches!(d.domain("X"), Err(incrdet::Error::UnknownDomain { .. })));
}

#[test]
fn other_heads_never_affect_a_domain() {
    let (mut d, s) = model(DetectorConfig::default(), 5);
    let img = noise_image(128, 6);
    let before = d.detect(&img, &s, 0.0, 0.5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    d.add_domain("T", scene::categories(DomainKind::T), &mut rng).unwrap();
    d.visit_mut(&mut |name, t| {
        if name.starts_with("head.T.") {
            t.data_mut().iter_mut().for_each(|v| *v += 0.5);
        }
    });
    assert_eq!(d.detect(&img, &s, 0.0, 0.5).unwrap(), before);
}

#[test]
fn score_threshold_one_is_empty() {
    let (d, s) = model(DetectorConfig::default(), 8);
    assert!(d.detect(&noise_image(128, 1), &s, 1.0, 0.5).unwrap().is_empty());
    let dets = d.detect(&noise_image(128, 1), &s, 0.0, 0.5).unwrap();
    assert!(dets.len() <= 100);
    assert!(dets.windows(2).all(|w| w[0].score >= w[1].score));
    assert!(dets.iter().all(|x| x.class_id >= 1 && x.class_id <= 4 && x.domain == s));
}

#[test]
fn proposals_match_reference_pipeline() {
    let mut cfg = DetectorConfig::default();
    cfg.image_size = 64;
    for seed in 0..20 {
        let (d, _) = model(cfg.clone(), seed);
        let img = noise_image(64, 100 + seed);
        let p = d.extract_features(&img).unwrap();
        let (props, out) = d.rpn_forward(&p).unwrap();
        let anchors = flatten_anchors(&pyramid_anchors(&cfg, 64, 64).unwrap());
        let scores: Vec<f64> = out.logits.iter().map(|l| 1.0 / (1.0 + (-l).exp())).collect();
        let mut cands: Vec<(f64, usize, BBox)> = Vec::new();
        for (i, a) in anchors.iter().enumerate() {
            let b = decode_clamped(a, &out.deltas[i], cfg.delta_clamp).clip(64.0, 64.0);
            if b.area() > 0.0 {
                cands.push((scores[i], i, b));
            }
        }
        cands.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        cands.truncate(cfg.rpn_pre_nms_top_k);
        let boxes: Vec<BBox> = cands.iter().map(|c| c.2).collect();
        let sc: Vec<f64> = cands.iter().map(|c| c.0).collect();
        let keep = nms_oracle(&boxes, &sc, cfg.rpn_nms_threshold);
        let expected: Vec<(BBox, f64)> = keep.iter().take(cfg.rpn_post_nms_top_n).map(|&k| (boxes[k], sc[k])).collect();
        let got: Vec<(BBox, f64)> = props.iter().map(|p| (p.bbox, p.objectness)).collect();
        assert_eq!(got, expected, "seed {seed}");
    }
}

#[test]
fn detect_matches_manual_postprocess() {
    let (d, s) = model(DetectorConfig::default(), 11);
    let img = noise_image(128, 12);
    let p = d.extract_features(&img).unwrap();
    let (props, _) = d.rpn_forward(&p).unwrap();
    let boxes: Vec<BBox> = props.iter().map(|p| p.bbox).collect();
    let (pooled, _) = d.pool_rois(&p, &boxes).unwrap();
    let out = d.roi_head_forward(&pooled, &s).unwrap();
    let (score_thr, nms_thr) = (0.1, 0.5);
    let k = 4;
    let mut expected: Vec<(f64, u32, BBox)> = Vec::new();
    for c in 0..k {
        let mut cls: Vec<(f64, BBox)> = Vec::new();
        for (r, pb) in boxes.iter().enumerate() {
            let row = &out.logits.data()[r * (k + 1)..(r + 1) * (k + 1)];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let prob = (row[c + 1] - m).exp() / z;
            if prob > score_thr {
                let dl = &out.deltas.data()[r * 4 * k + 4 * c..r * 4 * k + 4 * c + 4];
                let delta = incrdet::geometry::BoxDelta::from_slice(dl);
                cls.push((prob, decode_clamped(pb, &delta, d.config().delta_clamp).clip(128.0, 128.0)));
            }
        }
        let bs: Vec<BBox> = cls.iter().map(|x| x.1).collect();
        let ss: Vec<f64> = cls.iter().map(|x| x.0).collect();
        for i in nms_oracle(&bs, &ss, nms_thr) {
            expected.push((ss[i], c as u32 + 1, bs[i]));
        }
    }
    expected.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    expected.truncate(100);
    let got: Vec<(f64, u32, BBox)> = d
        .detect(&img, &s, score_thr, nms_thr)
        .unwrap()
        .into_iter()
        .map(|x| (x.score, x.class_id, x.bbox))
        .collect();
    assert_eq!(got.len(), expected.len());
    for (g, e) in got.iter().zip(&expected) {
        assert!((g.0 - e.0).abs() < 1e-12 && g.1 == e.1 && g.2 == e.2, "{g:?} vs {e:?}");
    }
}

#[test]
fn end_to_end_gradient_check() {
    let cfg = micro_config();
    for seed in 0..3u64 {
        let (mut d, s) = model(cfg.clone(), seed);
        let img = noise_image(32, 50 + seed);
        let gts = vec![
            GroundTruth { bbox: BBox::new(2.0, 3.0, 14.0, 12.0).unwrap(), category_id: 1 },
            GroundTruth { bbox: BBox::new(12.0, 10.0, 30.0, 29.0).unwrap(), category_id: 3 },
        ];
        jitter_biases(&mut d, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let targets = d.prepare_targets(&img, &gts, &s, &mut rng).unwrap();
        let all: BTreeSet<Component> = d.components().into_iter().collect();
        let (loss, grads) = d.loss_and_grads(&img, &targets, &s, &all).unwrap();
        assert_eq!(loss.l_det, loss.l_cls + loss.l_reg);
        assert_eq!(grads.len(), d.param_names().len());
        let (worst, widened) = detector_gradcheck(&mut d, &img, &targets, &s, &grads, 1e-5).unwrap();
        eprintln!("seed {seed}: worst relative error {worst:.2e}, {widened} entries below float64 resolution");
    }
}

#[test]
fn frozen_components_get_no_gradients() {
    let (d, s) = model(micro_config(), 2);
    let img = noise_image(32, 3);
    let gts = vec![GroundTruth { bbox: BBox::new(4.0, 4.0, 20.0, 18.0).unwrap(), category_id: 2 }];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let only_head: BTreeSet<Component> = [Component::Head("S".into())].into();
    let (_, g) = d.train_image(&img, &gts, &s, &only_head, &mut rng).unwrap();
    assert!(g.iter().all(|(n, _)| n.starts_with("head.S.")));
    assert_eq!(g.len(), 8);
    let bad = vec![GroundTruth { bbox: gts[0].bbox, category_id: 7 }];
    assert!(matches!(d.train_image(&img, &bad, &s, &only_head, &mut rng), Err(incrdet::Error::UnknownCategory(7))));
}

#[test]
fn overfits_four_images() {
    let (mut d, s) = model(DetectorConfig::default(), 21);
    let data = generate_dataset(&SceneSpec::for_domain(DomainKind::S), 4, 5).unwrap();
    let plan = preset("full_unfreeze", "S").unwrap();
    let mut groups: Vec<ParamGroup> = build_param_groups(&d, &plan.stages[0]).unwrap();
    for g in &mut groups {
        g.lr = 5e-3;
    }
    let all: BTreeSet<Component> = d.components().into_iter().collect();
    let opt = OptimizerConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut first = None;
    let mut last = 0.0;
    for step in 0..200 {
        let smp = &data.samples[step % 4];
        let (l, g) = d.train_image(&smp.image.to_tensor(), &smp.ground_truth(), &s, &all, &mut rng).unwrap();
        first.get_or_insert(l.l_det);
        if step >= 196 {
            last += l.l_det / 4.0;
        }
        sgd_step(&mut groups, &mut d, &g, &opt).unwrap();
    }
    let first = first.unwrap();
    assert!(last < 0.5 * first, "loss {first} -> {last}");
}

#[test]
fn checkpoint_round_trip() {
    let (mut d, s) = model(DetectorConfig::default(), 31);
    d.add_domain("T", scene::categories(DomainKind::T), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    d.save(&path).unwrap();
    let back = Detector::load(&path).unwrap();
    assert_eq!(back.snapshot(), d.snapshot());
    assert_eq!(back.description(), d.description());
    let img = noise_image(128, 3);
    assert_eq!(back.detect(&img, &s, 0.05, 0.5).unwrap(), d.detect(&img, &s, 0.05, 0.5).unwrap());
    std::fs::write(dir.path().join("ckpt.bin"), b"short").unwrap();
    assert!(Detector::load(&path).is_err());
}
