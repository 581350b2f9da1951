use cmtc::eventnet::*;
use cmtc::synth::{synth_dataset, SynthConfig};
use cmtc::voxel::{voxelize, VoxelConfig};
use cmtc::CmtcError;
use cmtc_tensor::gradcheck::{check_params, GradCheckConfig};
use cmtc_tensor::{Adam, AdamConfig, ParamStore, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn model<T: cmtc_tensor::Scalar>(seed: u64) -> (EventNet, ParamStore<T>) {
    let mut store = ParamStore::new();
    let net = EventNet::new(&mut store, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (net, store)
}

fn samples(n: usize) -> Vec<PretrainSample<f32>> {
    let cfg = SynthConfig {
        identities: 2,
        cameras: 2,
        clips_per_id_cam: n.div_ceil(4).max(1),
        seed: 11,
        ..SynthConfig::default()
    };
    let data = synth_dataset(&cfg).unwrap();
    data.clips
        .iter()
        .take(n)
        .map(|c| PretrainSample {
            frames: voxelize::<f32>(&c.stream, &VoxelConfig::default()).unwrap().frames,
            targets: contour_targets(&c.masks).unwrap(),
        })
        .collect()
}

#[test]
fn output_shape_and_range() {
    let (net, store) = model::<f32>(0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::<f32>::uniform(&[8, 2, 64, 32], 0.0, 1.0, &mut rng).unwrap();
    let y = net.infer(&store, &x).unwrap();
    assert_eq!(y.shape(), &[8, 1, 64, 32]);
    assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn zero_input_gives_constant_output() {
    let (net, store) = model::<f64>(3);
    let y = net.infer(&store, &Tensor::zeros(&[2, 2, 16, 8]).unwrap()).unwrap();
    let first = y.data()[0];
    assert!(y.data().iter().all(|&v| v == first));
}

#[test]
fn indivisible_input_is_rejected() {
    let (net, store) = model::<f32>(0);
    let err = net.infer(&store, &Tensor::zeros(&[1, 2, 20, 8]).unwrap()).unwrap_err();
    assert!(matches!(err, CmtcError::Shape(ref m) if m.contains("divisible by 8")), "{err}");
}

#[test]
fn parameter_gradients_match_finite_differences() {
    let (net, store) = model::<f64>(5);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = Tensor::<f64>::uniform(&[1, 2, 16, 8], 0.0, 1.0, &mut rng).unwrap();
    let target = Tensor::<f64>::uniform(&[1, 1, 16, 8], 0.0, 1.0, &mut rng).unwrap();
    let cfg = GradCheckConfig {
        max_probes: Some(12),
        ..Default::default()
    };
    let reports = check_params(&store, cfg, |tape, store| {
        let xv = tape.constant(x.clone());
        let tv = tape.constant(target.clone());
        let y = net.forward(tape, store, xv)?;
        Ok::<_, CmtcError>(tape.mse(y, tv)?)
    })
    .unwrap();
    assert_eq!(reports.len(), store.len());
    for (name, r) in reports {
        assert!(r.rel_err < 1e-3, "{name}: {r:?}");
    }
}

#[test]
fn contour_of_empty_and_square() {
    let empty = Tensor::<f64>::zeros(&[8, 8]).unwrap();
    assert_eq!(contour_target(&empty).unwrap().sum(), 0.0);

    let mut sq = vec![0.0; 64];
    for y in 2..6 {
        for x in 2..6 {
            sq[y * 8 + x] = 1.0;
        }
    }
    let t = contour_target(&Tensor::new(vec![8, 8], sq.clone()).unwrap()).unwrap();
    assert_eq!(t.data(), reference_contour(&sq, 8, 8).as_slice());

    let full = Tensor::<f64>::ones(&[6, 5]).unwrap();
    let t = contour_target(&full).unwrap();
    assert_eq!(t.data(), reference_contour(&[1.0; 30], 6, 5).as_slice());
    // interior beyond the dilated border stays empty
    assert_eq!(t.at(&[0, 2, 2]), 0.0);
    assert_eq!(t.at(&[0, 0, 2]), 1.0);
}

/// Set-based morphology: boundary pixels, then Minkowski sum with a 3x3 square.
fn reference_contour(m: &[f64], h: usize, w: usize) -> Vec<f64> {
    use std::collections::BTreeSet;
    let inside: BTreeSet<(i64, i64)> = (0..h * w)
        .filter(|&i| m[i] == 1.0)
        .map(|i| ((i / w) as i64, (i % w) as i64))
        .collect();
    let in_frame = |p: (i64, i64)| p.0 >= 0 && p.1 >= 0 && p.0 < h as i64 && p.1 < w as i64;
    let mut boundary = BTreeSet::new();
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let me = inside.contains(&(y, x));
            for d in [(0, 1), (0, -1), (1, 0), (-1, 0)] {
                if inside.contains(&(y + d.0, x + d.1)) != me {
                    boundary.insert((y, x));
                }
            }
        }
    }
    let mut dilated = BTreeSet::new();
    for &(y, x) in &boundary {
        for dy in -1..=1 {
            for dx in -1..=1 {
                if in_frame((y + dy, x + dx)) {
                    dilated.insert((y + dy, x + dx));
                }
            }
        }
    }
    (0..h * w)
        .map(|i| if dilated.contains(&((i / w) as i64, (i % w) as i64)) { 1.0 } else { 0.0 })
        .collect()
}

#[test]
fn contour_matches_reference_on_random_masks() {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let (h, w) = (rng.gen_range(1..12), rng.gen_range(1..12));
        let m: Vec<f64> = (0..h * w).map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 }).collect();
        let t = contour_target(&Tensor::new(vec![h, w], m.clone()).unwrap()).unwrap();
        assert_eq!(t.data(), reference_contour(&m, h, w).as_slice());
    }
}

#[test]
fn non_binary_mask_is_rejected() {
    let m = Tensor::<f32>::from_f64(&[2, 2], &[0.0, 1.0, 0.5, 0.0]).unwrap();
    assert!(matches!(contour_target(&m), Err(CmtcError::NonBinaryMask { index: 2, .. })));
}

#[test]
fn loss_is_zero_at_equality_and_reduces_to_mse() {
    let ex = PerceptualExtractor::new(0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = Tensor::<f64>::uniform(&[2, 1, 16, 8], 0.0, 1.0, &mut rng).unwrap();
    let b = Tensor::<f64>::uniform(&[2, 1, 16, 8], 0.0, 1.0, &mut rng).unwrap();
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b));
    let same = eventnet_loss(&mut tape, va, va, &ex, 0.1).unwrap();
    assert_eq!(tape.value(same.total).item(), 0.0);
    let plain = eventnet_loss(&mut tape, va, vb, &ex, 0.0).unwrap();
    let mse = tape.mse(va, vb).unwrap();
    assert_eq!(tape.value(plain.total).item(), tape.value(mse).item());
    let full = eventnet_loss(&mut tape, va, vb, &ex, 0.1).unwrap();
    assert!(tape.value(full.total).item() > tape.value(mse).item());
    let bad = tape.constant(Tensor::zeros(&[2, 1, 8, 8]).unwrap());
    assert!(eventnet_loss(&mut tape, va, bad, &ex, 0.1).is_err());
}

#[test]
fn overfits_a_fixed_batch() {
    let data = samples(2);
    let (net, mut store) = model::<f32>(1);
    let ex = PerceptualExtractor::new(0).unwrap();
    let before = ex.checksum();
    let mut opt = Adam::new(
        AdamConfig {
            lr: 2e-3,
            ..AdamConfig::default()
        },
        &store,
    );
    let batch: Vec<_> = data.iter().collect();
    let mut losses = Vec::new();
    for step in 0..50 {
        losses.push(pretrain_step(&net, &mut store, &mut opt, &ex, &batch, 0.1, step).unwrap().2);
    }
    let last = losses[49];
    assert!(last <= 0.5 * losses[0], "{losses:?}");
    // Adam overshoots single steps; ten-step block means must fall.
    let blocks: Vec<f64> = losses.chunks(10).map(|c| c.iter().sum::<f64>() / 10.0).collect();
    for w in blocks.windows(2) {
        assert!(w[1] < w[0], "{blocks:?}");
    }
    assert_eq!(ex.checksum(), before);
}

#[test]
fn one_epoch_writes_one_checkpoint_and_is_deterministic() {
    let data = samples(4);
    let dir = tempfile::tempdir().unwrap();
    let cfg = PretrainConfig {
        epochs: 1,
        batch_clips: 2,
        ..PretrainConfig::default()
    };
    let (net, mut store) = model::<f32>(2);
    let a = pretrain_eventnet(&net, &mut store, &data, &cfg, Some(dir.path())).unwrap();
    let names: Vec<_> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".cmtc"))
        .collect();
    assert_eq!(names, vec!["eventnet_epoch000.cmtc".to_string()]);
    let csv = std::fs::read_to_string(dir.path().join("eventnet_loss.csv")).unwrap();
    assert!(csv.starts_with("epoch,mse,perceptual,total\n"));
    assert_eq!(csv.lines().count(), 2);

    let (net2, mut store2) = model::<f32>(2);
    let b = pretrain_eventnet(&net2, &mut store2, &data, &cfg, None).unwrap();
    assert_eq!(a, b);
    assert_eq!(store.checksum(), store2.checksum());
}
