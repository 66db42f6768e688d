//! Module-level examples and properties checked against direct oracles:
//! tensor ops, loaders, metrics, model, training and client steps.

use std::fs;

use gradleak::checkpoint::{load_checkpoint, save_checkpoint};
use gradleak::data::{generate_synthetic, load_cifar_binary, load_idx, DataError, Dataset};
use gradleak::fl::{client_local_step, server_aggregate, CheckpointRef, StepMeta};
use gradleak::metrics::{cosine_similarity, psnr, ssim};
use gradleak::model::{Architecture, Model, ModelSpec};
use gradleak::report::{read_ppm, write_ppm};
use gradleak::tensor::{Graph, Tensor};
use gradleak::training::{evaluate, pgd_attack, train, ATConfig, TrainConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn conv2d_matches_sliding_window_loop() {
    let mut r = rng(1);
    let x: Vec<f32> = (0..16).map(|_| r.gen_range(-1.0..1.0)).collect();
    let k: Vec<f32> = (0..9).map(|_| r.gen_range(-1.0..1.0)).collect();
    let mut g = Graph::new();
    let xi = g.leaf(Tensor::new(vec![1, 1, 4, 4], x.clone()).unwrap());
    let ki = g.leaf(Tensor::new(vec![1, 1, 3, 3], k.clone()).unwrap());
    let y = g.conv2d(xi, ki, 1, 1).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 4, 4]);
    for oy in 0..4i32 {
        for ox in 0..4i32 {
            let mut acc = 0.0f64;
            for dy in 0..3i32 {
                for dx in 0..3i32 {
                    let (iy, ix) = (oy + dy - 1, ox + dx - 1);
                    if (0..4).contains(&iy) && (0..4).contains(&ix) {
                        acc += x[(iy * 4 + ix) as usize] as f64 * k[(dy * 3 + dx) as usize] as f64;
                    }
                }
            }
            assert!((g.data(y)[(oy * 4 + ox) as usize] as f64 - acc).abs() <= 1e-6);
        }
    }
}

#[test]
fn cross_entropy_matches_direct_evaluation_and_softmax_is_a_distribution() {
    let mut r = rng(2);
    for _ in 0..50 {
        let logits: Vec<f64> = (0..5).map(|_| r.gen_range(-10.0..10.0)).collect();
        let y = r.gen_range(0..5);
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::new(vec![1, 5], logits.clone()).unwrap());
        let loss = g.softmax_cross_entropy(a, &[y]).unwrap();
        let direct = -(logits[y].exp() / logits.iter().map(|v| v.exp()).sum::<f64>()).ln();
        assert!((g.item(loss) - direct).abs() <= 1e-12);

        let mut g = Graph::<f32>::new();
        let a =
            g.leaf(Tensor::new(vec![1, 5], logits.iter().map(|&v| v as f32).collect()).unwrap());
        let p = g.softmax(a).unwrap();
        let s: f64 = g.data(p).iter().map(|&v| v as f64).sum();
        assert!((s - 1.0).abs() <= 1e-6);
        assert!(g.data(p).iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

#[test]
fn forward_and_backward_are_bit_reproducible() {
    let run = || {
        let m = Model::<f32>::build(
            ModelSpec::new(Architecture::ConvSmall, [1, 16, 16], 4).unwrap(),
            9,
        )
        .unwrap();
        let ds = generate_synthetic(4, 2, 16, 3).unwrap();
        let (x, labels) = ds.gather(&[0, 2, 4, 6]);
        let mut g = Graph::new();
        let p = m.bind(&mut g, true);
        let xi = g.leaf(x);
        let a = m.logits(&mut g, &p, xi).unwrap();
        let loss = g.softmax_cross_entropy(a, &labels).unwrap();
        g.backward(loss).unwrap();
        let mut out = g.data(a).to_vec();
        for &id in p.ids() {
            out.extend_from_slice(g.grad(id).unwrap());
        }
        out.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

fn idx_bytes(magic: u32, dims: &[u32], payload: &[u8]) -> Vec<u8> {
    let mut b = magic.to_be_bytes().to_vec();
    for d in dims {
        b.extend(d.to_be_bytes());
    }
    b.extend_from_slice(payload);
    b
}

#[test]
fn idx_fixture_loads_and_corruption_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut pixels = vec![0u8; 4 * 28 * 28];
    pixels[0] = 255;
    pixels[28 * 28 + 5] = 51;
    let img = dir.path().join("images.idx");
    let lab = dir.path().join("labels.idx");
    fs::write(&img, idx_bytes(0x0803, &[4, 28, 28], &pixels)).unwrap();
    fs::write(&lab, idx_bytes(0x0801, &[4], &[3, 1, 4, 1])).unwrap();
    let ds = load_idx(&img, &lab).unwrap();
    assert_eq!((ds.len(), ds.shape), (4, [1, 28, 28]));
    assert_eq!(ds.labels, vec![3, 1, 4, 1]);
    assert_eq!(ds.images[0], 1.0);
    assert_eq!(ds.images[28 * 28 + 5], 0.2);

    fs::write(&img, idx_bytes(0x0804, &[4, 28, 28], &pixels)).unwrap();
    assert!(matches!(
        load_idx(&img, &lab),
        Err(DataError::BadMagic { .. })
    ));
    fs::write(&img, idx_bytes(0x0803, &[4, 28, 28], &pixels)).unwrap();
    fs::write(&lab, idx_bytes(0x0801, &[3], &[3, 1, 4])).unwrap();
    assert!(matches!(
        load_idx(&img, &lab),
        Err(DataError::DimMismatch(_))
    ));
}

#[test]
fn cifar_records_load_and_truncation_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let one = dir.path().join("one.bin");
    let mut rec = vec![7u8];
    rec.extend(std::iter::repeat_n(128u8, 3072));
    fs::write(&one, &rec).unwrap();
    let ds = load_cifar_binary(&[&one]).unwrap();
    assert_eq!((ds.len(), ds.labels[0], ds.shape), (1, 7, [3, 32, 32]));
    assert!(ds.images.iter().all(|&v| v == 128.0 / 255.0));

    let two = dir.path().join("two.bin");
    let mut both = rec.clone();
    both.push(2);
    both.extend((0..3072).map(|i| (i % 256) as u8));
    fs::write(&two, &both).unwrap();
    let ds = load_cifar_binary(&[&two]).unwrap();
    assert_eq!(ds.labels, vec![7, 2]);
    assert_eq!(ds.images[3072 + 255], 1.0);

    let cut = dir.path().join("cut.bin");
    fs::write(&cut, &both[..4000]).unwrap();
    assert!(matches!(
        load_cifar_binary(&[&cut]),
        Err(DataError::RecordLength { .. })
    ));
}

#[test]
fn synthetic_images_survive_the_ppm_dump() {
    let ds = generate_synthetic(8, 2, 28, 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for i in 0..ds.len() {
        let path = dir.path().join(format!("{i}.ppm"));
        write_ppm(&path, ds.image(i), ds.shape).unwrap();
        let (back, shape) = read_ppm(&path).unwrap();
        assert_eq!(shape, [3, 28, 28]);
        for (a, b) in ds.image(i).iter().zip(&back[..28 * 28]) {
            assert!((a - b).abs() <= 1.0 / 255.0 + 1e-7);
        }
    }
}

#[test]
fn cosine_and_psnr_match_float64_formulas() {
    let mut r = rng(6);
    for _ in 0..20 {
        let a: Vec<f32> = (0..100).map(|_| r.gen()).collect();
        let b: Vec<f32> = (0..100).map(|_| r.gen()).collect();
        let (a64, b64): (Vec<f64>, Vec<f64>) = (
            a.iter().map(|&v| v as f64).collect(),
            b.iter().map(|&v| v as f64).collect(),
        );
        let dot: f64 = a64.iter().zip(&b64).map(|(x, y)| x * y).sum();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(
            (cosine_similarity(&a, &b).unwrap() - dot / (norm(&a64) * norm(&b64))).abs() <= 1e-6
        );
        let mse = a64
            .iter()
            .zip(&b64)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / 100.0;
        assert!((psnr(&a, &b).unwrap() - 10.0 * (1.0 / mse).log10()).abs() <= 1e-6);
    }
}

/// SSIM from raw moments `E[ab] - E[a]E[b]` over 8x8 tiles.
fn ssim_moments(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let mut vals = Vec::new();
    for ty in (0..h - 7).step_by(8) {
        for tx in (0..w - 7).step_by(8) {
            let px: Vec<(f64, f64)> = (0..64)
                .map(|i| (ty + i / 8) * w + tx + i % 8)
                .map(|j| (a[j], b[j]))
                .collect();
            let e = |f: &dyn Fn(&(f64, f64)) -> f64| px.iter().map(f).sum::<f64>() / 64.0;
            let (ma, mb) = (e(&|p| p.0), e(&|p| p.1));
            let va = e(&|p| p.0 * p.0) - ma * ma;
            let vb = e(&|p| p.1 * p.1) - mb * mb;
            let cov = e(&|p| p.0 * p.1) - ma * mb;
            vals.push(
                (2.0 * ma * mb + 1e-4) * (2.0 * cov + 9e-4)
                    / ((ma * ma + mb * mb + 1e-4) * (va + vb + 9e-4)),
            );
        }
    }
    vals.iter().sum::<f64>() / vals.len() as f64
}

#[test]
fn ssim_matches_moment_reimplementation() {
    let mut r = rng(7);
    let a: Vec<f32> = (0..3 * 20 * 17).map(|_| r.gen()).collect();
    let b: Vec<f32> = a
        .iter()
        .map(|&v| (v * 0.7 + r.gen_range(0.0..0.3f32)).min(1.0))
        .collect();
    let gray = |x: &[f32]| -> Vec<f64> {
        (0..340)
            .map(|i| (0..3).map(|c| x[c * 340 + i] as f64).sum::<f64>() / 3.0)
            .collect()
    };
    let want = ssim_moments(&gray(&a), &gray(&b), 20, 17);
    assert!((ssim(&a, &b, [3, 20, 17]).unwrap() - want).abs() <= 1e-6);
    assert!((ssim(&a, &a, [3, 20, 17]).unwrap() - 1.0).abs() <= 1e-12);
    let inv: Vec<f32> = a.iter().map(|v| 1.0 - v).collect();
    assert!(ssim(&a, &inv, [3, 20, 17]).unwrap() < 1.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn features_are_non_negative(seed in 0u64..1000, arch in 0usize..3) {
        let (arch, shape) = [
            (Architecture::MlpSmall, [1, 8, 8]),
            (Architecture::ConvSmall, [1, 16, 16]),
            (Architecture::ConvMed, [3, 32, 32]),
        ][arch];
        let m = Model::<f32>::build(ModelSpec::new(arch, shape, 5).unwrap(), seed).unwrap();
        let mut r = rng(seed);
        let n: usize = shape.iter().product();
        let x = Tensor::new([vec![2], shape.to_vec()].concat(), (0..2 * n).map(|_| r.gen_range(-1.0..2.0)).collect()).unwrap();
        let t = m.forward_trace(&x, &[0, 1]).unwrap();
        prop_assert!(t.features.data().iter().all(|&v| v >= 0.0));
    }
}

fn small_task() -> (Dataset, Dataset) {
    (
        generate_synthetic(8, 24, 16, 10).unwrap(),
        generate_synthetic(8, 10, 16, 11).unwrap(),
    )
}

#[test]
fn untrained_model_is_near_chance() {
    let (_, test) = small_task();
    for seed in 0..3 {
        let m = Model::build(
            ModelSpec::new(Architecture::ConvSmall, [1, 16, 16], 8).unwrap(),
            seed,
        )
        .unwrap();
        let acc = evaluate(&m, &test, None, 0).unwrap();
        assert!((acc - 1.0 / 8.0).abs() <= 0.05, "accuracy {acc}");
    }
}

#[test]
fn adversarial_inputs_lower_true_class_probability_and_accuracy() {
    let (tr, test) = small_task();
    let mut m = Model::build(
        ModelSpec::new(Architecture::MlpSmall, [1, 16, 16], 8).unwrap(),
        1,
    )
    .unwrap();
    let cfg = TrainConfig {
        epochs: 5,
        seed: 2,
        ..TrainConfig::default()
    };
    train(&mut m, &tr, None, &cfg).unwrap();
    let at = ATConfig::l2(1.0);
    let clean = evaluate(&m, &test, None, 3).unwrap();
    let robust = evaluate(&m, &test, Some(&at), 3).unwrap();
    assert!(
        clean > 0.5 && robust <= clean,
        "clean {clean} robust {robust}"
    );

    let idx: Vec<usize> = (0..test.len()).collect();
    let (x, labels) = test.gather(&idx);
    let adv = pgd_attack(&m, &x, &labels, &at, &mut rng(4)).unwrap();
    let p_true = |t: &Tensor<f32>| {
        let tr = m.forward_trace(t, &labels).unwrap();
        let k = 8;
        labels
            .iter()
            .enumerate()
            .map(|(i, &y)| tr.probs.data()[i * k + y] as f64)
            .sum::<f64>()
            / labels.len() as f64
    };
    assert!(p_true(&adv) < p_true(&x));
}

#[test]
fn checkpoint_reload_preserves_accuracy() {
    let (tr, test) = small_task();
    let mut m = Model::build(
        ModelSpec::new(Architecture::MlpSmall, [1, 16, 16], 8).unwrap(),
        5,
    )
    .unwrap();
    train(
        &mut m,
        &tr,
        None,
        &TrainConfig {
            epochs: 2,
            ..TrainConfig::default()
        },
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.glck");
    save_checkpoint(&m, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(
        evaluate(&m, &test, None, 0).unwrap(),
        evaluate(&back, &test, None, 0).unwrap()
    );
}

#[test]
fn conv_small_packet_head_is_d_by_k_and_aggregation_is_the_mean() {
    let m = Model::build(
        ModelSpec::new(Architecture::ConvSmall, [1, 28, 28], 10).unwrap(),
        0,
    )
    .unwrap();
    let ck = CheckpointRef::from_model(&m, "m.glck");
    let ds = generate_synthetic(10, 3, 28, 1).unwrap();
    let mut packets = Vec::new();
    for b in 0..3 {
        let idx = [b, 3 + b, 6 + b];
        let (x, labels) = ds.gather(&idx);
        let (p, _) = client_local_step(
            &m,
            &ck,
            &x,
            &labels,
            &idx,
            None,
            StepMeta::default(),
            &mut rng(b as u64),
        )
        .unwrap();
        packets.push(p);
    }
    assert_eq!(
        packets[0].head_gradient().unwrap().shape(),
        &[m.feature_dim(), 10]
    );
    assert_eq!(m.feature_dim(), 256);
    let agg = server_aggregate(&packets).unwrap();
    for (k, a) in agg.iter().enumerate() {
        for (j, v) in a.data.iter().enumerate() {
            let want = packets
                .iter()
                .map(|p| p.grads[k].data[j] as f64)
                .sum::<f64>()
                / 3.0;
            assert!((*v as f64 - want).abs() <= 1e-6);
        }
    }
}
