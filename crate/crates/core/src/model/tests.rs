use super::*;
use crate::tensor::check::finite_diff_check;
use crate::tensor::{concat, ComplexHalfSpectrum, Tensor};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::from_vec((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(), shape).unwrap()
}

fn rand_image(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::from_vec((0..n).map(|_| rng.gen_range(0.0..1.0)).collect(), shape).unwrap()
}

/// Overwrite every materialized parameter with zeros.
fn zero_all(store: &ParamStore<f64>) {
    for name in store.names() {
        let (data, shape) = store.get(&name).unwrap();
        store.set(&name, vec![0.0; data.len()], &shape);
    }
}

/// Identity 1x1 convolution weight (c, c, 1, 1).
fn identity_1x1(c: usize) -> Vec<f64> {
    let mut w = vec![0.0; c * c];
    for i in 0..c {
        w[i * c + i] = 1.0;
    }
    w
}

fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn ape_all_zero_weights_outputs_zero() {
    let cfg = ArchConfig::tiny();
    let store: ParamStore<f64> = ParamStore::new(1);
    let x = rand_tensor(&[1, 4, 6, 6], 2);
    // materialize, zero, run again
    ape_forward(&Binder::frozen(&store), "ape", &x, &cfg).unwrap();
    zero_all(&store);
    let y = ape_forward(&Binder::frozen(&store), "ape", &x, &cfg).unwrap();
    assert!(y.data().iter().all(|v| *v == 0.0));
}

#[test]
fn ape_identity_branches_scale_spectrum_uniformly() {
    // Input with an all-real positive spectrum has zero phase, so identity
    // branch weights give A' = relu(A) = A and P' = relu(0) = 0 = P. Both
    // entanglement gates then see a zero difference, pool to zeros, and
    // softmax to 1/C, so the output is (1 + 1/C) * x with S zeroed.
    let c = 4;
    let (h, w) = (6, 6);
    let cfg = ArchConfig::tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let wh = w / 2 + 1;
    let mut amp = vec![0.0; c * h * wh];
    for (u, slot) in amp.iter_mut().enumerate() {
        // Hermitian-safe: constant within each special column
        let _ = u;
        *slot = rng.gen_range(0.5..2.0);
    }
    // force special columns (v=0 and Nyquist) to be symmetric in u
    for ch in 0..c {
        for u in 0..h {
            let mirror = (h - u) % h;
            for v in [0, w / 2] {
                let a = amp[(ch * h + u) * wh + v];
                amp[(ch * h + mirror) * wh + v] = a;
            }
        }
    }
    let spec = ComplexHalfSpectrum::from_polar(
        &Tensor::from_vec(amp, &[c, h, wh]).unwrap(),
        &Tensor::zeros(&[c, h, wh]),
        h,
        w,
    )
    .unwrap();
    let x = spec.irfft2(h, w).unwrap().reshape(&[1, c, h, w]).unwrap();

    let store: ParamStore<f64> = ParamStore::new(1);
    ape_forward(&Binder::frozen(&store), "ape", &x, &cfg).unwrap();
    zero_all(&store);
    for branch in ["amp", "pha"] {
        for layer in ["w1", "w2"] {
            store.set(
                &format!("ape.{branch}.{layer}.w"),
                identity_1x1(c),
                &[c, c, 1, 1],
            );
        }
    }
    let y = ape_forward(&Binder::frozen(&store), "ape", &x, &cfg).unwrap();
    let want = x.scale(1.0 + 1.0 / c as f64);
    assert!(max_abs_diff(&y, &want) < 1e-4);
}

#[test]
fn ape_gradient_check() {
    let cfg = ArchConfig::tiny();
    let store: ParamStore<f64> = ParamStore::new(3);
    let x0 = rand_tensor(&[1, 2, 4, 4], 7);
    let err = finite_diff_check(
        |x, tape| {
            let b = Binder::new(&store, tape);
            Ok(ape_forward(&b, "ape", x, &cfg)?.square().sum())
        },
        x0.data(),
        x0.shape(),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "ape gradient error {err}");
}

#[test]
fn eca_zero_weights_halves_input() {
    let store: ParamStore<f64> = ParamStore::new(1);
    let x = rand_tensor(&[2, 5, 3, 3], 11);
    eca_forward(&Binder::frozen(&store), "eca", &x, 3).unwrap();
    zero_all(&store);
    let y = eca_forward(&Binder::frozen(&store), "eca", &x, 3).unwrap();
    let want = x.scale(0.5);
    assert!(max_abs_diff(&y, &want) < 1e-12);
}

#[test]
fn eca_constant_channels_scaled_identically() {
    let store: ParamStore<f64> = ParamStore::new(2);
    // every channel has the same constant value
    let x = Tensor::full(&[1, 6, 4, 4], 0.3_f64);
    let y = eca_forward(&Binder::frozen(&store), "eca", &x, 3).unwrap();
    let first = y.data()[0];
    // interior channels see identical neighborhoods; boundary channels see
    // the zero padding, so compare within the interior
    for ch in 1..5 {
        assert!((y.data()[ch * 16] - y.data()[16]).abs() < 1e-12);
    }
    assert!(first.is_finite());
}

#[test]
fn eca_rejects_even_kernel() {
    let store: ParamStore<f64> = ParamStore::new(1);
    let x = rand_tensor(&[1, 4, 2, 2], 1);
    assert!(eca_forward(&Binder::frozen(&store), "eca", &x, 4).is_err());
}

#[test]
fn eca_gradient_check() {
    let store: ParamStore<f64> = ParamStore::new(5);
    let x0 = rand_tensor(&[1, 4, 3, 3], 13);
    let err = finite_diff_check(
        |x, tape| {
            let b = Binder::new(&store, tape);
            Ok(eca_forward(&b, "eca", x, 3)?.square().sum())
        },
        x0.data(),
        x0.shape(),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "eca gradient error {err}");
}

#[test]
fn residual_block_zero_weights_is_identity() {
    let store: ParamStore<f64> = ParamStore::new(1);
    let x = rand_tensor(&[1, 4, 5, 5], 17);
    residual_block_forward(&Binder::frozen(&store), "res", &x, 3).unwrap();
    zero_all(&store);
    // f(x) = leaky(ECA(DSConv(x))) = leaky(0 * 0.5) = 0, so out = x exactly
    let y = residual_block_forward(&Binder::frozen(&store), "res", &x, 3).unwrap();
    assert_eq!(y.data(), x.data());
}

#[test]
fn residual_block_preserves_shape() {
    let store: ParamStore<f64> = ParamStore::new(2);
    for (h, w) in [(3, 7), (5, 5), (8, 2)] {
        let x = rand_tensor(&[2, 6, h, w], 19);
        let y = residual_block_forward(&Binder::frozen(&store), "res", &x, 3).unwrap();
        assert_eq!(y.shape(), x.shape());
    }
}

#[test]
fn residual_block_gradient_check() {
    let store: ParamStore<f64> = ParamStore::new(7);
    let x0 = rand_tensor(&[1, 3, 3, 3], 23);
    let err = finite_diff_check(
        |x, tape| {
            let b = Binder::new(&store, tape);
            Ok(residual_block_forward(&b, "res", x, 3)?.square().sum())
        },
        x0.data(),
        x0.shape(),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "residual gradient error {err}");
}

#[test]
fn transformer_zero_weights_is_identity() {
    let store: ParamStore<f64> = ParamStore::new(1);
    let x = rand_tensor(&[1, 4, 4, 4], 29);
    transformer_block_forward(&Binder::frozen(&store), "tf", &x, 1).unwrap();
    zero_all(&store);
    // zero value/output projections make both sublayers vanish
    let y = transformer_block_forward(&Binder::frozen(&store), "tf", &x, 1).unwrap();
    assert!(max_abs_diff(&y, &x) < 1e-12);
}

#[test]
fn transformer_attention_rows_sum_to_one() {
    let store: ParamStore<f64> = ParamStore::new(31);
    let x = rand_tensor(&[2, 6, 5, 5], 31);
    let attn = transformer_attention(&Binder::frozen(&store), "tf", &x, 2).unwrap();
    assert_eq!(attn.shape(), &[4, 3, 3]);
    for b in 0..4 {
        for r in 0..3 {
            let row: f64 = (0..3).map(|c| attn.data()[(b * 3 + r) * 3 + c]).sum();
            assert!((row - 1.0).abs() < 1e-10);
        }
    }
}

#[test]
fn transformer_gradient_check() {
    let store: ParamStore<f64> = ParamStore::new(9);
    let x0 = rand_tensor(&[1, 4, 3, 3], 37);
    let err = finite_diff_check(
        |x, tape| {
            let b = Binder::new(&store, tape);
            Ok(transformer_block_forward(&b, "tf", x, 2)?.square().sum())
        },
        x0.data(),
        x0.shape(),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "transformer gradient error {err}");
}

#[test]
fn fda_equal_scale_branches_weight_one_third() {
    // zeroed depthwise branches are trivially identical, so every scale
    // must receive softmax weight exactly 1/3; probe via the output of a
    // store where the fuse conv passes the aligned-events slot through.
    let store: ParamStore<f64> = ParamStore::new(1);
    let f_img = rand_tensor(&[1, 4, 5, 5], 41);
    let f_e = rand_tensor(&[1, 4, 5, 5], 42);
    let f_f = rand_tensor(&[1, 4, 5, 5], 43);
    fda_forward(&Binder::frozen(&store), "fda", &f_img, &f_e, &f_f).unwrap();
    // verify the Eq-structure directly through the similarity helper below
    zero_all(&store);
    let sims = fda_similarities(&store, &f_img, &f_e);
    let weights = sims.softmax(1).unwrap();
    for i in 0..weights.numel() {
        assert!((weights.data()[i] - 1.0 / 3.0).abs() < 1e-10);
    }
}

/// Recompute the three cosine-similarity maps exactly as fda_forward does,
/// using the same stored scale-branch parameters.
fn fda_similarities(
    store: &ParamStore<f64>,
    f_img: &Tensor<f64>,
    f_e: &Tensor<f64>,
) -> Tensor<f64> {
    let b = Binder::frozen(store);
    let c = f_img.shape()[1];
    let mut sims = Vec::new();
    for s in [3usize, 5, 7] {
        let w = b
            .get(&format!("fda.scale{s}.w"), &[c, 1, s, s], Init::FanIn)
            .unwrap();
        let bias = b.get(&format!("fda.scale{s}.b"), &[c], Init::Zeros).unwrap();
        let fe_s = f_e.conv2d(&w, Some(&bias), 1, (s - 1) / 2, c).unwrap();
        let dot = fe_s.mul(f_img).unwrap().sum_axis(1).unwrap();
        let na = fe_s.square().sum_axis(1).unwrap().sqrt();
        let nb = f_img.square().sum_axis(1).unwrap().sqrt();
        sims.push(
            dot.div(&na.mul(&nb).unwrap().add_scalar(1e-8)).unwrap(),
        );
    }
    let refs: Vec<&Tensor<f64>> = sims.iter().collect();
    concat(&refs, 1).unwrap()
}

#[test]
fn fda_identity_branches_on_equal_features_give_cosine_one() {
    let store: ParamStore<f64> = ParamStore::new(1);
    let f = rand_image(&[1, 4, 5, 5], 47).add_scalar(0.1); // strictly positive
    fda_forward(&Binder::frozen(&store), "fda", &f, &f, &f).unwrap();
    zero_all(&store);
    // identity depthwise kernels: 1 at the center tap of each channel
    let c = 4;
    for s in [3usize, 5, 7] {
        let mut w = vec![0.0; c * s * s];
        for ch in 0..c {
            w[ch * s * s + (s * s) / 2] = 1.0;
        }
        store.set(&format!("fda.scale{s}.w"), w, &[c, 1, s, s]);
    }
    let sims = fda_similarities(&store, &f, &f);
    for v in sims.data() {
        assert!((v - 1.0).abs() < 1e-6, "cosine {v}");
    }
}

#[test]
fn fda_similarity_normalization_and_bounds_random_inputs() {
    let store: ParamStore<f64> = ParamStore::new(53);
    for seed in 0..5 {
        let f_img = rand_tensor(&[2, 4, 6, 6], 100 + seed);
        let f_e = rand_tensor(&[2, 4, 6, 6], 200 + seed);
        let f_f = rand_tensor(&[2, 4, 6, 6], 300 + seed);
        // touch params so the helper sees the same kernels
        fda_forward(&Binder::frozen(&store), "fda", &f_img, &f_e, &f_f).unwrap();
        let sims = fda_similarities(&store, &f_img, &f_e);
        for v in sims.data() {
            assert!(*v >= -1.0 - 1e-6 && *v <= 1.0 + 1e-6, "cosine {v}");
        }
        let weights = sims.softmax(1).unwrap();
        let (n, hh, ww) = (2, 6, 6);
        for b in 0..n {
            for i in 0..hh * ww {
                let total: f64 = (0..3)
                    .map(|s| weights.data()[(b * 3 + s) * hh * ww + i])
                    .sum();
                assert!((total - 1.0).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn fda_gradient_check() {
    let store: ParamStore<f64> = ParamStore::new(11);
    let f_e = rand_tensor(&[1, 3, 4, 4], 61);
    let f_f = rand_tensor(&[1, 3, 4, 4], 62);
    let x0 = rand_tensor(&[1, 3, 4, 4], 63);
    let err = finite_diff_check(
        |x, tape| {
            let b = Binder::new(&store, tape);
            Ok(fda_forward(&b, "fda", x, &f_e, &f_f)?.square().sum())
        },
        x0.data(),
        x0.shape(),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-3, "fda gradient error {err}");
}

#[test]
fn visibility_shapes_and_determinism() {
    let cfg = ArchConfig::tiny();
    let flags = AblationFlags::default();
    let store: ParamStore<f64> = ParamStore::new(77);
    let x = rand_image(&[2, 3, 8, 8], 71);
    let y1 = visibility_forward(&Binder::frozen(&store), &cfg, &x, &flags).unwrap();
    let y2 = visibility_forward(&Binder::frozen(&store), &cfg, &x, &flags).unwrap();
    assert_eq!(y1.shape(), x.shape());
    assert_eq!(y1.data(), y2.data());
    // fresh store with the same seed reproduces the same function
    let store2: ParamStore<f64> = ParamStore::new(77);
    let y3 = visibility_forward(&Binder::frozen(&store2), &cfg, &x, &flags).unwrap();
    assert_eq!(y1.data(), y3.data());
}

#[test]
fn visibility_rejects_indivisible_dims() {
    let cfg = ArchConfig::tiny();
    let store: ParamStore<f64> = ParamStore::new(1);
    let x = rand_image(&[1, 3, 6, 6], 73); // 6 not divisible by 4
    assert!(
        visibility_forward(&Binder::frozen(&store), &cfg, &x, &AblationFlags::default()).is_err()
    );
}

#[test]
fn refinement_shapes_and_zero_voxel() {
    let cfg = ArchConfig::tiny();
    let flags = AblationFlags::default();
    let store: ParamStore<f64> = ParamStore::new(78);
    let x = rand_image(&[1, 3, 8, 8], 79);
    let voxel = Tensor::zeros(&[1, cfg.voxel_bins, 8, 8]);
    let y = refinement_forward(&Binder::frozen(&store), &cfg, &x, &voxel, &flags).unwrap();
    assert_eq!(y.shape(), x.shape());
    assert!(y.is_finite());
}

#[test]
fn full_forward_wires_stage2_to_stage1_output() {
    let cfg = ArchConfig::tiny();
    let flags = AblationFlags::default();
    let store: ParamStore<f64> = ParamStore::new(80);
    let x = rand_image(&[1, 3, 8, 8], 81);
    let voxel = rand_tensor(&[1, cfg.voxel_bins, 8, 8], 82);
    let (x1, x2) = full_forward(&Binder::frozen(&store), &cfg, &x, &voxel, &flags).unwrap();
    assert_eq!(x1.shape(), x.shape());
    assert_eq!(x2.shape(), x.shape());
    // refinement applied to x1 with the same params reproduces x2 exactly
    let again = refinement_forward(&Binder::frozen(&store), &cfg, &x1, &voxel, &flags).unwrap();
    assert_eq!(x2.data(), again.data());
    // and applied to the raw input it does not (stage 2 sees x', not x)
    let raw = refinement_forward(&Binder::frozen(&store), &cfg, &x, &voxel, &flags).unwrap();
    assert!(max_abs_diff(&x2, &raw) > 1e-6);
}

#[test]
fn full_model_gradient_check_tiny() {
    let cfg = ArchConfig {
        widths: vec![2, 2],
        heads: 1,
        eca_kernel: 3,
        ca_reduction: 2,
        voxel_bins: 2,
    };
    let flags = AblationFlags::default();
    let store: ParamStore<f64> = ParamStore::new(83);
    let voxel = rand_tensor(&[1, 2, 4, 4], 84);
    let x0 = rand_image(&[1, 3, 4, 4], 85);
    let err = finite_diff_check(
        |x, tape| {
            let b = Binder::new(&store, tape);
            let (x1, x2) = full_forward(&b, &cfg, x, &voxel, &flags)?;
            Ok(x1.square().sum().add(&x2.square().sum())?)
        },
        x0.data(),
        x0.shape(),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-3, "full model gradient error {err}");
}

#[test]
fn batch_permutation_permutes_outputs() {
    let cfg = ArchConfig::tiny();
    let flags = AblationFlags::default();
    let store: ParamStore<f64> = ParamStore::new(86);
    let a = rand_image(&[1, 3, 8, 8], 87);
    let bimg = rand_image(&[1, 3, 8, 8], 88);
    let va = rand_tensor(&[1, cfg.voxel_bins, 8, 8], 89);
    let vb = rand_tensor(&[1, cfg.voxel_bins, 8, 8], 90);
    let xab = concat(&[&a, &bimg], 0).unwrap();
    let xba = concat(&[&bimg, &a], 0).unwrap();
    let vab = concat(&[&va, &vb], 0).unwrap();
    let vba = concat(&[&vb, &va], 0).unwrap();
    let (_, yab) = full_forward(&Binder::frozen(&store), &cfg, &xab, &vab, &flags).unwrap();
    let (_, yba) = full_forward(&Binder::frozen(&store), &cfg, &xba, &vba, &flags).unwrap();
    let half = yab.numel() / 2;
    assert_eq!(&yab.data()[..half], &yba.data()[half..]);
    assert_eq!(&yab.data()[half..], &yba.data()[..half]);
}

#[test]
fn param_count_pure_function_of_config() {
    let cfg = ArchConfig::tiny();
    let a = count_params::<f64>(&cfg).unwrap();
    let b = count_params::<f64>(&cfg).unwrap();
    assert_eq!(a, b);
    assert!(a > 0);
    let bigger = count_params::<f64>(&ArchConfig::default()).unwrap();
    assert!(bigger > a);
}

#[test]
fn ablation_flags_change_the_function() {
    let cfg = ArchConfig::tiny();
    let store: ParamStore<f64> = ParamStore::new(91);
    let x = rand_image(&[1, 3, 8, 8], 92);
    let voxel = rand_tensor(&[1, cfg.voxel_bins, 8, 8], 93);
    let run = |flags: &AblationFlags| {
        full_forward(&Binder::frozen(&store), &cfg, &x, &voxel, flags).unwrap()
    };
    let (x1, x2) = run(&AblationFlags::default());
    let (s1, s2) = run(&AblationFlags { no_stage1: true, ..Default::default() });
    assert_eq!(s1.data(), x.data());
    assert!(max_abs_diff(&s2, &x2) > 1e-9);
    let (_, t2) = run(&AblationFlags { no_stage2: true, ..Default::default() });
    assert_eq!(t2.data(), x1.data());
    let (_, f2) = run(&AblationFlags { no_fda: true, ..Default::default() });
    assert!(max_abs_diff(&f2, &x2) > 1e-9);
    let (a1, _) = run(&AblationFlags { no_ape: true, ..Default::default() });
    assert!(max_abs_diff(&a1, &x1) > 1e-9);
}

#[test]
fn checkpoint_roundtrip() {
    let cfg = ArchConfig::tiny();
    let store: ParamStore<f32> = ParamStore::new(94);
    let x = Tensor::<f32>::full(&[1, 3, 8, 8], 0.5);
    let voxel = Tensor::<f32>::zeros(&[1, cfg.voxel_bins, 8, 8]);
    full_forward(
        &Binder::frozen(&store),
        &cfg,
        &x,
        &voxel,
        &AblationFlags::default(),
    )
    .unwrap();
    let dir = std::env::temp_dir().join("luminev-model-test");
    std::fs::create_dir_all(&dir).unwrap();
    let base = dir.join("ckpt");
    let meta = CheckpointMeta {
        step: 42,
        arch: cfg.clone(),
        seed: 94,
    };
    save_checkpoint(&store, &meta, &base).unwrap();
    let (loaded, got): (ParamStore<f32>, _) = load_checkpoint(&base).unwrap();
    assert_eq!(got.step, 42);
    assert_eq!(got.seed, 94);
    assert_eq!(got.arch, cfg);
    assert_eq!(loaded.names(), store.names());
    for name in store.names() {
        let (a, sa) = store.get(&name).unwrap();
        let (b, sb) = loaded.get(&name).unwrap();
        assert_eq!(sa, sb);
        assert_eq!(a, b, "parameter {name} changed across roundtrip");
    }
    // the loaded store drives an identical forward pass
    let (_, y0) = full_forward(
        &Binder::frozen(&store),
        &cfg,
        &x,
        &voxel,
        &AblationFlags::default(),
    )
    .unwrap();
    let (_, y1) = full_forward(
        &Binder::frozen(&loaded),
        &cfg,
        &x,
        &voxel,
        &AblationFlags::default(),
    )
    .unwrap();
    assert_eq!(y0.data(), y1.data());
}
