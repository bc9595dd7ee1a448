use lact_core::grid::Image;
use lact_core::metadata::{Category, MetadataRecord, Sex};
use lact_core::prior_net::*;
use lact_core::sampler::{PriorInput, PriorModel};
use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const H: f64 = 1e-5;
const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

fn randn2(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.sample(StandardNormal))
}

fn randn3(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Array3<f64> {
    Array3::from_shape_fn((c, h, w), |_| rng.sample(StandardNormal))
}

fn tensors(p: &BlockParams) -> Vec<(String, Vec<f64>)> {
    let mut out = Vec::new();
    p.visit(&mut |n, _, d| out.push((n.to_string(), d.to_vec())));
    out
}

fn perturbed(p: &BlockParams, name: &str, idx: usize, delta: f64) -> BlockParams {
    let mut q = p.clone();
    q.visit_mut(&mut |n, _, d| {
        if n == name {
            d[idx] += delta;
        }
    });
    q
}

fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = numeric.iter().map(|b| b * b).sum::<f64>().sqrt();
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Central-difference check of every parameter tensor listed in `names`.
fn check_params(
    params: &BlockParams,
    grads: &BlockParams,
    names: &[&str],
    loss: &dyn Fn(&BlockParams) -> f64,
    tol: f64,
) {
    let analytic = tensors(grads);
    for (name, values) in tensors(params) {
        if !names.contains(&name.as_str()) {
            continue;
        }
        let numeric: Vec<f64> = (0..values.len())
            .map(|i| (loss(&perturbed(params, &name, i, H)) - loss(&perturbed(params, &name, i, -H))) / (2.0 * H))
            .collect();
        let a = &analytic.iter().find(|(n, _)| *n == name).unwrap().1;
        let e = rel_err(a, &numeric);
        assert!(e < tol, "tensor {name}: relative error {e}");
        assert!(numeric.iter().any(|v| v.abs() > 1e-9), "tensor {name}: gradient vanished");
    }
}

fn check_input(x: &Array3<f64>, analytic: &Array3<f64>, loss: &dyn Fn(&Array3<f64>) -> f64, tol: f64) {
    let mut numeric = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.as_slice_mut().unwrap()[i] += H;
        let mut xm = x.clone();
        xm.as_slice_mut().unwrap()[i] -= H;
        numeric.push((loss(&xp) - loss(&xm)) / (2.0 * H));
    }
    let e = rel_err(analytic.as_slice().unwrap(), &numeric);
    assert!(e < tol, "input gradient relative error {e}");
}

fn weighted(a: &Array2<f64>, g: &Array2<f64>) -> f64 {
    (a * g).sum()
}

// ---------------------------------------------------------------------------
// Cross-attention.

#[test]
fn single_token_passes_projected_values() {
    let cfg = BlockConfig {
        channels: 3,
        head_dim: 3,
        time_hidden: 4,
        gca_hidden: 2,
        attention: AttentionMode::TextQuery,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut p = BlockParams::random(cfg, 9, 1.0);
    p.w_o = Array2::eye(3);
    let text = TokenMatrix::new(randn2(&mut rng, 1, 3)).unwrap();
    let image = TokenMatrix::new(randn2(&mut rng, 1, 3)).unwrap();
    let out = cross_attention(&text, &image, &p).unwrap();
    let expected = image.view().dot(&p.w_v.t());
    assert_eq!(out.view(), expected.view());
    let w = attention_weights(&text, &image, &p).unwrap();
    assert_eq!(w[[0, 0]], 1.0);
}

#[test]
fn duplicate_tokens_share_attention_rows() {
    let cfg = BlockConfig::small(4);
    let p = BlockParams::random(cfg, 3, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = randn2(&mut rng, 1, 4);
    let b = randn2(&mut rng, 1, 4);
    let text = TokenMatrix::new(ndarray::concatenate![ndarray::Axis(0), a, b, a]).unwrap();
    let image = TokenMatrix::new(randn2(&mut rng, 5, 4)).unwrap();
    let w = attention_weights(&text, &image, &p).unwrap();
    assert_eq!(w.row(0), w.row(2));
    for row in w.rows() {
        assert!((row.sum() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn empty_text_gives_zero_update() {
    let p = BlockParams::random(BlockConfig::small(4), 1, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let image = TokenMatrix::new(randn2(&mut rng, 6, 4)).unwrap();
    let out = cross_attention(&TokenMatrix::empty(4), &image, &p).unwrap();
    assert!(out.view().iter().all(|&v| v == 0.0));
    assert_eq!(out.view().dim(), (6, 4));
}

#[test]
fn dimension_mismatch_is_rejected() {
    let p = BlockParams::random(BlockConfig::small(4), 1, 1.0);
    let text = TokenMatrix::new(Array2::zeros((2, 3))).unwrap();
    let image = TokenMatrix::new(Array2::zeros((2, 4))).unwrap();
    assert!(cross_attention(&text, &image, &p).is_err());
}

fn attention_fd(mode: AttentionMode) {
    for seed in SEEDS {
        let cfg = BlockConfig {
            channels: 4,
            head_dim: 3,
            time_hidden: 4,
            gca_hidden: 2,
            attention: mode,
        };
        let params = BlockParams::random(cfg, seed, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let text = randn2(&mut rng, 3, 4);
        let image = randn2(&mut rng, 5, 4);
        let g = randn2(&mut rng, 5, 4);
        let tm = TokenMatrix::new(text.clone()).unwrap();
        let im = TokenMatrix::new(image.clone()).unwrap();
        let grads = cross_attention_backward(&tm, &im, &params, &g).unwrap();
        let loss = |p: &BlockParams| weighted(&cross_attention(&tm, &im, p).unwrap().view().to_owned(), &g);
        let mut packed = BlockParams::zeros(cfg);
        packed.w_q = grads.w_q.clone();
        packed.w_k = grads.w_k.clone();
        packed.w_v = grads.w_v.clone();
        packed.w_o = grads.w_o.clone();
        check_params(&params, &packed, &["w_q", "w_k", "w_v", "w_o"], &loss, 1e-4);

        let fd_tokens = |base: &Array2<f64>, analytic: &Array2<f64>, text_side: bool| {
            let mut numeric = Vec::new();
            for i in 0..base.len() {
                let eval = |delta: f64| {
                    let mut b = base.clone();
                    b.as_slice_mut().unwrap()[i] += delta;
                    let b = TokenMatrix::new(b).unwrap();
                    let out = if text_side {
                        cross_attention(&b, &im, &params)
                    } else {
                        cross_attention(&tm, &b, &params)
                    };
                    weighted(&out.unwrap().view().to_owned(), &g)
                };
                numeric.push((eval(H) - eval(-H)) / (2.0 * H));
            }
            let e = rel_err(analytic.as_slice().unwrap(), &numeric);
            assert!(e < 1e-4, "token gradient relative error {e}");
        };
        fd_tokens(&text, &grads.text, true);
        fd_tokens(&image, &grads.image, false);
    }
}

#[test]
fn cross_attention_gradients_match_finite_differences() {
    attention_fd(AttentionMode::TextQuery);
}

#[test]
fn conventional_attention_gradients_match_finite_differences() {
    attention_fd(AttentionMode::Conventional);
}

// ---------------------------------------------------------------------------
// Time embedding.

fn naive_group_norm(x: &Array3<f64>) -> Array3<f64> {
    let c = x.dim().0;
    let groups = group_count(c);
    let per = c / groups;
    let mut out = x.clone();
    for g in 0..groups {
        let vals: Vec<f64> = (g * per..(g + 1) * per).flat_map(|ch| x.index_axis(ndarray::Axis(0), ch).to_owned()).collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        for ch in g * per..(g + 1) * per {
            out.index_axis_mut(ndarray::Axis(0), ch).mapv_inplace(|v| (v - mean) / (var + 1e-5).sqrt());
        }
    }
    out
}

#[test]
fn identity_film_is_conv_of_activated_group_norm() {
    let cfg = BlockConfig::small(6);
    let p = BlockParams::random(cfg, 4, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = randn3(&mut rng, 6, 5, 7);
    let out = film_modulate(&x, &Array1::ones(6), &Array1::zeros(6), &p).unwrap();
    let act = naive_group_norm(&x).mapv(|v| v / (1.0 + (-v).exp()));
    let expected = conv3x3(&act, &p.te_conv_w, &p.te_conv_b).unwrap();
    let diff = (&out - &expected).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
    assert!(diff < 1e-12, "max deviation {diff}");
}

#[test]
fn distinct_noise_levels_give_distinct_outputs() {
    let p = BlockParams::random(BlockConfig::small(4), 8, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = randn3(&mut rng, 4, 6, 6);
    let a = time_embed_modulate(log_snr(0.5), &x, &p).unwrap();
    let b = time_embed_modulate(log_snr(0.05), &x, &p).unwrap();
    assert!((&a - &b).mapv(|v| v * v).sum() > 0.0);
}

#[test]
fn zero_time_mlp_gives_unit_scale_and_bias_shift() {
    let mut p = BlockParams::random(BlockConfig::small(4), 2, 1.0);
    p.time_w2.fill(0.0);
    p.time_b2.slice_mut(ndarray::s![..4]).fill(0.0);
    let (g, b) = film_parameters(1.3, &p);
    assert!(g.iter().all(|&v| v == 1.0));
    assert_eq!(b, p.time_b2.slice(ndarray::s![4..]).to_owned());
}

#[test]
fn time_embedding_gradients_match_finite_differences() {
    for seed in SEEDS {
        let cfg = BlockConfig::small(4);
        let params = BlockParams::random(cfg, seed, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let x = randn3(&mut rng, 4, 5, 6);
        let g = randn3(&mut rng, 4, 5, 6);
        let h = log_snr(0.3 + 0.1 * seed as f64);
        let (gx, grads) = time_embed_modulate_backward(h, &x, &params, &g).unwrap();
        let loss = |p: &BlockParams| (&time_embed_modulate(h, &x, p).unwrap() * &g).sum();
        check_params(
            &params,
            &grads,
            &["time_w1", "time_b1", "time_w2", "time_b2", "te_conv_w", "te_conv_b"],
            &loss,
            1e-4,
        );
        check_input(&x, &gx, &|xx| (&time_embed_modulate(h, xx, &params).unwrap() * &g).sum(), 1e-4);
    }
}

// ---------------------------------------------------------------------------
// Channel attention.

#[test]
fn gca_zero_in_zero_out_and_unit_gates_are_identity() {
    let p = BlockParams::random(BlockConfig::small(4), 5, 1.0);
    let zero = Array3::zeros((4, 3, 3));
    assert_eq!(guided_contextual_attention(&zero, &p).unwrap(), zero);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = randn3(&mut rng, 4, 3, 3);
    assert_eq!(gate_channels(&x, &Array1::ones(4)), x);
    let gates = gca_gates(&x, &p).unwrap();
    assert!(gates.iter().all(|&g| g > 0.0 && g < 1.0));
}

#[test]
fn gca_gradients_match_finite_differences() {
    for seed in SEEDS {
        let cfg = BlockConfig::small(6);
        let params = BlockParams::random(cfg, seed, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let x = randn3(&mut rng, 6, 4, 5);
        let g = randn3(&mut rng, 6, 4, 5);
        let (gx, grads) = guided_contextual_attention_backward(&x, &params, &g).unwrap();
        let loss = |p: &BlockParams| (&guided_contextual_attention(&x, p).unwrap() * &g).sum();
        check_params(&params, &grads, &["gca_w1", "gca_b1", "gca_w2", "gca_b2"], &loss, 1e-4);
        check_input(&x, &gx, &|xx| (&guided_contextual_attention(xx, &params).unwrap() * &g).sum(), 1e-4);
    }
}

// ---------------------------------------------------------------------------
// Encoder block.

#[test]
fn zero_weights_block_is_identity() {
    let p = BlockParams::zeros(BlockConfig::small(4));
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let z = randn3(&mut rng, 4, 6, 6);
    let tokens = TokenMatrix::new(randn2(&mut rng, 3, 4)).unwrap();
    assert_eq!(encoder_block_forward(&z, &tokens, 0.7, &p).unwrap(), z);
    assert_eq!(encoder_block_forward(&z, &TokenMatrix::empty(4), 0.7, &p).unwrap(), z);
}

#[test]
fn unconditional_block_reduces_to_conv_residual_form() {
    let mut p = BlockParams::random(BlockConfig::small(4), 7, 1.0);
    p.time_w1.fill(0.0);
    p.time_b1.fill(0.0);
    p.time_w2.fill(0.0);
    p.time_b2.fill(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let z = randn3(&mut rng, 4, 6, 6);
    let out = encoder_block_forward(&z, &TokenMatrix::empty(4), 2.0, &p).unwrap();
    let z1 = conv3x3(&z, &p.conv_in_w, &p.conv_in_b).unwrap().mapv(|v| v / (1.0 + (-v).exp()));
    let te = film_modulate(&z1, &Array1::ones(4), &Array1::zeros(4), &p).unwrap();
    let gca = guided_contextual_attention(&te, &p).unwrap();
    let expected = &z + &conv3x3(&gca, &p.out_conv_w, &p.out_conv_b).unwrap();
    let diff = (&out - &expected).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
    assert!(diff < 1e-12, "max deviation {diff}");
}

#[test]
fn metadata_changes_block_output() {
    let p = BlockParams::random(BlockConfig::small(4), 11, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let z = randn3(&mut rng, 4, 6, 6);
    let tokens = TokenMatrix::new(randn2(&mut rng, 2, 4)).unwrap();
    let a = encoder_block_forward(&z, &tokens, 0.1, &p).unwrap();
    let b = encoder_block_forward(&z, &TokenMatrix::empty(4), 0.1, &p).unwrap();
    assert!((&a - &b).mapv(f64::abs).sum() > 1e-6);
}

fn block_fd(mode: AttentionMode, with_tokens: bool) {
    for seed in SEEDS {
        let cfg = BlockConfig {
            attention: mode,
            ..BlockConfig::small(4)
        };
        let params = BlockParams::random(cfg, seed, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let z = randn3(&mut rng, 4, 5, 5);
        let g = randn3(&mut rng, 4, 5, 5);
        let tokens = if with_tokens {
            TokenMatrix::new(randn2(&mut rng, 3, 4)).unwrap()
        } else {
            TokenMatrix::empty(4)
        };
        let h = log_snr(0.2 * seed as f64);
        let (gz, grads) = encoder_block_backward(&z, &tokens, h, &params, &g).unwrap();
        let loss = |p: &BlockParams| (&encoder_block_forward(&z, &tokens, h, p).unwrap() * &g).sum();
        let mut names = vec![
            "conv_in_w", "conv_in_b", "time_w1", "time_b1", "time_w2", "time_b2", "te_conv_w", "te_conv_b", "gca_w1",
            "gca_b1", "gca_w2", "gca_b2", "out_conv_w", "out_conv_b",
        ];
        if with_tokens {
            names.extend(["w_q", "w_k", "w_v", "w_o"]);
        }
        check_params(&params, &grads, &names, &loss, 1e-4);
        check_input(&z, &gz, &|zz| (&encoder_block_forward(zz, &tokens, h, &params).unwrap() * &g).sum(), 1e-4);
    }
}

#[test]
fn block_gradients_match_finite_differences() {
    block_fd(AttentionMode::TextQuery, true);
}

#[test]
fn unconditional_block_gradients_match_finite_differences() {
    block_fd(AttentionMode::TextQuery, false);
}

#[test]
fn conventional_block_gradients_match_finite_differences() {
    block_fd(AttentionMode::Conventional, true);
}

#[test]
fn block_jacobian_vector_product_on_two_channels() {
    let cfg = BlockConfig {
        channels: 2,
        head_dim: 2,
        time_hidden: 4,
        gca_hidden: 2,
        attention: AttentionMode::TextQuery,
    };
    let params = BlockParams::random(cfg, 21, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let z = randn3(&mut rng, 2, 6, 6);
    let v = randn3(&mut rng, 2, 6, 6);
    let tokens = TokenMatrix::new(randn2(&mut rng, 2, 2)).unwrap();
    let h = log_snr(0.4);
    let f = |zz: &Array3<f64>| encoder_block_forward(zz, &tokens, h, &params).unwrap();
    let numeric = (&f(&(&z + &(&v * H))) - &f(&(&z - &(&v * H)))) / (2.0 * H);
    // Row i of the Jacobian is the vector-Jacobian product with e_i.
    let mut analytic = Array3::<f64>::zeros(z.dim());
    for i in 0..z.len() {
        let mut e = Array3::zeros(z.dim());
        e.as_slice_mut().unwrap()[i] = 1.0;
        let (row, _) = encoder_block_backward(&z, &tokens, h, &params, &e).unwrap();
        analytic.as_slice_mut().unwrap()[i] = (&row * &v).sum();
    }
    let e = rel_err(analytic.as_slice().unwrap(), numeric.as_slice().unwrap());
    assert!(e < 1e-3, "JVP relative error {e}");
}

#[test]
fn non_finite_features_are_numeric_errors() {
    let p = BlockParams::random(BlockConfig::small(2), 1, 1.0);
    let mut z = Array3::zeros((2, 4, 4));
    z[[0, 1, 1]] = f64::NAN;
    assert!(encoder_block_forward(&z, &TokenMatrix::empty(2), 0.0, &p).unwrap_err().is_numeric());
}

// ---------------------------------------------------------------------------
// Priors.

fn input<'a>(x: &'a Image, sigma: f64, cond: Option<&'a Image>, tokens: &'a TokenMatrix) -> PriorInput<'a> {
    PriorInput {
        x,
        sigma,
        step: 0,
        condition: cond,
        metadata: tokens,
    }
}

#[test]
fn zero_prior_returns_zero_fields() {
    let x = Image::from_fn(4, 5, |r, c| (r + c) as f64);
    let none = TokenMatrix::empty(8);
    let out = ZeroPrior.evaluate(&input(&x, 0.5, None, &none)).unwrap();
    assert!(out.velocity.as_slice().iter().chain(out.score.as_slice()).all(|&v| v == 0.0));
}

#[test]
fn tv_prior_points_toward_clean_constant() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let clean = Image::filled(16, 16, 0.5);
    let noisy = Image::from_fn(16, 16, |r, c| clean.get(r, c) + 0.2 * rng.sample::<f64, _>(StandardNormal));
    let prior = TvDenoiserPrior { weight: 0.5, iters: 50 };
    let none = TokenMatrix::empty(8);
    let out = prior.evaluate(&input(&noisy, 0.2, None, &none)).unwrap();
    let toward: f64 = out
        .velocity
        .as_slice()
        .iter()
        .zip(clean.as_slice().iter().zip(noisy.as_slice()))
        .map(|(v, (c, n))| v * (c - n))
        .sum();
    assert!(toward > 0.0);
    let ratio: Vec<f64> = out.score.as_slice().iter().zip(out.velocity.as_slice()).map(|(s, v)| s * 0.2 - v).collect();
    assert!(ratio.iter().all(|d| d.abs() < 1e-12));
}

#[test]
fn tv_denoise_reduces_total_variation() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let noisy = Image::from_fn(12, 12, |_, _| rng.sample(StandardNormal));
    let d = tv_denoise(&noisy, 0.3, 100).unwrap();
    let tv = lact_core::optim::total_variation;
    assert!(tv(&d) < tv(&noisy));
}

#[test]
fn tiny_net_reacts_to_metadata_and_condition() {
    let net = TinyBlockNet::random(BlockConfig::small(8), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Image::from_fn(16, 16, |_, _| rng.sample(StandardNormal));
    let cond = Image::from_fn(16, 16, |r, c| (r * c) as f64 / 256.0);
    let tokens = embed_prompt("CT Parameters: Scan angle is 90 degree", 8, 4, 0, false).unwrap();
    let none = TokenMatrix::empty(8);
    let with = net.evaluate(&input(&x, 0.3, None, &tokens)).unwrap();
    let without = net.evaluate(&input(&x, 0.3, None, &none)).unwrap();
    assert_ne!(with.velocity, without.velocity);
    let conditioned = net.evaluate(&input(&x, 0.3, Some(&cond), &none)).unwrap();
    assert_ne!(conditioned.velocity, without.velocity);
    assert!(with.velocity.all_finite() && with.score.all_finite());
    let odd = Image::zeros(15, 16);
    assert!(net.evaluate(&input(&odd, 0.3, None, &none)).is_err());
}

#[test]
fn toy_prior_dispatch() {
    let x = Image::filled(8, 8, 1.0);
    let none = TokenMatrix::empty(8);
    for kind in [PriorKind::Zero, PriorKind::TvDenoiser, PriorKind::TinyBlockNet] {
        let cfg = PriorConfig { kind, ..PriorConfig::default() };
        let prior = toy_prior(&cfg, 1).unwrap();
        let out = prior.evaluate(&input(&x, 0.1, None, &none)).unwrap();
        assert_eq!(out.velocity.shape(), (8, 8));
    }
}

// ---------------------------------------------------------------------------
// Metadata embedding and parameter files.

fn record(impressions: &str) -> MetadataRecord {
    MetadataRecord {
        scan_angle_deg: Some(90.0),
        exposure_time: Some("1000 ms".into()),
        tube_current: Some("200 mA".into()),
        slice_idx: Some(42),
        age: Some(63),
        sex: Some(Sex::Female),
        diseases: vec!["emphysema".into()],
        impressions: Some(impressions.into()),
        enabled_categories: vec![Category::Phy, Category::Demo, Category::Diag],
    }
}

#[test]
fn embedding_is_deterministic_and_normalised() {
    let a = embed_metadata(&record("mild changes"), 8, 4, 7, false).unwrap();
    let b = embed_metadata(&record("mild changes"), 8, 4, 7, false).unwrap();
    assert_eq!(a, b);
    assert_eq!((a.num_tokens(), a.dim()), (4, 8));
    for row in a.view().rows() {
        let n = row.dot(&row).sqrt();
        assert!(n == 0.0 || (n - 1.0).abs() < 1e-12);
    }
    let c = embed_metadata(&record("severe nodules"), 8, 4, 7, false).unwrap();
    assert_ne!(a, c);
}

#[test]
fn empty_prompt_handling() {
    let mut r = record("x");
    r.enabled_categories.clear();
    assert_eq!(embed_metadata(&r, 8, 4, 0, true).unwrap().num_tokens(), 0);
    assert!(embed_metadata(&r, 8, 4, 0, false).is_err());
}

#[test]
fn params_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.bin");
    let net = TinyBlockNet::random(BlockConfig::small(4), 3).unwrap();
    save_params(&net, &path).unwrap();
    let mut other = TinyBlockNet::random(BlockConfig::small(4), 4).unwrap();
    assert_ne!(net, other);
    load_params(&mut other, &path).unwrap();
    assert_eq!(net, other);
    let mut wrong = TinyBlockNet::random(BlockConfig::small(2), 4).unwrap();
    assert!(load_params(&mut wrong, &path).is_err());
}
