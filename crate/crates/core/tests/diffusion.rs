mod common;

use common::*;
use latte_core::backbone::{init_params, CondMode, Denoiser, ModelConfig, Variant};
use latte_core::diffusion::{
    loss_simple, loss_vlb, normal_kl, p_sample_loop, q_sample, training_losses, DiffusionSchedule, EmaState,
    ScheduleConfig,
};
use latte_core::embedding::{Conditioning, LatentShape, TemporalPos, VideoLatent};
use latte_core::params::ParamStore;
use latte_core::tensor::Tensor;
use latte_core::Error;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn row(values: Vec<f64>) -> VideoLatent<f64> {
    let n = values.len();
    VideoLatent::from_vec(values, LatentShape::new(1, 1, n, 1)).unwrap()
}

fn constant(n: usize, v: f64) -> VideoLatent<f64> {
    row(vec![v; n])
}

fn gaussian_row(n: usize, seed: u64) -> VideoLatent<f64> {
    let mut r = rng(seed);
    row((0..n).map(|_| r.sample(StandardNormal)).collect())
}

#[test]
fn q_sample_examples() {
    let s = DiffusionSchedule::from_betas(vec![0.75]).unwrap();
    let z = q_sample(&s, &constant(5, 0.0), 1, &constant(5, 1.0)).unwrap();
    for v in z.tensor().data() {
        assert!((v - 0.75f64.sqrt()).abs() < 1e-15);
    }
    let z0 = gaussian_row(6, 1);
    let eps = gaussian_row(6, 2);
    let nearly_clean = DiffusionSchedule::from_betas(vec![1e-14]).unwrap();
    let z = q_sample(&nearly_clean, &z0, 1, &eps).unwrap();
    assert!(max_abs_diff(z.tensor().data(), z0.tensor().data()) < 1e-6);
    let nearly_noise = DiffusionSchedule::from_betas(vec![1.0 - 1e-14]).unwrap();
    let z = q_sample(&nearly_noise, &z0, 1, &eps).unwrap();
    assert!(max_abs_diff(z.tensor().data(), eps.tensor().data()) < 1e-6);
    assert!(q_sample(&s, &z0, 0, &eps).is_err());
    assert!(q_sample(&s, &z0, 2, &eps).is_err());
}

#[test]
fn marginal_variance_is_unit_at_every_step() {
    let s = DiffusionSchedule::linear(1000).unwrap();
    let n = 100_000;
    let z0 = gaussian_row(n, 10);
    let eps = gaussian_row(n, 11);
    for t in 1..=s.steps() {
        let z = q_sample(&s, &z0, t, &eps).unwrap();
        let d = z.tensor().data();
        let mean = d.iter().sum::<f64>() / n as f64;
        let var = d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
        assert!((var - 1.0).abs() < 0.05, "t={t}: {var}");
    }
}

#[test]
fn schedule_rejects_bad_betas() {
    assert!(DiffusionSchedule::from_betas(vec![]).is_err());
    assert!(DiffusionSchedule::from_betas(vec![0.1, 0.0]).is_err());
    assert!(DiffusionSchedule::from_betas(vec![1.0]).is_err());
    assert!(DiffusionSchedule::linear(0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn schedule_invariants(steps in 1usize..300, start in 1e-5f64..1e-2, span in 0.0f64..0.2) {
        let s = DiffusionSchedule::from_config(&ScheduleConfig { steps, beta_start: start, beta_end: start + span }).unwrap();
        prop_assert!((s.alpha_bar(1).unwrap() - (1.0 - s.beta(1).unwrap())).abs() < 1e-15);
        for t in 1..=steps {
            let b = s.beta(t).unwrap();
            prop_assert!(b > 0.0 && b < 1.0);
            let pv = s.posterior_variance(t).unwrap();
            prop_assert!(pv > 0.0 && pv <= b * (1.0 + 1e-12), "t={} pv={} beta={}", t, pv, b);
            if t > 1 {
                prop_assert!(s.alpha_bar(t).unwrap() < s.alpha_bar(t - 1).unwrap());
            }
        }
    }
}

#[test]
fn scaled_schedule_keeps_endpoints_proportional() {
    let c = ScheduleConfig::scaled(100);
    assert_eq!(c.steps, 100);
    assert!((c.beta_start - 1e-3).abs() < 1e-15);
    assert!((c.beta_end - 0.2).abs() < 1e-12);
}

#[test]
fn kl_examples() {
    assert!((normal_kl(0.0, 0.0, 1.0, 0.0) - 0.5).abs() < 1e-15);
    assert_eq!(normal_kl(0.3, -1.2, 0.3, -1.2), 0.0);
    // KL(N(0,1) ‖ N(0,4)) = ½(¼ − 1 + ln 4)
    let expect = 0.5 * (0.25 - 1.0 + 4f64.ln());
    assert!((normal_kl(0.0, 0.0, 0.0, 4f64.ln()) - expect).abs() < 1e-14);
}

#[test]
fn kl_matches_monte_carlo() {
    let mut r = rng(21);
    let dim = 8;
    let p: Vec<(f64, f64, f64, f64)> = (0..dim)
        .map(|_| {
            (
                r.gen_range(-1.0..1.0),
                r.gen_range(-1.0..1.0),
                r.gen_range(-1.0..1.0),
                r.gen_range(-1.0..1.0),
            )
        })
        .collect();
    let analytic: f64 = p.iter().map(|&(m1, l1, m2, l2)| normal_kl(m1, l1, m2, l2)).sum();
    let log_density = |x: f64, m: f64, lv: f64| -0.5 * (lv + (x - m) * (x - m) / lv.exp());
    let n = 1_000_000;
    let (mut sum, mut sum2) = (0.0, 0.0);
    for _ in 0..n {
        let mut lr = 0.0;
        for &(m1, l1, m2, l2) in &p {
            let z: f64 = r.sample(StandardNormal);
            let x = m1 + (0.5 * l1).exp() * z;
            lr += log_density(x, m1, l1) - log_density(x, m2, l2);
        }
        sum += lr;
        sum2 += lr * lr;
    }
    let mean = sum / n as f64;
    let se = ((sum2 / n as f64 - mean * mean) / n as f64).sqrt();
    assert!((mean - analytic).abs() < 3.0 * se, "mc {mean} ± {se} vs {analytic}");
}

#[test]
fn vlb_zero_when_model_matches_posterior() {
    let s = DiffusionSchedule::linear(50).unwrap();
    let z0 = gaussian_row(16, 3);
    let eps = gaussian_row(16, 4);
    for t in 2..=50 {
        let zt = q_sample(&s, &z0, t, &eps).unwrap();
        // true noise recovers z0 exactly; var_raw = −1 selects the posterior variance
        let l = loss_vlb(&s, &z0, &zt, t, &eps, &constant(16, -1.0)).unwrap();
        assert!(l.item().unwrap().abs() < 1e-12, "t={t}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn vlb_nonnegative(seed in any::<u64>(), t in 1usize..=20, spread in 0.0f64..3.0) {
        let s = DiffusionSchedule::linear(20).unwrap();
        let z0 = row(gaussian_row(8, seed).tensor().data().iter().map(|v| v.clamp(-1.0, 1.0)).collect());
        let eps = gaussian_row(8, seed ^ 1);
        let zt = q_sample(&s, &z0, t, &eps).unwrap();
        let pred = row(gaussian_row(8, seed ^ 2).tensor().data().iter().map(|v| v * spread).collect());
        let var = row(gaussian_row(8, seed ^ 3).tensor().data().iter().map(|v| v.clamp(-1.0, 1.0)).collect());
        let l = loss_vlb(&s, &z0, &zt, t, &pred, &var).unwrap().item().unwrap();
        prop_assert!(l >= 0.0, "{}", l);
    }
}

#[test]
fn vlb_rejects_bad_timestep() {
    let s = DiffusionSchedule::linear(4).unwrap();
    let z = gaussian_row(4, 0);
    assert!(loss_vlb(&s, &z, &z, 0, &z, &z).is_err());
    assert!(loss_vlb(&s, &z, &z, 5, &z, &z).is_err());
}

fn tiny_model() -> (ModelConfig, ParamStore<f64>) {
    let config = tiny(Variant::Interleaved, CondMode::SAdaln, TemporalPos::Absolute);
    let store = random_store(&config, 5);
    (config, store)
}

#[test]
fn vlb_stop_gradient_is_exact() {
    let (config, store) = tiny_model();
    let s = DiffusionSchedule::linear(10).unwrap();
    let shape = config.latent_shape();
    let z0 = latent(shape, 6);
    let eps = latent(shape, 7);
    let channels = config.latent_channels;
    for t in [1, 4, 10] {
        let zt = q_sample(&s, &z0, t, &eps).unwrap();
        let eps_leaf = VideoLatent::new(normal(&shape.dims(), 8).requires_grad()).unwrap();
        let (pred, var) = Denoiser::new(&config, &store)
            .forward(&zt, &Conditioning::unconditional(t), None)
            .unwrap();
        let l = loss_vlb(&s, &z0, &zt, t, &pred, &var).unwrap();
        let g = l.backward().unwrap();
        // eps columns of the decoder only feed the mean path
        let w = store.get("final.linear.weight").unwrap();
        let gw = g.wrt(w);
        let out = w.shape()[1];
        for (i, v) in gw.iter().enumerate() {
            if i % out < channels {
                assert_eq!(*v, 0.0, "t={t} weight {i}");
            }
        }
        assert!(gw.iter().any(|v| *v != 0.0), "variance head gets gradient");
        let gb = g.wrt(store.get("final.linear.bias").unwrap());
        assert!(gb[..channels].iter().all(|v| *v == 0.0));
        // a leaf fed straight in as the mean gets nothing either
        let l = loss_vlb(&s, &z0, &zt, t, &eps_leaf, &var).unwrap();
        assert!(l.backward().unwrap().get(eps_leaf.tensor()).is_none());
    }
}

#[test]
fn loss_simple_examples() {
    let eps = gaussian_row(10_000, 9);
    assert_eq!(loss_simple(&eps, &eps).unwrap().item().unwrap(), 0.0);

    let config = tiny(Variant::Interleaved, CondMode::SAdaln, TemporalPos::Absolute);
    let store: ParamStore<f64> = init_params(&config, &mut rng(0)).unwrap();
    let s = DiffusionSchedule::linear(100).unwrap();
    let shape = LatentShape::new(4, 2, 2, 1);
    let mut total = 0.0;
    let mut count = 0.0;
    for seed in 0..400 {
        let z0 = latent(shape, 1000 + seed);
        let eps = latent(shape, 2000 + seed);
        let model = Denoiser::new(&config, &store);
        let out = training_losses(
            &s,
            |z, t| model.forward(z, &Conditioning::unconditional(t), None),
            &z0,
            50,
            &eps,
            0.0,
        )
        .unwrap();
        let expect = eps.tensor().data().iter().map(|e| e * e).sum::<f64>() / shape.numel() as f64;
        assert!((out.simple - expect).abs() < 1e-15);
        total += out.simple;
        count += 1.0;
    }
    assert!((total / count - 1.0).abs() < 0.1, "{}", total / count);
}

#[test]
fn loss_simple_matches_recomputation() {
    let (config, store) = tiny_model();
    let s = DiffusionSchedule::linear(10).unwrap();
    let shape = config.latent_shape();
    let z0 = latent(shape, 31);
    let eps = latent(shape, 32);
    let model = Denoiser::new(&config, &store);
    let mut saved = None;
    let out = training_losses(
        &s,
        |z, t| {
            let r = model.forward(z, &Conditioning::unconditional(t), None)?;
            saved = Some(r.0.tensor().to_f64_vec());
            Ok(r)
        },
        &z0,
        7,
        &eps,
        0.001,
    )
    .unwrap();
    let pred = saved.unwrap();
    let mut acc = 0.0;
    for (p, e) in pred.iter().zip(eps.tensor().data()) {
        acc += (e - p) * (e - p);
    }
    let expect = acc / pred.len() as f64;
    assert!((out.simple - expect).abs() < 1e-14);
    assert!((out.total.item().unwrap() - (out.simple + 0.001 * out.vlb)).abs() < 1e-14);
}

fn zero_model(z: &VideoLatent<f64>, _t: usize) -> latte_core::Result<(VideoLatent<f64>, VideoLatent<f64>)> {
    let zeros = VideoLatent::new(Tensor::zeros(z.tensor().shape()))?;
    Ok((zeros.clone(), zeros))
}

#[test]
fn single_step_sampler_returns_mean() {
    let s = DiffusionSchedule::from_betas(vec![0.3]).unwrap();
    let shape = LatentShape::new(1, 2, 3, 1);
    let out = p_sample_loop(&s, zero_model, shape, 17).unwrap();
    // z1 is the first draw of the seeded stream
    let mut start = None;
    p_sample_loop(
        &s,
        |z: &VideoLatent<f64>, t| {
            start = Some(z.tensor().to_f64_vec());
            zero_model(z, t)
        },
        shape,
        17,
    )
    .unwrap();
    let start = start.unwrap();
    // with ε̂ = 0 and T = 1 the mean is z1 / √ᾱ₁
    for (o, z) in out.tensor().data().iter().zip(&start) {
        assert!((o - z / 0.7f64.sqrt()).abs() < 1e-14);
    }
    assert_eq!(out.tensor().data(), p_sample_loop(&s, zero_model, shape, 17).unwrap().tensor().data());
}

#[test]
fn sampler_is_deterministic_per_seed() {
    let (config, store) = tiny_model();
    let s = DiffusionSchedule::linear(6).unwrap();
    let model = Denoiser::new(&config, &store);
    let run = |seed| {
        p_sample_loop(
            &s,
            |z: &VideoLatent<f64>, t| model.forward(z, &Conditioning::unconditional(t), None),
            config.latent_shape(),
            seed,
        )
        .unwrap()
        .tensor()
        .to_vec()
    };
    let a = run(3);
    assert_eq!(a, run(3));
    assert_ne!(a, run(4));
}

#[test]
fn two_step_sampler_matches_hand_trace() {
    let betas = vec![0.1, 0.2];
    let s = DiffusionSchedule::from_betas(betas.clone()).unwrap();
    let shape = LatentShape::new(1, 1, 1, 1);
    let outputs = |t: usize| if t == 2 { (0.4, 0.5) } else { (-0.3, -0.2) };
    let model = |z: &VideoLatent<f64>, t: usize| {
        let (e, v) = outputs(t);
        Ok((row_of(z, e), row_of(z, v)))
    };
    let got = p_sample_loop(&s, model, shape, 99).unwrap().tensor().data()[0];

    // replay the same random stream by hand
    let mut r = rng(99);
    let z2: f64 = r.sample(StandardNormal);
    let noise: f64 = r.sample(StandardNormal);
    let (b1, b2) = (betas[0], betas[1]);
    let (a1, a2) = (1.0 - b1, 1.0 - b2);
    let (ab1, ab2) = (a1, a1 * a2);
    let post2 = (1.0 - ab1) / (1.0 - ab2) * b2;
    let mean_at = |t: usize, z: f64, e: f64| {
        let (ab, ab_prev, b, a) = if t == 2 { (ab2, ab1, b2, a2) } else { (ab1, 1.0, b1, a1) };
        let z0 = (z - (1.0 - ab).sqrt() * e) / ab.sqrt();
        let c0 = ab_prev.sqrt() * b / (1.0 - ab);
        let ct = a.sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        c0 * z0 + ct * z
    };
    let (e2, v2) = outputs(2);
    let frac = (v2 + 1.0) / 2.0;
    let lv2 = frac * b2.ln() + (1.0 - frac) * post2.ln();
    let z1 = mean_at(2, z2, e2) + (0.5 * lv2).exp() * noise;
    let expect = mean_at(1, z1, outputs(1).0);
    assert!((got - expect).abs() < 1e-13, "{got} vs {expect}");
}

fn row_of(like: &VideoLatent<f64>, v: f64) -> VideoLatent<f64> {
    VideoLatent::new(Tensor::full(like.tensor().shape(), v)).unwrap()
}

#[test]
fn sampler_reports_failing_step() {
    let s = DiffusionSchedule::from_betas(vec![0.5; 5]).unwrap();
    let shape = LatentShape::new(1, 1, 2, 1);
    // at t = 3 the implied z0 overflows
    let model = |z: &VideoLatent<f64>, t: usize| {
        let e = if t == 3 { f64::MAX } else { 0.0 };
        Ok((row_of(z, e), row_of(z, 0.0)))
    };
    match p_sample_loop(&s, model, shape, 0) {
        Err(Error::SamplerStep { step, .. }) => assert_eq!(step, 3),
        other => panic!("expected a step error, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn sampler_recovers_gaussian_toy_data() {
    // data N(mu, sd²); the exact posterior-mean noise prediction is analytic
    let (mu, sd) = (0.5, 0.3);
    let s = DiffusionSchedule::linear(1000).unwrap();
    let n = 4000;
    let shape = LatentShape::new(1, 1, n, 1);
    let ideal = |z: &VideoLatent<f64>, t: usize| {
        let ab = s.alpha_bar(t)?;
        let denom = ab * sd * sd + 1.0 - ab;
        let e: Vec<f64> = z
            .tensor()
            .data()
            .iter()
            .map(|&x| (1.0 - ab).sqrt() * (x - ab.sqrt() * mu) / denom)
            .collect();
        Ok((VideoLatent::from_vec(e, shape)?, row_of(z, -1.0)))
    };
    let out = p_sample_loop(&s, ideal, shape, 2024).unwrap();
    let d = out.tensor().data();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    let se_mean = sd / (n as f64).sqrt();
    let se_var = sd * sd * (2.0 / (n - 1) as f64).sqrt();
    assert!((mean - mu).abs() < 3.0 * se_mean, "mean {mean}");
    assert!((var - sd * sd).abs() < 3.0 * se_var, "var {var}");
}

fn single(value: f64) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    s.insert("w", Tensor::full(&[3], value), true);
    s
}

#[test]
fn ema_examples() {
    let mut ema = EmaState::new(&single(0.0), 0.9).unwrap();
    ema.update(&single(1.0)).unwrap();
    for v in ema.shadow.get("w").unwrap().data() {
        assert!((v - 0.1).abs() < 1e-15);
    }
    let mut fixed = EmaState::new(&single(0.7), 0.9999).unwrap();
    fixed.update(&single(0.7)).unwrap();
    assert!(fixed.shadow.get("w").unwrap().data().iter().all(|v| (v - 0.7).abs() < 1e-15));

    let (s0, p, d) = (2.0, -0.5, 0.8);
    let mut ema = EmaState::new(&single(s0), d).unwrap();
    for _ in 0..3 {
        ema.update(&single(p)).unwrap();
    }
    let closed = d * d * d * s0 + (1.0 - d * d * d) * p;
    assert!(ema.shadow.get("w").unwrap().data().iter().all(|v| (v - closed).abs() < 1e-14));

    assert!(EmaState::new(&single(0.0), 1.0).is_err());
    let mut wrong = ParamStore::new();
    wrong.insert("w", Tensor::full(&[4], 0.0), true);
    assert!(ema.update(&wrong).is_err());
}

#[test]
fn ema_mirrors_model_shapes() {
    let config = ModelConfig::desk();
    let store: ParamStore<f32> = init_params(&config, &mut rng(1)).unwrap();
    let ema = EmaState::new(&store, 0.9999).unwrap();
    for (name, t) in store.trainable() {
        assert_eq!(ema.shadow.get(name).unwrap().shape(), t.shape());
    }
}
