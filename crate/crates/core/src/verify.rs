//! Self-check suites run by `latte verify`: finite-difference gradient
//! checks, dense-oracle equivalence and structural invariants, all in f64.
//!
//! Suites run on the calling thread so a scoped
//! [`with_mutation`](crate::tensor::mutation::with_mutation) applies to them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{attention_core, AttentionOptions, RopePositions};
use crate::backbone::{init_params, randomize, AttnRole, BlockKind, CondMode, Denoiser, ModelConfig, Variant};
use crate::diffusion::{normal_kl, DiffusionSchedule};
use crate::embedding::{Conditioning, PatchMode, TemporalPos, VideoLatent};
use crate::error::{Error, Result};
use crate::gradcheck::{self, Stencil};
use crate::params::{Init, ParamStore};
use crate::reference::{self, flatten, grid_from_tensor, Reference};
use crate::tensor::Tensor;

pub const SUITES: [&str; 3] = ["grad", "oracle", "invariants"];

/// Tolerances of the acceptance contract.
pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_STEP: f64 = 1e-5;
/// Step for checks through the whole denoiser, paired with the five-point
/// stencil: at 1e-5 the three-point roundoff (about 1e-10) swamps gradient
/// entries below 1e-6, and at 1e-4 its truncation error is too large.
pub const DEEP_GRAD_STEP: f64 = 1e-4;
pub const ORACLE_TOL: f64 = 1e-10;
pub const GRAD_SEEDS: u64 = 5;

#[derive(Debug, Clone)]
pub struct CaseResult {
    pub suite: &'static str,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default)]
pub struct Report {
    pub cases: Vec<CaseResult>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CaseResult> {
        self.cases.iter().filter(|c| !c.passed)
    }
}

/// Runs every suite whose name contains `filter` (all when `None`).
pub fn run(filter: Option<&str>) -> Result<Report> {
    let selected: Vec<&str> = SUITES
        .iter()
        .copied()
        .filter(|s| filter.is_none_or(|f| s.contains(f)))
        .collect();
    if selected.is_empty() {
        return Err(Error::invalid(format!(
            "no suite matches `{}`; available: {}",
            filter.unwrap_or(""),
            SUITES.join(", ")
        )));
    }
    let mut report = Report::default();
    for suite in selected {
        let cases = match suite {
            "grad" => grad_suite()?,
            "oracle" => oracle_suite()?,
            _ => invariant_suite()?,
        };
        report.cases.extend(cases);
    }
    Ok(report)
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal(shape: &[usize], seed: u64) -> Tensor<f64> {
    Init::Normal(1.0).sample(shape, &mut rng(seed))
}

/// Width 8, two heads, 2×2 single-channel latent over 4 frames.
pub fn tiny_config(variant: Variant, cond: CondMode, pos: TemporalPos) -> ModelConfig {
    ModelConfig {
        variant,
        layers: 2,
        hidden: 8,
        heads: 2,
        patch_h: 1,
        patch_w: 1,
        patch_mode: PatchMode::Uniform,
        cond_mode: cond,
        temporal_pos: pos,
        frames: 4,
        latent_height: 2,
        latent_width: 2,
        latent_channels: 1,
        num_classes: None,
        mlp_ratio: 2,
    }
}

/// Store with every trainable value redrawn from N(0, 0.5²), so gates and
/// decoder are live.
pub fn random_store(config: &ModelConfig, seed: u64) -> Result<ParamStore<f64>> {
    let mut r = rng(seed);
    let mut store = init_params(config, &mut r)?;
    randomize(&mut store, 0.5, &mut r);
    Ok(store)
}

fn cond_label(c: CondMode) -> &'static str {
    match c {
        CondMode::SAdaln => "s_adaln",
        CondMode::AllTokens => "all_tokens",
    }
}

fn pos_label(p: TemporalPos) -> &'static str {
    match p {
        TemporalPos::Absolute => "absolute",
        TemporalPos::Rope => "rope",
    }
}

fn outcome(suite: &'static str, name: String, r: Result<(bool, String)>) -> CaseResult {
    match r {
        Ok((passed, detail)) => CaseResult {
            suite,
            name,
            passed,
            detail,
        },
        Err(e) => CaseResult {
            suite,
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

fn grad_outcome(
    name: String,
    params: Vec<(String, Tensor<f64>)>,
    loss: impl Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
) -> CaseResult {
    grad_outcome_with(name, params, loss, GRAD_STEP, Stencil::ThreePoint)
}

fn grad_outcome_with(
    name: String,
    params: Vec<(String, Tensor<f64>)>,
    loss: impl Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
    h: f64,
    stencil: Stencil,
) -> CaseResult {
    let r = gradcheck::check_with(&params, loss, h, stencil).map(|rep| {
        (
            rep.max_rel_err < GRAD_TOL,
            format!("max rel err {:.2e} at {} over {} values", rep.max_rel_err, rep.worst, rep.checked),
        )
    });
    outcome("grad", name, r)
}

/// `mean(out·w)` with fixed random weights `w`, so every output entry
/// matters. Averaging keeps the loss O(1), which keeps the roundoff of the
/// central difference (about ε·|L|/h) under the absolute error floor.
fn project(out: &Tensor<f64>, seed: u64) -> Result<Tensor<f64>> {
    out.mul(&normal(out.shape(), seed))?.mean()
}

fn op_grad_cases(out: &mut Vec<CaseResult>) {
    type OpFn = fn(&Tensor<f64>, &Tensor<f64>) -> Result<Tensor<f64>>;
    let ops: [(&str, [usize; 2], [usize; 2], OpFn); 10] = [
        ("softmax", [3, 4], [1, 1], |x, _| x.softmax(1)),
        ("masked_softmax", [3, 4], [1, 1], |x, _| x.masked_softmax(3)),
        ("layer_norm", [3, 5], [1, 1], |x, _| x.layer_norm(1e-6)),
        ("gelu", [2, 5], [1, 1], |x, _| x.gelu()),
        ("silu", [2, 5], [1, 1], |x, _| x.silu()),
        ("exp", [2, 3], [1, 1], |x, _| x.exp()),
        ("matmul", [3, 4], [4, 2], |a, b| a.matmul(b)),
        ("matmul_t", [3, 4], [2, 4], |a, b| a.matmul_t(b)),
        ("rope", [3, 4], [1, 1], |x, _| x.rope(&[0, 2, 5], 10_000.0)),
        ("reshape_permute_concat", [2, 6], [2, 6], |a, b| {
            let p = a.reshape(&[2, 3, 2])?.permute(&[2, 0, 1])?;
            Tensor::concat(&[p.narrow(1, 0, 1)?, b.reshape(&[2, 1, 6])?.narrow(2, 1, 3)?], 1)
        }),
    ];
    for (name, sa, sb, f) in ops {
        for seed in 0..GRAD_SEEDS {
            let a = normal(&sa, seed);
            let b = normal(&sb, seed + 100);
            let params = vec![("a".to_string(), a), ("b".to_string(), b)];
            out.push(grad_outcome(format!("op/{name}/seed{seed}"), params, |l| {
                project(&f(&l[0], &l[1])?, 1000 + seed)
            }));
        }
    }
    for seed in 0..GRAD_SEEDS {
        let q = normal(&[2, 3, 8], seed);
        let k = normal(&[2, 4, 8], seed + 1);
        let v = normal(&[2, 4, 8], seed + 2);
        let opts = AttentionOptions {
            rope: Some(RopePositions {
                query: vec![0, 1, 2],
                key: vec![0, 1, 2, 3],
            }),
            key_valid: Some(3),
        };
        let params = vec![("q".to_string(), q), ("k".to_string(), k), ("v".to_string(), v)];
        out.push(grad_outcome(format!("op/attention/seed{seed}"), params, |l| {
            project(&attention_core(&l[0], &l[1], &l[2], 2, &opts)?.0, 2000 + seed)
        }));
    }
}

/// Store whose entries named in `names` are the given leaves.
fn substitute(store: &ParamStore<f64>, names: &[String], leaves: &[Tensor<f64>]) -> Result<ParamStore<f64>> {
    let mut s = store.clone();
    for (n, t) in names.iter().zip(leaves) {
        s.replace(n, t.clone())?;
    }
    Ok(s)
}

fn block_grad_cases(out: &mut Vec<CaseResult>) -> Result<()> {
    let kinds = [
        ("spatial", Variant::Image, 0),
        ("temporal", Variant::Interleaved, 1),
        ("sequential", Variant::Sequential, 0),
        ("split_head", Variant::SplitHead, 0),
    ];
    for (label, variant, index) in kinds {
        for cond in [CondMode::SAdaln, CondMode::AllTokens] {
            for pos in [TemporalPos::Absolute, TemporalPos::Rope] {
                if variant == Variant::Image && pos == TemporalPos::Rope {
                    continue;
                }
                let config = tiny_config(variant, cond, pos);
                for seed in 0..GRAD_SEEDS {
                    let store = random_store(&config, seed)?;
                    let prefix = format!("blocks.{index}.");
                    let mut params: Vec<(String, Tensor<f64>)> = store
                        .trainable()
                        .filter(|(n, _)| n.starts_with(&prefix))
                        .map(|(n, t)| (n.to_string(), t.detach()))
                        .collect();
                    let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
                    let n_f = if variant == Variant::Image { 1 } else { 3 };
                    let valid = if n_f > 1 { 2 } else { 1 };
                    params.push(("input".into(), normal(&[n_f, 2, 8], seed + 10)));
                    params.push(("cond".into(), normal(&[8], seed + 20)));
                    let name = format!("block/{label}/{}/{}/seed{seed}", cond_label(cond), pos_label(pos));
                    out.push(grad_outcome(name, params, |l| {
                        let k = names.len();
                        let s = substitute(&store, &names, &l[..k])?;
                        let y = Denoiser::new(&config, &s).block(index, &l[k], &l[k + 1], valid)?;
                        project(&y, 3000 + seed)
                    }));
                }
            }
        }
    }
    Ok(())
}

fn embed_decode_grad_cases(out: &mut Vec<CaseResult>) -> Result<()> {
    for (label, mode) in [("uniform", PatchMode::Uniform), ("compression", PatchMode::Compression { stride: 2 })] {
        for cond in [CondMode::SAdaln, CondMode::AllTokens] {
            let mut config = tiny_config(Variant::Interleaved, cond, TemporalPos::Absolute);
            config.patch_mode = mode;
            config.num_classes = Some(3);
            for seed in 0..GRAD_SEEDS {
                let store = random_store(&config, seed)?;
                let mut params: Vec<(String, Tensor<f64>)> = store
                    .trainable()
                    .filter(|(n, _)| !n.starts_with("blocks."))
                    .map(|(n, t)| (n.to_string(), t.detach()))
                    .collect();
                let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
                params.push(("latent".into(), normal(&config.latent_shape().dims(), seed + 30)));
                // mid-range step, so no sinusoid feature is vanishingly small
                let c = Conditioning {
                    timestep: 517,
                    class_label: Some(1),
                };
                let name = format!("embed_decode/{label}/{}/seed{seed}", cond_label(cond));
                let loss = |l: &[Tensor<f64>]| {
                    let k = names.len();
                    let s = substitute(&store, &names, &l[..k])?;
                    let v = VideoLatent::new(l[k].clone())?;
                    let (eps, var) = Denoiser::new(&config, &s).forward(&v, &c, None)?;
                    project(eps.tensor(), 4000 + seed)?.add(&project(var.tensor(), 5000 + seed)?)
                };
                out.push(grad_outcome_with(name, params, loss, DEEP_GRAD_STEP, Stencil::FivePoint));
            }
        }
    }
    Ok(())
}

fn grad_suite() -> Result<Vec<CaseResult>> {
    let mut out = Vec::new();
    op_grad_cases(&mut out);
    block_grad_cases(&mut out)?;
    embed_decode_grad_cases(&mut out)?;
    Ok(out)
}

fn rows(x: &Tensor<f64>, b: usize) -> Vec<Vec<f64>> {
    let s = x.shape();
    let (len, d) = (s[1], s[2]);
    (0..len).map(|i| x.data()[(b * len + i) * d..(b * len + i + 1) * d].to_vec()).collect()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Softmax and layer norm against their scalar definitions.
fn elementwise_oracles(out: &mut Vec<CaseResult>) {
    let r = (|| {
        let mut worst: f64 = 0.0;
        for seed in 0..20 {
            let x = normal(&[3, 5], seed).scale(3.0)?;
            let got = x.softmax(1)?;
            for (i, row) in x.data().chunks(5).enumerate() {
                worst = worst.max(max_diff(&got.data()[i * 5..(i + 1) * 5], &reference::softmax(row)));
            }
        }
        Ok((worst < ORACLE_TOL, format!("max abs diff {worst:.2e}")))
    })();
    out.push(outcome("oracle", "softmax".into(), r));
    let r = (|| {
        let mut worst: f64 = 0.0;
        for seed in 0..20 {
            let x = normal(&[3, 6], seed).add_scalar(2.0)?;
            let got = x.layer_norm(1e-6)?;
            for (i, row) in x.data().chunks(6).enumerate() {
                worst = worst.max(max_diff(&got.data()[i * 6..(i + 1) * 6], &reference::layer_norm(row, 1e-6)));
            }
        }
        Ok((worst < ORACLE_TOL, format!("max abs diff {worst:.2e}")))
    })();
    out.push(outcome("oracle", "layer_norm".into(), r));
}

/// Exhaustive small sweep of the attention kernel: up to 4 query and key
/// tokens, 1 or 2 heads, widths up to 8, with and without rotary positions
/// and key masks.
fn attention_oracle(out: &mut Vec<CaseResult>) {
    let r = (|| {
        let mut worst: f64 = 0.0;
        let mut n = 0;
        let mut seed = 0;
        for heads in 1..=2usize {
            for dh in [2usize, 4] {
                let d = heads * dh;
                for sq in 1..=4usize {
                    for sk in 1..=4usize {
                        for rope in [false, true] {
                            for valid in 1..=sk {
                                seed += 1;
                                let q = normal(&[2, sq, d], seed);
                                let k = normal(&[2, sk, d], seed + 7919);
                                let v = normal(&[2, sk, d], seed + 15_485);
                                let qp: Vec<usize> = (0..sq).map(|i| i + 1).collect();
                                let kp: Vec<usize> = (0..sk).collect();
                                let opts = AttentionOptions {
                                    rope: rope.then(|| RopePositions {
                                        query: qp.clone(),
                                        key: kp.clone(),
                                    }),
                                    key_valid: (valid < sk).then_some(valid),
                                };
                                let (mixed, probs) = attention_core(&q, &k, &v, heads, &opts)?;
                                for b in 0..2 {
                                    let (want, w) = reference::attention(
                                        &rows(&q, b),
                                        &rows(&k, b),
                                        &rows(&v, b),
                                        heads,
                                        rope.then_some((qp.as_slice(), kp.as_slice())),
                                        opts.key_valid,
                                    );
                                    let got = &mixed.data()[b * sq * d..(b + 1) * sq * d];
                                    worst = worst.max(max_diff(got, &want.concat()));
                                    let per = heads * sq * sk;
                                    let gw = &probs.data()[b * per..(b + 1) * per];
                                    let ww: Vec<f64> = w.into_iter().flatten().flatten().collect();
                                    worst = worst.max(max_diff(gw, &ww));
                                    n += 1;
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok((worst < ORACLE_TOL, format!("{n} cases, max abs diff {worst:.2e}")))
    })();
    out.push(outcome("oracle", "attention".into(), r));
}

/// Every block type against the dense recomputation over frame and
/// location counts up to 4, with and without appended frames.
fn block_oracles(out: &mut Vec<CaseResult>) -> Result<()> {
    for variant in [Variant::Image, Variant::Interleaved, Variant::Sequential, Variant::SplitHead] {
        for cond in [CondMode::SAdaln, CondMode::AllTokens] {
            for pos in [TemporalPos::Absolute, TemporalPos::Rope] {
                let name = format!("block/{variant:?}/{}/{}", cond_label(cond), pos_label(pos)).to_lowercase();
                let r = (|| {
                    let mut worst: f64 = 0.0;
                    let mut n = 0;
                    for heads in [1usize, 2] {
                        if variant == Variant::SplitHead && heads == 1 {
                            continue;
                        }
                        let mut config = tiny_config(variant, cond, pos);
                        config.heads = heads;
                        let store = random_store(&config, heads as u64 * 31 + variant as u64)?;
                        let model = Denoiser::new(&config, &store);
                        let c = model.condition(&Conditioning::unconditional(7))?;
                        let oracle = Reference::new(&config, &store);
                        let max_frames = if variant == Variant::Image { 1 } else { 4 };
                        for n_f in 1..=max_frames {
                            for t in 1..=4usize {
                                for valid in (1..=n_f).rev().take(2) {
                                    let x = normal(&[n_f, t, 8], (n_f * 10 + t + valid * 100) as u64);
                                    for index in 0..config.layers {
                                        let got = model.block(index, &x, &c, valid)?;
                                        let want = oracle.block(index, &grid_from_tensor(&x), c.data(), valid)?;
                                        worst = worst.max(max_diff(got.data(), &flatten(&want)));
                                        n += 1;
                                    }
                                }
                            }
                        }
                    }
                    Ok((worst < ORACLE_TOL, format!("{n} cases, max abs diff {worst:.2e}")))
                })();
                out.push(outcome("oracle", name, r));
            }
        }
    }
    Ok(())
}

fn oracle_suite() -> Result<Vec<CaseResult>> {
    let mut out = Vec::new();
    elementwise_oracles(&mut out);
    attention_oracle(&mut out);
    block_oracles(&mut out)?;
    Ok(out)
}

fn invariant_suite() -> Result<Vec<CaseResult>> {
    let mut out = Vec::new();

    let r = (|| {
        let mut r = rng(1);
        let mut worst: f64 = 0.0;
        for seed in 0..50 {
            let x = normal(&[2, 6], seed).scale(4.0)?;
            let shift: f64 = r.gen_range(-50.0..50.0);
            let a = x.softmax(1)?;
            let b = x.add_scalar(shift)?.softmax(1)?;
            worst = worst.max(max_diff(a.data(), b.data()));
            for row in a.data().chunks(6) {
                worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
        Ok((worst < 1e-12, format!("max deviation {worst:.2e}")))
    })();
    out.push(outcome("invariants", "softmax_shift_and_normalization".into(), r));

    for variant in [Variant::Interleaved, Variant::LateFusion, Variant::Sequential, Variant::SplitHead] {
        let r = (|| {
            let config = tiny_config(variant, CondMode::SAdaln, TemporalPos::Absolute);
            let store: ParamStore<f64> = init_params(&config, &mut rng(3))?;
            let v = VideoLatent::new(normal(&config.latent_shape().dims(), 4))?;
            let (eps, var) = Denoiser::new(&config, &store).forward(&v, &Conditioning::unconditional(5), None)?;
            let zero = eps.tensor().data().iter().chain(var.tensor().data()).all(|&x| x == 0.0);
            Ok((zero, "s_adaln zero init gives exactly zero output".into()))
        })();
        out.push(outcome("invariants", format!("zero_init_output/{variant:?}").to_lowercase(), r));
    }

    for cond in [CondMode::SAdaln, CondMode::AllTokens] {
        for variant in [Variant::Interleaved, Variant::Sequential, Variant::SplitHead] {
            let r = (|| {
                let config = tiny_config(variant, cond, TemporalPos::Rope);
                let store = random_store(&config, 9)?;
                let mut shape = config.latent_shape();
                shape.frames += 2;
                let v = VideoLatent::new(normal(&shape.dims(), 10))?;
                let model = Denoiser::traced(&config, &store);
                model.forward(&v, &Conditioning::unconditional(3), Some(config.frames))?;
                let mut leaked = 0usize;
                let mut seen = 0usize;
                for rec in model.take_trace().iter().filter(|r| r.role == AttnRole::Temporal) {
                    let s = rec.probs.shape();
                    let sk = s[s.len() - 1];
                    let keys_appended = sk - 2;
                    for row in rec.probs.data().chunks(sk) {
                        seen += 1;
                        leaked += row[keys_appended..].iter().filter(|&&w| w != 0.0).count();
                    }
                }
                Ok((
                    leaked == 0 && seen > 0,
                    format!("{leaked} nonzero weights on appended frames over {seen} query rows"),
                ))
            })();
            out.push(outcome(
                "invariants",
                format!("appended_frames_masked/{variant:?}/{}", cond_label(cond)).to_lowercase(),
                r,
            ));
        }
    }

    let r = (|| {
        let s = DiffusionSchedule::linear(1000)?;
        let mut ok = true;
        for t in 1..=1000 {
            let pv = s.posterior_variance(t)?;
            ok &= pv > 0.0 && pv <= s.beta(t)? * (1.0 + 1e-12);
            if t > 1 {
                ok &= s.alpha_bar(t)? < s.alpha_bar(t - 1)?;
            }
        }
        Ok((ok, "alpha_bar decreasing, posterior variance in (0, beta]".into()))
    })();
    out.push(outcome("invariants", "schedule".into(), r));

    let r = {
        let mut r = rng(5);
        let mut min = f64::INFINITY;
        for _ in 0..10_000 {
            let k = normal_kl(
                r.gen_range(-3.0..3.0),
                r.gen_range(-5.0..5.0),
                r.gen_range(-3.0..3.0),
                r.gen_range(-5.0..5.0),
            );
            min = min.min(k);
        }
        Ok((min >= 0.0, format!("min KL {min:.2e}")))
    };
    out.push(outcome("invariants", "kl_nonnegative".into(), r));

    let r = {
        let config = tiny_config(Variant::Interleaved, CondMode::SAdaln, TemporalPos::Absolute);
        let plan = config.block_plan();
        let ok = plan.len() == 2 && plan[0] == BlockKind::Spatial && plan[1] == BlockKind::Temporal;
        Ok((ok, format!("{plan:?}")))
    };
    out.push(outcome("invariants", "interleaved_plan".into(), r));
    Ok(out)
}
