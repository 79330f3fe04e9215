use rand::Rng;

use super::config::{BlockKind, CondMode, ModelConfig};
use crate::embedding::{positional_embedding, PatchMode, TIMESTEP_FREQ_DIM};
use crate::error::Result;
use crate::params::{alloc_linear, Init, ParamStore};
use crate::tensor::{Element, Tensor};

const PROJ: Init = Init::TruncNormal(0.02);

fn alloc_norm<T: Element, R: Rng + ?Sized>(store: &mut ParamStore<T>, prefix: &str, d: usize, rng: &mut R) {
    store.insert(format!("{prefix}.gamma"), Init::Ones.sample(&[d], rng), true);
    store.insert(format!("{prefix}.beta"), Init::Zeros.sample(&[d], rng), true);
}

fn alloc_attention<T: Element, R: Rng + ?Sized>(store: &mut ParamStore<T>, prefix: &str, d: usize, rng: &mut R) {
    for p in ["q", "k", "v", "o"] {
        alloc_linear(store, &format!("{prefix}.{p}"), d, d, PROJ, rng);
    }
}

/// Weights of one block. In S-AdaLN mode the `ada.*` regressors map
/// `silu(c)` to one `(β, γ, α)` triple per sublayer; the gate head starts at
/// zero so the block starts as the identity.
pub fn alloc_block<T: Element, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    config: &ModelConfig,
    index: usize,
    kind: BlockKind,
    rng: &mut R,
) {
    let d = config.hidden;
    let prefix = format!("blocks.{index}");
    alloc_attention(store, &format!("{prefix}.attn"), d, rng);
    if kind == BlockKind::Sequential {
        alloc_attention(store, &format!("{prefix}.attn_t"), d, rng);
    }
    alloc_linear(store, &format!("{prefix}.mlp.fc1"), d, config.mlp_ratio * d, PROJ, rng);
    alloc_linear(store, &format!("{prefix}.mlp.fc2"), config.mlp_ratio * d, d, PROJ, rng);
    match config.cond_mode {
        CondMode::SAdaln => {
            alloc_linear(store, &format!("{prefix}.ada.shift"), d, 2 * d, PROJ, rng);
            alloc_linear(store, &format!("{prefix}.ada.scale"), d, 2 * d, PROJ, rng);
            alloc_linear(store, &format!("{prefix}.ada.gate"), d, 2 * d, Init::Zeros, rng);
        }
        CondMode::AllTokens => {
            alloc_norm(store, &format!("{prefix}.norm1"), d, rng);
            alloc_norm(store, &format!("{prefix}.norm2"), d, rng);
            if kind == BlockKind::Sequential {
                alloc_norm(store, &format!("{prefix}.norm_t"), d, rng);
            }
        }
    }
}

/// Fresh weights for `config`. Projections draw from a truncated normal
/// (σ = 0.02); gates and the decoder start at zero; the temporal upsampling
/// kernel starts as frame replication.
pub fn init_params<T: Element, R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<ParamStore<T>> {
    config.validate()?;
    let d = config.hidden;
    let mut store = ParamStore::new();
    alloc_linear(&mut store, "x_embed", config.patch_dim(), d, PROJ, rng);
    alloc_linear(&mut store, "t_embed.fc1", TIMESTEP_FREQ_DIM, d, PROJ, rng);
    alloc_linear(&mut store, "t_embed.fc2", d, d, PROJ, rng);
    if let Some(k) = config.num_classes {
        store.insert("y_embed.table", PROJ.sample(&[k, d], rng), true);
    }
    let (nf, nh, nw) = config.grid();
    let table = positional_embedding(nf, nh, nw, d, config.temporal_pos)?;
    store.insert(
        "pos_embed",
        Tensor::from_f64_slice(&table.additive, &[nf * nh * nw, d])?,
        false,
    );
    for (i, kind) in config.block_plan().into_iter().enumerate() {
        alloc_block(&mut store, config, i, kind, rng);
    }
    match config.cond_mode {
        CondMode::SAdaln => {
            alloc_linear(&mut store, "final.ada.shift", d, d, PROJ, rng);
            alloc_linear(&mut store, "final.ada.scale", d, d, PROJ, rng);
        }
        CondMode::AllTokens => alloc_norm(&mut store, "final.norm", d, rng),
    }
    alloc_linear(&mut store, "final.linear", d, config.decode_dim(), Init::Zeros, rng);
    if let PatchMode::Compression { stride } = config.patch_mode {
        let k = 2 * config.latent_channels;
        let mut taps = vec![0.0; stride * k * k];
        for tap in 0..stride {
            for c in 0..k {
                taps[(tap * k + c) * k + c] = 1.0;
            }
        }
        store.insert("final.upsample.weight", Tensor::from_f64_slice(&taps, &[stride, k, k])?, true);
        store.insert("final.upsample.bias", Tensor::zeros(&[k]), true);
    }
    Ok(store)
}

/// Redraws every trainable value from `N(0, std²)`, gates and decoder
/// included; used where a non-degenerate network is needed (gradient and
/// oracle checks).
pub fn randomize<T: Element, R: Rng + ?Sized>(store: &mut ParamStore<T>, std: f64, rng: &mut R) {
    let names: Vec<(String, Vec<usize>)> = store
        .trainable()
        .map(|(k, t)| (k.to_string(), t.shape().to_vec()))
        .collect();
    for (name, shape) in names {
        let t: Tensor<T> = Init::Normal(std).sample(&shape, rng);
        store
            .set_data(&name, t.to_vec())
            .expect("name and shape come from the store");
    }
}
