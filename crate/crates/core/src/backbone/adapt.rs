use rand::Rng;

use super::config::{BlockKind, CondMode, ModelConfig, Variant};
use super::init::alloc_block;
use crate::embedding::PatchMode;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Element, Tensor};

fn mismatch(msg: String) -> Error {
    Error::invalid(format!("cannot adapt image checkpoint: {msg}"))
}

/// Builds video-model weights from a per-frame image model.
///
/// Spatial blocks, embedders and the final layer are copied; the positional
/// table is repeated for every frame; the label table is replaced by a zero
/// table sized for the video task. New temporal pathways start closed (zero
/// gate, or zero output projections when there is no gate), so the result
/// equals the image model applied frame by frame.
pub fn adapt_image_checkpoint<T: Element, R: Rng + ?Sized>(
    image: &ParamStore<T>,
    image_config: &ModelConfig,
    config: &ModelConfig,
    rng: &mut R,
) -> Result<ParamStore<T>> {
    config.validate()?;
    image_config.validate()?;
    if image_config.variant != Variant::Image {
        return Err(mismatch(format!("source is variant {}", image_config.variant.id())));
    }
    if !matches!(
        config.variant,
        Variant::Interleaved | Variant::LateFusion | Variant::Sequential
    ) {
        return Err(mismatch(format!(
            "variant {} has no separable spatial blocks",
            config.variant.id()
        )));
    }
    if config.patch_mode != PatchMode::Uniform {
        return Err(mismatch("compression embedding changes the token width".into()));
    }
    let same = |a: usize, b: usize, what: &str| -> Result<()> {
        if a != b {
            return Err(mismatch(format!("{what} {a} != {b}")));
        }
        Ok(())
    };
    same(image_config.hidden, config.hidden, "hidden")?;
    same(image_config.heads, config.heads, "heads")?;
    same(image_config.mlp_ratio, config.mlp_ratio, "mlp_ratio")?;
    same(image_config.patch_h, config.patch_h, "patch height")?;
    same(image_config.patch_w, config.patch_w, "patch width")?;
    same(image_config.latent_height, config.latent_height, "latent height")?;
    same(image_config.latent_width, config.latent_width, "latent width")?;
    same(image_config.latent_channels, config.latent_channels, "latent channels")?;
    if image_config.cond_mode != config.cond_mode {
        return Err(mismatch("conditioning modes differ".into()));
    }

    let plan = config.block_plan();
    let spatial: Vec<usize> = plan
        .iter()
        .enumerate()
        .filter(|(_, k)| matches!(k, BlockKind::Spatial | BlockKind::Sequential))
        .map(|(i, _)| i)
        .collect();
    same(image_config.layers, spatial.len(), "image blocks vs. video spatial blocks")?;

    let d = config.hidden;
    let mut out = ParamStore::new();
    for (name, entry) in image.iter() {
        if name.starts_with("blocks.") || name == "pos_embed" || name == "y_embed.table" {
            continue;
        }
        out.insert(name, entry.tensor.detach(), entry.trainable);
    }

    let table = image.get("pos_embed")?;
    let t = config.spatial_tokens();
    if table.shape() != [t, d] {
        return Err(mismatch(format!("positional table {:?}, expected [{t}, {d}]", table.shape())));
    }
    let (n_f, _, _) = config.grid();
    let replicated = Tensor::concat(&vec![table.detach(); n_f], 0)?;
    out.insert("pos_embed", replicated, false);

    if let Some(k) = config.num_classes {
        out.insert("y_embed.table", Tensor::zeros(&[k, d]), true);
    }

    let mut next_image_block = 0;
    for (i, kind) in plan.iter().enumerate() {
        let dst = format!("blocks.{i}.");
        match kind {
            BlockKind::Spatial | BlockKind::Sequential => {
                let src = format!("blocks.{next_image_block}.");
                next_image_block += 1;
                for (name, entry) in image.iter() {
                    if let Some(rest) = name.strip_prefix(&src) {
                        out.insert(format!("{dst}{rest}"), entry.tensor.detach(), entry.trainable);
                    }
                }
                if *kind == BlockKind::Sequential {
                    let mut fresh = ParamStore::new();
                    alloc_block(&mut fresh, config, i, *kind, rng);
                    for (name, entry) in fresh.iter() {
                        let is_temporal = name.contains(".attn_t.") || name.contains(".norm_t.");
                        if is_temporal {
                            out.insert(name, entry.tensor.detach(), true);
                        }
                    }
                    // the temporal attention shares the spatial gate, so its
                    // output projection is what starts closed
                    for p in ["weight", "bias"] {
                        let name = format!("{dst}attn_t.o.{p}");
                        let shape = out.get(&name)?.shape().to_vec();
                        out.insert(name, Tensor::zeros(&shape), true);
                    }
                }
            }
            BlockKind::Temporal => {
                alloc_block(&mut out, config, i, *kind, rng);
                if config.cond_mode == CondMode::AllTokens {
                    for layer in ["attn.o", "mlp.fc2"] {
                        for p in ["weight", "bias"] {
                            let name = format!("{dst}{layer}.{p}");
                            let shape = out.get(&name)?.shape().to_vec();
                            out.insert(name, Tensor::zeros(&shape), true);
                        }
                    }
                }
            }
            BlockKind::SplitHead => unreachable!("rejected above"),
        }
    }
    Ok(out)
}
