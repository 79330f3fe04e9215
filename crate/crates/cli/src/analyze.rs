use std::fmt::Write as _;
use std::path::Path;

use latte_core::analysis::{equalized_layers, estimate_flops, size_preset, CostReport};
use latte_core::backbone::{LatteSize, ModelConfig, Variant};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

/// Published XL figures per variant: params in millions, GFLOPs.
pub const XL_PUBLISHED: [(u8, f64, f64); 4] = [
    (1, 673.68, 5572.69),
    (2, 673.68, 5572.69),
    (3, 676.33, 6153.15),
    (4, 676.44, 1545.15),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantRow {
    pub variant: u8,
    pub layers: usize,
    pub params: u64,
    pub flops_forward: u64,
    pub param_ratio: f64,
    pub flop_ratio: f64,
    pub published_params_m: Option<f64>,
    pub published_flop_ratio: Option<f64>,
    pub report: CostReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    pub preset: Option<String>,
    /// Variant the ratios are taken against.
    pub baseline: u8,
    pub rows: Vec<VariantRow>,
}

pub fn parse_variants(list: &str) -> CliResult<Vec<Variant>> {
    list.split(',')
        .map(|s| {
            let s = s.trim();
            s.parse::<u8>()
                .ok()
                .and_then(|v| Variant::try_from(v).ok())
                .ok_or_else(|| CliError::Config(format!("invalid variant id `{s}`, expected 0..=4")))
        })
        .collect()
}

pub enum Source<'a> {
    Preset(LatteSize),
    Config(&'a Path),
}

/// Reads either a full run config or a bare model config.
pub fn load_model_config(path: &Path) -> CliResult<ModelConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(CliError::config)?;
    if value.get("model").is_some() {
        return Ok(RunConfig::from_json(&text)?.model);
    }
    let model: ModelConfig = serde_json::from_value(value).map_err(CliError::config)?;
    model.validate().map_err(CliError::config)?;
    Ok(model)
}

pub fn analyze(source: Source<'_>, variants: &[Variant]) -> CliResult<Analysis> {
    if variants.is_empty() {
        return Err(CliError::Config("no variants requested".into()));
    }
    let (base, preset) = match source {
        Source::Preset(size) => (size_preset(size, Variant::Interleaved)?, Some(size)),
        Source::Config(path) => (load_model_config(path)?, None),
    };
    let config_for = |v: Variant| -> CliResult<ModelConfig> {
        Ok(match preset {
            Some(size) => size_preset(size, v)?,
            None => {
                let mut c = base.clone();
                c.variant = v;
                c.layers = equalized_layers(&base, v)?;
                c.validate().map_err(CliError::config)?;
                c
            }
        })
    };
    let baseline = if variants.contains(&Variant::Interleaved) {
        Variant::Interleaved
    } else {
        variants[0]
    };
    let base_report = estimate_flops(&config_for(baseline)?)?;
    let xl = preset == Some(LatteSize::XL);
    let published = |id: u8| XL_PUBLISHED.iter().find(|p| p.0 == id).filter(|_| xl);
    let base_published = published(baseline.id());
    let rows = variants
        .iter()
        .map(|&v| {
            let report = estimate_flops(&config_for(v)?)?;
            let pubd = published(v.id());
            Ok(VariantRow {
                variant: v.id(),
                layers: report.layers,
                params: report.params,
                flops_forward: report.flops_forward,
                param_ratio: report.params as f64 / base_report.params as f64,
                flop_ratio: report.flops_forward as f64 / base_report.flops_forward as f64,
                published_params_m: pubd.map(|p| p.1),
                published_flop_ratio: pubd.zip(base_published).map(|(p, b)| p.2 / b.2),
                report,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    Ok(Analysis {
        preset: preset.map(|s| format!("{s:?}").to_lowercase()),
        baseline: baseline.id(),
        rows,
    })
}

impl Analysis {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        if let Some(p) = &self.preset {
            let _ = writeln!(s, "preset: {p}");
        }
        let _ = writeln!(s, "ratios against variant {}", self.baseline);
        let _ = writeln!(
            s,
            "{:>7} {:>6} {:>14} {:>18} {:>11} {:>11} {:>12} {:>12}",
            "variant", "layers", "params", "flops", "param_ratio", "flop_ratio", "pub_params_m", "pub_flop_ratio"
        );
        for r in &self.rows {
            let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.6}"));
            let _ = writeln!(
                s,
                "{:>7} {:>6} {:>14} {:>18} {:>11.6} {:>11.6} {:>12} {:>12}",
                r.variant,
                r.layers,
                r.params,
                r.flops_forward,
                r.param_ratio,
                r.flop_ratio,
                opt(r.published_params_m),
                opt(r.published_flop_ratio)
            );
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("analysis serializes")
    }
}
