//! Central finite-difference checks of reverse-mode gradients (64-bit mode).

use crate::error::Result;
use crate::tensor::Tensor;

/// Smallest magnitude, per unit of loss, used as the denominator of the
/// relative error, so components that are analytically zero compare on an
/// absolute scale proportional to the loss.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `name[index]` of the worst component.
    pub worst: String,
    pub checked: usize,
}

/// `|a − n| / max(|a|, |n|, floor)` with `floor = REL_ERR_FLOOR·max(1, |L|)`.
pub fn rel_err(analytic: f64, numeric: f64, loss: f64) -> f64 {
    let floor = REL_ERR_FLOOR * loss.abs().max(1.0);
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central difference stencil.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) − f(x−h)) / 2h`, error O(h²).
    ThreePoint,
    /// `(f(x−2h) − 8f(x−h) + 8f(x+h) − f(x+2h)) / 12h`, error O(h⁴).
    FivePoint,
}

/// Compares the gradient of `loss(params)` against central differences with
/// step `h` for every element of every named parameter.
pub fn check<F>(params: &[(String, Tensor<f64>)], loss: F, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    check_with(params, loss, h, Stencil::ThreePoint)
}

pub fn check_with<F>(params: &[(String, Tensor<f64>)], loss: F, h: f64, stencil: Stencil) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let leaves: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.requires_grad()).collect();
    let value = loss(&leaves)?;
    let grads = value.backward()?;
    let value = value.item()?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: String::new(),
        checked: 0,
    };
    let mut current: Vec<Tensor<f64>> = leaves.iter().map(|t| t.detach()).collect();
    for (pi, (name, base)) in params.iter().enumerate() {
        let analytic = grads.wrt(&leaves[pi]);
        for i in 0..base.numel() {
            let mut data = base.to_vec();
            let x0 = data[i];
            let mut at = |offset: f64, current: &mut Vec<Tensor<f64>>| -> Result<f64> {
                data[i] = x0 + offset;
                current[pi] = Tensor::from_vec(data.clone(), base.shape())?;
                loss(current)?.item()
            };
            let numeric = match stencil {
                Stencil::ThreePoint => (at(h, &mut current)? - at(-h, &mut current)?) / (2.0 * h),
                Stencil::FivePoint => {
                    let (p1, m1) = (at(h, &mut current)?, at(-h, &mut current)?);
                    let (p2, m2) = (at(2.0 * h, &mut current)?, at(-2.0 * h, &mut current)?);
                    (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h)
                }
            };
            let err = rel_err(analytic[i], numeric, value);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_empty() {
                report.max_rel_err = report.max_rel_err.max(err);
                if err >= report.max_rel_err {
                    report.worst = format!("{name}[{i}]");
                }
            }
        }
        current[pi] = base.detach();
    }
    Ok(report)
}
