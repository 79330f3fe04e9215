//! AdamW with decoupled weight decay. Moments are kept at parameter
//! precision so checkpoints restore the exact optimizer state.

use latte_core::params::ParamStore;
use latte_core::tensor::{Element, Gradients, Tensor};
use latte_core::Result;

use crate::config::AdamWConfig;

#[derive(Clone)]
pub struct AdamW<T: Element> {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
}

fn zeros_like<T: Element>(params: &ParamStore<T>) -> ParamStore<T> {
    let mut out = ParamStore::new();
    for (name, t) in params.trainable() {
        out.insert(name, Tensor::zeros(t.shape()), false);
    }
    out
}

impl<T: Element> AdamW<T> {
    pub fn new(config: AdamWConfig, params: &ParamStore<T>) -> Self {
        Self {
            config,
            step: 0,
            m: zeros_like(params),
            v: zeros_like(params),
        }
    }

    /// One update of every trainable parameter. Parameters the loss does
    /// not reach see a zero gradient, so only decay and momentum move them.
    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let names: Vec<String> = params.trainable().map(|(n, _)| n.to_string()).collect();
        for name in names {
            let p = params.get(&name)?;
            let g = grads.wrt(p);
            let (m, v) = (self.m.get(&name)?, self.v.get(&name)?);
            let n = p.numel();
            let (mut pn, mut mn, mut vn) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
            for i in 0..n {
                let gi = g[i].to_f64();
                let mi = c.beta1 * m.data()[i].to_f64() + (1.0 - c.beta1) * gi;
                let vi = c.beta2 * v.data()[i].to_f64() + (1.0 - c.beta2) * gi * gi;
                let pi = p.data()[i].to_f64();
                let update = (mi / bc1) / ((vi / bc2).sqrt() + c.eps) + c.weight_decay * pi;
                pn.push(T::from_f64(pi - c.lr * update));
                mn.push(T::from_f64(mi));
                vn.push(T::from_f64(vi));
            }
            params.set_data(&name, pn)?;
            self.m.set_data(&name, mn)?;
            self.v.set_data(&name, vn)?;
        }
        Ok(())
    }
}
