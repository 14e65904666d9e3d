//! Unsupervised fusion losses.
//!
//! Every loss has a graph form (`*_term`, differentiable with respect to the
//! fused image and through it the network parameters) and a plain form that
//! evaluates the same graph and returns the number. Images are
//! `[n, 1, h, w]` tensors with values in `[0, 1]`; all squared norms use mean
//! reduction.

mod saliency;
mod ssim;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::imageops::{box_mean, sobel_magnitude};
use crate::tensor::Tensor;

pub use saliency::{histogram_saliency, saliency_weights, SaliencyMap};
pub use ssim::{ssim, ssim_term};

/// Loss hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Weight of the SSIM term.
    pub mu: f64,
    /// Weight of the fusion loss in the joint objective.
    pub eta: f64,
    /// Gaussian SSIM window (odd, at least 3).
    pub window: usize,
    pub sigma: f64,
    pub c1: f64,
    pub c2: f64,
    pub feature_weights: FeatureWeightMode,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mu: 1.0,
            eta: 0.5,
            window: 11,
            sigma: 1.5,
            c1: 0.01f64.powi(2),
            c2: 0.03f64.powi(2),
            feature_weights: FeatureWeightMode::Gradient,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.window < 3 || self.window % 2 == 0 {
            return Err(Error::Config(format!(
                "SSIM window must be odd and >= 3, got {}",
                self.window
            )));
        }
        if !(self.mu >= 0.0 && self.eta >= 0.0) {
            return Err(Error::Config("mu and eta must be non-negative".into()));
        }
        if !(self.sigma > 0.0 && self.c1 > 0.0 && self.c2 > 0.0) {
            return Err(Error::Config(
                "SSIM sigma and stability constants must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Where the per-source weights of the fusion loss come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureWeightMode {
    /// Window-averaged Sobel gradient energy.
    Gradient,
    /// A caller-supplied [`FeatureWeighting`].
    External,
}

/// Produces per-pixel source weights `(w_A, w_B)` with `w_A + w_B = 1`.
pub trait FeatureWeighting {
    fn weights(&self, a: &Tensor, b: &Tensor) -> Result<(Tensor, Tensor)>;
}

/// Gradient-energy weighting: Sobel magnitude averaged over a 5x5 window,
/// exponentially normalized across the two sources at every pixel.
#[derive(Debug, Clone, Copy, Default)]
pub struct GradientEnergy;

impl FeatureWeighting for GradientEnergy {
    fn weights(&self, a: &Tensor, b: &Tensor) -> Result<(Tensor, Tensor)> {
        check_same(a, b)?;
        let (n, c, h, w) = a.dims4()?;
        let mut wa = Tensor::zeros(a.shape().to_vec());
        let mut wb = Tensor::zeros(a.shape().to_vec());
        for ni in 0..n {
            for ci in 0..c {
                let ea = box_mean(&sobel_magnitude(a.plane(ni, ci), h, w), h, w, 2);
                let eb = box_mean(&sobel_magnitude(b.plane(ni, ci), h, w), h, w, 2);
                for i in 0..h * w {
                    let m = ea[i].max(eb[i]);
                    let (xa, xb) = ((ea[i] - m).exp(), (eb[i] - m).exp());
                    wa.plane_mut(ni, ci)[i] = xa / (xa + xb);
                    wb.plane_mut(ni, ci)[i] = xb / (xa + xb);
                }
            }
        }
        Ok((wa, wb))
    }
}

pub(crate) fn check_same(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "image shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    a.dims4().map(|_| ())
}

/// `mean((I1 - I2)^2)`.
pub fn intensity_loss(i1: &Tensor, i2: &Tensor) -> Result<f64> {
    check_same(i1, i2)?;
    let mut g = Graph::new();
    let (a, b) = (g.leaf(i1.clone()), g.leaf(i2.clone()));
    let l = g.mse(a, b)?;
    Ok(g.value(l).item())
}

/// `1 - SSIM(a, b)` as a graph node.
pub fn ssim_loss_term(g: &mut Graph, a: Var, b: Var, weights: &LossWeights) -> Result<Var> {
    let s = ssim_term(g, a, b, weights)?;
    let neg = g.scale(s, -1.0);
    Ok(g.add_scalar(neg, 1.0))
}

/// `l_int + mu * l_ssim` between two images.
pub fn structural_loss_term(g: &mut Graph, a: Var, b: Var, weights: &LossWeights) -> Result<Var> {
    let int = g.mse(a, b)?;
    let ssim = ssim_loss_term(g, a, b, weights)?;
    let ssim = g.scale(ssim, weights.mu);
    g.add(int, ssim)
}

/// Saliency-weighted task loss `l_int^V + mu * l_ssim^V` with
/// `l_int^V = |M_A (F - A)|^2 + |M_B (F - B)|^2` and
/// `l_ssim^V = [1 - SSIM(M_A F, M_A A)] + [1 - SSIM(M_B F, M_B B)]`.
pub fn weighted_task_loss_term(
    g: &mut Graph,
    fused: Var,
    a: Var,
    b: Var,
    maps: (&SaliencyMap, &SaliencyMap),
    weights: &LossWeights,
) -> Result<Var> {
    let mut terms = Vec::with_capacity(2);
    for (src, map) in [(a, maps.0), (b, maps.1)] {
        if map.tensor().shape() != g.shape(fused) || g.shape(src) != g.shape(fused) {
            return Err(Error::Shape(format!(
                "weighted task loss: fused {:?}, source {:?}, map {:?}",
                g.shape(fused),
                g.shape(src),
                map.tensor().shape()
            )));
        }
        let m = g.leaf(map.tensor().clone());
        let mf = g.mul(m, fused)?;
        let ms = g.mul(m, src)?;
        let int = g.mse(mf, ms)?;
        let ssim = ssim_loss_term(g, mf, ms, weights)?;
        let ssim = g.scale(ssim, weights.mu);
        terms.push(g.add(int, ssim)?);
    }
    g.add(terms[0], terms[1])
}

pub fn weighted_task_loss(
    fused: &Tensor,
    a: &Tensor,
    b: &Tensor,
    maps: (&SaliencyMap, &SaliencyMap),
    weights: &LossWeights,
) -> Result<f64> {
    check_same(fused, a)?;
    check_same(fused, b)?;
    let mut g = Graph::new();
    let (f, a, b) = (g.leaf(fused.clone()), g.leaf(a.clone()), g.leaf(b.clone()));
    let l = weighted_task_loss_term(&mut g, f, a, b, maps, weights)?;
    Ok(g.value(l).item())
}

/// Feature-richness fusion loss with precomputed per-pixel source weights:
/// `mean(w_A (F - A)^2 + w_B (F - B)^2) + mu * [mean(w_A) (1 - SSIM(F, A)) + mean(w_B) (1 - SSIM(F, B))]`.
pub fn fusion_loss_term(
    g: &mut Graph,
    fused: Var,
    a: Var,
    b: Var,
    source_weights: (&Tensor, &Tensor),
    weights: &LossWeights,
) -> Result<Var> {
    let mut terms = Vec::with_capacity(4);
    for (src, w) in [(a, source_weights.0), (b, source_weights.1)] {
        if w.shape() != g.shape(fused) || g.shape(src) != g.shape(fused) {
            return Err(Error::Shape(format!(
                "fusion loss: fused {:?}, source {:?}, weights {:?}",
                g.shape(fused),
                g.shape(src),
                w.shape()
            )));
        }
        let wv = g.leaf(w.clone());
        let d = g.sub(fused, src)?;
        let sq = g.square(d);
        let weighted = g.mul(wv, sq)?;
        terms.push(g.mean(weighted));
        let ssim = ssim_loss_term(g, fused, src, weights)?;
        terms.push(g.scale(ssim, weights.mu * w.mean()));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok(total)
}

/// [`fusion_loss_term`] with [`GradientEnergy`] weights, as a number.
pub fn feature_richness_loss(
    fused: &Tensor,
    a: &Tensor,
    b: &Tensor,
    weights: &LossWeights,
) -> Result<f64> {
    check_same(fused, a)?;
    check_same(fused, b)?;
    let (wa, wb) = GradientEnergy.weights(a, b)?;
    let mut g = Graph::new();
    let (f, a, b) = (g.leaf(fused.clone()), g.leaf(a.clone()), g.leaf(b.clone()));
    let l = fusion_loss_term(&mut g, f, a, b, (&wa, &wb), weights)?;
    Ok(g.value(l).item())
}

/// Mean binary cross-entropy of logits against a `{0, 1}` mask.
pub fn mask_loss_term(g: &mut Graph, logits: Var, mask: Var) -> Result<Var> {
    let sp = g.softplus(logits);
    let tz = g.mul(mask, logits)?;
    let per_pixel = g.sub(sp, tz)?;
    Ok(g.mean(per_pixel))
}

/// `task_loss + eta * fusion_loss`.
pub fn joint_objective_term(
    g: &mut Graph,
    task_loss: Var,
    fusion_loss: Var,
    eta: f64,
) -> Result<Var> {
    let scaled = g.scale(fusion_loss, eta);
    g.add(task_loss, scaled)
}

pub fn joint_objective(task_loss: f64, fusion_loss: f64, eta: f64) -> f64 {
    task_loss + eta * fusion_loss
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Tensor {
        let data = (0..h * w).map(|i| f(i / w, i % w)).collect();
        Tensor::new(vec![1, 1, h, w], data).unwrap()
    }

    #[test]
    fn intensity_examples() {
        let z = Tensor::zeros(vec![1, 1, 2, 2]);
        let o = Tensor::full(vec![1, 1, 2, 2], 1.0);
        assert_eq!(intensity_loss(&o, &o).unwrap(), 0.0);
        assert_eq!(intensity_loss(&z, &o).unwrap(), 1.0);
        let a = Tensor::new(vec![1, 1, 1, 2], vec![0.0, 0.5]).unwrap();
        let b = Tensor::new(vec![1, 1, 1, 2], vec![0.5, 0.5]).unwrap();
        assert_eq!(intensity_loss(&a, &b).unwrap(), 0.125);
        assert!(intensity_loss(&a, &z).is_err());
    }

    #[test]
    fn window_must_be_odd_and_large_enough() {
        let mut w = LossWeights::default();
        assert!(w.validate().is_ok());
        w.window = 4;
        assert!(w.validate().is_err());
        w.window = 1;
        assert!(w.validate().is_err());
    }

    #[test]
    fn task_loss_examples() {
        let w = LossWeights::default();
        let x = img(12, 12, |y, x| ((y * 7 + x * 3) % 11) as f64 / 10.0);
        let y = img(12, 12, |y, x| ((y + 2 * x) % 5) as f64 / 4.0);
        let f = img(12, 12, |y, x| ((y * x) % 9) as f64 / 8.0);
        let (ma, mb) = saliency_weights(&x, &y).unwrap();
        assert_eq!(weighted_task_loss(&x, &x, &x, (&ma, &mb), &w).unwrap(), 0.0);

        let w0 = LossWeights {
            mu: 0.0,
            ..w.clone()
        };
        let expected_int = {
            let sq = |src: &Tensor, m: &SaliencyMap| {
                f.data()
                    .iter()
                    .zip(src.data())
                    .zip(m.tensor().data())
                    .map(|((a, b), m)| (m * (a - b)).powi(2))
                    .sum::<f64>()
                    / f.numel() as f64
            };
            sq(&x, &ma) + sq(&y, &mb)
        };
        assert!(
            (weighted_task_loss(&f, &x, &y, (&ma, &mb), &w0).unwrap() - expected_int).abs() < 1e-12
        );

        let ones = SaliencyMap::from_tensor(Tensor::full(vec![1, 1, 12, 12], 1.0));
        let zeros = SaliencyMap::from_tensor(Tensor::zeros(vec![1, 1, 12, 12]));
        let plain = intensity_loss(&f, &x).unwrap() + w.mu * (1.0 - ssim(&f, &x, &w).unwrap());
        let weighted = weighted_task_loss(&f, &x, &y, (&ones, &zeros), &w).unwrap();
        assert!((weighted - plain).abs() < 1e-12, "{weighted} vs {plain}");
    }

    #[test]
    fn fusion_loss_examples() {
        let w = LossWeights::default();
        let x = img(12, 12, |y, x| ((y * 7 + x * 3) % 11) as f64 / 10.0);
        let f = img(12, 12, |y, x| ((y * x) % 9) as f64 / 8.0);
        assert_eq!(feature_richness_loss(&x, &x, &x, &w).unwrap(), 0.0);
        let plain = intensity_loss(&f, &x).unwrap() + w.mu * (1.0 - ssim(&f, &x, &w).unwrap());
        assert!((feature_richness_loss(&f, &x, &x, &w).unwrap() - plain).abs() < 1e-12);
    }

    #[test]
    fn gradient_energy_prefers_texture() {
        let checker = img(16, 16, |y, x| ((y / 2 + x / 2) % 2) as f64);
        let flat = Tensor::full(vec![1, 1, 16, 16], 0.5);
        let (wa, wb) = GradientEnergy.weights(&checker, &flat).unwrap();
        for (a, b) in wa.data().iter().zip(wb.data()) {
            assert!(*a > 0.5);
            assert!((a + b - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn joint_objective_examples() {
        assert_eq!(joint_objective(0.7, 3.0, 0.0), 0.7);
        assert_eq!(joint_objective(0.0, 3.0, 0.5), 1.5);
    }
}
