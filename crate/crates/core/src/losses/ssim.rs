use std::rc::Rc;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::imageops::gaussian_kernel;
use crate::tensor::Tensor;

use super::{check_same, LossWeights};

/// Mean SSIM over every fully covered Gaussian window, as a graph node.
///
/// Luminance, contrast and structure are combined in the usual two-factor
/// form `((2 mu_a mu_b + C1)(2 s_ab + C2)) / ((mu_a^2 + mu_b^2 + C1)(s_a^2 + s_b^2 + C2))`.
/// Numerator and denominator are built from the same products, so
/// `SSIM(X, X)` evaluates to exactly 1.
pub fn ssim_term(g: &mut Graph, a: Var, b: Var, weights: &LossWeights) -> Result<Var> {
    weights.validate()?;
    let (_, _, h, w) = g.value(a).dims4()?;
    if g.shape(a) != g.shape(b) {
        return Err(Error::Shape(format!(
            "ssim: {:?} vs {:?}",
            g.shape(a),
            g.shape(b)
        )));
    }
    if h < weights.window || w < weights.window {
        return Err(Error::ImageSize {
            height: h,
            width: w,
            reason: format!("SSIM window {} larger than image", weights.window),
        });
    }
    let kernel = Rc::new(Tensor::new(
        vec![weights.window, weights.window],
        gaussian_kernel(weights.window, weights.sigma),
    )?);
    let blur = |g: &mut Graph, x: Var| g.filter(x, kernel.clone(), 0);

    let mu_a = blur(g, a)?;
    let mu_b = blur(g, b)?;
    let aa = g.square(a);
    let bb = g.square(b);
    let ab = g.mul(a, b)?;
    let e_aa = blur(g, aa)?;
    let e_bb = blur(g, bb)?;
    let e_ab = blur(g, ab)?;

    let mu_aa = g.square(mu_a);
    let mu_bb = g.square(mu_b);
    let mu_ab = g.mul(mu_a, mu_b)?;
    let var_a = g.sub(e_aa, mu_aa)?;
    let var_b = g.sub(e_bb, mu_bb)?;
    let cov = g.sub(e_ab, mu_ab)?;

    let lum_num = g.scale(mu_ab, 2.0);
    let lum_num = g.add_scalar(lum_num, weights.c1);
    let con_num = g.scale(cov, 2.0);
    let con_num = g.add_scalar(con_num, weights.c2);
    let lum_den = g.add(mu_aa, mu_bb)?;
    let lum_den = g.add_scalar(lum_den, weights.c1);
    let con_den = g.add(var_a, var_b)?;
    let con_den = g.add_scalar(con_den, weights.c2);

    let num = g.mul(lum_num, con_num)?;
    let den = g.mul(lum_den, con_den)?;
    let map = g.div(num, den)?;
    Ok(g.mean(map))
}

/// Mean local SSIM of two unit-range images.
pub fn ssim(a: &Tensor, b: &Tensor, weights: &LossWeights) -> Result<f64> {
    check_same(a, b)?;
    let mut g = Graph::new();
    let (va, vb) = (g.leaf(a.clone()), g.leaf(b.clone()));
    let s = ssim_term(&mut g, va, vb, weights)?;
    Ok(g.value(s).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_images_score_exactly_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::uniform(vec![2, 1, 16, 13], 0.5, &mut rng).map(|v| v + 0.5);
        assert_eq!(ssim(&x, &x, &LossWeights::default()).unwrap(), 1.0);
    }

    #[test]
    fn near_equal_constants_approach_one() {
        let w = LossWeights::default();
        let c = Tensor::full(vec![1, 1, 11, 11], 0.4);
        let mut last = 0.0;
        for delta in [1e-1, 1e-2, 1e-3, 1e-4] {
            let s = ssim(&c, &c.map(|v| v + delta), &w).unwrap();
            assert!(s > last && s <= 1.0);
            last = s;
        }
        assert!(1.0 - last < 1e-6);
    }

    #[test]
    fn too_small_images_are_rejected() {
        let x = Tensor::zeros(vec![1, 1, 10, 20]);
        assert!(matches!(
            ssim(&x, &x, &LossWeights::default()),
            Err(Error::ImageSize { .. })
        ));
    }
}
