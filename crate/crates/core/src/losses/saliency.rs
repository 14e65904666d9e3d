use crate::error::Result;
use crate::imageops::quantize;
use crate::tensor::Tensor;

use super::check_same;

/// Per-pixel information-preservation weights in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap(Tensor);

impl SaliencyMap {
    pub fn from_tensor(t: Tensor) -> Self {
        Self(t)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

/// Histogram-contrast map of one plane: a pixel at gray level `v` gets
/// `sum_j H(j) * |j - v|`, with `H` the normalized 256-bin histogram of the
/// plane. Values are in gray levels (`0..=255`).
///
/// Contrast is accumulated over integer counts and divided once, so the
/// result equals the pixel-pair mean `sum_i |g_i - v| / N` to the last bit.
pub fn histogram_saliency(plane: &[f64]) -> Vec<f64> {
    let mut counts = [0u64; 256];
    for &x in plane {
        counts[quantize(x)] += 1;
    }
    let n = plane.len().max(1) as f64;
    let mut contrast = [0.0; 256];
    for (v, c) in contrast.iter_mut().enumerate() {
        let total: u64 = counts
            .iter()
            .enumerate()
            .map(|(j, &k)| k * j.abs_diff(v) as u64)
            .sum();
        *c = total as f64 / n;
    }
    plane.iter().map(|&x| contrast[quantize(x)]).collect()
}

/// Pixel-wise exponential normalization of the two contrast maps, taken in
/// unit intensity (gray levels / 255), so `M_A + M_B = 1`.
pub fn saliency_weights(a: &Tensor, b: &Tensor) -> Result<(SaliencyMap, SaliencyMap)> {
    check_same(a, b)?;
    let (n, c, _, _) = a.dims4()?;
    let mut ma = Tensor::zeros(a.shape().to_vec());
    let mut mb = Tensor::zeros(a.shape().to_vec());
    for ni in 0..n {
        for ci in 0..c {
            let ca = histogram_saliency(a.plane(ni, ci));
            let cb = histogram_saliency(b.plane(ni, ci));
            let (pa, pb) = pair_softmax(&ca, &cb);
            ma.plane_mut(ni, ci).copy_from_slice(&pa);
            mb.plane_mut(ni, ci).copy_from_slice(&pb);
        }
    }
    Ok((SaliencyMap(ma), SaliencyMap(mb)))
}

pub(crate) fn pair_softmax(ca: &[f64], cb: &[f64]) -> (Vec<f64>, Vec<f64>) {
    ca.iter()
        .zip(cb)
        .map(|(&x, &y)| {
            let (x, y) = (x / 255.0, y / 255.0);
            let m = x.max(y);
            let (ex, ey) = ((x - m).exp(), (y - m).exp());
            (ex / (ex + ey), ey / (ex + ey))
        })
        .unzip()
}
