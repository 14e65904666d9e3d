//! Plain (non-differentiable) single-plane image helpers.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A single-channel image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width || data.is_empty() {
            return Err(Error::Shape(format!(
                "plane {height}x{width} with {} values",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let data = (0..height * width)
            .map(|i| f(i / width, i % width))
            .collect();
        Self {
            height,
            width,
            data,
        }
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    /// Channel 0 of sample `n` of an `[n, c, h, w]` tensor.
    pub fn from_tensor(t: &Tensor, n: usize) -> Result<Self> {
        let (_, _, h, w) = t.dims4()?;
        Self::new(h, w, t.plane(n, 0).to_vec())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, 1, self.height, self.width], self.data.clone())
            .expect("plane sizes agree")
    }

    /// Stacks equally sized planes into `[n, 1, h, w]`.
    pub fn stack(planes: &[Plane]) -> Result<Tensor> {
        let first = planes
            .first()
            .ok_or_else(|| Error::Shape("no planes to stack".into()))?;
        if planes
            .iter()
            .any(|p| (p.height, p.width) != (first.height, first.width))
        {
            return Err(Error::Shape("planes differ in size".into()));
        }
        let data = planes.iter().flat_map(|p| p.data.iter().copied()).collect();
        Tensor::new(vec![planes.len(), 1, first.height, first.width], data)
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Removes `border` pixels from every side.
    pub fn crop(&self, border: usize) -> Result<Self> {
        if 2 * border >= self.height || 2 * border >= self.width {
            return Err(Error::ImageSize {
                height: self.height,
                width: self.width,
                reason: format!("cannot crop {border} pixels"),
            });
        }
        let (h, w) = (self.height - 2 * border, self.width - 2 * border);
        Ok(Self::from_fn(h, w, |y, x| self.get(y + border, x + border)))
    }

    /// 8-bit gray levels as floats in `0..=255`.
    pub fn gray_levels(&self) -> Vec<f64> {
        self.data.iter().map(|&v| quantize(v) as f64).collect()
    }

    pub fn same_size(&self, other: &Plane) -> bool {
        (self.height, self.width) == (other.height, other.width)
    }
}

/// Normalized 2-D Gaussian kernel (`size x size`, row-major).
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let one_d: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = one_d.iter().sum();
    let one_d: Vec<f64> = one_d.iter().map(|v| v / total).collect();
    let mut out = Vec::with_capacity(size * size);
    for a in &one_d {
        for b in &one_d {
            out.push(a * b);
        }
    }
    out
}

fn clamp_index(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Sobel derivatives `(d/dx, d/dy)` with replicated borders.
pub fn sobel(plane: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let at = |y: isize, x: isize| plane[clamp_index(y, h) * w + clamp_index(x, w)];
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            gx[i] = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            gy[i] = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
        }
    }
    (gx, gy)
}

pub fn sobel_magnitude(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let (gx, gy) = sobel(plane, h, w);
    gx.iter().zip(&gy).map(|(a, b)| a.hypot(*b)).collect()
}

/// Mean over a `(2r+1)^2` window with replicated borders.
pub fn box_mean(plane: &[f64], h: usize, w: usize, radius: usize) -> Vec<f64> {
    let r = radius as isize;
    let norm = ((2 * radius + 1) * (2 * radius + 1)) as f64;
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut acc = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    acc += plane[clamp_index(y + dy, h) * w + clamp_index(x + dx, w)];
                }
            }
            out[y as usize * w + x as usize] = acc / norm;
        }
    }
    out
}

/// Gray level in `0..=255` of a unit-range intensity.
pub fn quantize(v: f64) -> usize {
    (v * 255.0).round().clamp(0.0, 255.0) as usize
}

/// 256-bin probability histogram of a unit-range plane.
pub fn histogram(plane: &[f64]) -> [f64; 256] {
    let mut h = [0.0; 256];
    for &v in plane {
        h[quantize(v)] += 1.0;
    }
    let n = plane.len() as f64;
    h.iter_mut().for_each(|c| *c /= n);
    h
}

/// Shannon entropy in bits of a probability vector.
pub fn entropy_bits(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.log2())
        .sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_kernel_is_normalized_and_symmetric() {
        let k = gaussian_kernel(11, 1.5);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(k[0], k[120]);
        assert!(k[60] > k[59]);
    }

    #[test]
    fn sobel_of_ramp() {
        let (h, w) = (5, 5);
        let plane: Vec<f64> = (0..h * w).map(|i| (i % w) as f64).collect();
        let (gx, gy) = sobel(&plane, h, w);
        assert_eq!(gx[2 * w + 2], 8.0);
        assert_eq!(gy[2 * w + 2], 0.0);
    }

    #[test]
    fn entropy_of_uniform_two_levels() {
        let plane = [0.0, 1.0, 0.0, 1.0];
        assert!((entropy_bits(&histogram(&plane)) - 1.0).abs() < 1e-15);
    }
}
