use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageops::Plane;

use super::ingest::ImagePair;

/// How a synthetic scene is rendered into its two modalities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthStyle {
    /// A: hot objects on a dark, smooth background. B: bright textured
    /// scene in which the objects have little contrast.
    InfraredVisible,
    /// A: structural rendering with bright object rims. B: smooth
    /// functional-style blobs under a gamma curve.
    MedicalLike,
}

impl SynthStyle {
    pub fn name(self) -> &'static str {
        match self {
            Self::InfraredVisible => "infrared-visible",
            Self::MedicalLike => "medical-like",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "infrared-visible" => Ok(Self::InfraredVisible),
            "medical-like" => Ok(Self::MedicalLike),
            other => Err(Error::Config(format!(
                "unknown synthetic style `{other}` (expected infrared-visible or medical-like)"
            ))),
        }
    }
}

struct Blob {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    heat: f64,
}

struct Scene {
    blobs: Vec<Blob>,
    /// Texture gratings `(amplitude, fy, fx, phase)`.
    gratings: Vec<(f64, f64, f64, f64)>,
}

impl Scene {
    fn random(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Self {
        let n = rng.gen_range(1..=3);
        let scale = h.min(w) as f64;
        let blobs = (0..n)
            .map(|_| Blob {
                cy: rng.gen_range(0.15..0.85) * h as f64,
                cx: rng.gen_range(0.15..0.85) * w as f64,
                ry: rng.gen_range(0.08..0.22) * scale,
                rx: rng.gen_range(0.08..0.22) * scale,
                heat: rng.gen_range(0.7..1.0),
            })
            .collect();
        let gratings = (0..3)
            .map(|_| {
                (
                    rng.gen_range(0.05..0.15),
                    rng.gen_range(0.2..1.2),
                    rng.gen_range(0.2..1.2),
                    rng.gen_range(0.0..std::f64::consts::TAU),
                )
            })
            .collect();
        Self { blobs, gratings }
    }

    /// Soft object occupancy in `[0, 1]` and the index of the covering blob.
    fn occupancy(&self, y: f64, x: f64) -> (f64, Option<usize>) {
        let mut best = (0.0, None);
        for (i, b) in self.blobs.iter().enumerate() {
            let d = ((y - b.cy) / b.ry).powi(2) + ((x - b.cx) / b.rx).powi(2);
            let v = 1.0 / (1.0 + (8.0 * (d - 1.0)).exp());
            if v > best.0 {
                best = (v, Some(i));
            }
        }
        best
    }

    fn texture(&self, y: f64, x: f64) -> f64 {
        self.gratings
            .iter()
            .map(|&(a, fy, fx, p)| a * (fy * y + fx * x + p).sin())
            .sum()
    }
}

/// `count` pairs of `height x width` synthetic scenes with object masks.
/// Pair ids are `<style>-<index>`; the same seed always yields the same
/// pairs.
pub fn synthesize(
    style: SynthStyle,
    count: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<Vec<ImagePair>> {
    if height < 4 || width < 4 {
        return Err(Error::ImageSize {
            height,
            width,
            reason: "synthetic scenes need at least 4x4 pixels".into(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(count);
    for index in 0..count {
        let scene = Scene::random(&mut rng, height, width);
        let n = height * width;
        let (mut a, mut b, mut mask) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        for y in 0..height {
            for x in 0..width {
                let (fy, fx) = (y as f64, x as f64);
                let (occ, which) = scene.occupancy(fy, fx);
                let heat = which.map_or(0.0, |i| scene.blobs[i].heat);
                let tex = scene.texture(fy, fx);
                let smooth = 0.5 + 0.5 * ((fy / height as f64) * 2.0 - 1.0) * 0.3;
                let noise_a: f64 = rng.gen_range(-0.02..0.02);
                let noise_b: f64 = rng.gen_range(-0.02..0.02);
                let i = y * width + x;
                mask[i] = if occ >= 0.5 { 1.0 } else { 0.0 };
                match style {
                    SynthStyle::InfraredVisible => {
                        a[i] = 0.12 + 0.15 * smooth + 0.7 * heat * occ + noise_a;
                        b[i] = 0.45 + tex + 0.15 * smooth - 0.08 * occ + noise_b;
                    }
                    SynthStyle::MedicalLike => {
                        let rim = 4.0 * occ * (1.0 - occ);
                        a[i] = 0.05 + 0.85 * rim + 0.2 * occ + 0.3 * tex.abs() * occ + noise_a;
                        b[i] = (0.1 + 0.8 * heat * occ + 0.1 * smooth).max(0.0).powf(0.6) + noise_b;
                    }
                }
            }
        }
        let clamp = |v: Vec<f64>| Plane {
            height,
            width,
            data: v.into_iter().map(|x| x.clamp(0.0, 1.0)).collect(),
        };
        let mut pair = ImagePair::new(format!("{}-{index:03}", style.name()), clamp(a), clamp(b))?;
        pair.mask = Some(Plane {
            height,
            width,
            data: mask,
        });
        pairs.push(pair);
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_range() {
        let p = synthesize(SynthStyle::InfraredVisible, 3, 16, 20, 4).unwrap();
        assert_eq!(
            p,
            synthesize(SynthStyle::InfraredVisible, 3, 16, 20, 4).unwrap()
        );
        assert_ne!(
            p,
            synthesize(SynthStyle::InfraredVisible, 3, 16, 20, 5).unwrap()
        );
        for pair in &p {
            assert_eq!(pair.size(), (16, 20));
            assert!(pair
                .a
                .data
                .iter()
                .chain(&pair.b.data)
                .all(|v| (0.0..=1.0).contains(v)));
            assert!(pair.mask.as_ref().unwrap().data.contains(&1.0));
        }
    }

    #[test]
    fn objects_are_hot_in_infrared() {
        let p = &synthesize(SynthStyle::InfraredVisible, 1, 32, 32, 1).unwrap()[0];
        let m = p.mask.as_ref().unwrap();
        let mean = |sel: f64| {
            let v: Vec<f64> =
                p.a.data
                    .iter()
                    .zip(&m.data)
                    .filter(|(_, &k)| k == sel)
                    .map(|(a, _)| *a)
                    .collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!(mean(1.0) > mean(0.0) + 0.3);
    }
}
