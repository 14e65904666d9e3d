use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::PairBatch;
use crate::error::{Error, Result};
use crate::imageops::Plane;

use super::ingest::ImagePair;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Augment {
    /// Random horizontal flips.
    pub flip: bool,
    /// Random quarter-turn rotations.
    pub rotate: bool,
}

/// Aligned crops of one pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub pair_id: String,
    pub a: Plane,
    pub b: Plane,
    pub mask: Option<Plane>,
}

fn crop(p: &Plane, y0: usize, x0: usize, size: usize) -> Plane {
    Plane::from_fn(size, size, |y, x| p.get(y0 + y, x0 + x))
}

pub fn flip_horizontal(p: &Plane) -> Plane {
    Plane::from_fn(p.height, p.width, |y, x| p.get(y, p.width - 1 - x))
}

/// Rotates counter-clockwise by `quarter_turns * 90` degrees.
pub fn rotate90(p: &Plane, quarter_turns: usize) -> Plane {
    let mut out = p.clone();
    for _ in 0..quarter_turns % 4 {
        let src = out;
        out = Plane::from_fn(src.width, src.height, |y, x| src.get(x, src.width - 1 - y));
    }
    out
}

/// Non-overlapping `size x size` crops of every pair (row-major grid), with
/// the same random flip / rotation applied to A, B and the mask.
pub fn patchify(
    pairs: &[ImagePair],
    size: usize,
    augment: Augment,
    seed: u64,
) -> Result<Vec<Patch>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for pair in pairs {
        let (h, w) = pair.size();
        if size == 0 || size > h || size > w {
            return Err(Error::ImageSize {
                height: h,
                width: w,
                reason: format!("patch size {size} exceeds pair `{}`", pair.id),
            });
        }
        for gy in 0..h / size {
            for gx in 0..w / size {
                let (y0, x0) = (gy * size, gx * size);
                let flip = augment.flip && rng.gen_bool(0.5);
                let turns = if augment.rotate {
                    rng.gen_range(0..4)
                } else {
                    0
                };
                let t = |p: &Plane| {
                    let c = crop(p, y0, x0, size);
                    rotate90(&if flip { flip_horizontal(&c) } else { c }, turns)
                };
                out.push(Patch {
                    pair_id: pair.id.clone(),
                    a: t(&pair.a),
                    b: t(&pair.b),
                    mask: pair.mask.as_ref().map(t),
                });
            }
        }
    }
    Ok(out)
}

/// Groups patches into batches of at most `batch_size`, optionally in a
/// seeded random order. Masks are kept only when every patch has one.
pub fn batches(
    patches: &[Patch],
    batch_size: usize,
    shuffle: Option<u64>,
) -> Result<Vec<PairBatch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..patches.len()).collect();
    if let Some(seed) = shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order
        .chunks(batch_size)
        .map(|chunk| {
            let pick = |f: &dyn Fn(&Patch) -> Plane| {
                chunk.iter().map(|&i| f(&patches[i])).collect::<Vec<_>>()
            };
            let batch = PairBatch::new(
                Plane::stack(&pick(&|p| p.a.clone()))?,
                Plane::stack(&pick(&|p| p.b.clone()))?,
            )?;
            if chunk.iter().all(|&i| patches[i].mask.is_some()) {
                batch.with_mask(Plane::stack(&pick(&|p| p.mask.clone().expect("checked")))?)
            } else {
                Ok(batch)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(h: usize, w: usize) -> ImagePair {
        let a = Plane::from_fn(h, w, |y, x| (y * w + x) as f64);
        let b = Plane::from_fn(h, w, |y, x| -((y * w + x) as f64));
        ImagePair::new("p", a, b).unwrap()
    }

    #[test]
    fn grid_count() {
        let p = patchify(&[pair(10, 13)], 4, Augment::default(), 0).unwrap();
        assert_eq!(p.len(), 2 * 3);
        assert_eq!(p[1].a.get(0, 0), 4.0);
    }

    #[test]
    fn transforms_are_paired() {
        let p = patchify(
            &[pair(16, 16)],
            4,
            Augment {
                flip: true,
                rotate: true,
            },
            9,
        )
        .unwrap();
        for patch in &p {
            assert!(patch
                .a
                .data
                .iter()
                .zip(&patch.b.data)
                .all(|(a, b)| *a == -*b));
        }
        assert_eq!(
            p,
            patchify(
                &[pair(16, 16)],
                4,
                Augment {
                    flip: true,
                    rotate: true
                },
                9
            )
            .unwrap()
        );
    }

    #[test]
    fn four_turns_are_identity() {
        let p = Plane::from_fn(3, 3, |y, x| (y * 3 + x) as f64);
        assert_eq!(rotate90(&p, 4), p);
        let r = rotate90(&p, 1);
        assert_eq!(r.get(0, 0), 2.0);
    }

    #[test]
    fn oversized_patch_is_rejected() {
        assert!(patchify(&[pair(8, 8)], 9, Augment::default(), 0).is_err());
    }

    #[test]
    fn batches_cover_everything() {
        let p = patchify(&[pair(8, 12)], 4, Augment::default(), 0).unwrap();
        let b = batches(&p, 4, Some(1)).unwrap();
        assert_eq!(b.iter().map(|b| b.len()).collect::<Vec<_>>(), vec![4, 2]);
    }
}
