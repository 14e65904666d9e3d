use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GenericImageView};

use crate::error::{Error, Result};
use crate::imageops::Plane;

/// Two registered source images of one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair {
    pub id: String,
    /// Modality A (e.g. infrared), unit-range luminance.
    pub a: Plane,
    /// Modality B (e.g. visible), unit-range luminance.
    pub b: Plane,
    /// `(Cb, Cr)` of B when it was a color image, centered at 0.5.
    pub chroma: Option<(Plane, Plane)>,
    /// Binary target mask for the segmentation surrogate task.
    pub mask: Option<Plane>,
}

impl ImagePair {
    pub fn new(id: impl Into<String>, a: Plane, b: Plane) -> Result<Self> {
        let id = id.into();
        if !a.same_size(&b) {
            return Err(Error::Shape(format!(
                "pair `{id}`: A is {}x{}, B is {}x{}",
                a.height, a.width, b.height, b.width
            )));
        }
        Ok(Self {
            id,
            a,
            b,
            chroma: None,
            mask: None,
        })
    }

    pub fn size(&self) -> (usize, usize) {
        (self.a.height, self.a.width)
    }
}

/// ITU-R BT.601 luma and centered chroma of an 8-bit RGB pixel, unit range.
pub fn ycbcr(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let y = 0.299 * r + 0.587 * g + 0.114 * b;
    let cb = 0.5 + (b - y) * 0.564;
    let cr = 0.5 + (r - y) * 0.713;
    (y, cb, cr)
}

/// Inverse of [`ycbcr`], clamped to the unit range.
pub fn rgb(y: f64, cb: f64, cr: f64) -> [f64; 3] {
    let r = y + (cr - 0.5) / 0.713;
    let b = y + (cb - 0.5) / 0.564;
    let g = (y - 0.299 * r - 0.114 * b) / 0.587;
    [r.clamp(0.0, 1.0), g.clamp(0.0, 1.0), b.clamp(0.0, 1.0)]
}

fn is_color(img: &DynamicImage) -> bool {
    img.color().has_color()
}

/// Luminance plane and, for color images, the chroma planes.
pub fn decode(img: &DynamicImage) -> (Plane, Option<(Plane, Plane)>) {
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    if !is_color(img) {
        let gray = img.to_luma16();
        let data = gray.pixels().map(|p| p.0[0] as f64 / 65535.0).collect();
        return (
            Plane {
                height: h,
                width: w,
                data,
            },
            None,
        );
    }
    let rgb8 = img.to_rgb8();
    let mut y = Vec::with_capacity(h * w);
    let mut cb = Vec::with_capacity(h * w);
    let mut cr = Vec::with_capacity(h * w);
    for p in rgb8.pixels() {
        let [r, g, b] = p.0.map(|c| c as f64 / 255.0);
        let (ly, lcb, lcr) = ycbcr(r, g, b);
        y.push(ly);
        cb.push(lcb);
        cr.push(lcr);
    }
    (
        Plane {
            height: h,
            width: w,
            data: y,
        },
        Some((
            Plane {
                height: h,
                width: w,
                data: cb,
            },
            Plane {
                height: h,
                width: w,
                data: cr,
            },
        )),
    )
}

pub fn load_image(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn split_name(path: &Path) -> Option<(String, char)> {
    let stem = path.file_stem()?.to_str()?;
    let (id, tag) = stem.rsplit_once('_')?;
    match tag {
        "A" => Some((id.to_string(), 'A')),
        "B" => Some((id.to_string(), 'B')),
        _ => None,
    }
}

/// Reads every `<id>_A.<ext>` / `<id>_B.<ext>` pair of a directory, ordered
/// by id. Unpaired files and pairs of mismatched size are skipped with a
/// warning; an optional `<id>_mask.<ext>` is attached as the target mask.
pub fn ingest(dir: &Path) -> Result<Vec<ImagePair>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut found: BTreeMap<String, (Option<PathBuf>, Option<PathBuf>)> = BTreeMap::new();
    let mut masks: BTreeMap<String, PathBuf> = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if !path.is_file() {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            if let Some(id) = stem.strip_suffix("_mask") {
                masks.insert(id.to_string(), path.clone());
                continue;
            }
        }
        if let Some((id, tag)) = split_name(&path) {
            let slot = found.entry(id).or_default();
            if tag == 'A' {
                slot.0 = Some(path)
            } else {
                slot.1 = Some(path)
            }
        }
    }
    let mut pairs = Vec::new();
    for (id, slot) in found {
        let (Some(pa), Some(pb)) = slot else {
            log::warn!("skipping unpaired image `{id}` in {}", dir.display());
            continue;
        };
        let (a, _) = decode(&load_image(&pa)?);
        let (b, chroma) = decode(&load_image(&pb)?);
        let mut pair = match ImagePair::new(id.clone(), a, b) {
            Ok(p) => p,
            Err(e) => {
                log::warn!("skipping {e}");
                continue;
            }
        };
        pair.chroma = chroma;
        if let Some(mp) = masks.get(&id) {
            let (m, _) = decode(&load_image(mp)?);
            if m.same_size(&pair.a) {
                pair.mask = Some(Plane {
                    data: m
                        .data
                        .iter()
                        .map(|&v| if v >= 0.5 { 1.0 } else { 0.0 })
                        .collect(),
                    ..m
                });
            } else {
                log::warn!("ignoring mask of `{id}`: size differs from the pair");
            }
        }
        pairs.push(pair);
    }
    if pairs.is_empty() {
        return Err(Error::Dataset(format!(
            "no `<id>_A` / `<id>_B` image pairs in {}",
            dir.display()
        )));
    }
    Ok(pairs)
}

/// Writes a unit-range plane as an 8-bit grayscale PNG.
pub fn save_gray(path: &Path, plane: &Plane) -> Result<()> {
    let bytes: Vec<u8> = plane
        .data
        .iter()
        .map(|&v| crate::imageops::quantize(v) as u8)
        .collect();
    let img = image::GrayImage::from_raw(plane.width as u32, plane.height as u32, bytes)
        .expect("buffer matches size");
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes luminance plus chroma as an 8-bit RGB PNG.
pub fn save_color(path: &Path, y: &Plane, chroma: &(Plane, Plane)) -> Result<()> {
    let mut bytes = Vec::with_capacity(y.data.len() * 3);
    for i in 0..y.data.len() {
        for c in rgb(y.data[i], chroma.0.data[i], chroma.1.data[i]) {
            bytes.push((c * 255.0).round() as u8);
        }
    }
    let img = image::RgbImage::from_raw(y.width as u32, y.height as u32, bytes)
        .expect("buffer matches size");
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes `<id>_A.png`, `<id>_B.png` and, if present, `<id>_mask.png`.
pub fn save_pair(dir: &Path, pair: &ImagePair) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_gray(&dir.join(format!("{}_A.png", pair.id)), &pair.a)?;
    match &pair.chroma {
        Some(c) => save_color(&dir.join(format!("{}_B.png", pair.id)), &pair.b, c)?,
        None => save_gray(&dir.join(format!("{}_B.png", pair.id)), &pair.b)?,
    }
    if let Some(m) = &pair.mask {
        save_gray(&dir.join(format!("{}_mask.png", pair.id)), m)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pure_red_luma() {
        let (y, _, _) = ycbcr(1.0, 0.0, 0.0);
        assert!((y - 0.299).abs() < 1e-3);
    }

    #[test]
    fn color_round_trip() {
        for c in [[0.2, 0.5, 0.9], [1.0, 0.0, 0.0], [0.3, 0.3, 0.3]] {
            let (y, cb, cr) = ycbcr(c[0], c[1], c[2]);
            let back = rgb(y, cb, cr);
            for k in 0..3 {
                assert!((back[k] - c[k]).abs() < 2e-3, "{c:?} -> {back:?}");
            }
        }
    }

    #[test]
    fn ingest_pairs_and_skips() {
        let dir = tempfile::tempdir().unwrap();
        let p = Plane::from_fn(6, 5, |y, x| (y * 5 + x) as f64 / 29.0);
        save_gray(&dir.path().join("s1_A.png"), &p).unwrap();
        save_gray(&dir.path().join("s1_B.png"), &p).unwrap();
        save_gray(&dir.path().join("s0_A.png"), &p).unwrap();
        save_gray(&dir.path().join("s2_A.png"), &p).unwrap();
        save_gray(&dir.path().join("s2_B.png"), &Plane::constant(4, 4, 0.0)).unwrap();
        let pairs = ingest(dir.path()).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].id, "s1");
        let err = pairs[0]
            .a
            .data
            .iter()
            .zip(&p.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err <= 0.5 / 255.0 + 1e-12);
    }

    #[test]
    fn empty_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(ingest(dir.path()), Err(Error::Dataset(_))));
    }
}
