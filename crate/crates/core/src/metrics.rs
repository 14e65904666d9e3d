//! Reference-based fusion quality metrics: MI, FMI, VIF, Q^AB/F, EN, SCD.
//!
//! Every metric works on 8-bit gray levels: inputs are unit-range planes
//! quantized with [`quantize`]. Histograms have 256 bins and entropies are
//! in bits.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageops::{entropy_bits, gaussian_kernel, histogram, quantize, sobel, Plane};

/// How per-source scores are combined into one number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Sum,
    Mean,
}

impl Aggregation {
    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            Self::Sum => a + b,
            Self::Mean => (a + b) / 2.0,
        }
    }
}

/// Feature map for FMI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FmiFeature {
    /// Sobel gradient magnitude.
    Gradient,
    /// Raw intensities.
    Pixel,
}

/// Sigmoid constants of Q^AB/F.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QabfParams {
    pub gamma_g: f64,
    pub kappa_g: f64,
    pub sigma_g: f64,
    pub gamma_a: f64,
    pub kappa_a: f64,
    pub sigma_a: f64,
    /// Rescale both sigmoids so that perfect transfer scores exactly 1. With
    /// the raw constants a perfect copy scores about 0.975.
    pub normalize: bool,
}

impl Default for QabfParams {
    fn default() -> Self {
        Self {
            normalize: true,
            ..Self::literature()
        }
    }
}

impl QabfParams {
    /// The original constants, unnormalized.
    pub fn literature() -> Self {
        Self {
            gamma_g: 0.9994,
            kappa_g: -15.0,
            sigma_g: 0.5,
            gamma_a: 0.9879,
            kappa_a: -22.0,
            sigma_a: 0.8,
            normalize: false,
        }
    }

    fn strength(&self, g: f64) -> f64 {
        let q = self.gamma_g / (1.0 + (self.kappa_g * (g - self.sigma_g)).exp());
        if self.normalize {
            q / (self.gamma_g / (1.0 + (self.kappa_g * (1.0 - self.sigma_g)).exp()))
        } else {
            q
        }
    }

    fn orientation(&self, a: f64) -> f64 {
        let q = self.gamma_a / (1.0 + (self.kappa_a * (a - self.sigma_a)).exp());
        if self.normalize {
            q / (self.gamma_a / (1.0 + (self.kappa_a * (1.0 - self.sigma_a)).exp()))
        } else {
            q
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricConfig {
    pub mi_aggregation: Aggregation,
    pub fmi_aggregation: Aggregation,
    pub vif_aggregation: Aggregation,
    pub fmi_feature: FmiFeature,
    pub qabf: QabfParams,
    pub vif_scales: usize,
    /// HVS noise variance in squared gray levels.
    pub vif_noise_var: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            mi_aggregation: Aggregation::Sum,
            fmi_aggregation: Aggregation::Mean,
            vif_aggregation: Aggregation::Mean,
            fmi_feature: FmiFeature::Gradient,
            qabf: QabfParams::default(),
            vif_scales: 4,
            vif_noise_var: 2.0,
        }
    }
}

fn check_triplet(f: &Plane, a: &Plane, b: &Plane) -> Result<()> {
    if !f.same_size(a) || !f.same_size(b) {
        return Err(Error::Shape(format!(
            "metric inputs differ in size: F {}x{}, A {}x{}, B {}x{}",
            f.height, f.width, a.height, a.width, b.height, b.width
        )));
    }
    Ok(())
}

/// Shannon entropy of the 256-bin histogram.
pub fn en(f: &Plane) -> f64 {
    entropy_bits(&histogram(&f.data))
}

fn joint_entropy(x: &[usize], y: &[usize], bins: usize) -> f64 {
    let mut joint = vec![0.0; bins * bins];
    for (&i, &j) in x.iter().zip(y) {
        joint[i * bins + j] += 1.0;
    }
    let n = x.len() as f64;
    joint.iter_mut().for_each(|c| *c /= n);
    entropy_bits(&joint)
}

fn marginal_entropy(x: &[usize], bins: usize) -> f64 {
    let mut p = vec![0.0; bins];
    x.iter().for_each(|&i| p[i] += 1.0);
    let n = x.len() as f64;
    p.iter_mut().for_each(|c| *c /= n);
    entropy_bits(&p)
}

/// `I(X; Y) = H(X) + H(Y) - H(X, Y)` over binned values.
fn mutual_information(x: &[usize], y: &[usize], bins: usize) -> f64 {
    (marginal_entropy(x, bins) + marginal_entropy(y, bins) - joint_entropy(x, y, bins)).max(0.0)
}

fn levels(p: &Plane) -> Vec<usize> {
    p.data.iter().map(|&v| quantize(v)).collect()
}

/// `I(F; A) (+) I(F; B)` from 256-bin joint histograms.
pub fn mi(f: &Plane, a: &Plane, b: &Plane, agg: Aggregation) -> Result<f64> {
    check_triplet(f, a, b)?;
    let (lf, la, lb) = (levels(f), levels(a), levels(b));
    Ok(agg.apply(
        mutual_information(&lf, &la, 256),
        mutual_information(&lf, &lb, 256),
    ))
}

fn gradient_magnitude(p: &Plane) -> Vec<f64> {
    let (gx, gy) = sobel(&p.gray_levels(), p.height, p.width);
    gx.iter().zip(&gy).map(|(x, y)| x.hypot(*y)).collect()
}

fn bin_pair(x: &[f64], y: &[f64]) -> (Vec<usize>, Vec<usize>) {
    let max = x.iter().chain(y).fold(0.0f64, |m, &v| m.max(v));
    let bin = |v: f64| {
        if max > 0.0 {
            ((v / max) * 255.0).round() as usize
        } else {
            0
        }
    };
    (
        x.iter().map(|&v| bin(v)).collect(),
        y.iter().map(|&v| bin(v)).collect(),
    )
}

/// Normalized mutual information `2 I(X;Y) / (H(X) + H(Y))`; two constant
/// maps count as fully informative (1).
fn normalized_mi(x: &[f64], y: &[f64]) -> f64 {
    let (bx, by) = bin_pair(x, y);
    let hs = marginal_entropy(&bx, 256) + marginal_entropy(&by, 256);
    if hs == 0.0 {
        return 1.0;
    }
    (2.0 * mutual_information(&bx, &by, 256) / hs).clamp(0.0, 1.0)
}

/// Feature mutual information: normalized MI between the fused image's
/// feature map and each source's, combined over sources.
pub fn fmi(f: &Plane, a: &Plane, b: &Plane, feature: FmiFeature, agg: Aggregation) -> Result<f64> {
    check_triplet(f, a, b)?;
    let map = |p: &Plane| match feature {
        FmiFeature::Gradient => gradient_magnitude(p),
        FmiFeature::Pixel => p.gray_levels(),
    };
    let (mf, ma, mb) = (map(f), map(a), map(b));
    Ok(agg.apply(normalized_mi(&mf, &ma), normalized_mi(&mf, &mb)))
}

struct EdgeField {
    strength: Vec<f64>,
    angle: Vec<f64>,
}

fn edge_field(p: &Plane) -> EdgeField {
    let (gx, gy) = sobel(&p.gray_levels(), p.height, p.width);
    let strength = gx.iter().zip(&gy).map(|(x, y)| x.hypot(*y)).collect();
    let angle = gx
        .iter()
        .zip(&gy)
        .map(|(&x, &y)| {
            if x == 0.0 {
                std::f64::consts::FRAC_PI_2
            } else {
                (y / x).atan()
            }
        })
        .collect();
    EdgeField { strength, angle }
}

fn edge_preservation(src: &EdgeField, fused: &EdgeField, params: &QabfParams) -> Vec<f64> {
    (0..src.strength.len())
        .map(|i| {
            let (gs, gf) = (src.strength[i], fused.strength[i]);
            let g = if gs == gf {
                1.0
            } else if gs > gf {
                gf / gs
            } else {
                gs / gf
            };
            let a = 1.0 - (src.angle[i] - fused.angle[i]).abs() / std::f64::consts::FRAC_PI_2;
            params.strength(g) * params.orientation(a)
        })
        .collect()
}

/// Xydeas-Petrovic edge transfer score, weighted by source edge strength.
/// Images without any edges score 0.
pub fn qabf(f: &Plane, a: &Plane, b: &Plane, params: &QabfParams) -> Result<f64> {
    check_triplet(f, a, b)?;
    let (ef, ea, eb) = (edge_field(f), edge_field(a), edge_field(b));
    let (qa, qb) = (
        edge_preservation(&ea, &ef, params),
        edge_preservation(&eb, &ef, params),
    );
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..qa.len() {
        num += qa[i] * ea.strength[i] + qb[i] * eb.strength[i];
        den += ea.strength[i] + eb.strength[i];
    }
    Ok(if den > 0.0 { num / den } else { 0.0 })
}

fn blur_same(p: &[f64], h: usize, w: usize, size: usize) -> Vec<f64> {
    let k = gaussian_kernel(size, size as f64 / 5.0);
    let r = (size / 2) as isize;
    let at = |y: isize, x: isize| {
        p[y.clamp(0, h as isize - 1) as usize * w + x.clamp(0, w as isize - 1) as usize]
    };
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut acc = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    acc += k[((dy + r) as usize) * size + (dx + r) as usize] * at(y + dy, x + dx);
                }
            }
            out[y as usize * w + x as usize] = acc;
        }
    }
    out
}

/// `(information kept in the distorted image, information in the
/// reference)` summed over scales.
fn vif_terms(reference: &Plane, distorted: &Plane, scales: usize, noise: f64) -> (f64, f64) {
    const EPS: f64 = 1e-10;
    let (mut r, mut d) = (reference.gray_levels(), distorted.gray_levels());
    let (mut h, mut w) = (reference.height, reference.width);
    let (mut num, mut den) = (0.0, 0.0);
    for scale in 1..=scales {
        let size = (1 << (scales - scale + 1)) + 1;
        if scale > 1 {
            let (rb, db) = (blur_same(&r, h, w, size), blur_same(&d, h, w, size));
            let (nh, nw) = (h.div_ceil(2), w.div_ceil(2));
            r = (0..nh * nw)
                .map(|i| rb[(i / nw) * 2 * w + (i % nw) * 2])
                .collect();
            d = (0..nh * nw)
                .map(|i| db[(i / nw) * 2 * w + (i % nw) * 2])
                .collect();
            (h, w) = (nh, nw);
        }
        let prod =
            |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(a, b)| a * b).collect() };
        let mu1 = blur_same(&r, h, w, size);
        let mu2 = blur_same(&d, h, w, size);
        let e11 = blur_same(&prod(&r, &r), h, w, size);
        let e22 = blur_same(&prod(&d, &d), h, w, size);
        let e12 = blur_same(&prod(&r, &d), h, w, size);
        for i in 0..h * w {
            let s1 = (e11[i] - mu1[i] * mu1[i]).max(0.0);
            let s2 = (e22[i] - mu2[i] * mu2[i]).max(0.0);
            let s12 = e12[i] - mu1[i] * mu2[i];
            let (mut g, mut sv, mut s1c) = (s12 / (s1 + EPS), s2 - s12 / (s1 + EPS) * s12, s1);
            if s1 < EPS {
                g = 0.0;
                sv = s2;
                s1c = 0.0;
            }
            if s2 < EPS {
                g = 0.0;
                sv = 0.0;
            }
            if g < 0.0 {
                sv = s2;
                g = 0.0;
            }
            sv = sv.max(EPS);
            num += (1.0 + g * g * s1c / (sv + noise)).log10();
            den += (1.0 + s1c / noise).log10();
        }
    }
    (num, den)
}

/// Pixel-domain visual information fidelity of `F` against each source,
/// combined over sources. A source without any signal variance scores 0.
pub fn vif(f: &Plane, a: &Plane, b: &Plane, config: &MetricConfig) -> Result<f64> {
    check_triplet(f, a, b)?;
    if f.height.min(f.width) < 32 {
        return Err(Error::ImageSize {
            height: f.height,
            width: f.width,
            reason: "VIF needs both dimensions >= 32".into(),
        });
    }
    let score = |src: &Plane| {
        let (num, den) = vif_terms(src, f, config.vif_scales, config.vif_noise_var);
        if den > 0.0 {
            num / den
        } else {
            0.0
        }
    };
    Ok(config.vif_aggregation.apply(score(a), score(b)))
}

fn correlation(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

/// Sum of correlations of differences: `corr(F - B, A) + corr(F - A, B)`.
/// A zero-variance operand contributes 0.
pub fn scd(f: &Plane, a: &Plane, b: &Plane) -> Result<f64> {
    check_triplet(f, a, b)?;
    let (gf, ga, gb) = (f.gray_levels(), a.gray_levels(), b.gray_levels());
    let fb: Vec<f64> = gf.iter().zip(&gb).map(|(x, y)| x - y).collect();
    let fa: Vec<f64> = gf.iter().zip(&ga).map(|(x, y)| x - y).collect();
    Ok(correlation(&fb, &ga) + correlation(&fa, &gb))
}

/// All six metrics for one fused pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub pair_id: String,
    #[serde(rename = "MI")]
    pub mi: f64,
    #[serde(rename = "FMI")]
    pub fmi: f64,
    #[serde(rename = "VIF")]
    pub vif: f64,
    #[serde(rename = "Qabf")]
    pub qabf: f64,
    #[serde(rename = "EN")]
    pub en: f64,
    #[serde(rename = "SCD")]
    pub scd: f64,
}

pub const METRIC_COLUMNS: [&str; 7] = ["pair_id", "MI", "FMI", "VIF", "Qabf", "EN", "SCD"];

impl PairMetrics {
    pub fn values(&self) -> [f64; 6] {
        [self.mi, self.fmi, self.vif, self.qabf, self.en, self.scd]
    }
}

pub fn evaluate_pair(
    id: &str,
    f: &Plane,
    a: &Plane,
    b: &Plane,
    config: &MetricConfig,
) -> Result<PairMetrics> {
    Ok(PairMetrics {
        pair_id: id.to_string(),
        mi: mi(f, a, b, config.mi_aggregation)?,
        fmi: fmi(f, a, b, config.fmi_feature, config.fmi_aggregation)?,
        vif: vif(f, a, b, config)?,
        qabf: qabf(f, a, b, &config.qabf)?,
        en: en(f),
        scd: scd(f, a, b)?,
    })
}

/// Parameter count, regularizer-based latency estimate and measured fuse
/// time of the evaluated model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelAccounting {
    pub parameters: usize,
    pub latency: f64,
    pub fuse_seconds: f64,
}

/// Per-pair metrics plus their aggregates.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricReport {
    pub pairs: Vec<PairMetrics>,
    pub model: Option<ModelAccounting>,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

impl MetricReport {
    /// Column-wise mean over pairs.
    pub fn mean(&self) -> Option<[f64; 6]> {
        if self.pairs.is_empty() {
            return None;
        }
        let mut out = [0.0; 6];
        for p in &self.pairs {
            out.iter_mut().zip(p.values()).for_each(|(o, v)| *o += v);
        }
        let n = self.pairs.len() as f64;
        Some(out.map(|v| v / n))
    }

    pub fn median(&self) -> Option<[f64; 6]> {
        if self.pairs.is_empty() {
            return None;
        }
        let mut out = [0.0; 6];
        for (c, o) in out.iter_mut().enumerate() {
            let mut col: Vec<f64> = self.pairs.iter().map(|p| p.values()[c]).collect();
            *o = median(&mut col);
        }
        Some(out)
    }

    /// Per-pair CSV with the fixed column order.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for p in &self.pairs {
            w.serialize(p)?;
        }
        if self.pairs.is_empty() {
            w.write_record(METRIC_COLUMNS)?;
        }
        w.flush().map_err(|e| Error::Csv(e.into()))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = csv::Reader::from_reader(file);
        let pairs = r
            .deserialize()
            .collect::<std::result::Result<Vec<PairMetrics>, _>>()?;
        Ok(Self { pairs, model: None })
    }
}
