//! Procedural forgery samples, augmentations, raster I/O and dataset manifests.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::nn::seeded_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ForgeryKind {
    Splice,
    CopyMove,
    Pristine,
}

impl ForgeryKind {
    pub fn name(self) -> &'static str {
        match self {
            ForgeryKind::Splice => "splice",
            ForgeryKind::CopyMove => "copy-move",
            ForgeryKind::Pristine => "pristine",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleMeta {
    pub seed: u64,
    pub index: u64,
    pub kind: ForgeryKind,
    /// Texture streams the sample was assembled from: host first, then donor if any.
    pub sources: Vec<u64>,
}

/// An `height × width` RGB image in `[0, 1]` and its binary mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub height: usize,
    pub width: usize,
    /// Row-major RGB.
    pub image: Vec<f32>,
    /// Row-major, values 0 or 1.
    pub mask: Vec<u8>,
    pub meta: SampleMeta,
}

impl SampleRecord {
    pub fn foreground_fraction(&self) -> f64 {
        self.mask.iter().map(|&m| m as usize).sum::<usize>() as f64 / self.mask.len() as f64
    }
}

/// Shape of a pasted region, in pixel units; a pixel is inside when its centre is.
#[derive(Debug, Clone, PartialEq)]
pub enum Region {
    /// Rows `r0..r1`, columns `c0..c1`.
    Rect { r0: usize, c0: usize, r1: usize, c1: usize },
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64, angle: f64 },
    /// Vertices as `(y, x)`.
    Polygon(Vec<(f64, f64)>),
}

impl Region {
    pub fn contains(&self, y: f64, x: f64) -> bool {
        match self {
            Region::Rect { r0, c0, r1, c1 } => y >= *r0 as f64 && y < *r1 as f64 && x >= *c0 as f64 && x < *c1 as f64,
            Region::Ellipse { cy, cx, ry, rx, angle } => {
                let (dy, dx) = (y - cy, x - cx);
                let (s, c) = angle.sin_cos();
                let u = dx * c + dy * s;
                let v = -dx * s + dy * c;
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            Region::Polygon(pts) => {
                let mut inside = false;
                let n = pts.len();
                for i in 0..n {
                    let (yi, xi) = pts[i];
                    let (yj, xj) = pts[(i + n - 1) % n];
                    if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                        inside = !inside;
                    }
                }
                inside
            }
        }
    }

    pub fn rasterize(&self, height: usize, width: usize) -> Vec<u8> {
        let mut m = vec![0u8; height * width];
        for r in 0..height {
            for c in 0..width {
                m[r * width + c] = self.contains(r as f64 + 0.5, c as f64 + 0.5) as u8;
            }
        }
        m
    }
}

/// Pastes `donor` over `host` inside `region`, feathering the one-pixel ring outside it.
/// Returns the mask of pasted pixels.
pub fn paste_region(host: &mut [f32], donor: &[f32], region: &Region, height: usize, width: usize) -> Vec<u8> {
    let mask = region.rasterize(height, width);
    for r in 0..height {
        for c in 0..width {
            let i = r * width + c;
            let alpha = if mask[i] == 1 {
                1.0
            } else {
                let near = (r.saturating_sub(1)..(r + 2).min(height))
                    .any(|rr| (c.saturating_sub(1)..(c + 2).min(width)).any(|cc| mask[rr * width + cc] == 1));
                if near {
                    0.35
                } else {
                    continue;
                }
            };
            for k in 0..3 {
                host[i * 3 + k] = alpha * donor[i * 3 + k] + (1.0 - alpha) * host[i * 3 + k];
            }
        }
    }
    mask
}

/// Generator settings.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub size: usize,
    pub pristine_fraction: f64,
    pub splice_fraction: f64,
    /// Allowed foreground fraction of forged masks.
    pub fg_band: (f64, f64),
    /// Camera noise standard deviation range of host images.
    pub host_noise: (f64, f64),
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { size: 64, pristine_fraction: 0.05, splice_fraction: 0.5, fg_band: (0.02, 0.40), host_noise: (0.06, 0.12) }
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Smooth procedural texture: base colour, oriented gratings and bilinear value noise.
fn texture(rng: &mut ChaCha8Rng, size: usize) -> Vec<f64> {
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.25..0.75));
    let gratings: Vec<(f64, f64, f64, f64, [f64; 3])> = (0..3)
        .map(|_| {
            let amp = rng.random_range(0.03..0.12);
            let freq = rng.random_range(0.02..0.15) * 2.0 * PI;
            let theta = rng.random_range(0.0..PI);
            let phase = rng.random_range(0.0..2.0 * PI);
            let tint = std::array::from_fn(|_| rng.random_range(0.5..1.0));
            (amp, freq, theta, phase, tint)
        })
        .collect();
    let cells = 5;
    let lattice: Vec<[f64; 3]> =
        (0..(cells + 1) * (cells + 1)).map(|_| std::array::from_fn(|_| rng.random_range(-0.1..0.1))).collect();
    let mut img = vec![0.0; size * size * 3];
    for r in 0..size {
        for c in 0..size {
            let (y, x) = (r as f64, c as f64);
            let (gy, gx) = (y / size as f64 * cells as f64, x / size as f64 * cells as f64);
            let (iy, ix) = (gy.floor() as usize, gx.floor() as usize);
            let (ty, tx) = (gy - iy as f64, gx - ix as f64);
            for k in 0..3 {
                let l = |a: usize, b: usize| lattice[a * (cells + 1) + b][k];
                let noise = (1.0 - ty) * ((1.0 - tx) * l(iy, ix) + tx * l(iy, ix + 1))
                    + ty * ((1.0 - tx) * l(iy + 1, ix) + tx * l(iy + 1, ix + 1));
                let mut v = base[k] + noise;
                for &(amp, freq, theta, phase, tint) in &gratings {
                    v += amp * tint[k] * (freq * (x * theta.cos() + y * theta.sin()) + phase).sin();
                }
                img[(r * size + c) * 3 + k] = v;
            }
        }
    }
    img
}

fn add_noise(img: &mut [f64], rng: &mut ChaCha8Rng, sigma: f64) {
    for v in img.iter_mut() {
        *v += sigma * normal(rng);
    }
}

fn clamp01(img: &[f64]) -> Vec<f32> {
    img.iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect()
}

fn random_region(rng: &mut ChaCha8Rng, size: usize) -> Region {
    let s = size as f64;
    match rng.random_range(0..3) {
        0 => {
            let h = rng.random_range(size / 6..size / 2 + 1).max(2);
            let w = rng.random_range(size / 6..size / 2 + 1).max(2);
            let r0 = rng.random_range(0..size - h + 1);
            let c0 = rng.random_range(0..size - w + 1);
            Region::Rect { r0, c0, r1: r0 + h, c1: c0 + w }
        }
        1 => {
            let ry = rng.random_range(s / 10.0..s / 3.5);
            let rx = rng.random_range(s / 10.0..s / 3.5);
            let m = ry.max(rx);
            Region::Ellipse {
                cy: rng.random_range(m..s - m),
                cx: rng.random_range(m..s - m),
                ry,
                rx,
                angle: rng.random_range(0.0..PI),
            }
        }
        _ => {
            let n = rng.random_range(5..9);
            let rad = rng.random_range(s / 8.0..s / 3.5);
            let cy = rng.random_range(rad..s - rad);
            let cx = rng.random_range(rad..s - rad);
            let mut angles: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
            angles.sort_by(f64::total_cmp);
            Region::Polygon(
                angles
                    .into_iter()
                    .map(|a| {
                        let rr = rad * rng.random_range(0.6..1.0);
                        (cy + rr * a.sin(), cx + rr * a.cos())
                    })
                    .collect(),
            )
        }
    }
}

/// Separable Gaussian blur with clamp-to-edge borders on an interleaved `channels` image.
pub fn gaussian_blur(img: &[f32], height: usize, width: usize, channels: usize, sigma: f64) -> Vec<f32> {
    if sigma <= 0.0 {
        return img.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut taps: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= total);
    let pass = |src: &[f32], horizontal: bool| -> Vec<f32> {
        let mut out = vec![0f32; src.len()];
        for r in 0..height {
            for c in 0..width {
                for k in 0..channels {
                    let mut acc = 0.0;
                    for (ti, &t) in taps.iter().enumerate() {
                        let off = ti as isize - radius;
                        let (rr, cc) = if horizontal {
                            (r, (c as isize + off).clamp(0, width as isize - 1) as usize)
                        } else {
                            ((r as isize + off).clamp(0, height as isize - 1) as usize, c)
                        };
                        acc += t * src[(rr * width + cc) * channels + k] as f64;
                    }
                    out[(r * width + c) * channels + k] = acc as f32;
                }
            }
        }
        out
    };
    pass(&pass(img, true), false)
}

/// One sample from stream `index` of `seed`.
pub fn synth_sample(seed: u64, index: u64, cfg: &SynthConfig) -> Result<SampleRecord> {
    let size = cfg.size;
    if size == 0 || !size.is_multiple_of(32) {
        return Err(Error::contract(format!("synthetic image size {size} must be a positive multiple of 32")));
    }
    let mut rng = seeded_rng(seed, index);
    let sigma = rng.random_range(cfg.host_noise.0..cfg.host_noise.1);
    let mut host = texture(&mut rng, size);
    add_noise(&mut host, &mut rng, sigma);
    let mut image = clamp01(&host);
    let u: f64 = rng.random();
    let kind = if u < cfg.pristine_fraction {
        ForgeryKind::Pristine
    } else if u < cfg.pristine_fraction + (1.0 - cfg.pristine_fraction) * cfg.splice_fraction {
        ForgeryKind::Splice
    } else {
        ForgeryKind::CopyMove
    };
    let mut sources = vec![index];
    let mask = match kind {
        ForgeryKind::Pristine => vec![0; size * size],
        _ => {
            let mut region = None;
            for _ in 0..1000 {
                let r = random_region(&mut rng, size);
                let m = r.rasterize(size, size);
                let frac = m.iter().map(|&v| v as usize).sum::<usize>() as f64 / m.len() as f64;
                if (cfg.fg_band.0..=cfg.fg_band.1).contains(&frac) {
                    region = Some(r);
                    break;
                }
            }
            let region = region.ok_or_else(|| {
                Error::contract(format!("no region shape lands in the foreground band {:?}", cfg.fg_band))
            })?;
            let donor = if kind == ForgeryKind::Splice {
                let donor_stream: u64 = rng.random();
                sources.push(donor_stream);
                let mut drng = seeded_rng(seed ^ 0x5eed_d0e5, donor_stream);
                let tex = texture(&mut drng, size);
                let mut d = clamp01(&tex);
                let extra = drng.random_range(0.0..0.01);
                d = d.iter().map(|&v| (v as f64 + extra * normal(&mut drng)).clamp(0.0, 1.0) as f32).collect();
                gaussian_blur(&d, size, size, 3, 0.6)
            } else {
                let (dy, dx) = loop {
                    let lim = size as i64 / 3;
                    let dy = rng.random_range(-lim..=lim) as isize;
                    let dx = rng.random_range(-lim..=lim) as isize;
                    if dy.abs() + dx.abs() >= size as isize / 8 {
                        break (dy, dx);
                    }
                };
                let gain = rng.random_range(0.92..1.08) as f32;
                let mut shifted = vec![0f32; image.len()];
                for r in 0..size {
                    for c in 0..size {
                        let sr = (r as isize + dy).rem_euclid(size as isize) as usize;
                        let sc = (c as isize + dx).rem_euclid(size as isize) as usize;
                        for k in 0..3 {
                            shifted[(r * size + c) * 3 + k] = (image[(sr * size + sc) * 3 + k] * gain).clamp(0.0, 1.0);
                        }
                    }
                }
                // resampling trace of the copied patch
                gaussian_blur(&shifted, size, size, 3, 1.0)
            };
            paste_region(&mut image, &donor, &region, size, size)
        }
    };
    Ok(SampleRecord { height: size, width: size, image, mask, meta: SampleMeta { seed, index, kind, sources } })
}

/// `count` samples from streams `0..count` of `seed`.
pub fn synth_generate(seed: u64, count: usize, size: usize) -> Result<Vec<SampleRecord>> {
    synth_generate_with(seed, 0, count, &SynthConfig { size, ..SynthConfig::default() })
}

/// `count` samples from streams `first..first + count`.
pub fn synth_generate_with(seed: u64, first: u64, count: usize, cfg: &SynthConfig) -> Result<Vec<SampleRecord>> {
    if count == 0 {
        return Err(Error::contract("synth_generate: count must be at least 1"));
    }
    (first..first + count as u64).map(|i| synth_sample(seed, i, cfg)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AugOp {
    HFlip,
    VFlip,
    GaussianBlur,
    JpegLikeCompression,
    GaussianNoise,
}

impl AugOp {
    pub const ALL: [AugOp; 5] =
        [AugOp::HFlip, AugOp::VFlip, AugOp::GaussianBlur, AugOp::JpegLikeCompression, AugOp::GaussianNoise];

    pub fn name(self) -> &'static str {
        match self {
            AugOp::HFlip => "hflip",
            AugOp::VFlip => "vflip",
            AugOp::GaussianBlur => "gaussian_blur",
            AugOp::JpegLikeCompression => "jpeg_like_compression",
            AugOp::GaussianNoise => "gaussian_noise",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "hflip" => Ok(AugOp::HFlip),
            "vflip" => Ok(AugOp::VFlip),
            "gaussian_blur" | "blur" => Ok(AugOp::GaussianBlur),
            "jpeg_like_compression" | "jpeg" => Ok(AugOp::JpegLikeCompression),
            "gaussian_noise" | "noise" => Ok(AugOp::GaussianNoise),
            other => Err(Error::contract(format!(
                "unknown augmentation '{other}' (hflip | vflip | gaussian_blur | jpeg_like_compression | gaussian_noise)"
            ))),
        }
    }

    /// Parses a comma-separated list; `none` or an empty string is the empty list.
    pub fn parse_list(s: &str) -> Result<Vec<Self>> {
        let s = s.trim();
        if s.is_empty() || s == "none" {
            return Ok(Vec::new());
        }
        s.split(',').map(Self::parse).collect()
    }
}

/// Parameter ranges of the photometric augmentations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentRanges {
    pub blur_sigma: (f64, f64),
    pub jpeg_quality: (u32, u32),
    pub noise_sigma: (f64, f64),
}

impl Default for AugmentRanges {
    fn default() -> Self {
        AugmentRanges { blur_sigma: (0.3, 0.8), jpeg_quality: (60, 95), noise_sigma: (0.005, 0.02) }
    }
}

fn flip(buf: &mut [impl Copy], height: usize, width: usize, channels: usize, horizontal: bool) {
    let mut out = buf.to_vec();
    for r in 0..height {
        for c in 0..width {
            let (sr, sc) = if horizontal { (r, width - 1 - c) } else { (height - 1 - r, c) };
            for k in 0..channels {
                out[(r * width + c) * channels + k] = buf[(sr * width + sc) * channels + k];
            }
        }
    }
    buf.copy_from_slice(&out);
}

const JPEG_LUMA: [f64; 64] = [
    16.0, 11.0, 10.0, 16.0, 24.0, 40.0, 51.0, 61.0, 12.0, 12.0, 14.0, 19.0, 26.0, 58.0, 60.0, 55.0, 14.0, 13.0, 16.0,
    24.0, 40.0, 57.0, 69.0, 56.0, 14.0, 17.0, 22.0, 29.0, 51.0, 87.0, 80.0, 62.0, 18.0, 22.0, 37.0, 56.0, 68.0, 109.0,
    103.0, 77.0, 24.0, 35.0, 55.0, 64.0, 81.0, 104.0, 113.0, 92.0, 49.0, 64.0, 78.0, 87.0, 103.0, 121.0, 120.0, 101.0,
    72.0, 92.0, 95.0, 98.0, 112.0, 100.0, 103.0, 99.0,
];

/// Blockwise 8×8 DCT quantization of every channel with the standard luminance table at `quality`.
pub fn jpeg_like(img: &[f32], height: usize, width: usize, channels: usize, quality: u32) -> Vec<f32> {
    let q = quality.clamp(1, 100) as f64;
    let scale = if q < 50.0 { 5000.0 / q } else { 200.0 - 2.0 * q };
    let table: Vec<f64> = JPEG_LUMA.iter().map(|&t| ((t * scale + 50.0) / 100.0).floor().max(1.0)).collect();
    let basis: Vec<f64> = (0..64)
        .map(|i| {
            let (u, x) = (i / 8, i % 8);
            let cu = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
            cu * ((2 * x + 1) as f64 * u as f64 * PI / 16.0).cos()
        })
        .collect();
    let mut out = img.to_vec();
    for br in (0..height).step_by(8) {
        for bc in (0..width).step_by(8) {
            for k in 0..channels {
                let mut block = [0.0f64; 64];
                for y in 0..8 {
                    for x in 0..8 {
                        let (r, c) = ((br + y).min(height - 1), (bc + x).min(width - 1));
                        block[y * 8 + x] = img[(r * width + c) * channels + k] as f64 * 255.0 - 128.0;
                    }
                }
                let mut coef = [0.0f64; 64];
                for u in 0..8 {
                    for v in 0..8 {
                        let mut s = 0.0;
                        for y in 0..8 {
                            for x in 0..8 {
                                s += basis[u * 8 + y] * basis[v * 8 + x] * block[y * 8 + x];
                            }
                        }
                        let t = table[u * 8 + v];
                        coef[u * 8 + v] = (s / t).round() * t;
                    }
                }
                for y in 0..8 {
                    for x in 0..8 {
                        let (r, c) = (br + y, bc + x);
                        if r >= height || c >= width {
                            continue;
                        }
                        let mut s = 0.0;
                        for u in 0..8 {
                            for v in 0..8 {
                                s += basis[u * 8 + y] * basis[v * 8 + x] * coef[u * 8 + v];
                            }
                        }
                        out[(r * width + c) * channels + k] = ((s + 128.0) / 255.0).clamp(0.0, 1.0) as f32;
                    }
                }
            }
        }
    }
    out
}

/// Applies every op in `ops`, in order; photometric parameters are drawn from `seed`.
pub fn augment(record: &SampleRecord, ops: &[AugOp], seed: u64) -> SampleRecord {
    augment_with(record, ops, &mut seeded_rng(seed, record.meta.index), &AugmentRanges::default())
}

pub fn augment_with(record: &SampleRecord, ops: &[AugOp], rng: &mut ChaCha8Rng, ranges: &AugmentRanges) -> SampleRecord {
    let mut out = record.clone();
    let (h, w) = (out.height, out.width);
    for &op in ops {
        match op {
            AugOp::HFlip | AugOp::VFlip => {
                let horizontal = op == AugOp::HFlip;
                flip(&mut out.image, h, w, 3, horizontal);
                flip(&mut out.mask, h, w, 1, horizontal);
            }
            AugOp::GaussianBlur => {
                let sigma = rng.random_range(ranges.blur_sigma.0..=ranges.blur_sigma.1);
                out.image = gaussian_blur(&out.image, h, w, 3, sigma);
            }
            AugOp::JpegLikeCompression => {
                let q = rng.random_range(ranges.jpeg_quality.0..=ranges.jpeg_quality.1);
                out.image = jpeg_like(&out.image, h, w, 3, q);
            }
            AugOp::GaussianNoise => {
                let sigma = rng.random_range(ranges.noise_sigma.0..=ranges.noise_sigma.1);
                for v in out.image.iter_mut() {
                    *v = (*v as f64 + sigma * normal(rng)).clamp(0.0, 1.0) as f32;
                }
            }
        }
    }
    out
}

/// Each op of `ops` independently with probability `p`.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentPolicy {
    pub ops: Vec<AugOp>,
    pub p: f64,
    pub ranges: AugmentRanges,
}

impl AugmentPolicy {
    pub fn new(ops: Vec<AugOp>) -> Self {
        AugmentPolicy { ops, p: 0.5, ranges: AugmentRanges::default() }
    }

    pub fn apply(&self, record: &SampleRecord, rng: &mut ChaCha8Rng) -> SampleRecord {
        let chosen: Vec<AugOp> = self.ops.iter().copied().filter(|_| rng.random_bool(self.p)).collect();
        augment_with(record, &chosen, rng, &self.ranges)
    }
}

/// Reads an 8-bit raster as a binary mask: values above 127 become 1.
pub fn read_mask(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::open(path).map_err(|e| Error::Decode { path: path.to_path_buf(), msg: e.to_string() })?;
    let g = img.to_luma8();
    let (w, h) = g.dimensions();
    Ok((h as usize, w as usize, g.into_raw().into_iter().map(|v| (v > 127) as u8).collect()))
}

/// Writes a binary mask as 0/255 grayscale PNG.
pub fn write_mask(path: &Path, height: usize, width: usize, mask: &[u8]) -> Result<()> {
    let buf: Vec<u8> = mask.iter().map(|&m| if m > 0 { 255 } else { 0 }).collect();
    write_gray_bytes(path, height, width, buf)
}

/// Writes values in `[0, 1]` as an 8-bit grayscale PNG.
pub fn write_gray(path: &Path, height: usize, width: usize, values: &[f32]) -> Result<()> {
    let buf = values.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    write_gray_bytes(path, height, width, buf)
}

fn write_gray_bytes(path: &Path, height: usize, width: usize, buf: Vec<u8>) -> Result<()> {
    ensure_parent(path)?;
    let img = image::GrayImage::from_raw(width as u32, height as u32, buf)
        .ok_or_else(|| Error::contract(format!("buffer does not fill a {height}x{width} image")))?;
    img.save(path).map_err(|e| Error::Decode { path: path.to_path_buf(), msg: e.to_string() })
}

/// Reads an RGB raster into `[0, 1]` floats.
pub fn read_image(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let img = image::open(path).map_err(|e| Error::Decode { path: path.to_path_buf(), msg: e.to_string() })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    Ok((h as usize, w as usize, rgb.into_raw().into_iter().map(|v| v as f32 / 255.0).collect()))
}

pub fn write_image(path: &Path, height: usize, width: usize, rgb: &[f32]) -> Result<()> {
    ensure_parent(path)?;
    let buf = rgb.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let img = image::RgbImage::from_raw(width as u32, height as u32, buf)
        .ok_or_else(|| Error::contract(format!("buffer does not fill a {height}x{width} RGB image")))?;
    img.save(path).map_err(|e| Error::Decode { path: path.to_path_buf(), msg: e.to_string() })
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    /// `None` for images without ground truth.
    pub mask: Option<PathBuf>,
    pub split: String,
}

/// `image mask split` lines; `-` stands for a missing mask, `#` starts a comment.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            let [image, mask, split] = parts[..] else {
                return Err(Error::Config(format!("manifest line {}: expected 'image mask split', got '{line}'", n + 1)));
            };
            entries.push(ManifestEntry {
                image: image.into(),
                mask: (mask != "-").then(|| mask.into()),
                split: split.to_string(),
            });
        }
        Ok(Manifest { entries })
    }

    pub fn render(&self) -> String {
        self.entries
            .iter()
            .map(|e| {
                let mask = e.mask.as_ref().map_or("-".to_string(), |m| m.display().to_string());
                format!("{} {} {}\n", e.image.display(), mask, e.split)
            })
            .collect()
    }

    /// Reads `path` and checks every referenced file exists under `root`.
    pub fn load(path: &Path, root: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m = Self::parse(&text)?;
        for e in &m.entries {
            for p in std::iter::once(&e.image).chain(e.mask.as_ref()) {
                let full = root.join(p);
                if !full.is_file() {
                    return Err(Error::io(&full, std::io::Error::new(std::io::ErrorKind::NotFound, "listed in manifest")));
                }
            }
        }
        let mut seen = std::collections::HashMap::new();
        for e in &m.entries {
            if let Some(prev) = seen.insert(&e.image, &e.split) {
                if prev != &e.split {
                    return Err(Error::Config(format!("{} appears in splits '{prev}' and '{}'", e.image.display(), e.split)));
                }
            }
        }
        Ok(m)
    }

    pub fn split(&self, tag: &str) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == tag).collect()
    }

    /// Split tags in first-appearance order.
    pub fn splits(&self) -> Vec<String> {
        let mut tags: Vec<String> = Vec::new();
        for e in &self.entries {
            if !tags.contains(&e.split) {
                tags.push(e.split.clone());
            }
        }
        tags
    }
}

/// Writes records as PNGs under `root/split/` and returns their manifest entries.
pub fn write_records(root: &Path, split: &str, records: &[SampleRecord]) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let stem = format!("{:05}", r.meta.index);
        let image = PathBuf::from(split).join(format!("{stem}.png"));
        let mask = PathBuf::from(split).join(format!("{stem}_mask.png"));
        write_image(&root.join(&image), r.height, r.width, &r.image)?;
        write_mask(&root.join(&mask), r.height, r.width, &r.mask)?;
        out.push(ManifestEntry { image, mask: Some(mask), split: split.to_string() });
    }
    Ok(out)
}

/// Loads a manifest entry back into a record; entries without masks get an empty mask.
pub fn read_record(root: &Path, entry: &ManifestEntry, index: u64) -> Result<SampleRecord> {
    let (h, w, image) = read_image(&root.join(&entry.image))?;
    let mask = match &entry.mask {
        Some(m) => {
            let path = root.join(m);
            let (mh, mw, mask) = read_mask(&path)?;
            if (mh, mw) != (h, w) {
                return Err(Error::Decode { path, msg: format!("mask is {mh}x{mw}, image {h}x{w}") });
            }
            mask
        }
        None => vec![0; h * w],
    };
    let kind = if mask.contains(&1) { ForgeryKind::Splice } else { ForgeryKind::Pristine };
    Ok(SampleRecord { height: h, width: w, image, mask, meta: SampleMeta { seed: 0, index, kind, sources: vec![] } })
}
