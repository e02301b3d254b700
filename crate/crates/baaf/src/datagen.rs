//! Synthetic speckle-lesion imagery, PGM file I/O and resizing.
//!
//! Generated samples stand in for clinical data at desk scale: a bright
//! background with one or two darker elliptical lesions, multiplied by
//! mean-1 gamma speckle and blurred at the boundaries. Masks are the exact
//! pre-blur ellipse interiors, so the ground truth stays unambiguous even
//! when the image boundary is not.

use crate::error::{Error, Result};
use crate::seeds::derive_seed;
use crate::tensor::{c, Elem, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Provenance {
    Synthetic { seed: u64 },
    File { path: PathBuf },
}

/// One image/mask pair. Image values live in [0,1]; the mask is strictly
/// binary {0,1} and shares the image's 1×H×W shape.
#[derive(Debug, Clone)]
pub struct SegSample<T> {
    pub id: String,
    pub image: Tensor<T>,
    pub mask: Tensor<T>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub count: usize,
    pub size: usize,
    /// Inclusive range of lesions per image.
    pub lesion_count: (usize, usize),
    /// Semi-axis range as a fraction of the image size.
    pub radius_frac: (f64, f64),
    pub background_mean: f64,
    pub lesion_mean: f64,
    /// Relative standard deviation of the multiplicative gamma speckle.
    pub speckle: f64,
    pub blur_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            count: 30,
            size: 128,
            lesion_count: (1, 2),
            radius_frac: (0.08, 0.28),
            background_mean: 0.62,
            lesion_mean: 0.30,
            speckle: 0.35,
            blur_sigma: 1.2,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::invalid("count must be ≥ 1"));
        }
        let (lo, hi) = self.radius_frac;
        if !(lo > 0.0 && hi < 0.5 && lo <= hi) {
            return Err(Error::invalid(format!(
                "radius fractions must satisfy 0 < {lo} ≤ {hi} < 0.5"
            )));
        }
        if self.lesion_count.0 < 1 || self.lesion_count.0 > self.lesion_count.1 {
            return Err(Error::invalid("lesion count range is empty"));
        }
        if self.size < 8 {
            return Err(Error::invalid("size must be ≥ 8"));
        }
        Ok(())
    }
}

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos_t: f64,
    sin_t: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = dx * self.cos_t + dy * self.sin_t;
        let v = -dx * self.sin_t + dy * self.cos_t;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }

    /// Half-extent of the rotated ellipse along each axis.
    fn extent(&self) -> (f64, f64) {
        let ex = ((self.a * self.cos_t).powi(2) + (self.b * self.sin_t).powi(2)).sqrt();
        let ey = ((self.a * self.sin_t).powi(2) + (self.b * self.cos_t).powi(2)).sqrt();
        (ex, ey)
    }
}

fn sample_lesion(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Result<Ellipse> {
    let size = cfg.size as f64;
    let (rlo, rhi) = cfg.radius_frac;
    for _ in 0..100 {
        let a = size * rng.gen_range(rlo..=rhi);
        let b = size * rng.gen_range(rlo..=rhi);
        let theta = rng.gen_range(0.0..std::f64::consts::PI);
        let e = Ellipse {
            cx: 0.0,
            cy: 0.0,
            a,
            b,
            cos_t: theta.cos(),
            sin_t: theta.sin(),
        };
        let (ex, ey) = e.extent();
        if 2.0 * ex >= size || 2.0 * ey >= size {
            continue; // would not fit at any center; resample axes
        }
        let cx = rng.gen_range(ex..size - ex);
        let cy = rng.gen_range(ey..size - ey);
        return Ok(Ellipse { cx, cy, ..e });
    }
    Err(Error::invalid(
        "could not place a lesion inside the image after 100 attempts",
    ))
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable edge-clamped Gaussian blur on a size×size plane.
fn blur(plane: &mut [f64], size: usize, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as i64;
    let mut tmp = vec![0.0; plane.len()];
    for y in 0..size {
        for x in 0..size {
            let mut acc = 0.0;
            for (i, &kv) in kernel.iter().enumerate() {
                let sx = (x as i64 + i as i64 - radius).clamp(0, size as i64 - 1) as usize;
                acc += kv * plane[y * size + sx];
            }
            tmp[y * size + x] = acc;
        }
    }
    for y in 0..size {
        for x in 0..size {
            let mut acc = 0.0;
            for (i, &kv) in kernel.iter().enumerate() {
                let sy = (y as i64 + i as i64 - radius).clamp(0, size as i64 - 1) as usize;
                acc += kv * tmp[sy * size + x];
            }
            plane[y * size + x] = acc;
        }
    }
}

/// Deterministic dataset: sample `i` depends only on (cfg, i).
pub fn generate_synthetic<T: Elem>(cfg: &SynthConfig) -> Result<Vec<SegSample<T>>> {
    cfg.validate()?;
    let size = cfg.size;
    let mut samples = Vec::with_capacity(cfg.count);
    for index in 0..cfg.count {
        let sample_seed = derive_seed(cfg.seed, index as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
        let n_lesions = rng.gen_range(cfg.lesion_count.0..=cfg.lesion_count.1);
        let lesions: Vec<Ellipse> = (0..n_lesions)
            .map(|_| sample_lesion(&mut rng, cfg))
            .collect::<Result<_>>()?;

        let mut mask = vec![0.0f64; size * size];
        let mut image = vec![cfg.background_mean; size * size];
        for y in 0..size {
            for x in 0..size {
                let inside = lesions
                    .iter()
                    .any(|e| e.contains(x as f64 + 0.5, y as f64 + 0.5));
                if inside {
                    mask[y * size + x] = 1.0;
                    image[y * size + x] = cfg.lesion_mean;
                }
            }
        }
        if cfg.speckle > 0.0 {
            let shape = 1.0 / (cfg.speckle * cfg.speckle);
            let gamma = Gamma::new(shape, 1.0 / shape)
                .map_err(|e| Error::invalid(format!("speckle distribution: {e}")))?;
            for v in &mut image {
                *v *= gamma.sample(&mut rng);
            }
        }
        blur(&mut image, size, cfg.blur_sigma);
        for v in &mut image {
            *v = v.clamp(0.0, 1.0);
        }

        let image = Tensor::from_vec(
            vec![1, size, size],
            image.into_iter().map(|v| c(v)).collect(),
        )?;
        let mask = Tensor::from_vec(
            vec![1, size, size],
            mask.into_iter().map(|v| c(v)).collect(),
        )?;
        samples.push(SegSample {
            id: format!("synth{index:04}"),
            image,
            mask,
            provenance: Provenance::Synthetic { seed: sample_seed },
        });
    }
    Ok(samples)
}

/// Write a [0,1]-valued 1×H×W tensor as binary 8-bit PGM (P5).
pub fn save_pgm<T: Elem>(t: &Tensor<T>, path: &Path) -> Result<()> {
    let s = t.shape();
    let (h, w) = match s.len() {
        3 if s[0] == 1 => (s[1], s[2]),
        2 => (s[0], s[1]),
        _ => return Err(Error::invalid(format!("save_pgm expects 1×H×W, got {s:?}"))),
    };
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    write!(out, "P5\n{w} {h}\n255\n")?;
    let bytes: Vec<u8> = t
        .data()
        .iter()
        .map(|&v| {
            let f = v.to_f64().unwrap().clamp(0.0, 1.0);
            (f * 255.0).round() as u8
        })
        .collect();
    out.write_all(&bytes)?;
    Ok(())
}

/// Read a binary PGM written by [`save_pgm`] (or any 8-bit P5 file) back
/// into a 1×H×W tensor scaled to [0,1].
pub fn load_pgm<T: Elem>(path: &Path) -> Result<Tensor<T>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let pathstr = path.display().to_string();
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::malformed(&pathstr, "not a binary PGM (missing P5 magic)"));
    }
    // header: three whitespace-separated tokens (width, height, maxval),
    // `#` comments allowed, then exactly one whitespace byte
    let mut pos = 2usize;
    let mut tokens = Vec::new();
    while tokens.len() < 3 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::malformed(&pathstr, "truncated or non-numeric header"));
        }
        let tok: usize = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::malformed(&pathstr, "bad header token"))?;
        tokens.push(tok);
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::malformed(&pathstr, "missing separator after maxval"));
    }
    pos += 1;
    let (w, h, maxval) = (tokens[0], tokens[1], tokens[2]);
    if maxval == 0 || maxval > 255 {
        return Err(Error::malformed(&pathstr, format!("unsupported maxval {maxval}")));
    }
    let need = w * h;
    if bytes.len() < pos + need {
        return Err(Error::malformed(
            &pathstr,
            format!("payload truncated: need {need} bytes, have {}", bytes.len() - pos),
        ));
    }
    let data: Vec<T> = bytes[pos..pos + need]
        .iter()
        .map(|&b| c(b as f64 / maxval as f64))
        .collect();
    Tensor::from_vec(vec![1, h, w], data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResizeKind {
    /// Edge-clamped, align-corners-false; for images.
    Bilinear,
    /// Preserves binarity; for masks.
    Nearest,
}

/// Resample a C×H×W tensor to a new spatial size.
pub fn resize<T: Elem>(t: &Tensor<T>, target: (usize, usize), kind: ResizeKind) -> Result<Tensor<T>> {
    let s = t.shape();
    if s.len() != 3 {
        return Err(Error::invalid(format!("resize expects C×H×W, got {s:?}")));
    }
    let (ch, h, w) = (s[0], s[1], s[2]);
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(Error::invalid("resize target must be ≥ 1"));
    }
    if (th, tw) == (h, w) {
        return Ok(t.clone());
    }
    let sy = h as f64 / th as f64;
    let sx = w as f64 / tw as f64;
    let mut out = Tensor::zeros(&[ch, th, tw]);
    for cc in 0..ch {
        let src = &t.data()[cc * h * w..(cc + 1) * h * w];
        let dst = &mut out.data_mut()[cc * th * tw..(cc + 1) * th * tw];
        for y in 0..th {
            for x in 0..tw {
                let v = match kind {
                    ResizeKind::Nearest => {
                        let iy = (((y as f64 + 0.5) * sy) as usize).min(h - 1);
                        let ix = (((x as f64 + 0.5) * sx) as usize).min(w - 1);
                        src[iy * w + ix]
                    }
                    ResizeKind::Bilinear => {
                        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
                        let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
                        let y0 = fy.floor() as usize;
                        let x0 = fx.floor() as usize;
                        let y1 = (y0 + 1).min(h - 1);
                        let x1 = (x0 + 1).min(w - 1);
                        let dy = c::<T>(fy - y0 as f64);
                        let dx = c::<T>(fx - x0 as f64);
                        let one = T::one();
                        let top = src[y0 * w + x0] * (one - dx) + src[y0 * w + x1] * dx;
                        let bot = src[y1 * w + x0] * (one - dx) + src[y1 * w + x1] * dx;
                        top * (one - dy) + bot * dy
                    }
                };
                dst[y * tw + x] = v;
            }
        }
    }
    Ok(out)
}

/// Dataset directory layout: `images/<id>.pgm`, `masks/<id>.pgm`,
/// `manifest.csv` with an `id` header row.
pub fn save_dataset<T: Elem>(samples: &[SegSample<T>], dir: &Path) -> Result<()> {
    let images = dir.join("images");
    let masks = dir.join("masks");
    std::fs::create_dir_all(&images)?;
    std::fs::create_dir_all(&masks)?;
    let mut manifest = String::from("id\n");
    for s in samples {
        save_pgm(&s.image, &images.join(format!("{}.pgm", s.id)))?;
        save_pgm(&s.mask, &masks.join(format!("{}.pgm", s.id)))?;
        manifest.push_str(&s.id);
        manifest.push('\n');
    }
    std::fs::write(dir.join("manifest.csv"), manifest)?;
    Ok(())
}

pub fn load_dataset<T: Elem>(dir: &Path) -> Result<Vec<SegSample<T>>> {
    let manifest_path = dir.join("manifest.csv");
    let manifest = std::fs::read_to_string(&manifest_path)
        .map_err(|e| Error::malformed(manifest_path.display().to_string(), e.to_string()))?;
    let mut samples = Vec::new();
    for (i, line) in manifest.lines().enumerate() {
        let id = line.split(',').next().unwrap_or("").trim();
        if id.is_empty() || (i == 0 && id == "id") {
            continue;
        }
        let image_path = dir.join("images").join(format!("{id}.pgm"));
        let mask_path = dir.join("masks").join(format!("{id}.pgm"));
        let image = load_pgm::<T>(&image_path)?;
        // quantization maps {0,255} back to exactly {0,1}; re-binarize
        // defensively for masks produced elsewhere
        let mask = load_pgm::<T>(&mask_path)?
            .map(|v| if v >= c(0.5) { T::one() } else { T::zero() });
        if image.shape() != mask.shape() {
            return Err(Error::shape_mismatch(
                &format!("sample {id}"),
                image.shape(),
                mask.shape(),
            ));
        }
        samples.push(SegSample {
            id: id.to_string(),
            image,
            mask,
            provenance: Provenance::File { path: image_path },
        });
    }
    if samples.is_empty() {
        return Err(Error::malformed(
            manifest_path.display().to_string(),
            "manifest lists no samples",
        ));
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noise_off_is_piecewise_constant() {
        let cfg = SynthConfig {
            count: 2,
            speckle: 0.0,
            blur_sigma: 0.0,
            seed: 3,
            ..SynthConfig::default()
        };
        let samples = generate_synthetic::<f64>(&cfg).unwrap();
        for s in &samples {
            for (img, m) in s.image.data().iter().zip(s.mask.data()) {
                let expect = if *m > 0.5 {
                    cfg.lesion_mean
                } else {
                    cfg.background_mean
                };
                assert!((img - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn foreground_fraction_bounded() {
        let cfg = SynthConfig {
            count: 12,
            seed: 9,
            ..SynthConfig::default()
        };
        for s in generate_synthetic::<f32>(&cfg).unwrap() {
            let fg: f64 = s.mask.data().iter().map(|&v| v as f64).sum();
            let frac = fg / s.mask.numel() as f64;
            assert!(frac > 0.0 && frac < 0.5, "fraction {frac}");
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SynthConfig {
            count: 4,
            seed: 21,
            ..SynthConfig::default()
        };
        let a = generate_synthetic::<f32>(&cfg).unwrap();
        let b = generate_synthetic::<f32>(&cfg).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image.data(), y.image.data());
            assert_eq!(x.mask.data(), y.mask.data());
        }
    }

    #[test]
    fn masks_stay_binary_through_pipeline() {
        let cfg = SynthConfig {
            count: 3,
            seed: 5,
            ..SynthConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let samples = generate_synthetic::<f32>(&cfg).unwrap();
        save_dataset(&samples, dir.path()).unwrap();
        let loaded = load_dataset::<f32>(dir.path()).unwrap();
        assert_eq!(loaded.len(), 3);
        for (orig, back) in samples.iter().zip(&loaded) {
            assert_eq!(orig.mask.data(), back.mask.data(), "mask roundtrip exact");
            assert!(back.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }

    #[test]
    fn pgm_roundtrip_quantization_bound() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.pgm");
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = Tensor::<f64>::rand_uniform(&[1, 9, 7], 0.0, 1.0, &mut rng);
        save_pgm(&img, &path).unwrap();
        let back = load_pgm::<f64>(&path).unwrap();
        assert_eq!(back.shape(), &[1, 9, 7]);
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 1.0 / 510.0 + 1e-12);
        }
    }

    #[test]
    fn text_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("notes.txt");
        std::fs::write(&path, "hello world\n").unwrap();
        assert!(matches!(
            load_pgm::<f32>(&path),
            Err(Error::Malformed { .. })
        ));
    }

    #[test]
    fn truncated_pgm_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.pgm");
        save_pgm(&Tensor::<f32>::full(&[1, 8, 8], 0.5), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(
            load_pgm::<f32>(&path),
            Err(Error::Malformed { .. })
        ));
    }

    #[test]
    fn resize_identity_and_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = Tensor::<f64>::rand_uniform(&[1, 6, 6], 0.0, 1.0, &mut rng);
        let same = resize(&img, (6, 6), ResizeKind::Bilinear).unwrap();
        assert_eq!(same.data(), img.data());

        let constant = Tensor::<f64>::full(&[1, 5, 5], 0.7);
        for kind in [ResizeKind::Bilinear, ResizeKind::Nearest] {
            let r = resize(&constant, (11, 3), kind).unwrap();
            assert!(r.data().iter().all(|&v| (v - 0.7).abs() < 1e-12));
        }
    }

    #[test]
    fn nearest_up_down_recovers_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let mask = Tensor::<f32>::from_vec(
                vec![1, 16, 16],
                (0..256)
                    .map(|_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 })
                    .collect(),
            )
            .unwrap();
            let up = resize(&mask, (32, 32), ResizeKind::Nearest).unwrap();
            assert!(up.data().iter().all(|&v| v == 0.0 || v == 1.0));
            let down = resize(&up, (16, 16), ResizeKind::Nearest).unwrap();
            assert_eq!(down.data(), mask.data());
        }
    }

    #[test]
    fn intensity_modes_separated_at_low_speckle() {
        // with speckle ≤ 0.2 the lesion/background means stay separated
        // by at least half the configured gap (mean test, not literal
        // histogram modes)
        let cfg = SynthConfig {
            count: 6,
            speckle: 0.15,
            blur_sigma: 0.8,
            seed: 31,
            ..SynthConfig::default()
        };
        let gap = cfg.background_mean - cfg.lesion_mean;
        for s in generate_synthetic::<f64>(&cfg).unwrap() {
            let (mut fg_sum, mut fg_n, mut bg_sum, mut bg_n) = (0.0, 0usize, 0.0, 0usize);
            for (img, m) in s.image.data().iter().zip(s.mask.data()) {
                if *m > 0.5 {
                    fg_sum += img;
                    fg_n += 1;
                } else {
                    bg_sum += img;
                    bg_n += 1;
                }
            }
            let observed = bg_sum / bg_n as f64 - fg_sum / fg_n.max(1) as f64;
            assert!(
                observed > 0.5 * gap,
                "modes too close: observed gap {observed}, configured {gap}"
            );
        }
    }
}
