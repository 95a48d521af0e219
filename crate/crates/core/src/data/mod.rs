//! Image I/O, patch sampling, the synthetic degradation `z = blur(y) + n`,
//! and `ω` sampling.

mod rng;

pub use rng::Rng;

use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::TuneParams;
use crate::scalar::Scalar;
use crate::tensor::{filter2d_reflect, gaussian_kernel, Shape, Tensor};

fn image_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Decodes an 8-bit PNG into `[1,3,h,w]` with values `byte/255`. Grey and
/// alpha layouts are widened/dropped; other bit depths are rejected.
/// `name` only labels errors.
pub fn decode_png(bytes: &[u8], name: &Path) -> Result<Tensor<f32>> {
    match image::guess_format(bytes) {
        Ok(ImageFormat::Png) => {}
        Ok(f) => return Err(image_err(name, format!("unsupported format {f:?}, expected PNG"))),
        Err(_) => return Err(image_err(name, "not a PNG file")),
    }
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png).map_err(|e| image_err(name, e.to_string()))?;
    let rgb = match img {
        DynamicImage::ImageRgb8(i) => i,
        DynamicImage::ImageRgba8(_) | DynamicImage::ImageLuma8(_) | DynamicImage::ImageLumaA8(_) => img.to_rgb8(),
        other => {
            return Err(image_err(name, format!("unsupported pixel layout {:?}, expected 8-bit RGB", other.color())));
        }
    };
    let (w, h) = rgb.dimensions();
    let (w, h) = (w as usize, h as usize);
    let raw = rgb.as_raw();
    Ok(Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, i, j| raw[(i * w + j) * 3 + c] as f32 / 255.0))
}

/// Width and height from a PNG header, without decoding pixel data.
pub fn png_dimensions(bytes: &[u8], name: &Path) -> Result<(usize, usize)> {
    let reader = image::ImageReader::with_format(Cursor::new(bytes), ImageFormat::Png);
    let (w, h) = reader.into_dimensions().map_err(|e| image_err(name, e.to_string()))?;
    Ok((w as usize, h as usize))
}

/// Clamp to `[0,1]`, scale to 255 and round half away from zero.
pub fn to_byte<T: Scalar>(v: T) -> u8 {
    let v = v.as_f64();
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (v * 255.0).round() as u8
}

/// Encodes item 0 of a `[n,3,h,w]` tensor as an 8-bit RGB PNG.
pub fn encode_png<T: Scalar>(t: &Tensor<T>) -> Result<Vec<u8>> {
    let s = t.shape();
    if s.c != 3 {
        return Err(Error::dim("encode_png", "c", 3, s.c));
    }
    if s.n < 1 || s.h < 1 || s.w < 1 {
        return Err(Error::arg("encode_png", "empty image"));
    }
    let img = RgbImage::from_fn(s.w as u32, s.h as u32, |j, i| {
        let px = |c| to_byte(t.at(0, c, i as usize, j as usize));
        image::Rgb([px(0), px(1), px(2)])
    });
    let mut out = Vec::new();
    img.write_to(&mut Cursor::new(&mut out), ImageFormat::Png)
        .map_err(|e| Error::arg("encode_png", e.to_string()))?;
    Ok(out)
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_png(&bytes, path)
}

pub fn save_image<T: Scalar>(t: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_png(t)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// PNG files of a directory (sorted by name), or the paths listed in a
/// manifest file, one per line, relative to the manifest's directory.
/// Blank lines and lines starting with `#` are ignored.
pub fn list_images(path: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let path = path.as_ref();
    let mut out = Vec::new();
    if path.is_dir() {
        for entry in std::fs::read_dir(path).map_err(|e| Error::io(path, e))? {
            let p = entry.map_err(|e| Error::io(path, e))?.path();
            if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
                out.push(p);
            }
        }
        out.sort();
    } else {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for line in text.lines().map(str::trim) {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            out.push(base.join(line));
        }
    }
    Ok(out)
}

/// Loaded images with their source paths.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub paths: Vec<PathBuf>,
    pub images: Vec<Tensor<f32>>,
}

impl Dataset {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let paths = list_images(&path)?;
        let images = paths.iter().map(load_image).collect::<Result<Vec<_>>>()?;
        if images.is_empty() {
            return Err(Error::arg("dataset", format!("no images found in {}", path.as_ref().display())));
        }
        Ok(Dataset { paths, images })
    }

    pub fn from_images(images: Vec<Tensor<f32>>) -> Self {
        Dataset {
            paths: vec![PathBuf::new(); images.len()],
            images,
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmallImagePolicy {
    /// Any image smaller than the patch is an error.
    #[default]
    Error,
    /// Images smaller than the patch are never drawn.
    Skip,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchOptions {
    #[serde(default)]
    pub flip: bool,
    #[serde(default)]
    pub small_images: SmallImagePolicy,
}

/// Indices of images that can supply a `size×size` patch.
pub fn eligible_images(images: &[Tensor<f32>], size: usize, policy: SmallImagePolicy) -> Result<Vec<usize>> {
    let mut ok = Vec::new();
    for (i, img) in images.iter().enumerate() {
        let s = img.shape();
        if s.h >= size && s.w >= size {
            ok.push(i);
        } else if policy == SmallImagePolicy::Error {
            return Err(Error::arg(
                "sample_patch",
                format!("image {i} is {}x{}, smaller than patch size {size}", s.h, s.w),
            ));
        } else {
            log::warn!("skipping image {i} ({}x{}): smaller than patch size {size}", s.h, s.w);
        }
    }
    if ok.is_empty() {
        return Err(Error::arg("sample_patch", format!("no image can supply a {size}x{size} patch")));
    }
    Ok(ok)
}

/// Crops `[1,c,size,size]` at `(top, left)` of item 0, optionally mirrored.
pub fn crop(img: &Tensor<f32>, top: usize, left: usize, size: usize, flip: bool) -> Result<Tensor<f32>> {
    let s = img.shape();
    if top + size > s.h || left + size > s.w {
        return Err(Error::arg("crop", "patch exceeds image bounds"));
    }
    Ok(Tensor::from_fn(Shape::new(1, s.c, size, size), |_, c, i, j| {
        let j = if flip { size - 1 - j } else { j };
        img.at(0, c, top + i, left + j)
    }))
}

/// One patch from an image chosen uniformly among `eligible`, with a uniform
/// top-left corner. Returns the patch and `(image, top, left)`.
pub fn sample_patch_from(
    images: &[Tensor<f32>],
    eligible: &[usize],
    size: usize,
    flip: bool,
    rng: &mut Rng,
) -> Result<(Tensor<f32>, (usize, usize, usize))> {
    if eligible.is_empty() {
        return Err(Error::arg("sample_patch", "no eligible images"));
    }
    let idx = eligible[rng.below(eligible.len())];
    let s = images[idx].shape();
    let top = rng.below(s.h - size + 1);
    let left = rng.below(s.w - size + 1);
    let mirror = flip && rng.coin();
    Ok((crop(&images[idx], top, left, size, mirror)?, (idx, top, left)))
}

pub fn sample_patch(images: &[Tensor<f32>], size: usize, opts: PatchOptions, rng: &mut Rng) -> Result<Tensor<f32>> {
    let eligible = eligible_images(images, size, opts.small_images)?;
    Ok(sample_patch_from(images, &eligible, size, opts.flip, rng)?.0)
}

/// `n` patches stacked into `[n,c,size,size]`.
pub fn sample_batch(images: &[Tensor<f32>], n: usize, size: usize, opts: PatchOptions, rng: &mut Rng) -> Result<Tensor<f32>> {
    let eligible = eligible_images(images, size, opts.small_images)?;
    let patches = (0..n)
        .map(|_| Ok(sample_patch_from(images, &eligible, size, opts.flip, rng)?.0))
        .collect::<Result<Vec<_>>>()?;
    Tensor::concat_batch(&patches.iter().collect::<Vec<_>>())
}

fn default_support() -> usize {
    21
}

/// Ranges of the noise level (8-bit units) and blur width drawn per step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradationSpec {
    pub sigma_range: [f64; 2],
    #[serde(default)]
    pub rho_range: [f64; 2],
    #[serde(default = "default_support")]
    pub blur_support: usize,
}

impl Default for DegradationSpec {
    fn default() -> Self {
        DegradationSpec {
            sigma_range: [10.0, 30.0],
            rho_range: [0.0, 0.0],
            blur_support: 21,
        }
    }
}

impl DegradationSpec {
    pub fn noise_only(lo: f64, hi: f64) -> Self {
        DegradationSpec {
            sigma_range: [lo, hi],
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        for (name, [lo, hi]) in [("sigma_range", self.sigma_range), ("rho_range", self.rho_range)] {
            if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
                bad.push(format!("{name} must satisfy 0 <= lo <= hi (got [{lo}, {hi}])"));
            }
        }
        if self.blur_support % 2 == 0 {
            bad.push(format!("blur_support must be odd (got {})", self.blur_support));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }

    /// Uniform `(σ, ρ)` draw from the ranges.
    pub fn draw(&self, rng: &mut Rng) -> (f64, f64) {
        let s = rng.uniform_in(self.sigma_range[0], self.sigma_range[1]);
        let r = rng.uniform_in(self.rho_range[0], self.rho_range[1]);
        (s, r)
    }
}

/// `blur_ρ(y)` only.
pub fn blur<T: Scalar>(y: &Tensor<T>, rho: f64, support: usize) -> Result<Tensor<T>> {
    if rho < 0.0 {
        return Err(Error::arg("degrade", format!("rho must be >= 0, got {rho}")));
    }
    if rho == 0.0 {
        return Ok(y.clone());
    }
    filter2d_reflect(y, &gaussian_kernel(support, rho)?)
}

/// `z = blur_ρ(y) + n`, `n ~ N(0, (σ/255)²)` i.i.d. in element order; no clipping.
pub fn degrade<T: Scalar>(y: &Tensor<T>, sigma: f64, rho: f64, spec: &DegradationSpec, rng: &mut Rng) -> Result<Tensor<T>> {
    const OP: &str = "degrade";
    if sigma < 0.0 || rho < 0.0 {
        return Err(Error::arg(OP, format!("sigma and rho must be >= 0 (got {sigma}, {rho})")));
    }
    let within = |v: f64, [lo, hi]: [f64; 2]| v >= lo - 1e-9 && v <= hi + 1e-9;
    if !within(sigma, spec.sigma_range) {
        return Err(Error::arg(OP, format!("sigma {sigma} outside {:?}", spec.sigma_range)));
    }
    if !within(rho, spec.rho_range) {
        return Err(Error::arg(OP, format!("rho {rho} outside {:?}", spec.rho_range)));
    }
    let mut z = blur(y, rho, spec.blur_support)?;
    if sigma > 0.0 {
        let s = sigma / 255.0;
        for v in z.data_mut() {
            *v += T::of(s * rng.normal());
        }
    }
    Ok(z)
}

/// `ω_i ~ U(0,1)` i.i.d.
pub fn sample_omega<T: Scalar>(p: usize, rng: &mut Rng) -> TuneParams<T> {
    let values = (0..p.max(1)).map(|_| T::of(rng.uniform())).collect();
    TuneParams::new(values).expect("uniform draws lie in [0, 1)")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_png(w: u32, h: u32) -> (Vec<u8>, Vec<u8>) {
        let img = RgbImage::from_fn(w, h, |x, y| image::Rgb([(x * 17 % 256) as u8, (y * 29 % 256) as u8, ((x + y) * 7 % 256) as u8]));
        let mut buf = Vec::new();
        img.write_to(&mut Cursor::new(&mut buf), ImageFormat::Png).unwrap();
        (buf, img.into_raw())
    }

    #[test]
    fn png_round_trip_is_byte_exact() {
        let (png, raw) = gradient_png(13, 7);
        let t = decode_png(&png, Path::new("g.png")).unwrap();
        assert_eq!(t.shape(), Shape::new(1, 3, 7, 13));
        let again = encode_png(&t).unwrap();
        let back = image::load_from_memory(&again).unwrap().to_rgb8();
        assert_eq!(back.into_raw(), raw);
    }

    #[test]
    fn decoded_values_match_raw_bytes() {
        let (png, _) = gradient_png(9, 5);
        // second decoder: the png crate via image's raw reader
        let decoder = png_bytes(&png);
        let t = decode_png(&png, Path::new("g.png")).unwrap();
        for i in 0..5 {
            for j in 0..9 {
                for c in 0..3 {
                    assert_eq!(t.at(0, c, i, j), decoder[(i * 9 + j) * 3 + c] as f32 / 255.0);
                }
            }
        }
    }

    fn png_bytes(png: &[u8]) -> Vec<u8> {
        let img = image::ImageReader::with_format(Cursor::new(png), ImageFormat::Png).decode().unwrap();
        img.into_rgb8().into_raw()
    }

    #[test]
    fn header_dimensions() {
        let (png, _) = gradient_png(11, 3);
        assert_eq!(png_dimensions(&png, Path::new("g.png")).unwrap(), (11, 3));
        assert!(png_dimensions(b"junk", Path::new("j")).is_err());
    }

    #[test]
    fn black_image_decodes_to_zeros() {
        let img = RgbImage::new(4, 4);
        let mut buf = Vec::new();
        img.write_to(&mut Cursor::new(&mut buf), ImageFormat::Png).unwrap();
        let t = decode_png(&buf, Path::new("black.png")).unwrap();
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_png_and_16_bit_are_rejected_with_name() {
        let err = decode_png(b"not an image", Path::new("bad.bin")).unwrap_err();
        assert!(err.to_string().contains("bad.bin"));
        let img = image::ImageBuffer::<image::Rgb<u16>, _>::new(2, 2);
        let mut buf = Vec::new();
        DynamicImage::ImageRgb16(img).write_to(&mut Cursor::new(&mut buf), ImageFormat::Png).unwrap();
        let err = decode_png(&buf, Path::new("deep.png")).unwrap_err();
        assert!(matches!(err, Error::Image { .. }));
        assert!(err.to_string().contains("deep.png"));
    }

    #[test]
    fn save_rounds_half_away_and_clamps() {
        assert_eq!(to_byte(0.5f64 / 255.0), 1);
        assert_eq!(to_byte(1.5f64 / 255.0), 2);
        assert_eq!(to_byte(-0.3f32), 0);
        assert_eq!(to_byte(4.0f32), 255);
        assert_eq!(to_byte(f32::NAN), 0);
    }

    #[test]
    fn full_size_patch_is_identity_crop() {
        let img = Tensor::from_fn(Shape::new(1, 3, 6, 6), |_, c, i, j| (c * 36 + i * 6 + j) as f32);
        let mut rng = Rng::seed(1);
        let p = sample_patch(std::slice::from_ref(&img), 6, PatchOptions::default(), &mut rng).unwrap();
        assert_eq!(p, img);
    }

    #[test]
    fn patch_corners_reproduce_and_are_uniform() {
        let imgs = vec![Tensor::<f32>::zeros(Shape::new(1, 3, 8, 8))];
        let eligible = [0];
        let draw = |seed| {
            let mut rng = Rng::seed(seed);
            (0..10_000)
                .map(|_| sample_patch_from(&imgs, &eligible, 4, false, &mut rng).unwrap().1)
                .collect::<Vec<_>>()
        };
        let a = draw(3);
        assert_eq!(a, draw(3));
        // 5x5 = 25 corner cells, each with probability 1/25
        let mut hist = [0usize; 25];
        for &(_, t, l) in &a {
            hist[t * 5 + l] += 1;
        }
        let n = a.len() as f64;
        let p = 1.0 / 25.0;
        let sd = (n * p * (1.0 - p)).sqrt();
        for &h in &hist {
            assert!((h as f64 - n * p).abs() <= 3.0 * sd + 1.0, "{hist:?}");
        }
    }

    #[test]
    fn small_images_error_or_skip() {
        let imgs = vec![Tensor::<f32>::zeros(Shape::new(1, 3, 4, 4)), Tensor::zeros(Shape::new(1, 3, 10, 10))];
        let mut rng = Rng::seed(0);
        assert!(sample_patch(&imgs, 8, PatchOptions::default(), &mut rng).is_err());
        let opts = PatchOptions {
            small_images: SmallImagePolicy::Skip,
            ..Default::default()
        };
        assert_eq!(eligible_images(&imgs, 8, SmallImagePolicy::Skip).unwrap(), vec![1]);
        assert!(sample_patch(&imgs, 8, opts, &mut rng).is_ok());
    }

    #[test]
    fn degrade_identity_when_clean() {
        let y = Tensor::from_fn(Shape::new(1, 3, 5, 5), |_, c, i, j| (c + i * j) as f32 * 0.01);
        let spec = DegradationSpec::noise_only(0.0, 30.0);
        let z = degrade(&y, 0.0, 0.0, &spec, &mut Rng::seed(2)).unwrap();
        assert_eq!(z, y);
        assert!(degrade(&y, -1.0, 0.0, &spec, &mut Rng::seed(2)).is_err());
        assert!(degrade(&y, 40.0, 0.0, &spec, &mut Rng::seed(2)).is_err());
    }

    #[test]
    fn noise_level_and_independence() {
        let n = 320 * 320;
        let y = Tensor::<f64>::full(Shape::new(1, 1, 320, 320), 0.5);
        let spec = DegradationSpec::noise_only(0.0, 30.0);
        let z = degrade(&y, 25.5, 0.0, &spec, &mut Rng::seed(4)).unwrap();
        let d: Vec<f64> = z.data().iter().map(|v| v - 0.5).collect();
        let mean = d.iter().sum::<f64>() / n as f64;
        let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let sd = var.sqrt();
        // std of the sample std is about σ/√(2n)
        assert!((sd - 0.1).abs() < 3.0 * 0.1 / (2.0 * n as f64).sqrt(), "{sd}");
        let lag: f64 = d.windows(2).map(|w| w[0] * w[1]).sum::<f64>() / (n - 1) as f64;
        assert!((lag / var).abs() < 0.01);
    }

    #[test]
    fn blur_of_impulse_is_the_stencil() {
        let mut y = Tensor::<f64>::zeros(Shape::new(1, 1, 41, 41));
        let c = y.index(0, 0, 20, 20);
        y.data_mut()[c] = 1.0;
        let spec = DegradationSpec {
            sigma_range: [0.0, 0.0],
            rho_range: [0.0, 2.0],
            blur_support: 21,
        };
        let z = degrade(&y, 0.0, 2.0, &spec, &mut Rng::seed(0)).unwrap();
        // oracle stencil built directly from the Gaussian formula
        let mut st = vec![0.0f64; 21 * 21];
        for u in 0..21 {
            for v in 0..21 {
                let (du, dv) = (u as f64 - 10.0, v as f64 - 10.0);
                st[u * 21 + v] = (-(du * du + dv * dv) / 8.0).exp();
            }
        }
        let total: f64 = st.iter().sum();
        for u in 0..21 {
            for v in 0..21 {
                assert!((z.at(0, 0, 10 + u, 10 + v) - st[u * 21 + v] / total).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn omega_draws() {
        let mut rng = Rng::seed(5);
        let n = 100_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let w = sample_omega::<f64>(1, &mut rng);
            let v = w.get(0);
            assert!((0.0..=1.0).contains(&v));
            sum += v;
        }
        assert!((sum / n as f64 - 0.5).abs() < 0.005);
        let a = sample_omega::<f32>(3, &mut Rng::seed(9));
        let b = sample_omega::<f32>(3, &mut Rng::seed(9));
        assert_eq!(a, b);
    }

    #[test]
    fn manifest_lists_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let (png, _) = gradient_png(4, 4);
        std::fs::write(dir.path().join("a.png"), &png).unwrap();
        std::fs::write(dir.path().join("list.txt"), "# images\na.png\n\n").unwrap();
        let ds = Dataset::open(dir.path().join("list.txt")).unwrap();
        assert_eq!(ds.len(), 1);
        let ds = Dataset::open(dir.path()).unwrap();
        assert_eq!(ds.len(), 1);
    }
}
