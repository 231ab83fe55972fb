//! Grayscale image I/O and the preprocessing/augmentation chain: binary PGM
//! reading and writing, per-image max-normalization, histogram equalization,
//! cropping, bilinear resampling, rotation, and the seeded train-time
//! augmentation (rescale + rotate) that transforms images and landmarks
//! jointly.
//!
//! Sampling convention, fixed once for every resampling operation: pixel
//! (px, py) has its center at (px + 0.5, py + 0.5). The joint-transform
//! invariance guarantees (augmented landmarks keep their Cobb angles) depend
//! on this single convention.

use crate::geometry::{LandmarkSet, Point, SegMask, LABEL_BONE, LABEL_GAP};
use crate::rng::Rng;
use crate::tensor::Shape2D;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ImageError {
    #[error("bad magic '{found}', expected binary graymap 'P5'")]
    BadMagic { found: String },
    #[error("unsupported format {0}")]
    Unsupported(String),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("maxval {0} out of range 1..=65535")]
    MaxvalOutOfRange(i64),
    #[error("truncated payload: expected {expected} bytes, found {got}")]
    Truncated { expected: usize, got: usize },
    #[error("pixel buffer has {got} values, shape wants {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("pixel {index} = {value} outside [0, {maxval}]")]
    PixelOutOfRange {
        index: usize,
        value: f64,
        maxval: f64,
    },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("crop rect ({x},{y}) {w}x{h} exceeds image {iw}x{ih}")]
    CropOutOfBounds {
        x: usize,
        y: usize,
        w: usize,
        h: usize,
        iw: usize,
        ih: usize,
    },
    #[error("invalid parameters: {0}")]
    BadParams(String),
    #[error("mask image contains value {0}, expected one of 0, 128, 255")]
    BadMaskValue(f64),
}

/// A single-channel image: row-major non-negative real intensities plus the
/// declared maximum value (255 or 65535 for files, 1.0 after normalization).
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    shape: Shape2D,
    pixels: Vec<f64>,
    maxval: f64,
}

impl GrayImage {
    pub fn new(shape: Shape2D, pixels: Vec<f64>, maxval: f64) -> Result<Self, ImageError> {
        if pixels.len() != shape.pixels() {
            return Err(ImageError::LengthMismatch {
                expected: shape.pixels(),
                got: pixels.len(),
            });
        }
        if maxval <= 0.0 || !maxval.is_finite() {
            return Err(ImageError::MaxvalOutOfRange(maxval as i64));
        }
        for (index, &value) in pixels.iter().enumerate() {
            if !value.is_finite() || value < 0.0 || value > maxval {
                return Err(ImageError::PixelOutOfRange {
                    index,
                    value,
                    maxval,
                });
            }
        }
        Ok(GrayImage {
            shape,
            pixels,
            maxval,
        })
    }

    pub fn shape(&self) -> Shape2D {
        self.shape
    }

    pub fn width(&self) -> usize {
        self.shape.width
    }

    pub fn height(&self) -> usize {
        self.shape.height
    }

    pub fn maxval(&self) -> f64 {
        self.maxval
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.pixels[y * self.shape.width + x]
    }
}

// ---------------------------------------------------------------------------
// Binary PGM (P5)
// ---------------------------------------------------------------------------

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderCursor<'a> {
    fn skip_separators(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\r' | b'\n' => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn token(&mut self) -> Result<&'a str, ImageError> {
        self.skip_separators();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(ImageError::Header("unexpected end of header".into()));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .map_err(|_| ImageError::Header("non-ASCII header token".into()))
    }

    fn number(&mut self, what: &str) -> Result<usize, ImageError> {
        let tok = self.token()?;
        tok.parse()
            .map_err(|_| ImageError::Header(format!("invalid {what}: '{tok}'")))
    }
}

/// Decode a binary (P5) portable graymap, 8- or 16-bit. The ASCII P2
/// variant is rejected.
pub fn read_pgm(bytes: &[u8]) -> Result<GrayImage, ImageError> {
    let mut cur = HeaderCursor { bytes, pos: 0 };
    let magic = cur.token()?;
    if magic != "P5" {
        if magic == "P2" {
            return Err(ImageError::Unsupported(
                "P2 (ASCII graymap); only binary P5 is handled".into(),
            ));
        }
        return Err(ImageError::BadMagic {
            found: magic.to_string(),
        });
    }
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval = cur.number("maxval")? as i64;
    if !(1..=65535).contains(&maxval) {
        return Err(ImageError::MaxvalOutOfRange(maxval));
    }
    if width == 0 || height == 0 {
        return Err(ImageError::Header("zero image dimension".into()));
    }
    // Exactly one whitespace byte separates the header from the payload.
    if cur.pos >= bytes.len() || !bytes[cur.pos].is_ascii_whitespace() {
        return Err(ImageError::Header("missing payload separator".into()));
    }
    cur.pos += 1;

    let count = width * height;
    let wide = maxval > 255;
    let expected = count * if wide { 2 } else { 1 };
    let payload = &bytes[cur.pos..];
    if payload.len() < expected {
        return Err(ImageError::Truncated {
            expected,
            got: payload.len(),
        });
    }
    let mut pixels = Vec::with_capacity(count);
    if wide {
        for chunk in payload[..expected].chunks_exact(2) {
            // 16-bit samples are big-endian, most significant byte first.
            pixels.push(u16::from_be_bytes([chunk[0], chunk[1]]) as f64);
        }
    } else {
        pixels.extend(payload[..expected].iter().map(|&b| b as f64));
    }
    GrayImage::new(Shape2D::new(height, width), pixels, maxval as f64)
}

/// Encode as binary PGM. The image's maxval must round to 1..=65535;
/// pixels are rounded to the nearest integer sample and clamped. Images
/// that came from [`read_pgm`] round-trip bit-exactly.
pub fn write_pgm(img: &GrayImage) -> Result<Vec<u8>, ImageError> {
    let maxval = img.maxval.round() as i64;
    if !(1..=65535).contains(&maxval) {
        return Err(ImageError::MaxvalOutOfRange(maxval));
    }
    let header = format!("P5\n{} {}\n{}\n", img.width(), img.height(), maxval);
    let mut out = header.into_bytes();
    if maxval > 255 {
        out.reserve(img.pixels.len() * 2);
        for &p in &img.pixels {
            let v = p.round().clamp(0.0, maxval as f64) as u16;
            out.extend_from_slice(&v.to_be_bytes());
        }
    } else {
        out.reserve(img.pixels.len());
        for &p in &img.pixels {
            out.push(p.round().clamp(0.0, maxval as f64) as u8);
        }
    }
    Ok(out)
}

/// Render a segmentation mask as an 8-bit graymap with the fixed label
/// levels 0 (background), 128 (gap), 255 (bone).
pub fn mask_to_image(mask: &SegMask) -> GrayImage {
    let pixels = mask
        .labels()
        .iter()
        .map(|&l| match l {
            LABEL_BONE => 255.0,
            LABEL_GAP => 128.0,
            _ => 0.0,
        })
        .collect();
    GrayImage::new(mask.shape(), pixels, 255.0).expect("mask levels are valid pixels")
}

/// Inverse of [`mask_to_image`]; rejects any sample that is not exactly one
/// of the three label levels.
pub fn image_to_mask(img: &GrayImage) -> Result<SegMask, ImageError> {
    let mut labels = Vec::with_capacity(img.pixels.len());
    for &p in &img.pixels {
        labels.push(match p {
            0.0 => 0u8,
            128.0 => LABEL_GAP,
            255.0 => LABEL_BONE,
            v => return Err(ImageError::BadMaskValue(v)),
        });
    }
    Ok(SegMask::new(img.shape, labels))
}

// ---------------------------------------------------------------------------
// Intensity transforms
// ---------------------------------------------------------------------------

/// Divide every pixel by the image's own maximum, yielding reals in [0, 1]
/// with the new maximum exactly 1. An all-zero image has no meaningful
/// normalization and is rejected.
pub fn normalize_max(img: &GrayImage) -> Result<GrayImage, ImageError> {
    let max = img.pixels.iter().cloned().fold(0.0f64, f64::max);
    if max <= 0.0 {
        return Err(ImageError::Degenerate(
            "cannot max-normalize an all-zero image".into(),
        ));
    }
    let pixels = img.pixels.iter().map(|&p| p / max).collect();
    GrayImage::new(img.shape, pixels, 1.0)
}

/// Classic histogram equalization by CDF remap over `bins` levels:
/// out = round(maxval * (cdf(v) - cdf_min) / (N - cdf_min)).
///
/// The transfer function is monotone non-decreasing in the input value. A
/// constant image (N == cdf_min) has no defined remap and is returned
/// unchanged.
pub fn hist_equalize(img: &GrayImage, bins: usize) -> Result<GrayImage, ImageError> {
    if bins < 2 {
        return Err(ImageError::BadParams(format!(
            "hist_equalize needs >= 2 bins, got {bins}"
        )));
    }
    let maxval = img.maxval;
    let bin_of = |p: f64| -> usize {
        let b = (p * bins as f64 / maxval) as usize;
        b.min(bins - 1)
    };
    let mut hist = vec![0usize; bins];
    for &p in &img.pixels {
        hist[bin_of(p)] += 1;
    }
    let mut cdf = vec![0usize; bins];
    let mut acc = 0usize;
    for (c, &h) in cdf.iter_mut().zip(&hist) {
        acc += h;
        *c = acc;
    }
    let n = img.pixels.len();
    let cdf_min = cdf
        .iter()
        .copied()
        .find(|&c| c > 0)
        .expect("image has pixels");
    if cdf_min == n {
        return Ok(img.clone());
    }
    let denom = (n - cdf_min) as f64;
    let pixels = img
        .pixels
        .iter()
        .map(|&p| (maxval * (cdf[bin_of(p)] - cdf_min) as f64 / denom).round())
        .collect();
    GrayImage::new(img.shape, pixels, maxval)
}

// ---------------------------------------------------------------------------
// Geometric transforms
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct CropRect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

/// Exact sub-grid copy.
pub fn crop(img: &GrayImage, rect: CropRect) -> Result<GrayImage, ImageError> {
    if rect.w == 0 || rect.h == 0 || rect.x + rect.w > img.width() || rect.y + rect.h > img.height()
    {
        return Err(ImageError::CropOutOfBounds {
            x: rect.x,
            y: rect.y,
            w: rect.w,
            h: rect.h,
            iw: img.width(),
            ih: img.height(),
        });
    }
    let mut pixels = Vec::with_capacity(rect.w * rect.h);
    for row in rect.y..rect.y + rect.h {
        let start = row * img.width() + rect.x;
        pixels.extend_from_slice(&img.pixels[start..start + rect.w]);
    }
    GrayImage::new(Shape2D::new(rect.h, rect.w), pixels, img.maxval)
}

/// Landmark remap matching [`crop`]: translate by the rect origin.
pub fn crop_landmarks(lm: &LandmarkSet, rect: CropRect) -> LandmarkSet {
    lm.transform(|p| Point::new(p.x - rect.x as f64, p.y - rect.y as f64))
        .expect("translation preserves finiteness")
}

fn bilinear_sample(img: &GrayImage, sx: f64, sy: f64) -> f64 {
    let w = img.width();
    let h = img.height();
    let sx = sx.clamp(0.0, (w - 1) as f64);
    let sy = sy.clamp(0.0, (h - 1) as f64);
    let x0 = sx.floor() as usize;
    let y0 = sy.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = sx - x0 as f64;
    let fy = sy - y0 as f64;
    let row0 = img.pixels[y0 * w + x0] * (1.0 - fx) + img.pixels[y0 * w + x1] * fx;
    let row1 = img.pixels[y1 * w + x0] * (1.0 - fx) + img.pixels[y1 * w + x1] * fx;
    row0 * (1.0 - fy) + row1 * fy
}

/// Bilinear resample to a new grid, half-pixel-center alignment. Sampling
/// clamps at the borders (no extrapolation).
pub fn resize_bilinear(img: &GrayImage, out: Shape2D) -> Result<GrayImage, ImageError> {
    if out.height == 0 || out.width == 0 {
        return Err(ImageError::BadParams("resize target has a zero dim".into()));
    }
    let sx_scale = img.width() as f64 / out.width as f64;
    let sy_scale = img.height() as f64 / out.height as f64;
    let mut pixels = Vec::with_capacity(out.pixels());
    for oy in 0..out.height {
        let sy = (oy as f64 + 0.5) * sy_scale - 0.5;
        for ox in 0..out.width {
            let sx = (ox as f64 + 0.5) * sx_scale - 0.5;
            pixels.push(bilinear_sample(img, sx, sy));
        }
    }
    GrayImage::new(out, pixels, img.maxval)
}

/// Landmark remap matching [`resize_bilinear`]: scale per axis by the
/// output/input extent ratio.
pub fn resize_landmarks(lm: &LandmarkSet, from: Shape2D, to: Shape2D) -> LandmarkSet {
    let sx = to.width as f64 / from.width as f64;
    let sy = to.height as f64 / from.height as f64;
    lm.transform(|p| Point::new(p.x * sx, p.y * sy))
        .expect("finite scaling")
}

/// Inverse-map warp about the image center: zoom by `scale`, then rotate by
/// `angle_deg`. The canvas size is unchanged; samples that fall outside the
/// source take `fill`. Positive angles rotate image content clockwise on a
/// y-down grid.
fn warp_about_center(img: &GrayImage, scale: f64, angle_deg: f64, fill: f64) -> GrayImage {
    let (w, h) = (img.width(), img.height());
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let theta = angle_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    let fill = fill.clamp(0.0, img.maxval);
    let mut pixels = Vec::with_capacity(w * h);
    for oy in 0..h {
        let vy = oy as f64 + 0.5 - cy;
        for ox in 0..w {
            let vx = ox as f64 + 0.5 - cx;
            // Inverse of p' = c + s*R(theta)*(p - c).
            let rx = (cos * vx + sin * vy) / scale;
            let ry = (-sin * vx + cos * vy) / scale;
            let sx = cx + rx - 0.5;
            let sy = cy + ry - 0.5;
            if sx < 0.0 || sy < 0.0 || sx > (w - 1) as f64 || sy > (h - 1) as f64 {
                pixels.push(fill);
            } else {
                pixels.push(bilinear_sample(img, sx, sy));
            }
        }
    }
    GrayImage::new(img.shape, pixels, img.maxval).expect("warp preserves range")
}

/// Rotate about the image center by `angle_deg` (|angle| <= 180), bilinear,
/// out-of-range samples set to `fill`.
pub fn rotate(img: &GrayImage, angle_deg: f64, fill: f64) -> Result<GrayImage, ImageError> {
    if !angle_deg.is_finite() || angle_deg.abs() > 180.0 {
        return Err(ImageError::BadParams(format!(
            "rotation angle {angle_deg} outside [-180, 180]"
        )));
    }
    Ok(warp_about_center(img, 1.0, angle_deg, fill))
}

fn affine_point(p: Point, shape: Shape2D, scale: f64, angle_deg: f64) -> Point {
    let (cx, cy) = (shape.width as f64 / 2.0, shape.height as f64 / 2.0);
    let theta = angle_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    let (vx, vy) = (p.x - cx, p.y - cy);
    Point::new(
        cx + scale * (cos * vx - sin * vy),
        cy + scale * (sin * vx + cos * vy),
    )
}

/// Landmark remap matching [`rotate`].
pub fn rotate_landmarks(lm: &LandmarkSet, shape: Shape2D, angle_deg: f64) -> LandmarkSet {
    lm.transform(|p| affine_point(p, shape, 1.0, angle_deg))
        .expect("rigid motion preserves finiteness")
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

/// Seeded augmentation parameters. Draws are counter-based: a (seed,
/// draw_index) pair fully determines the sampled transform, so distributed
/// batch assembly stays reproducible.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AugmentParams {
    /// Uniform zoom range, e.g. (0.85, 1.25).
    pub rescale: (f64, f64),
    /// Rotation range in degrees, e.g. (-45, 45).
    pub rotation_deg: (f64, f64),
    /// Gaussian noise sigma in units of maxval; 0 disables it. Kept
    /// off by default.
    #[serde(default)]
    pub noise_sigma: f64,
    pub seed: u64,
}

impl AugmentParams {
    pub fn standard(seed: u64) -> Self {
        AugmentParams {
            rescale: (0.85, 1.25),
            rotation_deg: (-45.0, 45.0),
            noise_sigma: 0.0,
            seed,
        }
    }

    pub fn identity(seed: u64) -> Self {
        AugmentParams {
            rescale: (1.0, 1.0),
            rotation_deg: (0.0, 0.0),
            noise_sigma: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), ImageError> {
        let ((s0, s1), (r0, r1)) = (self.rescale, self.rotation_deg);
        if !(s0 > 0.0 && s1 >= s0) {
            return Err(ImageError::BadParams(format!(
                "rescale range ({s0}, {s1}) not well-ordered and positive"
            )));
        }
        if r1 < r0 || r0 < -180.0 || r1 > 180.0 {
            return Err(ImageError::BadParams(format!(
                "rotation range ({r0}, {r1}) not well-ordered within [-180, 180]"
            )));
        }
        if self.noise_sigma.is_nan() || self.noise_sigma < 0.0 {
            return Err(ImageError::BadParams(format!(
                "noise sigma {} negative",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

/// One deterministic augmentation draw: sample a zoom factor and a rotation
/// angle from (seed, draw_index), apply them as a single warp about the
/// image center, and map landmarks through the same affine. The canvas size
/// is preserved so batch shapes stay fixed; rescaling is realized as a zoom.
/// Both transforms are angle-preserving on the landmarks, so Cobb labels
/// remain valid.
pub fn augment(
    img: &GrayImage,
    lm: Option<&LandmarkSet>,
    params: &AugmentParams,
    draw_index: u64,
) -> Result<(GrayImage, Option<LandmarkSet>), ImageError> {
    params.validate()?;
    let mut rng = Rng::from_seed_and_stream(params.seed, draw_index);
    let scale = if params.rescale.0 == params.rescale.1 {
        params.rescale.0
    } else {
        rng.range_f64(params.rescale.0, params.rescale.1)
    };
    let angle = if params.rotation_deg.0 == params.rotation_deg.1 {
        params.rotation_deg.0
    } else {
        rng.range_f64(params.rotation_deg.0, params.rotation_deg.1)
    };

    let is_identity = scale == 1.0 && angle == 0.0;
    let mut out = if is_identity {
        img.clone()
    } else {
        warp_about_center(img, scale, angle, 0.0)
    };
    if params.noise_sigma > 0.0 {
        let sigma = params.noise_sigma * img.maxval();
        let maxval = out.maxval;
        let pixels = out
            .pixels
            .iter()
            .map(|&p| (p + sigma * rng.next_normal()).clamp(0.0, maxval))
            .collect();
        out = GrayImage::new(out.shape, pixels, maxval)?;
    }
    let lm_out = lm.map(|l| {
        if is_identity {
            l.clone()
        } else {
            l.transform(|p| affine_point(p, img.shape, scale, angle))
                .expect("affine preserves finiteness")
        }
    });
    Ok((out, lm_out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{cobb_angles, make_vertebra, LandmarkSet, VERTEBRA_COUNT};

    fn ramp_image(h: usize, w: usize) -> GrayImage {
        let pixels = (0..h * w).map(|i| (i % w) as f64).collect();
        GrayImage::new(Shape2D::new(h, w), pixels, (w - 1) as f64).unwrap()
    }

    #[test]
    fn pgm_single_pixel() {
        let bytes = b"P5\n1 1\n255\n\x07".to_vec();
        let img = read_pgm(&bytes).unwrap();
        assert_eq!(img.get(0, 0), 7.0);
        assert_eq!(img.maxval(), 255.0);
    }

    #[test]
    fn pgm_round_trip_bytes() {
        let img = GrayImage::new(
            Shape2D::new(2, 3),
            vec![0.0, 10.0, 255.0, 128.0, 7.0, 99.0],
            255.0,
        )
        .unwrap();
        let bytes = write_pgm(&img).unwrap();
        let back = read_pgm(&bytes).unwrap();
        assert_eq!(back, img);
        assert_eq!(write_pgm(&back).unwrap(), bytes);
    }

    #[test]
    fn pgm_sixteen_bit_round_trip() {
        let img = GrayImage::new(
            Shape2D::new(1, 4),
            vec![0.0, 256.0, 65535.0, 1000.0],
            65535.0,
        )
        .unwrap();
        let bytes = write_pgm(&img).unwrap();
        let back = read_pgm(&bytes).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn pgm_rejects_ascii_variant_and_truncation() {
        assert!(matches!(
            read_pgm(b"P2\n1 1\n255\n7"),
            Err(ImageError::Unsupported(_))
        ));
        assert!(matches!(
            read_pgm(b"P5\n2 2\n255\n\x01\x02"),
            Err(ImageError::Truncated { .. })
        ));
        assert!(matches!(
            read_pgm(b"P5\n1 1\n0\n\x00"),
            Err(ImageError::MaxvalOutOfRange(0))
        ));
        assert!(matches!(
            read_pgm(b"P6\n1 1\n255\n\x00"),
            Err(ImageError::BadMagic { .. })
        ));
    }

    #[test]
    fn pgm_header_comments_are_skipped() {
        let bytes = b"P5\n# a comment\n2 1\n# another\n255\n\x05\x09".to_vec();
        let img = read_pgm(&bytes).unwrap();
        assert_eq!(img.pixels(), &[5.0, 9.0]);
    }

    #[test]
    fn normalize_cases() {
        let constant = GrayImage::new(Shape2D::new(2, 2), vec![50.0; 4], 255.0).unwrap();
        let out = normalize_max(&constant).unwrap();
        assert_eq!(out.pixels(), &[1.0; 4]);
        assert_eq!(out.maxval(), 1.0);

        let img = GrayImage::new(Shape2D::new(1, 3), vec![0.0, 100.0, 200.0], 255.0).unwrap();
        let out = normalize_max(&img).unwrap();
        assert_eq!(out.pixels(), &[0.0, 0.5, 1.0]);

        let zero = GrayImage::new(Shape2D::new(1, 2), vec![0.0, 0.0], 255.0).unwrap();
        assert!(matches!(
            normalize_max(&zero),
            Err(ImageError::Degenerate(_))
        ));
    }

    #[test]
    fn equalize_two_level_image_keeps_extremes() {
        // 8 black and 8 white pixels: cdf(0) = 8 = cdf_min, cdf(255) = 16.
        // out(0) = round(255*(8-8)/(16-8)) = 0, out(255) = round(255*8/8) = 255.
        let mut pixels = vec![0.0; 8];
        pixels.extend(vec![255.0; 8]);
        let img = GrayImage::new(Shape2D::new(4, 4), pixels, 255.0).unwrap();
        let out = hist_equalize(&img, 256).unwrap();
        let mut levels: Vec<f64> = out.pixels().to_vec();
        levels.sort_by(|a, b| a.partial_cmp(b).unwrap());
        levels.dedup();
        assert_eq!(levels, vec![0.0, 255.0]);
    }

    #[test]
    fn equalize_is_monotone_and_bounded() {
        let mut rng = crate::rng::Rng::new(9);
        let pixels: Vec<f64> = (0..512).map(|_| (rng.next_f64() * 255.0).round()).collect();
        let img = GrayImage::new(Shape2D::new(16, 32), pixels.clone(), 255.0).unwrap();
        let out = hist_equalize(&img, 256).unwrap();
        for i in 0..pixels.len() {
            assert!(out.pixels()[i] >= 0.0 && out.pixels()[i] <= 255.0);
            for j in 0..pixels.len() {
                if pixels[i] <= pixels[j] {
                    assert!(out.pixels()[i] <= out.pixels()[j]);
                }
            }
        }
    }

    #[test]
    fn equalize_constant_image_is_unchanged() {
        let img = GrayImage::new(Shape2D::new(2, 2), vec![42.0; 4], 255.0).unwrap();
        assert_eq!(hist_equalize(&img, 256).unwrap(), img);
    }

    #[test]
    fn crop_cases() {
        let img = ramp_image(4, 6);
        let full = crop(
            &img,
            CropRect {
                x: 0,
                y: 0,
                w: 6,
                h: 4,
            },
        )
        .unwrap();
        assert_eq!(full, img);

        let single = crop(
            &img,
            CropRect {
                x: 3,
                y: 2,
                w: 1,
                h: 1,
            },
        )
        .unwrap();
        assert_eq!(single.pixels(), &[img.get(2, 3)]);

        assert!(matches!(
            crop(
                &img,
                CropRect {
                    x: 4,
                    y: 0,
                    w: 4,
                    h: 2
                }
            ),
            Err(ImageError::CropOutOfBounds { .. })
        ));
    }

    #[test]
    fn resize_identity_and_constant() {
        let img = ramp_image(5, 7);
        let same = resize_bilinear(&img, img.shape()).unwrap();
        for (a, b) in same.pixels().iter().zip(img.pixels()) {
            assert!((a - b).abs() < 1e-12);
        }
        let constant = GrayImage::new(Shape2D::new(3, 3), vec![4.0; 9], 255.0).unwrap();
        let up = resize_bilinear(&constant, Shape2D::new(7, 5)).unwrap();
        for &p in up.pixels() {
            assert!((p - 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn upsampled_ramp_stays_linear_in_the_interior() {
        let img = ramp_image(4, 8);
        let up = resize_bilinear(&img, Shape2D::new(8, 16)).unwrap();
        for ox in 1..15 {
            let sx = (ox as f64 + 0.5) * 0.5 - 0.5;
            for oy in 0..8 {
                assert!(
                    (up.get(oy, ox) - sx).abs() < 1e-9,
                    "ox={ox} oy={oy} got {} want {sx}",
                    up.get(oy, ox)
                );
            }
        }
    }

    #[test]
    fn rotate_zero_is_identity() {
        let img = ramp_image(6, 6);
        let out = rotate(&img, 0.0, 0.0).unwrap();
        for (a, b) in out.pixels().iter().zip(img.pixels()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rotate_quarter_turn_matches_index_permutation() {
        let n = 8usize;
        let mut rng = crate::rng::Rng::new(3);
        let pixels: Vec<f64> = (0..n * n)
            .map(|_| (rng.next_f64() * 255.0).round())
            .collect();
        let img = GrayImage::new(Shape2D::new(n, n), pixels, 255.0).unwrap();
        let out = rotate(&img, 90.0, 0.0).unwrap();
        for y in 0..n {
            for x in 0..n {
                // Forward 90-degree rotation about the center maps source
                // (y', x') = (n-1-x, y) onto output (y, x).
                let want = img.get(n - 1 - x, y);
                assert!(
                    (out.get(y, x) - want).abs() < 1e-9,
                    "mismatch at ({x},{y}): {} vs {want}",
                    out.get(y, x)
                );
            }
        }
    }

    fn curvy_landmarks() -> LandmarkSet {
        let mut corners = [[Point::new(0.0, 0.0); 4]; VERTEBRA_COUNT];
        for (v, quad) in corners.iter_mut().enumerate() {
            let theta = ((v as f64 - 8.0) * 3.0f64).to_radians();
            *quad = make_vertebra(
                Point::new(32.0 + 6.0 * theta.sin(), 8.0 + 7.0 * v as f64),
                [theta.cos(), theta.sin()],
                14.0,
                5.0,
            );
        }
        LandmarkSet::new(corners).unwrap()
    }

    #[test]
    fn augment_is_deterministic_and_identity_on_degenerate_ranges() {
        let img = ramp_image(16, 12);
        let lm = curvy_landmarks();
        let params = AugmentParams::standard(77);
        let (a_img, a_lm) = augment(&img, Some(&lm), &params, 3).unwrap();
        let (b_img, b_lm) = augment(&img, Some(&lm), &params, 3).unwrap();
        assert_eq!(a_img, b_img);
        assert_eq!(a_lm, b_lm);

        let identity = AugmentParams::identity(77);
        let (out, out_lm) = augment(&img, Some(&lm), &identity, 3).unwrap();
        assert_eq!(out, img);
        assert_eq!(out_lm.unwrap(), lm);
    }

    #[test]
    fn augment_preserves_cobb_angles() {
        let img = ramp_image(128, 64);
        let lm = curvy_landmarks();
        let (base, _) = cobb_angles(&lm).unwrap();
        let params = AugmentParams::standard(123);
        for draw in 0..20 {
            let (_, lm_aug) = augment(&img, Some(&lm), &params, draw).unwrap();
            let (aug, _) = cobb_angles(&lm_aug.unwrap()).unwrap();
            for (a, b) in base.slots().iter().zip(aug.slots()) {
                assert!((a - b).abs() < 1e-6, "draw {draw}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn crop_remap_preserves_cobb_angles() {
        let lm = curvy_landmarks();
        let (base, _) = cobb_angles(&lm).unwrap();
        let rect = CropRect {
            x: 3,
            y: 5,
            w: 50,
            h: 100,
        };
        let moved = crop_landmarks(&lm, rect);
        let (after, _) = cobb_angles(&moved).unwrap();
        for (a, b) in base.slots().iter().zip(after.slots()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn mask_image_round_trip() {
        let lm = curvy_landmarks();
        let mask = crate::geometry::rasterize_mask(&lm, Shape2D::new(128, 64));
        let img = mask_to_image(&mask);
        let back = image_to_mask(&img).unwrap();
        assert_eq!(back, mask);
    }
}
