//! Rasters, PGM IO and the preprocessing chain: resample to 0.2 mm/px,
//! 16→8-bit conversion, normalization, patch cropping, resizing and
//! training-time augmentation.

use crate::error::{invalid, shape_err, Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

/// Reference pixel spacing in mm/px.
pub const REFERENCE_SPACING: f64 = 0.2;
/// Side of the square crop around the joint center, in reference pixels.
pub const PATCH_SIZE: usize = 700;
/// Default classifier input side.
pub const MODEL_INPUT: usize = 256;

/// Row-major grayscale image with physical pixel spacing (mm/px).
#[derive(Clone, Debug, PartialEq)]
pub struct Image<T> {
    pub width: usize,
    pub height: usize,
    pub spacing: f64,
    pub data: Vec<T>,
}

pub type Raster16 = Image<u16>;
pub type Raster8 = Image<u8>;
pub type RasterF = Image<f64>;

impl<T: Copy> Image<T> {
    pub fn new(width: usize, height: usize, spacing: f64, data: Vec<T>) -> Result<Self> {
        if !(spacing > 0.0 && spacing.is_finite()) {
            return Err(invalid!("pixel spacing must be positive, got {spacing}"));
        }
        if data.len() != width * height {
            return Err(shape_err!("{}×{} image needs {} samples, got {}", width, height, width * height, data.len()));
        }
        Ok(Image {
            width,
            height,
            spacing,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, spacing: f64, value: T) -> Self {
        Image {
            width,
            height,
            spacing,
            data: vec![value; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[y * self.width + x]
    }

    pub fn map<U>(&self, f: impl Fn(T) -> U) -> Image<U> {
        Image {
            width: self.width,
            height: self.height,
            spacing: self.spacing,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Mirror about the vertical axis.
    pub fn flip_horizontal(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.data.chunks(self.width) {
            data.extend(row.iter().rev());
        }
        Image { data, ..*self }
    }
}

impl<T: Copy + Into<f64>> Image<T> {
    pub fn to_f64(&self) -> RasterF {
        self.map(|v| v.into())
    }
}

impl<T> Image<T> {
    fn with_data<U>(&self, width: usize, height: usize, spacing: f64, data: Vec<U>) -> Image<U> {
        debug_assert_eq!(data.len(), width * height);
        Image {
            width,
            height,
            spacing,
            data,
        }
    }
}

// ---------------------------------------------------------------------------
// PGM

fn pgm_token<R: BufRead>(r: &mut R, path: &Path) -> Result<String> {
    let mut tok = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte).map_err(|e| Error::io(path, e))? == 0 {
            break;
        }
        match byte[0] {
            b'#' if tok.is_empty() => {
                let mut skip = Vec::new();
                r.read_until(b'\n', &mut skip).map_err(|e| Error::io(path, e))?;
            }
            c if c.is_ascii_whitespace() => {
                if !tok.is_empty() {
                    break;
                }
            }
            c => tok.push(c),
        }
    }
    if tok.is_empty() {
        return Err(Error::Format {
            path: path.into(),
            message: "truncated PGM header".into(),
        });
    }
    Ok(String::from_utf8_lossy(&tok).into_owned())
}

/// Reads a binary (P5) PGM with 8- or 16-bit samples.
pub fn read_pgm(path: &Path, spacing: f64) -> Result<Raster16> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_pgm_from(BufReader::new(file), path, spacing)
}

pub fn read_pgm_from<R: BufRead>(mut r: R, path: &Path, spacing: f64) -> Result<Raster16> {
    let bad = |message: String| Error::Format {
        path: path.into(),
        message,
    };
    let magic = pgm_token(&mut r, path)?;
    if magic != "P5" {
        return Err(bad(format!("expected binary PGM magic P5, found {magic}")));
    }
    let mut num = |what: &str| -> Result<usize> {
        let t = pgm_token(&mut r, path)?;
        t.parse().map_err(|_| bad(format!("bad {what} `{t}`")))
    };
    let (w, h, maxval) = (num("width")?, num("height")?, num("maxval")?);
    if w == 0 || h == 0 || maxval == 0 || maxval > 65535 {
        return Err(bad(format!("unsupported PGM geometry {w}×{h}, maxval {maxval}")));
    }
    let bytes_per = if maxval > 255 { 2 } else { 1 };
    let mut buf = vec![0u8; w * h * bytes_per];
    r.read_exact(&mut buf)
        .map_err(|_| bad(format!("expected {} bytes of pixel data", buf.len())))?;
    let data = if bytes_per == 2 {
        buf.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
    } else {
        buf.into_iter().map(u16::from).collect()
    };
    Image::new(w, h, spacing, data)
}

fn write_pgm_bytes(path: &Path, w: usize, h: usize, maxval: u32, body: &[u8]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    write!(f, "P5\n{w} {h}\n{maxval}\n").map_err(|e| Error::io(path, e))?;
    f.write_all(body).map_err(|e| Error::io(path, e))?;
    f.flush().map_err(|e| Error::io(path, e))
}

pub fn write_pgm16(path: &Path, img: &Raster16) -> Result<()> {
    let body: Vec<u8> = img.data.iter().flat_map(|v| v.to_be_bytes()).collect();
    write_pgm_bytes(path, img.width, img.height, 65535, &body)
}

pub fn write_pgm8(path: &Path, img: &Raster8) -> Result<()> {
    write_pgm_bytes(path, img.width, img.height, 255, &img.data)
}

// ---------------------------------------------------------------------------
// Bicubic resampling

/// Catmull-Rom cubic convolution kernel (a = −0.5).
pub fn cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

struct AxisWeights {
    start: Vec<isize>,
    taps: usize,
    weights: Vec<f64>,
}

/// Per-output tap tables for resizing one axis from `n_in` to `n_out`
/// samples. When shrinking, the kernel is stretched by the inverse scale so
/// it also acts as the antialiasing filter. Indices are clamped at the
/// borders.
fn axis_weights(n_in: usize, n_out: usize) -> AxisWeights {
    let scale = n_out as f64 / n_in as f64;
    let stretch = (1.0 / scale).max(1.0);
    let radius = 2.0 * stretch;
    let taps = (2.0 * radius).ceil() as usize + 1;
    let mut start = Vec::with_capacity(n_out);
    let mut weights = vec![0.0; n_out * taps];
    for o in 0..n_out {
        let center = (o as f64 + 0.5) / scale - 0.5;
        let first = (center - radius).ceil() as isize;
        let row = &mut weights[o * taps..(o + 1) * taps];
        let mut sum = 0.0;
        for (t, w) in row.iter_mut().enumerate() {
            *w = cubic((first + t as isize) as f64 - center) / stretch;
            sum += *w;
        }
        for w in row.iter_mut() {
            *w /= sum;
        }
        start.push(first);
    }
    AxisWeights { start, taps, weights }
}

fn apply_axis(src: &[f64], n_in: usize, stride_in: usize, aw: &AxisWeights, o: usize) -> f64 {
    let first = aw.start[o];
    let row = &aw.weights[o * aw.taps..(o + 1) * aw.taps];
    let mut acc = 0.0;
    for (t, &w) in row.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let i = (first + t as isize).clamp(0, n_in as isize - 1) as usize;
        acc += w * src[i * stride_in];
    }
    acc
}

/// Separable Catmull-Rom resize of a row-major `w×h` buffer.
pub fn resize_bicubic(src: &[f64], w: usize, h: usize, new_w: usize, new_h: usize) -> Result<Vec<f64>> {
    if w == 0 || h == 0 || new_w == 0 || new_h == 0 {
        return Err(invalid!("cannot resize {w}×{h} to {new_w}×{new_h}"));
    }
    if src.len() != w * h {
        return Err(shape_err!("{w}×{h} buffer has {} samples", src.len()));
    }
    if (w, h) == (new_w, new_h) {
        return Ok(src.to_vec());
    }
    let ax = axis_weights(w, new_w);
    let mut tmp = vec![0.0; new_w * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..new_w {
            tmp[y * new_w + x] = apply_axis(row, w, 1, &ax, x);
        }
    }
    let ay = axis_weights(h, new_h);
    let mut out = vec![0.0; new_w * new_h];
    for x in 0..new_w {
        for y in 0..new_h {
            out[y * new_w + x] = apply_axis(&tmp[x..], h, new_w, &ay, y);
        }
    }
    Ok(out)
}

fn resize_image(img: &RasterF, new_w: usize, new_h: usize, spacing: f64) -> Result<RasterF> {
    let data = resize_bicubic(&img.data, img.width, img.height, new_w, new_h)?;
    Ok(img.with_data(new_w, new_h, spacing, data))
}

/// Resamples to [`REFERENCE_SPACING`]; each side becomes
/// `round(side · spacing / 0.2)`.
pub fn resample_to_reference<T: Copy + Into<f64>>(img: &Image<T>) -> Result<RasterF> {
    if !(img.spacing > 0.0) {
        return Err(invalid!("pixel spacing must be positive, got {}", img.spacing));
    }
    let new_w = (img.width as f64 * img.spacing / REFERENCE_SPACING).round() as usize;
    let new_h = (img.height as f64 * img.spacing / REFERENCE_SPACING).round() as usize;
    if new_w == 0 || new_h == 0 {
        return Err(invalid!(
            "{}×{} image at {} mm/px resamples to an empty image",
            img.width,
            img.height,
            img.spacing
        ));
    }
    resize_image(&img.to_f64(), new_w, new_h, REFERENCE_SPACING)
}

/// Per-image min-max rescale to 0..=255, rounding half up. A constant image
/// maps to zeros.
pub fn to_8bit<T: Copy + Into<f64>>(img: &Image<T>) -> Raster8 {
    let (lo, hi) = img
        .data
        .iter()
        .map(|&v| v.into())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !(hi > lo) {
        return img.map(|_| 0u8);
    }
    let k = 255.0 / (hi - lo);
    img.map(|v| ((v.into() - lo) * k + 0.5).floor().clamp(0.0, 255.0) as u8)
}

/// `y = x / max(x)`, then `y − std(y)` with the population standard
/// deviation taken over the whole image.
pub fn normalize(img: &Raster8) -> Result<RasterF> {
    let max = img.data.iter().copied().max().unwrap_or(0);
    if max == 0 {
        return Err(invalid!("cannot normalize an all-zero image"));
    }
    let y: Vec<f64> = img.data.iter().map(|&v| v as f64 / max as f64).collect();
    let s = population_std(&y);
    Ok(img.with_data(img.width, img.height, img.spacing, y.into_iter().map(|v| v - s).collect()))
}

pub fn population_std(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
}

/// The full intensity chain: resample → 8-bit → normalize.
pub fn preprocess_raw(img: &Raster16) -> Result<RasterF> {
    normalize(&to_8bit(&resample_to_reference(img)?))
}

/// Axis-aligned `size × size` crop centered on `center` (x, y), zero-padded
/// outside the image. The top-left corner is `round(center) − size/2`.
pub fn crop_patch(img: &RasterF, center: (f64, f64), size: usize) -> Result<RasterF> {
    let (cx, cy) = center;
    if !(cx >= 0.0 && cy >= 0.0 && cx < img.width as f64 && cy < img.height as f64) {
        return Err(invalid!(
            "crop center ({cx:.1}, {cy:.1}) lies outside the {}×{} image",
            img.width,
            img.height
        ));
    }
    let x0 = cx.round() as isize - (size / 2) as isize;
    let y0 = cy.round() as isize - (size / 2) as isize;
    let mut out = vec![0.0; size * size];
    for (oy, row) in out.chunks_mut(size).enumerate() {
        let sy = y0 + oy as isize;
        if sy < 0 || sy >= img.height as isize {
            continue;
        }
        let src_row = &img.data[sy as usize * img.width..(sy as usize + 1) * img.width];
        let xa = x0.max(0);
        let xb = (x0 + size as isize).min(img.width as isize);
        if xa < xb {
            let (xa, xb) = (xa as usize, xb as usize);
            let dst = (xa as isize - x0) as usize;
            row[dst..dst + (xb - xa)].copy_from_slice(&src_row[xa..xb]);
        }
    }
    Ok(img.with_data(size, size, img.spacing, out))
}

/// Bicubic resize of a square patch to `size × size`.
pub fn resize_patch(img: &RasterF, size: usize) -> Result<RasterF> {
    if img.width != img.height {
        return Err(shape_err!("patch must be square, got {}×{}", img.width, img.height));
    }
    let spacing = img.spacing * img.width as f64 / size as f64;
    resize_image(img, size, size, spacing)
}

/// Resizes so the longer side equals `side` (aspect preserved) and pads the
/// bottom/right with zeros to a square. Returns the image and the scale
/// factor from original to resized pixels.
pub fn fit_to_square(img: &RasterF, side: usize) -> Result<(RasterF, f64)> {
    let scale = side as f64 / img.width.max(img.height) as f64;
    let new_w = ((img.width as f64 * scale).round() as usize).clamp(1, side);
    let new_h = ((img.height as f64 * scale).round() as usize).clamp(1, side);
    let small = resize_image(img, new_w, new_h, img.spacing / scale)?;
    let mut data = vec![0.0; side * side];
    for y in 0..new_h {
        data[y * side..y * side + new_w].copy_from_slice(&small.data[y * new_w..(y + 1) * new_w]);
    }
    Ok((small.with_data(side, side, small.spacing, data), scale))
}

// ---------------------------------------------------------------------------
// Augmentation

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSpec {
    pub flip_probability: f64,
    /// Maximum absolute rotation, degrees.
    pub rotation_deg: f64,
    /// Maximum absolute translation as a fraction of the patch side.
    pub translation_frac: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Maximum absolute shear, degrees.
    pub shear_deg: f64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec {
            flip_probability: 0.5,
            rotation_deg: 10.0,
            translation_frac: 0.05,
            scale_min: 0.9,
            scale_max: 1.1,
            shear_deg: 5.0,
        }
    }
}

impl AugmentSpec {
    pub fn identity() -> Self {
        AugmentSpec {
            flip_probability: 0.0,
            rotation_deg: 0.0,
            translation_frac: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
            shear_deg: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.flip_probability,
            self.rotation_deg,
            self.translation_frac,
            self.scale_min,
            self.scale_max,
            self.shear_deg,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite
            || !(0.0..=1.0).contains(&self.flip_probability)
            || self.rotation_deg < 0.0
            || self.translation_frac < 0.0
            || self.shear_deg < 0.0
            || !(self.scale_min > 0.0 && self.scale_min <= self.scale_max)
        {
            return Err(invalid!("invalid augmentation spec {self:?}"));
        }
        Ok(())
    }
}

/// A 2-D affine map about the patch center, applied output → input.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine {
    /// Forward linear part, row-major.
    pub m: [f64; 4],
    pub tx: f64,
    pub ty: f64,
}

impl Affine {
    pub const IDENTITY: Affine = Affine {
        m: [1.0, 0.0, 0.0, 1.0],
        tx: 0.0,
        ty: 0.0,
    };

    pub fn flip() -> Affine {
        Affine {
            m: [-1.0, 0.0, 0.0, 1.0],
            ..Self::IDENTITY
        }
    }

    fn sample<R: Rng + ?Sized>(spec: &AugmentSpec, flip: bool, side: usize, rng: &mut R) -> Affine {
        let uniform = |r: &mut R, half: f64| if half > 0.0 { r.random_range(-half..=half) } else { 0.0 };
        let theta = uniform(rng, spec.rotation_deg).to_radians();
        let shear = uniform(rng, spec.shear_deg).to_radians();
        let s = if spec.scale_max > spec.scale_min {
            rng.random_range(spec.scale_min..=spec.scale_max)
        } else {
            spec.scale_min
        };
        let t = spec.translation_frac * side as f64;
        let tx = uniform(rng, t);
        let ty = uniform(rng, t);
        let (c, sn) = (theta.cos(), theta.sin());
        // R · Shear · S · F
        let f = if flip { -1.0 } else { 1.0 };
        let k = shear.tan();
        let a = [s * f, s * k, 0.0, s];
        let m = [
            c * a[0] - sn * a[2],
            c * a[1] - sn * a[3],
            sn * a[0] + c * a[2],
            sn * a[1] + c * a[3],
        ];
        Affine { m, tx, ty }
    }

    /// Warps `img` with bicubic sampling and zero fill.
    pub fn apply(&self, img: &RasterF) -> Result<RasterF> {
        let [a, b, c, d] = self.m;
        let det = a * d - b * c;
        if det.abs() < 1e-12 {
            return Err(invalid!("singular augmentation transform"));
        }
        let inv = [d / det, -b / det, -c / det, a / det];
        let (w, h) = (img.width, img.height);
        let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let qx = x as f64 - cx - self.tx;
                let qy = y as f64 - cy - self.ty;
                let sx = cx + inv[0] * qx + inv[1] * qy;
                let sy = cy + inv[2] * qx + inv[3] * qy;
                out[y * w + x] = sample_bicubic_zero(img, sx, sy);
            }
        }
        Ok(img.with_data(w, h, img.spacing, out))
    }
}

/// Catmull-Rom interpolation at (x, y) treating out-of-image taps as zero.
pub fn sample_bicubic_zero(img: &RasterF, x: f64, y: f64) -> f64 {
    if !(x > -2.0 && y > -2.0 && x < img.width as f64 + 1.0 && y < img.height as f64 + 1.0) {
        return 0.0;
    }
    let x0 = x.floor();
    let y0 = y.floor();
    let (fx, fy) = (x - x0, y - y0);
    let wx = [cubic(fx + 1.0), cubic(fx), cubic(1.0 - fx), cubic(2.0 - fx)];
    let wy = [cubic(fy + 1.0), cubic(fy), cubic(1.0 - fy), cubic(2.0 - fy)];
    let (x0, y0) = (x0 as isize, y0 as isize);
    let mut acc = 0.0;
    for (j, &wyj) in wy.iter().enumerate() {
        if wyj == 0.0 {
            continue;
        }
        let yy = y0 - 1 + j as isize;
        if yy < 0 || yy >= img.height as isize {
            continue;
        }
        let row = &img.data[yy as usize * img.width..(yy as usize + 1) * img.width];
        let mut racc = 0.0;
        for (i, &wxi) in wx.iter().enumerate() {
            let xx = x0 - 1 + i as isize;
            if wxi == 0.0 || xx < 0 || xx >= img.width as isize {
                continue;
            }
            racc += wxi * row[xx as usize];
        }
        acc += wyj * racc;
    }
    acc
}

/// Augments one knee's PA and LAT patches. The flip decision is shared;
/// the remaining parameters are drawn independently per view.
pub fn augment<R: Rng + ?Sized>(pa: &RasterF, lat: &RasterF, spec: &AugmentSpec, rng: &mut R) -> Result<(RasterF, RasterF)> {
    spec.validate()?;
    let flip = spec.flip_probability > 0.0 && rng.random_bool(spec.flip_probability);
    let ta = Affine::sample(spec, flip, pa.width, rng);
    let tb = Affine::sample(spec, flip, lat.width, rng);
    Ok((ta.apply(pa)?, tb.apply(lat)?))
}

/// Single-view variant of [`augment`].
pub fn augment_one<R: Rng + ?Sized>(img: &RasterF, spec: &AugmentSpec, rng: &mut R) -> Result<RasterF> {
    spec.validate()?;
    let flip = spec.flip_probability > 0.0 && rng.random_bool(spec.flip_probability);
    Affine::sample(spec, flip, img.width, rng).apply(img)
}
