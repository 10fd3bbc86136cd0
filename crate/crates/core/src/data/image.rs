//! Image codecs (binary PPM and VRT1) and the augmentation pipeline.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, Error, Result};
use crate::tensor::{read_vrt1, Tensor, VRT1_MAGIC};

/// Decodes a P6 (8-bit) PPM or a `[3, H, W]` VRT1 tensor into `[3, H, W]` in `[0, 1]`.
pub fn decode_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image_bytes(&bytes).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn decode_image_bytes(bytes: &[u8]) -> Result<Tensor> {
    if bytes.starts_with(b"P6") {
        decode_ppm(bytes)
    } else if bytes.starts_with(VRT1_MAGIC) {
        let t: Tensor = read_vrt1(bytes)?;
        if t.rank() != 3 || t.shape()[0] != 3 {
            return Err(Error::Format(format!("image tensor must be [3, H, W], got {:?}", t.shape())));
        }
        Ok(t)
    } else {
        let head: Vec<u8> = bytes.iter().take(4).copied().collect();
        Err(Error::Format(format!("unsupported image magic {head:?}")))
    }
}

fn truncated(what: &str) -> Error {
    Error::io("<stream>", std::io::Error::new(std::io::ErrorKind::UnexpectedEof, format!("truncated PPM {what}")))
}

fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 2;
    let mut field = || -> Result<usize> {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(truncated("header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("malformed PPM header".into()));
        }
        let v = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| Error::Format("PPM header value too large".into()))?;
        Ok(v)
    };
    let (w, h, maxval) = (field()?, field()?, field()?);
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!("only 8-bit PPM is supported, maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(truncated("header"));
    }
    let raster = &bytes[pos + 1..];
    let n = w * h;
    if raster.len() < 3 * n {
        return Err(truncated("raster"));
    }
    let scale = 1.0 / maxval as f32;
    let mut data = vec![0.0f32; 3 * n];
    for i in 0..n {
        for c in 0..3 {
            data[c * n + i] = raster[3 * i + c] as f32 * scale;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Encodes `[3, H, W]` in `[0, 1]` as P6 with maxval 255 (values are clamped and rounded).
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(dim_err!("PPM needs a [3, H, W] image, got {:?}", s));
    }
    let (h, w) = (s[1], s[2]);
    let n = h * w;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * n);
    for i in 0..n {
        for c in 0..3 {
            out.push((image.data()[c * n + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn write_ppm(image: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_ppm(image)?).map_err(|e| Error::io(path, e))
}

/// Bilinear resize of `[C, H, W]` with half-pixel centers and edge clamping.
pub fn resize_bilinear(image: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let s = image.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    if (h, w) == (out_h, out_w) {
        return image.clone();
    }
    let src = image.data();
    let sy = h as f32 / out_h as f32;
    let sx = w as f32 / out_w as f32;
    let axis = |dst: usize, scale: f32, len: usize| {
        let f = ((dst as f32 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f32);
        let i0 = f.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, f - i0 as f32)
    };
    let mut out = vec![0.0f32; c * out_h * out_w];
    for y in 0..out_h {
        let (y0, y1, fy) = axis(y, sy, h);
        for x in 0..out_w {
            let (x0, x1, fx) = axis(x, sx, w);
            for ch in 0..c {
                let p = |yy: usize, xx: usize| src[ch * h * w + yy * w + xx];
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out[ch * out_h * out_w + y * out_w + x] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out).unwrap()
}

/// Rotation about the image center by `degrees`, nearest-neighbor, zero fill.
pub fn rotate_nearest(image: &Tensor, degrees: f32) -> Tensor {
    let s = image.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((h as f32 - 1.0) / 2.0, (w as f32 - 1.0) / 2.0);
    let src = image.data();
    let mut out = vec![0.0f32; c * h * w];
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f32 - cy, x as f32 - cx);
            // inverse mapping: where in the source does this output pixel come from
            let sx = (cos * dx + sin * dy + cx).round();
            let sy = (-sin * dx + cos * dy + cy).round();
            if sx >= 0.0 && sy >= 0.0 && (sx as usize) < w && (sy as usize) < h {
                let (sx, sy) = (sx as usize, sy as usize);
                for ch in 0..c {
                    out[ch * h * w + y * w + x] = src[ch * h * w + sy * w + sx];
                }
            }
        }
    }
    Tensor::new(vec![c, h, w], out).unwrap()
}

/// Additive brightness shift.
pub fn adjust_brightness(image: &Tensor, delta: f32) -> Tensor {
    image.map(|v| v + delta)
}

/// Scales deviations from the image mean by `factor`.
pub fn adjust_contrast(image: &Tensor, factor: f32) -> Tensor {
    let mean = image.data().iter().sum::<f32>() / image.len() as f32;
    image.map(|v| (v - mean) * factor + mean)
}

/// Augmentation config. Ranges are `[lo, hi]` and sampled uniformly; a
/// degenerate range `[d, d]` applies `d` deterministically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugConfig {
    /// Multiplier applied to raw values before anything else.
    pub value_scale: f32,
    /// Size after bilinear resize, before cropping. `None` resizes straight
    /// to the output size.
    pub resize: Option<(usize, usize)>,
    /// Final size; the crop window.
    pub output: (usize, usize),
    /// Maximum absolute rotation in degrees.
    pub max_rotation: f32,
    /// Additive brightness delta range.
    pub brightness: [f32; 2],
    /// Contrast delta range; the factor is `1 + delta`.
    pub contrast: [f32; 2],
}

impl Default for AugConfig {
    fn default() -> Self {
        AugConfig {
            value_scale: 1.0,
            resize: None,
            output: (32, 32),
            max_rotation: 0.0,
            brightness: [0.0, 0.0],
            contrast: [0.0, 0.0],
        }
    }
}

impl AugConfig {
    /// Pure resize to `output`.
    pub fn resize_only(output: (usize, usize)) -> Self {
        AugConfig { output, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let (rh, rw) = self.resize.unwrap_or(self.output);
        if self.output.0 == 0 || self.output.1 == 0 {
            return Err(config_err!("augment output size must be positive"));
        }
        if self.output.0 > rh || self.output.1 > rw {
            return Err(config_err!("crop {:?} larger than resized image {:?}", self.output, (rh, rw)));
        }
        if !(0.0..=180.0).contains(&self.max_rotation) {
            return Err(config_err!("max_rotation must be within [0, 180], got {}", self.max_rotation));
        }
        for (name, [lo, hi]) in [("brightness", self.brightness), ("contrast", self.contrast)] {
            if lo > hi || lo.abs() > 1.0 || hi.abs() > 1.0 {
                return Err(config_err!("{name} range [{lo}, {hi}] must be ordered and within [-1, 1]"));
            }
        }
        Ok(())
    }
}

fn sample(range: [f32; 2], rng: &mut ChaCha8Rng) -> f32 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.random_range(range[0]..range[1])
    }
}

/// rescale → bilinear resize → random crop → random rotation → brightness and
/// contrast jitter → clamp to `[0, 1]`.
pub fn augment(image: &Tensor, cfg: &AugConfig, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    cfg.validate()?;
    let mut x = if cfg.value_scale == 1.0 { image.clone() } else { image.map(|v| v * cfg.value_scale) };
    let (rh, rw) = cfg.resize.unwrap_or(cfg.output);
    x = resize_bilinear(&x, rh, rw);
    let (oh, ow) = cfg.output;
    if (rh, rw) != (oh, ow) {
        let top = rng.random_range(0..=rh - oh);
        let left = rng.random_range(0..=rw - ow);
        let c = x.shape()[0];
        let src = x.data();
        let data = (0..c)
            .flat_map(|ch| (0..oh).flat_map(move |y| (0..ow).map(move |xx| (ch, y, xx))))
            .map(|(ch, y, xx)| src[ch * rh * rw + (top + y) * rw + left + xx])
            .collect();
        x = Tensor::new(vec![c, oh, ow], data)?;
    }
    if cfg.max_rotation > 0.0 {
        let deg = rng.random_range(-cfg.max_rotation..=cfg.max_rotation);
        x = rotate_nearest(&x, deg);
    }
    let b = sample(cfg.brightness, rng);
    if b != 0.0 {
        x = adjust_brightness(&x, b);
    }
    let c = sample(cfg.contrast, rng);
    if c != 0.0 {
        x = adjust_contrast(&x, 1.0 + c);
    }
    Ok(x.map(|v| v.clamp(0.0, 1.0)))
}
