//! Synthetic polyp-like samples, the images/masks directory loader and
//! netpbm/PNG I/O.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// One image (1×3×H×W in [0,1]) with its binary mask (1×1×H×W).
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub mask: Tensor,
    pub id: String,
}

impl Sample {
    pub fn new(image: Tensor, mask: Tensor, id: impl Into<String>) -> Result<Self> {
        let (i, m) = (image.shape(), mask.shape());
        if i.n() != 1 || i.c() != 3 || m.n() != 1 || m.c() != 1 || i.h() != m.h() || i.w() != m.w() {
            return Err(Error::shape(format!("image {i} and mask {m} do not pair")));
        }
        if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Domain("mask is not binary".into()));
        }
        Ok(Sample {
            image,
            mask,
            id: id.into(),
        })
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.mask.sum() / self.mask.numel() as f64
    }
}

pub const MIN_FOREGROUND: f64 = 0.02;
pub const MAX_FOREGROUND: f64 = 0.5;

struct Blob {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    angle: f64,
    wobble: f64,
    lobes: f64,
    phase: f64,
}

impl Blob {
    fn random<R: Rng>(rng: &mut R) -> Self {
        Blob {
            cx: rng.gen_range(0.25..0.75),
            cy: rng.gen_range(0.25..0.75),
            rx: rng.gen_range(0.08..0.24),
            ry: rng.gen_range(0.08..0.24),
            angle: rng.gen_range(0.0..std::f64::consts::PI),
            wobble: rng.gen_range(0.04..0.15),
            lobes: rng.gen_range(3..=7) as f64,
            phase: rng.gen_range(0.0..std::f64::consts::TAU),
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.angle.sin_cos();
        let u = (c * dx + s * dy) / self.rx;
        let v = (-s * dx + c * dy) / self.ry;
        let r = (u * u + v * v).sqrt();
        let phi = v.atan2(u);
        r <= 1.0 + self.wobble * (self.lobes * phi + self.phase).sin()
    }
}

fn synth_one<R: Rng>(rng: &mut R, res: usize, id: String) -> Result<Sample> {
    loop {
        let blobs: Vec<Blob> = (0..rng.gen_range(1..=3)).map(|_| Blob::random(rng)).collect();
        let mut mask = Tensor::zeros(Shape::new(1, 1, res, res));
        for y in 0..res {
            for x in 0..res {
                let (u, v) = ((x as f64 + 0.5) / res as f64, (y as f64 + 0.5) / res as f64);
                if blobs.iter().any(|b| b.contains(u, v)) {
                    mask.set(0, 0, y, x, 1.0);
                }
            }
        }
        let frac = mask.sum() / (res * res) as f64;
        // Colours are drawn even for rejected layouts so the stream stays simple.
        let bg: [f64; 3] = [rng.gen_range(0.35..0.6), rng.gen_range(0.25..0.45), rng.gen_range(0.2..0.4)];
        let fg: [f64; 3] = [rng.gen_range(0.7..0.95), rng.gen_range(0.45..0.7), rng.gen_range(0.35..0.6)];
        let shade = [rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1)];
        let noise = rng.gen_range(0.01..0.04);
        if !(MIN_FOREGROUND..=MAX_FOREGROUND).contains(&frac) {
            continue;
        }
        let mut image = Tensor::zeros(Shape::new(1, 3, res, res));
        for y in 0..res {
            for x in 0..res {
                let (u, v) = ((x as f64 + 0.5) / res as f64, (y as f64 + 0.5) / res as f64);
                let gradient = shade[0] * (u - 0.5) + shade[1] * (v - 0.5);
                let base = if mask.at(0, 0, y, x) == 1.0 { &fg } else { &bg };
                for (c, b) in base.iter().enumerate() {
                    let n: f64 = rng.gen_range(-1.0..1.0) * noise;
                    image.set(0, c, y, x, (b + gradient + n).clamp(0.0, 1.0));
                }
            }
        }
        return Sample::new(image, mask, id);
    }
}

/// `count` seeded samples with 1–3 wobbly elliptical blobs each. Foreground
/// covers between 2% and 50% of every mask.
pub fn generate_synthetic(count: usize, resolution: usize, seed: u64) -> Result<Vec<Sample>> {
    if count == 0 {
        return Err(Error::Config("synthetic sample count must be >= 1".into()));
    }
    if resolution < 8 {
        return Err(Error::Config(format!("resolution {resolution} too small")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| synth_one(&mut rng, resolution, format!("synth_{i:04}")))
        .collect()
}

/// Seeded shuffle then prefix split; the first part holds
/// `round(train_frac · n)` samples.
pub fn split(samples: Vec<Sample>, train_frac: f64, seed: u64) -> Result<(Vec<Sample>, Vec<Sample>)> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::Domain(format!("train fraction {train_frac} outside (0, 1)")));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = (train_frac * samples.len() as f64).round() as usize;
    let mut slots: Vec<Option<Sample>> = samples.into_iter().map(Some).collect();
    let mut take = |idx: &[usize]| -> Vec<Sample> {
        idx.iter().map(|&i| slots[i].take().expect("index used once")).collect()
    };
    let train = take(&order[..cut]);
    let val = take(&order[cut..]);
    Ok((train, val))
}

/// An 8-bit raster with 1 or 3 channels, row-major interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

fn ext_of(path: &Path) -> String {
    path.extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase()
}

fn netpbm_tokens(bytes: &[u8], path: &Path, wanted: usize) -> Result<(Vec<usize>, usize)> {
    let mut vals = Vec::new();
    let mut i = 0;
    while vals.len() < wanted {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && bytes[i].is_ascii_digit() {
            i += 1;
        }
        if start == i {
            return Err(Error::format(path, "truncated netpbm header"));
        }
        let s = std::str::from_utf8(&bytes[start..i]).expect("ascii digits");
        vals.push(s.parse().map_err(|_| Error::format(path, "bad netpbm number"))?);
    }
    Ok((vals, i))
}

/// Decodes binary or ASCII PGM/PPM with maxval up to 255.
pub fn decode_netpbm(bytes: &[u8], path: &Path) -> Result<Raster> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(Error::format(path, "missing netpbm magic"));
    }
    let (channels, binary) = match bytes[1] {
        b'2' => (1, false),
        b'3' => (3, false),
        b'5' => (1, true),
        b'6' => (3, true),
        _ => return Err(Error::format(path, "unsupported netpbm variant")),
    };
    let (head, mut pos) = netpbm_tokens(&bytes[2..], path, 3)?;
    pos += 2;
    let (width, height, maxval) = (head[0], head[1], head[2]);
    if width == 0 || height == 0 || maxval == 0 || maxval > 255 {
        return Err(Error::format(path, "unsupported netpbm dimensions or maxval"));
    }
    let n = width * height * channels;
    let raw: Vec<usize> = if binary {
        pos += 1;
        let data = bytes
            .get(pos..pos + n)
            .ok_or_else(|| Error::format(path, "truncated netpbm payload"))?;
        data.iter().map(|&b| b as usize).collect()
    } else {
        netpbm_tokens(&bytes[pos..], path, n)?.0
    };
    let pixels = raw
        .into_iter()
        .map(|v| ((v.min(maxval) * 255 + maxval / 2) / maxval) as u8)
        .collect();
    Ok(Raster {
        width,
        height,
        channels,
        pixels,
    })
}

pub fn read_raster(path: &Path) -> Result<Raster> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    match ext_of(path).as_str() {
        "pgm" | "ppm" | "pnm" => decode_netpbm(&bytes, path),
        "png" => {
            let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
                .map_err(|e| Error::format(path, e.to_string()))?;
            let gray = matches!(
                img.color(),
                image::ColorType::L8 | image::ColorType::La8 | image::ColorType::L16 | image::ColorType::La16
            );
            if gray {
                let g = img.to_luma8();
                Ok(Raster {
                    width: g.width() as usize,
                    height: g.height() as usize,
                    channels: 1,
                    pixels: g.into_raw(),
                })
            } else {
                let c = img.to_rgb8();
                Ok(Raster {
                    width: c.width() as usize,
                    height: c.height() as usize,
                    channels: 3,
                    pixels: c.into_raw(),
                })
            }
        }
        other => Err(Error::format(path, format!("unsupported extension `{other}`"))),
    }
}

pub fn write_netpbm(path: &Path, r: &Raster) -> Result<()> {
    let magic = match r.channels {
        1 => "P5",
        3 => "P6",
        c => return Err(Error::format(path, format!("cannot write {c}-channel netpbm"))),
    };
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let write = |f: &mut fs::File| -> std::io::Result<()> {
        write!(f, "{magic}\n{} {}\n255\n", r.width, r.height)?;
        f.write_all(&r.pixels)
    };
    write(&mut f).map_err(|e| Error::io(path, e))
}

fn to_unit(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Bilinear resample (pixel centres aligned) of a raster to `res`×`res`,
/// returned as 1×C×res×res in [0,1].
fn resize_bilinear(r: &Raster, res: usize) -> Tensor {
    let c = r.channels;
    let mut out = Tensor::zeros(Shape::new(1, c, res, res));
    let src = |x: usize, y: usize, ch: usize| r.pixels[(y * r.width + x) * c + ch] as f64 / 255.0;
    let coord = |o: usize, n: usize| -> (usize, usize, f64) {
        let f = ((o as f64 + 0.5) * n as f64 / res as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let lo = f.floor() as usize;
        (lo, (lo + 1).min(n - 1), f - lo as f64)
    };
    for y in 0..res {
        let (y0, y1, fy) = coord(y, r.height);
        for x in 0..res {
            let (x0, x1, fx) = coord(x, r.width);
            for ch in 0..c {
                let top = src(x0, y0, ch) * (1.0 - fx) + src(x1, y0, ch) * fx;
                let bot = src(x0, y1, ch) * (1.0 - fx) + src(x1, y1, ch) * fx;
                out.set(0, ch, y, x, top * (1.0 - fy) + bot * fy);
            }
        }
    }
    out
}

/// Nearest-neighbour resample of the first channel, binarised at 128.
fn resize_mask(r: &Raster, res: usize) -> Tensor {
    let mut out = Tensor::zeros(Shape::new(1, 1, res, res));
    for y in 0..res {
        let sy = (y * r.height / res).min(r.height - 1);
        for x in 0..res {
            let sx = (x * r.width / res).min(r.width - 1);
            let v = r.pixels[(sy * r.width + sx) * r.channels];
            out.set(0, 0, y, x, if v >= 128 { 1.0 } else { 0.0 });
        }
    }
    out
}

fn to_rgb(r: Raster) -> Raster {
    if r.channels == 3 {
        return r;
    }
    Raster {
        pixels: r.pixels.iter().flat_map(|&p| [p, p, p]).collect(),
        channels: 3,
        ..r
    }
}

fn stems(dir: &Path, exts: &[&str]) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if !path.is_file() || !exts.contains(&ext_of(&path).as_str()) {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("").to_string();
        if out.insert(stem.clone(), path.clone()).is_some() {
            return Err(Error::format(&path, format!("duplicate stem `{stem}`")));
        }
    }
    Ok(out)
}

/// Loads `images/<stem>.(png|ppm)` paired with `masks/<stem>.(png|pgm)`,
/// sorted by stem.
pub fn load_directory(images_dir: &Path, masks_dir: &Path, resolution: usize) -> Result<Vec<Sample>> {
    let images = stems(images_dir, &["png", "ppm"])?;
    let masks = stems(masks_dir, &["png", "pgm"])?;
    if let Some(stem) = images.keys().find(|s| !masks.contains_key(*s)) {
        return Err(Error::Pairing {
            stem: stem.clone(),
            dir: masks_dir.to_path_buf(),
        });
    }
    if let Some(stem) = masks.keys().find(|s| !images.contains_key(*s)) {
        return Err(Error::Pairing {
            stem: stem.clone(),
            dir: images_dir.to_path_buf(),
        });
    }
    images
        .iter()
        .map(|(stem, ipath)| {
            let img = to_rgb(read_raster(ipath)?);
            let mask = read_raster(&masks[stem])?;
            Sample::new(resize_bilinear(&img, resolution), resize_mask(&mask, resolution), stem.clone())
        })
        .collect()
}

/// Loads a dataset root laid out as `<root>/images` and `<root>/masks`.
pub fn load_root(root: &Path, resolution: usize) -> Result<Vec<Sample>> {
    load_directory(&root.join("images"), &root.join("masks"), resolution)
}

fn image_raster(image: &Tensor, n: usize) -> Raster {
    let s = image.shape();
    let mut pixels = Vec::with_capacity(s.plane() * s.c());
    for y in 0..s.h() {
        for x in 0..s.w() {
            for c in 0..s.c() {
                pixels.push(to_unit(image.at(n, c, y, x)));
            }
        }
    }
    Raster {
        width: s.w(),
        height: s.h(),
        channels: s.c(),
        pixels,
    }
}

/// Writes samples as `images/<id>.ppm` and `masks/<id>.pgm` under `root`.
pub fn export(samples: &[Sample], root: &Path) -> Result<()> {
    for sub in ["images", "masks"] {
        let d = root.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    for s in samples {
        write_netpbm(&root.join("images").join(format!("{}.ppm", s.id)), &image_raster(&s.image, 0))?;
        write_netpbm(&root.join("masks").join(format!("{}.pgm", s.id)), &image_raster(&s.mask, 0))?;
    }
    Ok(())
}

/// Single-channel map of batch item `n` (values in [0,1]) as 8-bit PGM.
pub fn write_map_pgm(path: &Path, map: &Tensor, n: usize) -> Result<()> {
    let s = map.shape();
    if s.c() != 1 || n >= s.n() {
        return Err(Error::shape(format!("cannot export item {n} of {s} as a grayscale map")));
    }
    write_netpbm(path, &image_raster(&map.batch_item(n), 0))
}

/// The image with the boundary of the thresholded prediction drawn in red.
pub fn overlay(image: &Tensor, probs: &Tensor, threshold: f64) -> Result<Raster> {
    let (i, p) = (image.shape(), probs.shape());
    if i.c() != 3 || p.c() != 1 || i.h() != p.h() || i.w() != p.w() {
        return Err(Error::shape(format!("cannot overlay {p} on {i}")));
    }
    let mut r = image_raster(&image.batch_item(0), 0);
    let (h, w) = (p.h(), p.w());
    let fg = |y: usize, x: usize| probs.at(0, 0, y, x) >= threshold;
    for y in 0..h {
        for x in 0..w {
            if !fg(y, x) {
                continue;
            }
            let edge = y == 0
                || x == 0
                || y + 1 == h
                || x + 1 == w
                || !fg(y - 1, x)
                || !fg(y + 1, x)
                || !fg(y, x - 1)
                || !fg(y, x + 1);
            if edge {
                let k = (y * w + x) * 3;
                r.pixels[k..k + 3].copy_from_slice(&[255, 0, 0]);
            }
        }
    }
    Ok(r)
}
