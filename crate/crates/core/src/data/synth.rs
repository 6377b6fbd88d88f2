use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::codecs::jpeg::JpegEncoder;
use image::{Rgb, RgbImage};
use rayon::prelude::*;

use super::manifest::{Manifest, Record};
use crate::error::{Error, Result};
use crate::tensor::Rng;

pub const REAL_QUALITY: u8 = 90;
/// Scenes sharing a palette and therefore an event id.
pub const SCENES_PER_EVENT: usize = 4;
const NOISE_SIGMA: f64 = 2.0;
/// Channel range a chroma boost may push pixels into.
const GAMUT: (f64, f64) = (40.0, 215.0);

/// Which manipulations distinguish the fake class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SynthKnobs {
    /// JPEG at quality 60-75, decoded, re-encoded at 85-95.
    pub recompress: bool,
    /// Chroma boosted 3-3.5x around the unchanged luma.
    pub striking: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_per_class: usize,
    pub seed: u64,
    pub knobs: SynthKnobs,
    pub size: u32,
}

impl SynthConfig {
    pub fn new(n_per_class: usize, seed: u64, knobs: SynthKnobs) -> Self {
        Self {
            n_per_class,
            seed,
            knobs,
            size: 224,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Manipulation {
    None,
    Recompress,
    Striking,
    Both,
}

impl Manipulation {
    fn tag(self) -> &'static str {
        match self {
            Manipulation::None => "plain",
            Manipulation::Recompress => "recompress",
            Manipulation::Striking => "striking",
            Manipulation::Both => "both",
        }
    }

    /// With both knobs on, each fake gets one of the three non-empty
    /// combinations with equal probability.
    fn choose(knobs: SynthKnobs, rng: &mut Rng) -> Self {
        match (knobs.recompress, knobs.striking) {
            (false, false) => Manipulation::None,
            (true, false) => Manipulation::Recompress,
            (false, true) => Manipulation::Striking,
            (true, true) => [Manipulation::Recompress, Manipulation::Striking, Manipulation::Both][rng.below(3)],
        }
    }
}

#[derive(Clone, Copy)]
struct Ycc {
    y: f64,
    cb: f64,
    cr: f64,
}

impl Ycc {
    fn random(rng: &mut Rng) -> Self {
        Self {
            y: rng.uniform_range(50.0, 200.0),
            cb: rng.uniform_range(-35.0, 35.0),
            cr: rng.uniform_range(-35.0, 35.0),
        }
    }

    fn jitter(self, rng: &mut Rng, amount: f64) -> Self {
        Self {
            y: (self.y + rng.uniform_range(-amount, amount)).clamp(30.0, 220.0),
            cb: self.cb + rng.uniform_range(-amount, amount) / 2.0,
            cr: self.cr + rng.uniform_range(-amount, amount) / 2.0,
        }
    }

    fn rgb(self) -> [f64; 3] {
        [
            self.y + 1.402 * self.cr,
            self.y - 0.344136 * self.cb - 0.714136 * self.cr,
            self.y + 1.772 * self.cb,
        ]
    }
}

enum Shape {
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64 },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Ellipse { cx, cy, rx, ry } => ((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2) <= 1.0,
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x < x1 && y >= y0 && y < y1,
        }
    }
}

struct Layer {
    shape: Shape,
    color: [f64; 3],
    /// Stripe amplitude, angular frequency and direction.
    stripes: (f64, f64, f64, f64),
}

/// Procedural scene in `[0, 255]` floats: a two-color gradient with textured
/// ellipses and rectangles drawn from the event's palette.
fn render_scene(size: u32, palette: &[Ycc], rng: &mut Rng) -> Vec<[f64; 3]> {
    let s = f64::from(size);
    let top = palette[0].jitter(rng, 15.0).rgb();
    let bottom = palette[1].jitter(rng, 15.0).rgb();
    let count = 6 + rng.below(7);
    let layers: Vec<Layer> = (0..count)
        .map(|_| {
            let shape = if rng.uniform() < 0.5 {
                Shape::Ellipse {
                    cx: rng.uniform_range(0.0, s),
                    cy: rng.uniform_range(0.0, s),
                    rx: rng.uniform_range(0.05, 0.3) * s,
                    ry: rng.uniform_range(0.05, 0.3) * s,
                }
            } else {
                let (x0, y0) = (rng.uniform_range(-0.1, 0.8) * s, rng.uniform_range(-0.1, 0.8) * s);
                Shape::Rect {
                    x0,
                    y0,
                    x1: x0 + rng.uniform_range(0.1, 0.5) * s,
                    y1: y0 + rng.uniform_range(0.1, 0.5) * s,
                }
            };
            let color = palette[rng.below(palette.len())].jitter(rng, 25.0).rgb();
            let angle = rng.uniform_range(0.0, std::f64::consts::PI);
            let stripes = (
                rng.uniform_range(0.0, 25.0),
                rng.uniform_range(0.2, 1.4),
                angle.cos(),
                angle.sin(),
            );
            Layer { shape, color, stripes }
        })
        .collect();
    let mut px = Vec::with_capacity((size * size) as usize);
    for yi in 0..size {
        for xi in 0..size {
            let (x, y) = (f64::from(xi), f64::from(yi));
            let t = y / s;
            let mut c = [0.0; 3];
            for k in 0..3 {
                c[k] = top[k] * (1.0 - t) + bottom[k] * t;
            }
            for l in &layers {
                if l.shape.contains(x, y) {
                    let (amp, freq, dx, dy) = l.stripes;
                    let wave = amp * (freq * (x * dx + y * dy)).sin();
                    for k in 0..3 {
                        c[k] = l.color[k] + wave;
                    }
                }
            }
            px.push(c);
        }
    }
    px
}

fn add_noise(px: &mut [[f64; 3]], rng: &mut Rng) {
    for p in px.iter_mut() {
        for c in p.iter_mut() {
            *c += NOISE_SIGMA * rng.normal();
        }
    }
}

/// Scales each pixel's chroma by up to `factor`, limited so that every channel
/// stays inside the gamut margin; luma is left as it was.
pub fn boost_chroma(px: &mut [[f64; 3]], factor: f64) {
    for p in px.iter_mut() {
        let y = 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
        let mut f = factor;
        for &c in p.iter() {
            let d = c - y;
            if d > 1e-9 {
                f = f.min((GAMUT.1 - y) / d);
            } else if d < -1e-9 {
                f = f.min((GAMUT.0 - y) / d);
            }
        }
        let f = f.max(1.0);
        for c in p.iter_mut() {
            *c = y + f * (*c - y);
        }
    }
}

fn to_image(px: &[[f64; 3]], size: u32) -> RgbImage {
    RgbImage::from_fn(size, size, |x, y| {
        let p = px[(y * size + x) as usize];
        Rgb(p.map(|c| c.round().clamp(0.0, 255.0) as u8))
    })
}

pub fn encode_jpeg(img: &RgbImage, quality: u8) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    JpegEncoder::new_with_quality(&mut buf, quality)
        .encode_image(img)
        .map_err(|e| Error::Format {
            what: "JPEG encoding".into(),
            reason: e.to_string(),
        })?;
    Ok(buf)
}

pub fn decode_jpeg(bytes: &[u8]) -> Result<RgbImage> {
    let img = image::load(Cursor::new(bytes), image::ImageFormat::Jpeg).map_err(|e| Error::Format {
        what: "JPEG decoding".into(),
        reason: e.to_string(),
    })?;
    Ok(img.into_rgb8())
}

struct Generated {
    file: PathBuf,
    bytes: Vec<u8>,
    record: Record,
}

fn generate_scene(cfg: &SynthConfig, scene: usize) -> Result<[Generated; 2]> {
    let event = scene / SCENES_PER_EVENT;
    let mut pal_rng = Rng::derive(cfg.seed, 1_000_000 + event as u64);
    let palette: Vec<Ycc> = (0..3).map(|_| Ycc::random(&mut pal_rng)).collect();
    let mut rng = Rng::derive(cfg.seed, scene as u64);
    let base = render_scene(cfg.size, &palette, &mut rng);

    let mut real = base.clone();
    add_noise(&mut real, &mut rng);
    let real_bytes = encode_jpeg(&to_image(&real, cfg.size), REAL_QUALITY)?;

    let manipulation = Manipulation::choose(cfg.knobs, &mut rng);
    let mut fake = base;
    if matches!(manipulation, Manipulation::Striking | Manipulation::Both) {
        boost_chroma(&mut fake, rng.uniform_range(3.0, 3.5));
    }
    // noise after the boost, so both classes carry identical sensor noise
    add_noise(&mut fake, &mut rng);
    let fake_img = to_image(&fake, cfg.size);
    let fake_bytes = if matches!(manipulation, Manipulation::Recompress | Manipulation::Both) {
        let q1 = rng.int_between(60, 75) as u8;
        let q2 = rng.int_between(85, 95) as u8;
        encode_jpeg(&decode_jpeg(&encode_jpeg(&fake_img, q1)?)?, q2)?
    } else {
        encode_jpeg(&fake_img, REAL_QUALITY)?
    };

    let entry = |name: String, bytes: Vec<u8>, label: u8| Generated {
        file: PathBuf::from("images").join(&name),
        bytes,
        record: Record {
            path: PathBuf::from("images").join(name),
            label,
            event_id: Some(event as u64),
            split: None,
        },
    };
    Ok([
        entry(format!("real_{scene:05}.jpg"), real_bytes, 0),
        entry(format!("fake_{scene:05}_{}.jpg", manipulation.tag()), fake_bytes, 1),
    ])
}

/// Writes `n_per_class` real/fake pairs under `out_dir/images` and the
/// manifest to `out_dir/manifest.jsonl`. Each pair shares one scene; every
/// four consecutive scenes share a palette and an event id.
pub fn synth_corpus(out_dir: &Path, cfg: &SynthConfig) -> Result<Manifest> {
    if cfg.n_per_class == 0 {
        return Err(Error::Usage("synthetic corpus needs at least one image per class".into()));
    }
    if cfg.size < 8 {
        return Err(Error::Usage(format!("image size {} below one DCT block", cfg.size)));
    }
    let images = out_dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let pairs: Vec<[Generated; 2]> = (0..cfg.n_per_class)
        .into_par_iter()
        .map(|scene| generate_scene(cfg, scene))
        .collect::<Result<_>>()?;
    let mut records = Vec::with_capacity(2 * pairs.len());
    for g in pairs.into_iter().flatten() {
        let path = out_dir.join(&g.file);
        fs::write(&path, &g.bytes).map_err(|e| Error::io(&path, e))?;
        records.push(g.record);
    }
    let manifest = Manifest::new(records, out_dir)?;
    manifest.save(&out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}
