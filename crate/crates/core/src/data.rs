//! Synthetic shapes dataset and its on-disk form.
//!
//! Each scene holds 1-4 non-overlapping filled rectangles, ellipses or
//! triangles on a low-contrast textured background. Pixels are quantized to
//! 8 bits, so a scene written as PPM reads back exactly. Boxes are the tight
//! inclusive pixel extent of each rendered shape.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mask::{parse_pnm_header, BoundingBox};
use crate::tensor::Tensor;

pub const CLASS_NAMES: [&str; 3] = ["rectangle", "ellipse", "triangle"];

/// Scene geometry knobs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneParams {
    pub height: usize,
    pub width: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Side length range of a shape's bounding square, pixels.
    pub min_size: usize,
    pub max_size: usize,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self { height: 64, width: 64, min_objects: 1, max_objects: 4, min_size: 8, max_size: 20 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    /// `1 x 3 x H x W`, values in `[0, 1]`.
    pub image: Tensor,
    pub boxes: Vec<BoundingBox>,
}

fn inside(class: usize, fx: f32, fy: f32, x0: f32, y0: f32, w: f32, h: f32) -> bool {
    let (u, v) = ((fx - x0) / w, (fy - y0) / h);
    if !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&v) {
        return false;
    }
    match class {
        0 => true,
        1 => {
            let (du, dv) = (u - 0.5, v - 0.5);
            du * du + dv * dv <= 0.25
        }
        // Apex at top center, base along the bottom edge.
        _ => (u - 0.5).abs() <= 0.5 * v,
    }
}

/// Renders one scene from `rng`.
pub fn generate_scene(rng: &mut ChaCha8Rng, p: &SceneParams) -> SyntheticScene {
    let (h, w) = (p.height, p.width);
    let base: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.35..0.65));
    let (fx, fy, phase) = (rng.gen_range(0.1..0.4), rng.gen_range(0.1..0.4), rng.gen_range(0.0..std::f32::consts::TAU));
    let mut px = vec![0u8; 3 * h * w];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let tex = 0.04 * ((x as f32 * fx + y as f32 * fy + phase + c as f32).sin());
                let noise = rng.gen_range(-0.03..0.03);
                let v = (base[c] + tex + noise).clamp(0.0, 1.0);
                px[(c * h + y) * w + x] = (v * 255.0).round() as u8;
            }
        }
    }
    let count = rng.gen_range(p.min_objects..=p.max_objects);
    let mut boxes: Vec<BoundingBox> = Vec::new();
    let mut taken: Vec<(usize, usize, usize, usize)> = Vec::new();
    for _ in 0..count {
        for _attempt in 0..64 {
            let bw = rng.gen_range(p.min_size..=p.max_size);
            let bh = rng.gen_range(p.min_size..=p.max_size);
            let x0 = rng.gen_range(0..=w - bw);
            let y0 = rng.gen_range(0..=h - bh);
            // Keep a two-pixel gap between shapes.
            let overlaps = taken.iter().any(|&(ax, ay, aw, ah)| {
                x0 < ax + aw + 2 && ax < x0 + bw + 2 && y0 < ay + ah + 2 && ay < y0 + bh + 2
            });
            if overlaps {
                continue;
            }
            let class = rng.gen_range(0..CLASS_NAMES.len());
            let color: [f32; 3] = std::array::from_fn(|c| {
                let shift = rng.gen_range(0.25..0.4);
                if base[c] > 0.5 || (base[c] > 0.4 && rng.gen_bool(0.5)) {
                    base[c] - shift
                } else {
                    base[c] + shift
                }
            });
            let (mut lx, mut ly, mut hx, mut hy) = (usize::MAX, usize::MAX, 0, 0);
            for y in y0..y0 + bh {
                for x in x0..x0 + bw {
                    let ok = inside(
                        class,
                        x as f32 + 0.5,
                        y as f32 + 0.5,
                        x0 as f32,
                        y0 as f32,
                        bw as f32,
                        bh as f32,
                    );
                    if ok {
                        for c in 0..3 {
                            px[(c * h + y) * w + x] = (color[c].clamp(0.0, 1.0) * 255.0).round() as u8;
                        }
                        lx = lx.min(x);
                        ly = ly.min(y);
                        hx = hx.max(x);
                        hy = hy.max(y);
                    }
                }
            }
            taken.push((x0, y0, bw, bh));
            boxes.push(BoundingBox::new(lx as f32, ly as f32, hx as f32, hy as f32, class).expect("ordered corners"));
            break;
        }
    }
    let data = px.iter().map(|&v| v as f32 / 255.0).collect();
    SyntheticScene { image: Tensor::new([1, 3, h, w], data).expect("dims match"), boxes }
}

/// `n` scenes; scene `i` draws from its own ChaCha stream, so any prefix of a
/// larger dataset is identical to the smaller one.
pub fn generate_dataset(n: usize, seed: u64, p: &SceneParams) -> Vec<SyntheticScene> {
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            generate_scene(&mut rng, p)
        })
        .collect()
}

impl SyntheticScene {
    pub fn to_ppm(&self) -> Vec<u8> {
        let [_, _, h, w] = self.image.dims();
        let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
        let d = self.image.data();
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    out.push((d[(c * h + y) * w + x] * 255.0).round() as u8);
                }
            }
        }
        out
    }

    pub fn boxes_text(&self) -> String {
        self.boxes
            .iter()
            .map(|b| format!("{} {} {} {} {}\n", b.class_id, b.x1, b.y1, b.x2, b.y2))
            .collect()
    }

    pub fn from_files(ppm: &[u8], boxes: &str, name: &str) -> Result<Self> {
        let image = read_ppm(ppm, name)?;
        let boxes = parse_boxes(boxes, name)?;
        Ok(Self { image, boxes })
    }
}

/// Reads a binary PPM (P6, maxval 255) into `1 x 3 x H x W`.
pub fn read_ppm(buf: &[u8], what: &str) -> Result<Tensor> {
    let ([w, h, maxval], body) = parse_pnm_header(buf, b"P6", what)?;
    if maxval != 255 {
        return Err(Error::schema(format!("{what}.maxval"), format!("expected 255, got {maxval}")));
    }
    if body.len() != 3 * w * h {
        return Err(Error::schema(format!("{what}.pixels"), format!("expected {} bytes, got {}", 3 * w * h, body.len())));
    }
    Ok(Tensor::from_fn([1, 3, h, w], |_, c, y, x| body[(y * w + x) * 3 + c] as f32 / 255.0))
}

/// Parses `class x1 y1 x2 y2` lines; blank lines are skipped.
pub fn parse_boxes(text: &str, what: &str) -> Result<Vec<BoundingBox>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let field = format!("{what}:{}", i + 1);
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.is_empty() {
            continue;
        }
        if parts.len() != 5 {
            return Err(Error::schema(field, "expected `class x1 y1 x2 y2`"));
        }
        let class: usize = parts[0].parse().map_err(|_| Error::schema(field.clone(), "class is not an integer"))?;
        let mut c = [0f32; 4];
        for (k, v) in parts[1..].iter().enumerate() {
            c[k] = v.parse().map_err(|_| Error::schema(field.clone(), format!("coordinate `{v}` is not a number")))?;
        }
        out.push(BoundingBox::new(c[0], c[1], c[2], c[3], class).map_err(|e| Error::schema(field, e.to_string()))?);
    }
    Ok(out)
}

fn stem(i: usize) -> String {
    format!("scene_{i:05}")
}

pub fn write_dataset(dir: impl AsRef<Path>, scenes: &[SyntheticScene]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    for (i, s) in scenes.iter().enumerate() {
        fs::write(dir.join(format!("{}.ppm", stem(i))), s.to_ppm())?;
        fs::write(dir.join(format!("{}.txt", stem(i))), s.boxes_text())?;
    }
    Ok(())
}

/// Reads every `*.ppm` in `dir` (sorted by name) with its `.txt` box file.
pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Vec<SyntheticScene>> {
    let mut ppms: Vec<PathBuf> = fs::read_dir(dir.as_ref())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "ppm"))
        .collect();
    ppms.sort();
    ppms.iter()
        .map(|p| {
            let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            let txt = p.with_extension("txt");
            let boxes = fs::read_to_string(&txt)
                .map_err(|_| Error::schema(txt.display().to_string(), "missing box file"))?;
            SyntheticScene::from_files(&fs::read(p)?, &boxes, &name)
        })
        .collect()
}
