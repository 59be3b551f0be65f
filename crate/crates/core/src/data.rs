//! Training images: directory loading, random crops, procedural textures.

use crate::error::{invalid, Result};
use crate::image_io::{quantize_8bit, read_image};
use crate::tensor::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;
use std::path::Path;

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub names: Vec<String>,
    pub images: Vec<Tensor>,
}

impl Dataset {
    pub fn from_images(names: Vec<String>, images: Vec<Tensor>) -> Result<Self> {
        if names.len() != images.len() {
            return Err(invalid!("name and image counts differ"));
        }
        for img in &images {
            if !matches!(img.shape(), [_, _, 3]) {
                return Err(invalid!("dataset images must be [H,W,3], got {:?}", img.shape()));
            }
        }
        Ok(Dataset { names, images })
    }

    /// Every `.ppm`/`.pgm` file in `dir`, in file-name order.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut paths: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| e.eq_ignore_ascii_case("ppm") || e.eq_ignore_ascii_case("pgm"))
            })
            .collect();
        paths.sort();
        let mut names = Vec::with_capacity(paths.len());
        let mut images = Vec::with_capacity(paths.len());
        for p in paths {
            images.push(read_image(&p)?);
            names.push(p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default());
        }
        Self::from_images(names, images)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn extend(&mut self, other: Dataset) {
        self.names.extend(other.names);
        self.images.extend(other.images);
    }

    /// `batch` random `crop x crop` crops, each flipped horizontally with probability 1/2.
    pub fn sample_batch<R: Rng>(&self, rng: &mut R, batch: usize, crop: usize) -> Result<Tensor> {
        if self.is_empty() {
            return Err(invalid!("dataset is empty"));
        }
        if self.images.iter().any(|im| im.shape()[0] < crop || im.shape()[1] < crop) {
            return Err(invalid!("every image must be at least {crop}x{crop}"));
        }
        let mut crops = Vec::with_capacity(batch);
        for _ in 0..batch {
            let img = &self.images[rng.gen_range(0..self.len())];
            let (h, w) = (img.shape()[0], img.shape()[1]);
            let oy = rng.gen_range(0..=h - crop);
            let ox = rng.gen_range(0..=w - crop);
            let flip = rng.gen_bool(0.5);
            crops.push(crop_at(img, oy, ox, crop, flip));
        }
        Tensor::stack(&crops)
    }
}

/// `crop x crop` window at `(oy, ox)`, optionally mirrored left to right.
pub fn crop_at(img: &Tensor, oy: usize, ox: usize, crop: usize, flip: bool) -> Tensor {
    let w = img.shape()[1];
    let mut out = Vec::with_capacity(crop * crop * 3);
    for y in 0..crop {
        for x in 0..crop {
            let sx = if flip { ox + crop - 1 - x } else { ox + x };
            let p = ((oy + y) * w + sx) * 3;
            out.extend_from_slice(&img.data()[p..p + 3]);
        }
    }
    Tensor::new(&[crop, crop, 3], out).expect("crop shape")
}

/// Non-overlapping `crop x crop` tiles covering each image from the top-left.
pub fn tiles(images: &[Tensor], crop: usize) -> Vec<Tensor> {
    let mut out = Vec::new();
    for img in images {
        let (h, w) = (img.shape()[0], img.shape()[1]);
        for oy in (0..=h.saturating_sub(crop)).step_by(crop) {
            for ox in (0..=w.saturating_sub(crop)).step_by(crop) {
                if oy + crop <= h && ox + crop <= w {
                    out.push(crop_at(img, oy, ox, crop, false));
                }
            }
        }
    }
    out
}

/// A structured random texture: oriented gratings, flat-colored rectangles
/// and disks, a smooth gradient, and mild grain. Values are 8-bit exact.
pub fn procedural_texture(seed: u64, height: usize, width: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let color = |rng: &mut ChaCha8Rng| [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
    let base0 = color(&mut rng);
    let base1 = color(&mut rng);
    let angle = rng.gen_range(0.0..PI);
    let mut img = vec![0.0; height * width * 3];
    for y in 0..height {
        for x in 0..width {
            let t = ((x as f64 * angle.cos() + y as f64 * angle.sin()) / (height + width) as f64 + 0.5).clamp(0.0, 1.0);
            for c in 0..3 {
                img[(y * width + x) * 3 + c] = base0[c] * (1.0 - t) + base1[c] * t;
            }
        }
    }
    for _ in 0..rng.gen_range(1..=3) {
        let freq = rng.gen_range(0.05..0.5);
        let theta = rng.gen_range(0.0..PI);
        let phase = rng.gen_range(0.0..2.0 * PI);
        let amp = rng.gen_range(0.05..0.25);
        let tint = color(&mut rng);
        for y in 0..height {
            for x in 0..width {
                let s = (freq * (x as f64 * theta.cos() + y as f64 * theta.sin()) + phase).sin();
                for c in 0..3 {
                    img[(y * width + x) * 3 + c] += amp * s * (tint[c] - 0.5) * 2.0;
                }
            }
        }
    }
    for _ in 0..rng.gen_range(2..=8) {
        let col = color(&mut rng);
        let cy = rng.gen_range(0.0..height as f64);
        let cx = rng.gen_range(0.0..width as f64);
        let ry = rng.gen_range(3.0..(height as f64 / 3.0).max(4.0));
        let rx = rng.gen_range(3.0..(width as f64 / 3.0).max(4.0));
        let disk = rng.gen_bool(0.5);
        for y in 0..height {
            for x in 0..width {
                let (dy, dx) = ((y as f64 - cy) / ry, (x as f64 - cx) / rx);
                let inside = if disk { dy * dy + dx * dx <= 1.0 } else { dy.abs() <= 1.0 && dx.abs() <= 1.0 };
                if inside {
                    img[(y * width + x) * 3..(y * width + x) * 3 + 3].copy_from_slice(&col);
                }
            }
        }
    }
    let grain = rng.gen_range(0.0..0.03);
    for v in &mut img {
        *v = (*v + rng.gen_range(-grain..=grain)).clamp(0.0, 1.0);
    }
    quantize_8bit(&Tensor::new(&[height, width, 3], img).expect("texture shape"))
}

/// `count` textures derived from `seed`.
pub fn procedural_corpus(seed: u64, count: usize, size: usize) -> Dataset {
    let mut names = Vec::with_capacity(count);
    let mut images = Vec::with_capacity(count);
    for i in 0..count {
        names.push(format!("texture_{seed}_{i:03}"));
        images.push(procedural_texture(seed.wrapping_mul(1_000_003).wrapping_add(i as u64), size, size));
    }
    Dataset { names, images }
}
