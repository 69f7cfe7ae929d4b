//! Synthetic RGB-D scenes in four categories, by where the object is visible:
//!
//! 1. distinct in both color and depth
//! 2. distinct in color only (depth offset below the depth noise)
//! 3. distinct in depth only (color offset below the color noise)
//! 4. below the noise in both, with salient-looking distractors in each modality
//!
//! Each scene is one anti-aliased ellipse or rectangle over a noisy gradient
//! background. The category is encoded in the sample id as `_c<k>`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::pnm::PnmImage;
use super::{write_pnm, DataError, Result};
use crate::model::SIZE_MULTIPLE;

/// Per-pixel Gaussian noise in the color channels.
pub const COLOR_NOISE: f64 = 0.05;
/// Per-pixel Gaussian noise in the depth map.
pub const DEPTH_NOISE: f64 = 0.05;

const STRONG: (f64, f64) = (0.30, 0.45);
const SUPERSAMPLE: usize = 4;
const MIN_FRACTION: f64 = 0.01;
const MAX_FRACTION: f64 = 0.60;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Category {
    Distinct = 1,
    ColorOnly = 2,
    DepthOnly = 3,
    Cluttered = 4,
}

impl Category {
    pub const ALL: [Category; 4] = [Self::Distinct, Self::ColorOnly, Self::DepthOnly, Self::Cluttered];

    pub fn number(self) -> u8 {
        self as u8
    }

    pub fn from_number(k: u8) -> Option<Self> {
        Self::ALL.get((k as usize).checked_sub(1)?).copied()
    }
}

/// Recovers the category from an id written by [`gen_synthetic`].
pub fn category_of(id: &str) -> Option<Category> {
    let (_, tail) = id.rsplit_once("_c")?;
    Category::from_number(tail.parse().ok()?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64 },
    Rect { cx: f64, cy: f64, hx: f64, hy: f64 },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Ellipse { cx, cy, rx, ry } => ((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2) <= 1.0,
            Shape::Rect { cx, cy, hx, hy } => (x - cx).abs() <= hx && (y - cy).abs() <= hy,
        }
    }

    fn random(rng: &mut impl Rng, size: f64, scale: (f64, f64)) -> Self {
        let a = rng.gen_range(scale.0..scale.1) * size;
        let b = rng.gen_range(scale.0..scale.1) * size;
        let cx = rng.gen_range(a..size - a);
        let cy = rng.gen_range(b..size - b);
        if rng.gen_bool(0.5) {
            Shape::Ellipse { cx, cy, rx: a, ry: b }
        } else {
            Shape::Rect { cx, cy, hx: a, hy: b }
        }
    }

    /// Fraction of pixel `(x, y)` covered, by regular supersampling.
    fn coverage(&self, x: usize, y: usize) -> f64 {
        let step = 1.0 / SUPERSAMPLE as f64;
        let mut hits = 0;
        for sy in 0..SUPERSAMPLE {
            for sx in 0..SUPERSAMPLE {
                let px = x as f64 + (sx as f64 + 0.5) * step;
                let py = y as f64 + (sy as f64 + 0.5) * step;
                hits += self.contains(px, py) as usize;
            }
        }
        hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64
    }

    fn coverage_map(&self, size: usize) -> Vec<f64> {
        (0..size * size).map(|i| self.coverage(i % size, i / size)).collect()
    }
}

/// Everything that determines one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub id: String,
    pub category: Category,
    pub shape: Shape,
    /// Euclidean distance between object and background base colors.
    pub color_contrast: f64,
    /// Offset of the object depth from the background base depth.
    pub depth_contrast: f64,
    pub color_noise: f64,
    pub depth_noise: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n: usize,
    pub size: usize,
    pub mix: [f64; 4],
    pub seed: u64,
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.size == 0 || !self.size.is_multiple_of(SIZE_MULTIPLE) {
            return Err(DataError::Size(self.size));
        }
        if self.mix.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(DataError::Generator(format!("mix weights must be non-negative: {:?}", self.mix)));
        }
        let total: f64 = self.mix.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(DataError::Generator(format!("mix weights sum to {total}, not 1")));
        }
        Ok(())
    }
}

/// Splits `n` samples across categories by largest remainder, so the counts
/// match the mix as closely as integers allow.
pub fn category_counts(n: usize, mix: &[f64; 4]) -> [usize; 4] {
    let exact = mix.map(|w| w * n as f64);
    let mut counts = exact.map(|e| e.floor() as usize);
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())));
    let short = n - counts.iter().sum::<usize>();
    for &k in order.iter().take(short) {
        counts[k] += 1;
    }
    counts
}

#[derive(Debug, Clone)]
pub struct Generated {
    pub manifest: PathBuf,
    pub scenes: Vec<SceneSpec>,
}

fn draw_spec(index: usize, category: Category, size: usize, seed: u64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = Shape::random(&mut rng, size as f64, (0.15, 0.35));
    let strong = |rng: &mut ChaCha8Rng| rng.gen_range(STRONG.0..STRONG.1);
    let (color_contrast, depth_contrast) = match category {
        Category::Distinct => (strong(&mut rng), strong(&mut rng)),
        Category::ColorOnly => (strong(&mut rng), rng.gen_range(0.0..0.5) * DEPTH_NOISE),
        Category::DepthOnly => (rng.gen_range(0.0..0.5) * COLOR_NOISE, strong(&mut rng)),
        Category::Cluttered => (
            rng.gen_range(0.5..0.9) * COLOR_NOISE,
            rng.gen_range(0.5..0.9) * DEPTH_NOISE,
        ),
    };
    SceneSpec {
        id: format!("s{index:04}_c{}", category.number()),
        category,
        shape,
        color_contrast,
        depth_contrast,
        color_noise: COLOR_NOISE,
        depth_noise: DEPTH_NOISE,
        seed: rng.gen(),
    }
}

/// Rendered scene: interleaved rgb, depth and mask, all in `[0, 1]`.
pub struct Rendered {
    pub rgb: Vec<f64>,
    pub depth: Vec<f64>,
    pub gt: Vec<f64>,
}

/// Pushes `base` away from itself by `amount` along a direction that keeps it
/// inside `[0, 1]`.
fn offset_color(rng: &mut impl Rng, base: [f64; 3], amount: f64) -> [f64; 3] {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut dir: [f64; 3] = std::array::from_fn(|_| f64::abs(normal.sample(rng)));
    let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt().max(1e-12);
    for (d, b) in dir.iter_mut().zip(base) {
        // Move toward mid-gray so the offset never clips.
        *d *= if b > 0.5 { -1.0 } else { 1.0 } / norm;
    }
    std::array::from_fn(|c| base[c] + amount * dir[c])
}

pub fn render(spec: &SceneSpec, size: usize) -> Rendered {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let px = size * size;
    let coord = |i: usize| ((i % size) as f64 / size as f64 - 0.5, (i / size) as f64 / size as f64 - 0.5);

    let base: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.3..0.7));
    let ramp: [(f64, f64); 3] = std::array::from_fn(|_| (rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1)));
    let object = offset_color(&mut rng, base, spec.color_contrast);
    let depth_base = rng.gen_range(0.45..0.75);
    let depth_ramp = rng.gen_range(-0.04..0.04);
    let depth_object = depth_base - spec.depth_contrast;

    let alpha = spec.shape.coverage_map(size);
    let mut rgb = vec![0.0; 3 * px];
    let mut depth = vec![0.0; px];
    for i in 0..px {
        let (x, y) = coord(i);
        let a = alpha[i];
        for c in 0..3 {
            let bg = base[c] + ramp[c].0 * x + ramp[c].1 * y;
            rgb[3 * i + c] = bg * (1.0 - a) + object[c] * a;
        }
        depth[i] = (depth_base + depth_ramp * y) * (1.0 - a) + depth_object * a;
    }

    if spec.category == Category::Cluttered {
        for _ in 0..3 {
            let shape = Shape::random(&mut rng, size as f64, (0.06, 0.14));
            let amount = rng.gen_range(0.15..0.3);
            let color = offset_color(&mut rng, base, amount);
            let cov = shape.coverage_map(size);
            for (i, &a) in cov.iter().enumerate() {
                for c in 0..3 {
                    rgb[3 * i + c] = rgb[3 * i + c] * (1.0 - a) + color[c] * a;
                }
            }
            let shape = Shape::random(&mut rng, size as f64, (0.06, 0.14));
            let d = depth_base - rng.gen_range(0.15..0.3);
            for (i, a) in shape.coverage_map(size).into_iter().enumerate() {
                depth[i] = depth[i] * (1.0 - a) + d * a;
            }
        }
    }

    let color_noise = Normal::new(0.0, spec.color_noise).unwrap();
    for v in rgb.iter_mut() {
        *v = (*v + color_noise.sample(&mut rng)).clamp(0.0, 1.0);
    }
    let depth_noise = Normal::new(0.0, spec.depth_noise).unwrap();
    for v in depth.iter_mut() {
        *v = (*v + depth_noise.sample(&mut rng)).clamp(0.0, 1.0);
    }
    let gt = alpha.iter().map(|&a| if a >= 0.5 { 1.0 } else { 0.0 }).collect();
    Rendered { rgb, depth, gt }
}

fn quantize(v: f64, max: u16) -> u16 {
    (v * max as f64).round() as u16
}

/// Writes `n` scenes as `<id>.rgb.ppm` (8-bit), `<id>.depth.pgm` (16-bit)
/// and `<id>.gt.pgm` (8-bit, 0/255) plus `manifest.txt` into `out`.
pub fn gen_synthetic(out: &Path, cfg: &SynthConfig) -> Result<Generated> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| DataError::io(out, e))?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let counts = category_counts(cfg.n, &cfg.mix);
    let mut categories: Vec<Category> = Category::ALL
        .iter()
        .zip(counts)
        .flat_map(|(&c, k)| std::iter::repeat_n(c, k))
        .collect();
    categories.shuffle(&mut rng);

    let size = cfg.size;
    let mut scenes = Vec::with_capacity(cfg.n);
    let mut manifest = String::from("# rgb,depth,gt\n");
    for (index, category) in categories.into_iter().enumerate() {
        let (spec, scene) = loop {
            let spec = draw_spec(index, category, size, rng.gen());
            let scene = render(&spec, size);
            let frac = scene.gt.iter().sum::<f64>() / (size * size) as f64;
            if (MIN_FRACTION..=MAX_FRACTION).contains(&frac) {
                break (spec, scene);
            }
        };
        let names = ["rgb.ppm", "depth.pgm", "gt.pgm"].map(|ext| format!("{}.{ext}", spec.id));
        let rgb = PnmImage::rgb(size, size, 255, scene.rgb.iter().map(|&v| quantize(v, 255)).collect());
        let depth = PnmImage::gray(size, size, 65535, scene.depth.iter().map(|&v| quantize(v, 65535)).collect());
        let gt = PnmImage::gray(size, size, 255, scene.gt.iter().map(|&v| quantize(v, 255)).collect());
        write_pnm(&out.join(&names[0]), &rgb)?;
        write_pnm(&out.join(&names[1]), &depth)?;
        write_pnm(&out.join(&names[2]), &gt)?;
        manifest.push_str(&names.join(","));
        manifest.push('\n');
        scenes.push(spec);
    }
    let path = out.join("manifest.txt");
    fs::write(&path, manifest).map_err(|e| DataError::io(&path, e))?;
    Ok(Generated { manifest: path, scenes })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_follow_the_mix() {
        assert_eq!(category_counts(16, &[0.3125, 0.3125, 0.3125, 0.0625]), [5, 5, 5, 1]);
        assert_eq!(category_counts(8, &[0.0, 1.0, 0.0, 0.0]), [0, 8, 0, 0]);
        assert_eq!(category_counts(10, &[0.25; 4]).iter().sum::<usize>(), 10);
    }

    #[test]
    fn ids_carry_the_category() {
        assert_eq!(category_of("s0012_c3"), Some(Category::DepthOnly));
        assert_eq!(category_of("s0012_c9"), None);
        assert_eq!(category_of("plain"), None);
    }

    #[test]
    fn contrast_respects_the_category() {
        for (i, cat) in Category::ALL.into_iter().enumerate() {
            let s = draw_spec(i, cat, 32, 99);
            let color_visible = s.color_contrast > s.color_noise;
            let depth_visible = s.depth_contrast > s.depth_noise;
            let expected = match cat {
                Category::Distinct => (true, true),
                Category::ColorOnly => (true, false),
                Category::DepthOnly => (false, true),
                Category::Cluttered => (false, false),
            };
            assert_eq!((color_visible, depth_visible), expected, "{cat:?}");
        }
    }

    #[test]
    fn rejects_bad_settings() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig { n: 2, size: 20, mix: [0.25; 4], seed: 0 };
        assert!(matches!(gen_synthetic(dir.path(), &cfg), Err(DataError::Size(20))));
        let cfg = SynthConfig { size: 16, mix: [0.5; 4], ..cfg };
        assert!(matches!(gen_synthetic(dir.path(), &cfg), Err(DataError::Generator(_))));
    }
}
