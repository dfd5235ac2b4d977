//! Synthetic multi-domain segmentation data: shape scenes rendered once and
//! restyled per domain, so domains share labels and differ only in look.

mod io;

pub use io::{load_benchmark, load_domain, read_image, read_mask, save_benchmark, write_image, write_mask, DomainManifest};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{LabelMap, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    /// Background plus shape classes; at most 8.
    pub num_classes: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub min_size: usize,
    pub max_size: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self { height: 64, width: 64, num_classes: 4, min_shapes: 2, max_shapes: 5, min_size: 10, max_size: 28 }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("scene canvas must be nonempty".into()));
        }
        if !(2..=PALETTE.len() + 1).contains(&self.num_classes) {
            return Err(Error::Config(format!("scene class count must be in 2..={}", PALETTE.len() + 1)));
        }
        if self.min_shapes > self.max_shapes || self.min_size == 0 || self.min_size > self.max_size {
            return Err(Error::Config("scene shape ranges are inverted or empty".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Rectangle,
    Disk,
    Triangle,
}

impl ShapeKind {
    /// Shape drawn for a foreground class; cycles rectangle, disk, triangle.
    pub fn for_class(class: u8) -> Self {
        match (class.max(1) - 1) % 3 {
            0 => Self::Rectangle,
            1 => Self::Disk,
            _ => Self::Triangle,
        }
    }

    fn covers(self, y: usize, x: usize, s: &PlacedShape) -> bool {
        let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
        let (top, left) = (s.top as f64, s.left as f64);
        let (h, w) = (s.height as f64, s.width as f64);
        if py < top || py >= top + h || px < left || px >= left + w {
            return false;
        }
        match self {
            Self::Rectangle => true,
            Self::Disk => {
                let dy = (py - top - h / 2.0) / (h / 2.0);
                let dx = (px - left - w / 2.0) / (w / 2.0);
                dy * dy + dx * dx <= 1.0
            }
            Self::Triangle => {
                let half = (py - top) / h * w / 2.0;
                (px - left - w / 2.0).abs() <= half
            }
        }
    }
}

/// A shape placed on the canvas; may extend past the edges.
#[derive(Clone, Debug, PartialEq)]
pub struct PlacedShape {
    pub class: u8,
    pub kind: ShapeKind,
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
    pub color: [f64; 3],
}

const PALETTE: [[f64; 3]; 7] = [
    [0.85, 0.30, 0.25],
    [0.30, 0.80, 0.35],
    [0.30, 0.35, 0.85],
    [0.85, 0.80, 0.25],
    [0.80, 0.30, 0.80],
    [0.30, 0.80, 0.80],
    [0.90, 0.60, 0.20],
];

/// Paints `shapes` in order over a flat background. Images are RGB and
/// rounded to f32 precision so they survive serialization unchanged.
pub fn render_scene(spec: &SceneSpec, background: [f64; 3], shapes: &[PlacedShape]) -> Result<(Tensor, LabelMap)> {
    spec.validate()?;
    if let Some(bad) = shapes.iter().find(|s| s.class as usize >= spec.num_classes) {
        return Err(Error::Domain(format!("shape class {} outside {} classes", bad.class, spec.num_classes)));
    }
    let (h, w) = (spec.height, spec.width);
    let mut image = Tensor::zeros([1, 3, h, w]);
    let mut mask = LabelMap::filled([1, h, w], 0);
    for y in 0..h {
        for x in 0..w {
            let mut color = background;
            let mut label = 0;
            for s in shapes {
                if s.kind.covers(y, x, s) {
                    color = s.color;
                    label = s.class;
                }
            }
            for (c, v) in color.iter().enumerate() {
                image.set(0, c, y, x, *v);
            }
            mask.data_mut()[y * w + x] = label;
        }
    }
    Ok((quantize(image), mask))
}

/// Random scene: jittered gray background, per-pixel grain, and a random
/// number of class-colored shapes.
pub fn generate_scene(spec: &SceneSpec, rng: &mut impl Rng) -> Result<(Tensor, LabelMap)> {
    spec.validate()?;
    let gray = rng.random_range(0.35..0.55);
    let background = [0, 1, 2].map(|_| gray + rng.random_range(-0.03..0.03));
    let count = rng.random_range(spec.min_shapes..=spec.max_shapes);
    let mut shapes = Vec::with_capacity(count);
    for _ in 0..count {
        let class = rng.random_range(1..spec.num_classes) as u8;
        let height = rng.random_range(spec.min_size..=spec.max_size).min(spec.height);
        let width = rng.random_range(spec.min_size..=spec.max_size).min(spec.width);
        let top = rng.random_range(0..=spec.height - height);
        let left = rng.random_range(0..=spec.width - width);
        let base = PALETTE[class as usize - 1];
        let color = base.map(|v| (v + rng.random_range(-0.08..0.08)).clamp(0.0, 1.0));
        shapes.push(PlacedShape { class, kind: ShapeKind::for_class(class), top, left, height, width, color });
    }
    let (mut image, mask) = render_scene(spec, background, &shapes)?;
    for v in image.data_mut() {
        *v = (*v + rng.random_range(-0.03..0.03)).clamp(0.0, 1.0);
    }
    Ok((quantize(image), mask))
}

/// Parametric appearance of a domain, applied as: per-channel affine,
/// clamp, contrast exponent, box blur, additive Gaussian noise, clamp.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainStyle {
    pub name: String,
    pub gain: Vec<f64>,
    pub offset: Vec<f64>,
    pub contrast: f64,
    pub noise_std: f64,
    /// Box blur radius in pixels; 0 disables smoothing.
    pub blur_radius: usize,
}

impl DomainStyle {
    pub fn identity(channels: usize) -> Self {
        Self {
            name: "identity".into(),
            gain: vec![1.0; channels],
            offset: vec![0.0; channels],
            contrast: 1.0,
            noise_std: 0.0,
            blur_radius: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gain.len() != self.offset.len() {
            return Err(Error::Config(format!("style '{}' has mismatched gain/offset lengths", self.name)));
        }
        if self.gain.iter().any(|g| !(*g > 0.0)) {
            return Err(Error::Config(format!("style '{}' needs positive gains", self.name)));
        }
        if !(self.noise_std >= 0.0) || !(self.contrast > 0.0) {
            return Err(Error::Config(format!("style '{}' needs noise >= 0 and contrast > 0", self.name)));
        }
        Ok(())
    }

    fn same_parameters(&self, other: &DomainStyle) -> bool {
        self.gain == other.gain
            && self.offset == other.offset
            && self.contrast == other.contrast
            && self.noise_std == other.noise_std
            && self.blur_radius == other.blur_radius
    }
}

/// The five default domain looks.
pub fn preset_styles() -> Vec<DomainStyle> {
    let style = |name: &str, gain: [f64; 3], offset: [f64; 3], contrast, noise_std, blur_radius| DomainStyle {
        name: name.into(),
        gain: gain.to_vec(),
        offset: offset.to_vec(),
        contrast,
        noise_std,
        blur_radius,
    };
    vec![
        style("sunny", [1.10, 1.05, 0.90], [0.05, 0.03, 0.00], 0.85, 0.02, 0),
        style("dusk", [0.85, 0.65, 0.75], [0.12, 0.02, 0.15], 1.20, 0.03, 1),
        style("fog", [0.45, 0.45, 0.50], [0.42, 0.42, 0.42], 1.00, 0.02, 1),
        style("night", [0.55, 0.60, 0.90], [0.00, 0.00, 0.05], 1.60, 0.05, 0),
        style("neon", [1.40, 0.90, 1.40], [-0.15, 0.00, -0.10], 0.70, 0.04, 0),
    ]
}

pub fn preset(name: &str) -> Result<DomainStyle> {
    preset_styles()
        .into_iter()
        .find(|s| s.name == name)
        .ok_or_else(|| Error::Config(format!("unknown style preset '{name}'")))
}

pub fn apply_style(image: &Tensor, style: &DomainStyle, rng: &mut impl Rng) -> Result<Tensor> {
    style.validate()?;
    if image.channels() != style.gain.len() {
        return Err(Error::Shape(format!(
            "style '{}' has {} channels, image has {}",
            style.name,
            style.gain.len(),
            image.channels()
        )));
    }
    let mut out = image.clone();
    for n in 0..out.batch() {
        for c in 0..out.channels() {
            let (a, b) = (style.gain[c], style.offset[c]);
            for v in out.plane_mut(n, c) {
                *v = (a * *v + b).clamp(0.0, 1.0).powf(style.contrast);
            }
        }
    }
    if style.blur_radius > 0 {
        out = box_blur(&out, style.blur_radius);
    }
    if style.noise_std > 0.0 {
        let normal = Normal::new(0.0, style.noise_std).map_err(|e| Error::Config(e.to_string()))?;
        for v in out.data_mut() {
            *v += normal.sample(rng);
        }
    }
    for v in out.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(quantize(out))
}

/// Separable box filter with edge clamping.
fn box_blur(image: &Tensor, radius: usize) -> Tensor {
    let [n, c, h, w] = image.shape();
    let r = radius as isize;
    let width = (2 * radius + 1) as f64;
    let mut horizontal = image.clone();
    for ni in 0..n {
        for ci in 0..c {
            let src = image.plane(ni, ci);
            let dst = horizontal.plane_mut(ni, ci);
            for y in 0..h {
                for x in 0..w {
                    let sum: f64 = (-r..=r).map(|d| src[y * w + (x as isize + d).clamp(0, w as isize - 1) as usize]).sum();
                    dst[y * w + x] = sum / width;
                }
            }
        }
    }
    let mut out = horizontal.clone();
    for ni in 0..n {
        for ci in 0..c {
            let src = horizontal.plane(ni, ci);
            let dst = out.plane_mut(ni, ci);
            for y in 0..h {
                for x in 0..w {
                    let sum: f64 = (-r..=r).map(|d| src[(y as isize + d).clamp(0, h as isize - 1) as usize * w + x]).sum();
                    dst[y * w + x] = sum / width;
                }
            }
        }
    }
    out
}

fn quantize(mut t: Tensor) -> Tensor {
    for v in t.data_mut() {
        *v = *v as f32 as f64;
    }
    t
}

/// Mixes a base seed with indices into an independent 64-bit seed (splitmix64).
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut z = base;
    for p in parts.iter().chain([&0x5EED]) {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15 ^ p.wrapping_mul(0xD1B5_4A32_D192_ED03));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// One domain's labeled images.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    pub domain_id: u32,
    pub style_name: String,
    /// Each `[1, 3, H, W]`.
    pub images: Vec<Tensor>,
    /// Each `[1, H, W]`.
    pub masks: Vec<LabelMap>,
}

impl DomainDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Fraction of pixels per class.
    pub fn class_frequencies(&self, num_classes: usize) -> Vec<f64> {
        let mut counts = vec![0u64; num_classes];
        let mut total = 0u64;
        for m in &self.masks {
            for &l in m.data() {
                if (l as usize) < num_classes {
                    counts[l as usize] += 1;
                }
                total += 1;
            }
        }
        counts.iter().map(|c| *c as f64 / total.max(1) as f64).collect()
    }
}

/// Builds one dataset per style. Scene `i` is drawn from the same seed in
/// every domain, so masks match across domains and only pixels differ.
pub fn build_benchmark(
    images_per_domain: usize,
    spec: &SceneSpec,
    styles: &[DomainStyle],
    seed: u64,
) -> Result<Vec<DomainDataset>> {
    spec.validate()?;
    if styles.is_empty() {
        return Err(Error::Config("at least one domain style is required".into()));
    }
    for (i, a) in styles.iter().enumerate() {
        a.validate()?;
        if styles[..i].iter().any(|b| b.same_parameters(a) || b.name == a.name) {
            return Err(Error::Config(format!("duplicate domain style '{}'", a.name)));
        }
    }
    let scenes = (0..images_per_domain)
        .map(|i| generate_scene(spec, &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[i as u64]))))
        .collect::<Result<Vec<_>>>()?;
    styles
        .iter()
        .enumerate()
        .map(|(d, style)| {
            let mut images = Vec::with_capacity(images_per_domain);
            let mut masks = Vec::with_capacity(images_per_domain);
            for (i, (image, mask)) in scenes.iter().enumerate() {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[i as u64, d as u64 + 1]));
                images.push(apply_style(image, style, &mut rng)?);
                masks.push(mask.clone());
            }
            Ok(DomainDataset { domain_id: d as u32, style_name: style.name.clone(), images, masks })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_shapes_means_all_background() {
        let spec = SceneSpec { min_shapes: 0, max_shapes: 0, ..SceneSpec::default() };
        let (image, mask) = generate_scene(&spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(mask.data().iter().all(|l| *l == 0));
        assert!(image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn full_canvas_rectangle_labels_everything() {
        let spec = SceneSpec { height: 8, width: 6, ..SceneSpec::default() };
        let rect = PlacedShape {
            class: 2,
            kind: ShapeKind::Rectangle,
            top: 0,
            left: 0,
            height: 8,
            width: 6,
            color: [0.1, 0.2, 0.3],
        };
        let (image, mask) = render_scene(&spec, [0.5; 3], &[rect]).unwrap();
        assert!(mask.data().iter().all(|l| *l == 2));
        assert!(image.plane(0, 2).iter().all(|v| *v == 0.3f32 as f64));
    }

    #[test]
    fn shapes_cover_their_expected_area() {
        let spec = SceneSpec { height: 40, width: 40, ..SceneSpec::default() };
        let shape = |kind| PlacedShape { class: 1, kind, top: 0, left: 0, height: 40, width: 40, color: [1.0; 3] };
        let area = |kind| {
            let (_, mask) = render_scene(&spec, [0.0; 3], &[shape(kind)]).unwrap();
            mask.data().iter().filter(|l| **l == 1).count() as f64 / 1600.0
        };
        assert!((area(ShapeKind::Disk) - std::f64::consts::FRAC_PI_4).abs() < 0.02);
        assert!((area(ShapeKind::Triangle) - 0.5).abs() < 0.03);
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SceneSpec::default();
        let a = generate_scene(&spec, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = generate_scene(&spec, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn identity_style_leaves_image_alone() {
        let (image, _) = generate_scene(&SceneSpec::default(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let out = apply_style(&image, &DomainStyle::identity(3), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(out, image);
    }

    #[test]
    fn gain_scales_before_clamp() {
        let image = Tensor::full([1, 3, 2, 2], 0.2);
        let style = DomainStyle { gain: vec![2.0, 1.0, 1.0], ..DomainStyle::identity(3) };
        let out = apply_style(&image, &style, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(out.plane(0, 0).iter().all(|v| (*v - 0.4).abs() < 1e-7));
        assert!(out.plane(0, 1).iter().all(|v| (*v - 0.2).abs() < 1e-7));
        let bright = DomainStyle { gain: vec![8.0, 1.0, 1.0], ..DomainStyle::identity(3) };
        let out = apply_style(&image, &bright, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(out.plane(0, 0).iter().all(|v| *v == 1.0));
    }

    #[test]
    fn invalid_styles_are_rejected() {
        let image = Tensor::full([1, 3, 2, 2], 0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let zero_gain = DomainStyle { gain: vec![0.0, 1.0, 1.0], ..DomainStyle::identity(3) };
        assert!(apply_style(&image, &zero_gain, &mut rng).is_err());
        let noisy = DomainStyle { noise_std: -1.0, ..DomainStyle::identity(3) };
        assert!(apply_style(&image, &noisy, &mut rng).is_err());
        assert!(apply_style(&image, &DomainStyle::identity(1), &mut rng).is_err());
    }

    #[test]
    fn blur_preserves_constants_and_smooths_edges() {
        let mut image = Tensor::zeros([1, 1, 1, 5]);
        image.set(0, 0, 0, 2, 3.0);
        let out = box_blur(&image, 1);
        assert_eq!(out.data(), &[0.0, 1.0, 1.0, 1.0, 0.0]);
        let flat = Tensor::full([1, 1, 3, 3], 0.25);
        assert_eq!(box_blur(&flat, 2), flat);
    }

    #[test]
    fn presets_are_distinct_and_valid() {
        let presets = preset_styles();
        assert_eq!(presets.len(), 5);
        for p in &presets {
            p.validate().unwrap();
        }
        assert_eq!(preset("fog").unwrap().name, "fog");
        assert!(preset("snow").is_err());
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(1, &[0]), derive_seed(1, &[1]));
        assert_ne!(derive_seed(1, &[0, 1]), derive_seed(1, &[1, 0]));
        assert_eq!(derive_seed(9, &[3]), derive_seed(9, &[3]));
    }
}
