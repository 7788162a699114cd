//! Procedural source/target segmentation scenes with a controllable appearance shift.
//!
//! Class 1 is the background. Every other class is a fixed (shape, texture, colour)
//! archetype, so class identity is recoverable from local appearance. The shift only
//! ever touches pixel values; label maps come from scene geometry alone.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::seed;

/// Label value reserved for "no supervision" in every label map.
pub const IGNORE: u8 = 0;
pub const CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
    Ring,
    Cross,
    Diamond,
    Bar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Texture {
    Solid,
    HorizontalStripes,
    VerticalStripes,
    Checker,
    Dots,
    Diagonal,
    Grid,
}

impl Texture {
    /// The texture a class shows in the target domain when `texture_swap` is on.
    fn swapped(self) -> Self {
        match self {
            Texture::HorizontalStripes => Texture::VerticalStripes,
            Texture::VerticalStripes => Texture::HorizontalStripes,
            Texture::Checker => Texture::Grid,
            Texture::Grid => Texture::Checker,
            Texture::Dots => Texture::Solid,
            Texture::Solid => Texture::Dots,
            Texture::Diagonal => Texture::Diagonal,
        }
    }

    fn value(self, x: i64, y: i64) -> f32 {
        let on = match self {
            Texture::Solid => true,
            Texture::HorizontalStripes => (y.div_euclid(2)) % 2 == 0,
            Texture::VerticalStripes => (x.div_euclid(2)) % 2 == 0,
            Texture::Checker => (x.div_euclid(2) + y.div_euclid(2)) % 2 == 0,
            Texture::Dots => x.rem_euclid(4) < 2 && y.rem_euclid(4) < 2,
            Texture::Diagonal => ((x + y).div_euclid(2)) % 2 == 0,
            Texture::Grid => x.rem_euclid(3) == 0 || y.rem_euclid(3) == 0,
        };
        if on {
            1.0
        } else {
            0.0
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Archetype {
    pub shape: ShapeKind,
    pub texture: Texture,
    pub color: [f32; 3],
}

/// Foreground archetypes; class `k + 2` uses `ARCHETYPES[k]`.
pub const ARCHETYPES: [Archetype; 7] = [
    Archetype { shape: ShapeKind::Disk, texture: Texture::Solid, color: [0.85, 0.25, 0.2] },
    Archetype { shape: ShapeKind::Square, texture: Texture::HorizontalStripes, color: [0.2, 0.35, 0.85] },
    Archetype { shape: ShapeKind::Triangle, texture: Texture::Checker, color: [0.9, 0.8, 0.2] },
    Archetype { shape: ShapeKind::Ring, texture: Texture::Solid, color: [0.25, 0.8, 0.35] },
    Archetype { shape: ShapeKind::Cross, texture: Texture::Dots, color: [0.8, 0.3, 0.8] },
    Archetype { shape: ShapeKind::Diamond, texture: Texture::Diagonal, color: [0.2, 0.8, 0.85] },
    Archetype { shape: ShapeKind::Bar, texture: Texture::Grid, color: [0.95, 0.55, 0.15] },
];

const BACKGROUND_COLOR: [f32; 3] = [0.45, 0.45, 0.4];

/// Largest supported class count: background plus one class per archetype.
pub const MAX_CLASSES: usize = ARCHETYPES.len() + 1;

/// Appearance-only transformation applied to target renderings.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct ShiftSpec {
    /// Per-channel multiplicative factor.
    pub color_scale: [f32; 3],
    /// Per-channel additive offset, applied after scaling.
    pub color_offset: [f32; 3],
    pub noise_sigma: f32,
    pub texture_swap: bool,
    /// Box blur radius in pixels; zero disables blurring.
    pub blur_radius: usize,
}

impl ShiftSpec {
    pub fn none() -> Self {
        Self {
            color_scale: [1.0; 3],
            color_offset: [0.0; 3],
            noise_sigma: 0.0,
            texture_swap: false,
            blur_radius: 0,
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::none()
    }
}

impl Default for ShiftSpec {
    /// The benchmark shift: a colour cast, pixel noise and a mild blur.
    fn default() -> Self {
        Self {
            color_scale: [0.4, 0.8, 1.6],
            color_offset: [0.3, 0.1, -0.1],
            noise_sigma: 0.1,
            texture_swap: false,
            blur_radius: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct SceneSpec {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    /// Inclusive range of foreground shapes per image.
    pub shapes_per_image: (usize, usize),
    pub seed: u64,
    pub shift: ShiftSpec,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            num_classes: 5,
            height: 64,
            width: 64,
            shapes_per_image: (6, 9),
            seed: 42,
            shift: ShiftSpec::default(),
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > MAX_CLASSES {
            return Err(Error::Config(format!(
                "num_classes must lie in 2..={MAX_CLASSES}, got {}",
                self.num_classes
            )));
        }
        if self.height < 16 || self.width < 16 {
            return Err(Error::Config(format!(
                "image dimensions must be at least 16x16, got {}x{}",
                self.height, self.width
            )));
        }
        let (lo, hi) = self.shapes_per_image;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!("invalid shapes_per_image range ({lo}, {hi})")));
        }
        let s = &self.shift;
        let finite = s.color_scale.iter().chain(&s.color_offset).all(|v| v.is_finite());
        if !finite || !(s.noise_sigma >= 0.0) || !s.noise_sigma.is_finite() {
            return Err(Error::Config("shift parameters must be finite and noise_sigma >= 0".into()));
        }
        Ok(())
    }
}

/// `N × 3 × H × W` images with values on the 8-bit grid in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    pub n: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl ImageBatch {
    pub fn image_len(&self) -> usize {
        CHANNELS * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let len = self.image_len();
        &self.data[i * len..(i + 1) * len]
    }
}

/// `N × H × W` class maps; `IGNORE` marks unsupervised pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMaps {
    pub n: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMaps {
    pub fn map_len(&self) -> usize {
        self.height * self.width
    }

    pub fn map(&self, i: usize) -> &[u8] {
        let len = self.map_len();
        &self.data[i * len..(i + 1) * len]
    }

    pub fn select(&self, indices: &[usize]) -> LabelMaps {
        let mut data = Vec::with_capacity(indices.len() * self.map_len());
        for &i in indices {
            data.extend_from_slice(self.map(i));
        }
        LabelMaps { n: indices.len(), height: self.height, width: self.width, data }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch {
    pub images: ImageBatch,
    pub labels: LabelMaps,
    pub num_classes: usize,
}

impl LabeledBatch {
    pub fn new(images: ImageBatch, labels: LabelMaps, num_classes: usize) -> Result<Self> {
        if images.n != labels.n || images.height != labels.height || images.width != labels.width {
            return Err(Error::Shape(format!(
                "images {}x{}x{} vs labels {}x{}x{}",
                images.n, images.height, images.width, labels.n, labels.height, labels.width
            )));
        }
        if let Some(&bad) = labels.data.iter().find(|&&l| l as usize > num_classes) {
            return Err(Error::Shape(format!("label value {bad} exceeds class count {num_classes}")));
        }
        Ok(Self { images, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.images.n
    }

    pub fn is_empty(&self) -> bool {
        self.images.n == 0
    }
}

/// Target-domain images. Ground truth, when present, is only reachable through
/// [`UnlabeledBatch::evaluation_labels`]; training code only ever sees [`UnlabeledBatch::images`].
#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledBatch {
    images: ImageBatch,
    hidden_labels: Option<LabelMaps>,
    num_classes: usize,
}

impl UnlabeledBatch {
    pub fn new(images: ImageBatch, hidden_labels: Option<LabelMaps>, num_classes: usize) -> Self {
        Self { images, hidden_labels, num_classes }
    }

    pub fn images(&self) -> &ImageBatch {
        &self.images
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.images.n
    }

    pub fn is_empty(&self) -> bool {
        self.images.n == 0
    }

    /// Ground truth for scoring only.
    pub fn evaluation_labels(&self) -> Option<&LabelMaps> {
        self.hidden_labels.as_ref()
    }

    /// Reattaches ground truth for evaluation, e.g. after loading from disk.
    pub fn into_labeled(self) -> Option<LabeledBatch> {
        let labels = self.hidden_labels?;
        Some(LabeledBatch { images: self.images, labels, num_classes: self.num_classes })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    fn tag(self) -> u64 {
        match self {
            Domain::Source => 0x5352_4300,
            Domain::Target => 0x5447_5400,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Placement {
    pub class: u8,
    pub cx: f32,
    pub cy: f32,
    pub size: f32,
    pub phase: (i64, i64),
}

/// Scene geometry and appearance nuisances, independent of any domain shift.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub placements: Vec<Placement>,
    pub brightness: f32,
    pub tint: [f32; 3],
    pub background_slope: (f32, f32),
    pub noise_seed: u64,
}

fn inside(shape: ShapeKind, dx: f32, dy: f32, s: f32) -> bool {
    match shape {
        ShapeKind::Disk => dx * dx + dy * dy <= s * s,
        ShapeKind::Square => dx.abs() <= 0.8 * s && dy.abs() <= 0.8 * s,
        ShapeKind::Triangle => dy >= -s && dy <= 0.8 * s && dx.abs() <= (dy + s) * 0.6,
        ShapeKind::Ring => {
            let r2 = dx * dx + dy * dy;
            r2 <= s * s && r2 >= 0.3 * s * s
        }
        ShapeKind::Cross => {
            (dx.abs() <= 0.35 * s && dy.abs() <= s) || (dy.abs() <= 0.35 * s && dx.abs() <= s)
        }
        ShapeKind::Diamond => dx.abs() + dy.abs() <= 1.1 * s,
        ShapeKind::Bar => dx.abs() <= 1.3 * s && dy.abs() <= 0.4 * s,
    }
}

/// Label map of a scene, computed from geometry only. Later placements occlude earlier ones.
pub fn scene_labels(scene: &Scene, height: usize, width: usize) -> Vec<u8> {
    let mut labels = vec![1u8; height * width];
    for p in &scene.placements {
        let shape = ARCHETYPES[(p.class - 2) as usize].shape;
        for y in 0..height {
            for x in 0..width {
                let dx = x as f32 + 0.5 - p.cx;
                let dy = y as f32 + 0.5 - p.cy;
                if inside(shape, dx, dy, p.size) {
                    labels[y * width + x] = p.class;
                }
            }
        }
    }
    labels
}

/// Draws the scene for image `index` of a domain's stream.
pub fn sample_scene(spec: &SceneSpec, domain: Domain, index: usize) -> Scene {
    let mut rng = seed::stream(&[spec.seed, domain.tag(), index as u64]);
    let (lo, hi) = spec.shapes_per_image;
    let foreground = spec.num_classes - 1;
    let min_side = spec.height.min(spec.width) as f32;
    let min_visible = ((min_side * min_side) / 200.0).max(4.0) as usize;

    let mut scene = Scene {
        placements: Vec::new(),
        brightness: 1.0,
        tint: [0.0; 3],
        background_slope: (0.0, 0.0),
        noise_seed: 0,
    };
    for _attempt in 0..100 {
        let count = rng.random_range(lo..=hi);
        let mut placements = Vec::with_capacity(count);
        for k in 0..count {
            // The first shape cycles through the classes so any run of
            // `num_classes - 1` consecutive images covers every class.
            let class = if k == 0 {
                2 + (index % foreground) as u8
            } else {
                2 + rng.random_range(0..foreground) as u8
            };
            let size = min_side * rng.random_range(0.13f32..0.24);
            let margin = size * 0.6;
            placements.push(Placement {
                class,
                cx: rng.random_range(margin..(spec.width as f32 - margin)),
                cy: rng.random_range(margin..(spec.height as f32 - margin)),
                size,
                phase: (rng.random_range(0..4), rng.random_range(0..4)),
            });
        }
        scene.placements = placements;
        let labels = scene_labels(&scene, spec.height, spec.width);
        let visible = |class: u8| labels.iter().filter(|&&l| l == class).count();
        let all_visible = scene.placements.iter().all(|p| visible(p.class) >= min_visible);
        if all_visible && visible(1) > 0 {
            break;
        }
    }
    scene.brightness = rng.random_range(0.9f32..1.1);
    for t in &mut scene.tint {
        *t = rng.random_range(-0.04f32..0.04);
    }
    scene.background_slope = (rng.random_range(-0.15f32..0.15), rng.random_range(-0.15f32..0.15));
    scene.noise_seed = rng.random();
    scene
}

fn box_blur(img: &mut [f32], height: usize, width: usize, radius: usize) {
    if radius == 0 {
        return;
    }
    let r = radius as i64;
    let mut tmp = vec![0f32; height * width];
    for plane in img.chunks_mut(height * width) {
        for y in 0..height {
            for x in 0..width {
                let mut acc = 0.0;
                for d in -r..=r {
                    let xx = (x as i64 + d).clamp(0, width as i64 - 1) as usize;
                    acc += plane[y * width + xx];
                }
                tmp[y * width + x] = acc / (2 * r + 1) as f32;
            }
        }
        for y in 0..height {
            for x in 0..width {
                let mut acc = 0.0;
                for d in -r..=r {
                    let yy = (y as i64 + d).clamp(0, height as i64 - 1) as usize;
                    acc += tmp[yy * width + x];
                }
                plane[y * width + x] = acc / (2 * r + 1) as f32;
            }
        }
    }
}

#[inline]
fn quantize(v: f32) -> f32 {
    libm::roundf(v.clamp(0.0, 1.0) * 255.0) / 255.0
}

/// Renders a scene under a shift. Returns the `3 × H × W` image and its label map.
pub fn render(scene: &Scene, height: usize, width: usize, shift: &ShiftSpec) -> (Vec<f32>, Vec<u8>) {
    let labels = scene_labels(scene, height, width);
    let plane = height * width;
    let mut img = vec![0f32; CHANNELS * plane];

    // Per-pixel texture lookup needs the topmost placement, not just its class.
    let mut owner: Vec<Option<usize>> = vec![None; plane];
    for (k, p) in scene.placements.iter().enumerate() {
        let shape = ARCHETYPES[(p.class - 2) as usize].shape;
        for y in 0..height {
            for x in 0..width {
                if inside(shape, x as f32 + 0.5 - p.cx, y as f32 + 0.5 - p.cy, p.size) {
                    owner[y * width + x] = Some(k);
                }
            }
        }
    }

    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            let rgb = match owner[i] {
                None => {
                    let u = x as f32 / width as f32 - 0.5;
                    let v = y as f32 / height as f32 - 0.5;
                    let shade = 1.0 + scene.background_slope.0 * u + scene.background_slope.1 * v;
                    [
                        BACKGROUND_COLOR[0] * shade,
                        BACKGROUND_COLOR[1] * shade,
                        BACKGROUND_COLOR[2] * shade,
                    ]
                }
                Some(k) => {
                    let p = &scene.placements[k];
                    let arch = ARCHETYPES[(p.class - 2) as usize];
                    let texture = if shift.texture_swap { arch.texture.swapped() } else { arch.texture };
                    let t = texture.value(x as i64 + p.phase.0, y as i64 + p.phase.1);
                    let m = 0.6 + 0.4 * t;
                    [arch.color[0] * m, arch.color[1] * m, arch.color[2] * m]
                }
            };
            for ch in 0..CHANNELS {
                let v = (rgb[ch] + scene.tint[ch]) * scene.brightness;
                img[ch * plane + i] = v * shift.color_scale[ch] + shift.color_offset[ch];
            }
        }
    }

    box_blur(&mut img, height, width, shift.blur_radius);

    if shift.noise_sigma > 0.0 {
        let mut rng = seed::stream(&[scene.noise_seed, 0x4e4f_4953]);
        for v in img.iter_mut() {
            let z: f32 = StandardNormal.sample(&mut rng);
            *v += shift.noise_sigma * z;
        }
    }
    for v in img.iter_mut() {
        *v = quantize(*v);
    }
    (img, labels)
}

/// Renders images `start..start + n` of a domain's stream. Source images are
/// rendered without shift, target images under `spec.shift`.
pub fn generate_split(spec: &SceneSpec, domain: Domain, start: usize, n: usize) -> Result<LabeledBatch> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Config("split size must be at least 1".into()));
    }
    let identity = ShiftSpec::none();
    let shift = match domain {
        Domain::Source => &identity,
        Domain::Target => &spec.shift,
    };
    let mut images = Vec::with_capacity(n * CHANNELS * spec.height * spec.width);
    let mut labels = Vec::with_capacity(n * spec.height * spec.width);
    for i in start..start + n {
        let scene = sample_scene(spec, domain, i);
        let (img, lab) = render(&scene, spec.height, spec.width, shift);
        images.extend_from_slice(&img);
        labels.extend_from_slice(&lab);
    }
    Ok(LabeledBatch {
        images: ImageBatch { n, height: spec.height, width: spec.width, data: images },
        labels: LabelMaps { n, height: spec.height, width: spec.width, data: labels },
        num_classes: spec.num_classes,
    })
}

/// Labelled source split and unlabelled target split drawn from the same scene distribution.
pub fn generate_pair(spec: &SceneSpec, n_source: usize, n_target: usize) -> Result<(LabeledBatch, UnlabeledBatch)> {
    if n_source == 0 || n_target == 0 {
        return Err(Error::Config("n_source and n_target must be at least 1".into()));
    }
    let source = generate_split(spec, Domain::Source, 0, n_source)?;
    let target = generate_split(spec, Domain::Target, 0, n_target)?;
    let unlabeled = UnlabeledBatch::new(target.images, Some(target.labels), spec.num_classes);
    Ok((source, unlabeled))
}

/// Per-class pixel counts; entry `k` counts label `k + 1`. Ignored pixels are not counted.
pub fn class_pixel_histogram(labels: &LabelMaps, num_classes: usize) -> Vec<u64> {
    let mut counts = vec![0u64; num_classes];
    for &l in &labels.data {
        if l != IGNORE && (l as usize) <= num_classes {
            counts[l as usize - 1] += 1;
        }
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_invalid_specs() {
        let mut spec = SceneSpec { num_classes: MAX_CLASSES + 1, ..SceneSpec::default() };
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
        spec.num_classes = 1;
        assert!(spec.validate().is_err());
        spec = SceneSpec { height: 8, ..SceneSpec::default() };
        assert!(spec.validate().is_err());
        spec = SceneSpec { shapes_per_image: (0, 2), ..SceneSpec::default() };
        assert!(spec.validate().is_err());
        assert!(generate_pair(&SceneSpec::default(), 0, 1).is_err());
    }

    #[test]
    fn histogram_hand_cases() {
        let uniform = LabelMaps { n: 1, height: 4, width: 4, data: vec![1; 16] };
        assert_eq!(class_pixel_histogram(&uniform, 3), vec![16, 0, 0]);
        let small = LabelMaps { n: 1, height: 2, width: 2, data: vec![1, 2, 2, 2] };
        assert_eq!(class_pixel_histogram(&small, 2), vec![1, 3]);
    }

    #[test]
    fn blur_preserves_constant_images() {
        let mut img = vec![0.25f32; 3 * 5 * 7];
        box_blur(&mut img, 5, 7, 2);
        assert!(img.iter().all(|&v| (v - 0.25).abs() < 1e-6));
    }

    #[test]
    fn every_archetype_has_a_distinct_look() {
        for (i, a) in ARCHETYPES.iter().enumerate() {
            for b in &ARCHETYPES[i + 1..] {
                assert!(a.shape != b.shape || a.texture != b.texture || a.color != b.color);
            }
        }
    }
}
