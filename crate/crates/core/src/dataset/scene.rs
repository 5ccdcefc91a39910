//! Procedural scenes: shapes drawn by a software rasterizer onto smooth (S) or
//! textured (T) backgrounds.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Category, DomainKind, RgbImage};
use crate::error::{Error, Result};
use crate::seed;

/// Area threshold of the "small" evaluation bucket, in pixels.
pub const SMALL_AREA: f64 = 144.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeClass {
    Box,
    Disc,
    Triangle,
    Bar,
    Cross,
    Ring,
    Diamond,
    Wedge,
    Blob,
    Stripe,
}

impl ShapeClass {
    pub const SOURCE: [ShapeClass; 4] = [ShapeClass::Box, ShapeClass::Disc, ShapeClass::Triangle, ShapeClass::Bar];
    pub const TARGET: [ShapeClass; 6] = [
        ShapeClass::Cross,
        ShapeClass::Ring,
        ShapeClass::Diamond,
        ShapeClass::Wedge,
        ShapeClass::Blob,
        ShapeClass::Stripe,
    ];

    pub fn category_id(self) -> u32 {
        match self {
            ShapeClass::Box => 1,
            ShapeClass::Disc => 2,
            ShapeClass::Triangle => 3,
            ShapeClass::Bar => 4,
            ShapeClass::Cross => 5,
            ShapeClass::Ring => 6,
            ShapeClass::Diamond => 7,
            ShapeClass::Wedge => 8,
            ShapeClass::Blob => 9,
            ShapeClass::Stripe => 10,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Box => "box",
            ShapeClass::Disc => "disc",
            ShapeClass::Triangle => "triangle",
            ShapeClass::Bar => "bar",
            ShapeClass::Cross => "cross",
            ShapeClass::Ring => "ring",
            ShapeClass::Diamond => "diamond",
            ShapeClass::Wedge => "wedge",
            ShapeClass::Blob => "blob",
            ShapeClass::Stripe => "stripe",
        }
    }
}

pub fn categories(domain: DomainKind) -> Vec<Category> {
    let classes: &[ShapeClass] = match domain {
        DomainKind::S => &ShapeClass::SOURCE,
        DomainKind::T => &ShapeClass::TARGET,
    };
    classes
        .iter()
        .map(|c| Category {
            id: c.category_id(),
            name: c.name().to_string(),
            domain: domain.name().to_string(),
        })
        .collect()
}

/// Generation knobs for one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub domain: DomainKind,
    pub image_size: usize,
    /// Inclusive object-count range.
    pub object_count_range: (usize, usize),
    pub occlusion_probability: f64,
    pub background_texture_level: f64,
}

impl SceneSpec {
    pub fn for_domain(domain: DomainKind) -> Self {
        match domain {
            DomainKind::S => SceneSpec {
                domain,
                image_size: 128,
                object_count_range: (1, 4),
                occlusion_probability: 0.0,
                background_texture_level: 0.0,
            },
            DomainKind::T => SceneSpec {
                domain,
                image_size: 128,
                object_count_range: (3, 8),
                occlusion_probability: 0.3,
                background_texture_level: 0.6,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || !self.image_size.is_multiple_of(32) {
            return Err(Error::InvalidConfig(format!("image size {} is not a positive multiple of 32", self.image_size)));
        }
        let (lo, hi) = self.object_count_range;
        if lo > hi {
            return Err(Error::InvalidConfig(format!("empty object count range {lo}..={hi}")));
        }
        if !(0.0..=1.0).contains(&self.occlusion_probability) || !(0.0..=1.0).contains(&self.background_texture_level) {
            return Err(Error::InvalidConfig("probabilities must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// One placed shape. Membership is tested at pixel centers.
#[derive(Debug, Clone, PartialEq)]
pub struct Shape {
    pub class: ShapeClass,
    pub cx: f64,
    pub cy: f64,
    /// Half extent.
    pub r: f64,
    pub aspect: f64,
    pub vertical: bool,
    pub lobes: [(f64, f64, f64); 3],
    pub color: [u8; 3],
}

impl Shape {
    pub fn contains(&self, px: f64, py: f64) -> bool {
        let (u, v, r) = (px - self.cx, py - self.cy, self.r);
        let (u, v) = if self.vertical { (v, u) } else { (u, v) };
        match self.class {
            ShapeClass::Box => u.abs() <= r * self.aspect && v.abs() <= r / self.aspect,
            ShapeClass::Disc => u * u + v * v <= r * r,
            ShapeClass::Triangle => v.abs() <= r && u.abs() <= 0.5 * (v + r),
            ShapeClass::Bar => u.abs() <= r && v.abs() <= r / 3.0,
            ShapeClass::Cross => {
                (u.abs() <= r / 3.0 && v.abs() <= r) || (v.abs() <= r / 3.0 && u.abs() <= r)
            }
            ShapeClass::Ring => {
                let d2 = u * u + v * v;
                d2 <= r * r && d2 >= 0.3 * r * r
            }
            ShapeClass::Diamond => u.abs() + v.abs() <= r,
            ShapeClass::Wedge => u >= -r && v <= r && u <= v,
            ShapeClass::Blob => self
                .lobes
                .iter()
                .any(|(ox, oy, lr)| (u - ox * r).powi(2) + (v - oy * r).powi(2) <= (lr * r).powi(2)),
            ShapeClass::Stripe => {
                u.abs() <= r && v.abs() <= 0.7 * r && (((v + r) / 2.0).floor() as i64) % 2 == 0
            }
        }
    }

    /// Pixel rows/columns that may contain the shape.
    fn scan_range(&self, size: usize) -> (usize, usize, usize, usize) {
        let reach = self.r * 1.5 + 2.0;
        let lo = |c: f64| (c - reach).floor().max(0.0) as usize;
        let hi = |c: f64| ((c + reach).ceil().max(0.0) as usize).min(size);
        (lo(self.cx), hi(self.cx), lo(self.cy), hi(self.cy))
    }

    /// Covered pixels inside a `size x size` image, row by row.
    pub fn rasterize(&self, size: usize) -> Vec<(usize, usize)> {
        let (x0, x1, y0, y1) = self.scan_range(size);
        let mut px = Vec::new();
        for y in y0..y1 {
            for x in x0..x1 {
                if self.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    px.push((x, y));
                }
            }
        }
        px
    }

    /// Tight `(x, y, w, h)` of the covered pixels, or `None` if nothing is covered.
    pub fn tight_bbox(&self, size: usize) -> Option<[f64; 4]> {
        let px = self.rasterize(size);
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for &(x, y) in &px {
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
        if px.is_empty() {
            None
        } else {
            Some([x0 as f64, y0 as f64, (x1 - x0 + 1) as f64, (y1 - y0 + 1) as f64])
        }
    }
}

/// A rendered object and its annotation box.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub shape: Shape,
    pub category_id: u32,
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: RgbImage,
    pub objects: Vec<SceneObject>,
}

fn overlaps(a: &[f64; 4], b: &[f64; 4], margin: f64) -> bool {
    a[0] - margin < b[0] + b[2] && b[0] - margin < a[0] + a[2] && a[1] - margin < b[1] + b[3] && b[1] - margin < a[1] + a[3]
}

fn random_color(rng: &mut impl Rng, dark_background: bool) -> [u8; 3] {
    // bright saturated colors; one channel pushed low for hue variety
    let mut c = [rng.gen_range(150..=255u8), rng.gen_range(150..=255u8), rng.gen_range(150..=255u8)];
    let low = rng.gen_range(0..3);
    c[low] = rng.gen_range(if dark_background { 40..=120u8 } else { 0..=90u8 });
    c
}

fn background(spec: &SceneSpec, rng: &mut impl Rng) -> RgbImage {
    let n = spec.image_size;
    let top: [f64; 3] = [rng.gen_range(10.0..70.0), rng.gen_range(10.0..70.0), rng.gen_range(10.0..70.0)];
    let bottom: [f64; 3] = [rng.gen_range(20.0..90.0), rng.gen_range(20.0..90.0), rng.gen_range(20.0..90.0)];
    let tex = spec.background_texture_level;
    // coarse value-noise lattice for texture
    let cells = 8;
    let lattice: Vec<f64> = (0..(cells + 1) * (cells + 1)).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut data = vec![0u8; n * n * 3];
    for y in 0..n {
        let t = y as f64 / (n - 1).max(1) as f64;
        for x in 0..n {
            let mut noise = 0.0;
            if tex > 0.0 {
                let fx = x as f64 / n as f64 * cells as f64;
                let fy = y as f64 / n as f64 * cells as f64;
                let (ix, iy) = (fx.floor() as usize, fy.floor() as usize);
                let (tx, ty) = (fx - ix as f64, fy - iy as f64);
                let at = |i: usize, j: usize| lattice[j * (cells + 1) + i];
                let smooth = at(ix, iy) * (1.0 - tx) * (1.0 - ty)
                    + at(ix + 1, iy) * tx * (1.0 - ty)
                    + at(ix, iy + 1) * (1.0 - tx) * ty
                    + at(ix + 1, iy + 1) * tx * ty;
                noise = tex * (45.0 * smooth + rng.gen_range(-25.0..25.0));
            }
            for c in 0..3 {
                let v = top[c] * (1.0 - t) + bottom[c] * t + noise;
                data[(y * n + x) * 3 + c] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    RgbImage::new(n as u32, n as u32, data).expect("buffer sized for image")
}

fn random_shape(spec: &SceneSpec, rng: &mut impl Rng, existing: &[SceneObject]) -> Shape {
    let n = spec.image_size as f64;
    let scale = n / 128.0;
    let classes: &[ShapeClass] = match spec.domain {
        DomainKind::S => &ShapeClass::SOURCE,
        DomainKind::T => &ShapeClass::TARGET,
    };
    let class = classes[rng.gen_range(0..classes.len())];
    let (r, cx, cy) = match spec.domain {
        DomainKind::S => {
            let r = rng.gen_range(8.0..20.0) * scale;
            (r, rng.gen_range(r + 2.0..n - r - 2.0), rng.gen_range(r + 2.0..n - r - 2.0))
        }
        DomainKind::T => {
            let r = if rng.gen_bool(0.35) {
                rng.gen_range(2.5..5.5) * scale
            } else {
                rng.gen_range(6.0..18.0) * scale
            };
            let near = !existing.is_empty() && rng.gen_bool(spec.occlusion_probability);
            if near {
                let o = &existing[rng.gen_range(0..existing.len())].bbox;
                let (ox, oy) = (o[0] + 0.5 * o[2], o[1] + 0.5 * o[3]);
                let spread = 0.5 * o[2].max(o[3]) + r;
                (r, ox + rng.gen_range(-spread..spread), oy + rng.gen_range(-spread..spread))
            } else {
                // allow truncation at the borders
                (r, rng.gen_range(-0.4 * r..n + 0.4 * r), rng.gen_range(-0.4 * r..n + 0.4 * r))
            }
        }
    };
    let mut lobes = [(0.0, 0.0, 0.0); 3];
    for l in &mut lobes {
        *l = (rng.gen_range(-0.45..0.45), rng.gen_range(-0.45..0.45), rng.gen_range(0.4..0.6));
    }
    Shape {
        class,
        cx,
        cy,
        r,
        aspect: rng.gen_range(0.8..1.25),
        vertical: rng.gen_bool(0.5),
        lobes,
        color: random_color(rng, spec.domain == DomainKind::T),
    }
}

/// Renders one scene; fully determined by `(spec, seed)`.
pub fn generate_scene(spec: &SceneSpec, seed_value: u64) -> Result<Scene> {
    spec.validate()?;
    let mut rng = seed::rng(seed_value, "scene", 0);
    let mut image = background(spec, &mut rng);
    let (lo, hi) = spec.object_count_range;
    let count = rng.gen_range(lo..=hi);
    let size = spec.image_size;
    let mut objects: Vec<SceneObject> = Vec::with_capacity(count);
    let mut attempts = 0;
    while objects.len() < count && attempts < 400 {
        attempts += 1;
        let shape = random_shape(spec, &mut rng, &objects);
        let Some(bbox) = shape.tight_bbox(size) else { continue };
        if bbox[2] < 2.0 || bbox[3] < 2.0 {
            continue;
        }
        if spec.domain == DomainKind::S && objects.iter().any(|o| overlaps(&o.bbox, &bbox, 4.0)) {
            continue;
        }
        if spec.domain == DomainKind::T {
            // an overlapping placement must not swallow an earlier object
            let covered = objects.iter().any(|o| {
                bbox[0] <= o.bbox[0] && bbox[1] <= o.bbox[1] && bbox[0] + bbox[2] >= o.bbox[0] + o.bbox[2] && bbox[1] + bbox[3] >= o.bbox[1] + o.bbox[3]
            });
            if covered {
                continue;
            }
        }
        for (x, y) in shape.rasterize(size) {
            image.put(x, y, shape.color);
        }
        objects.push(SceneObject {
            category_id: shape.class.category_id(),
            bbox,
            shape,
        });
    }
    Ok(Scene { image, objects })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let spec = SceneSpec::for_domain(DomainKind::T);
        assert_eq!(generate_scene(&spec, 42).unwrap(), generate_scene(&spec, 42).unwrap());
        assert_ne!(generate_scene(&spec, 42).unwrap().image, generate_scene(&spec, 43).unwrap().image);
    }

    #[test]
    fn count_forcing() {
        for domain in [DomainKind::S, DomainKind::T] {
            let spec = SceneSpec { object_count_range: (1, 1), ..SceneSpec::for_domain(domain) };
            for seed in 0..20 {
                assert_eq!(generate_scene(&spec, seed).unwrap().objects.len(), 1);
            }
        }
    }

    #[test]
    fn bbox_is_tight_around_mask() {
        for domain in [DomainKind::S, DomainKind::T] {
            let spec = SceneSpec::for_domain(domain);
            for seed in 0..30 {
                let scene = generate_scene(&spec, seed).unwrap();
                for o in &scene.objects {
                    let px = o.shape.rasterize(spec.image_size);
                    let x0 = px.iter().map(|p| p.0).min().unwrap() as f64;
                    let x1 = px.iter().map(|p| p.0).max().unwrap() as f64 + 1.0;
                    let y0 = px.iter().map(|p| p.1).min().unwrap() as f64;
                    let y1 = px.iter().map(|p| p.1).max().unwrap() as f64 + 1.0;
                    let b = o.bbox;
                    assert!((b[0] - x0).abs() <= 1.0 && (b[1] - y0).abs() <= 1.0);
                    assert!((b[0] + b[2] - x1).abs() <= 1.0 && (b[1] + b[3] - y1).abs() <= 1.0);
                    assert!(b[0] >= 0.0 && b[1] >= 0.0 && b[0] + b[2] <= 128.0 && b[1] + b[3] <= 128.0);
                }
            }
        }
    }

    #[test]
    fn source_objects_are_separated() {
        let spec = SceneSpec::for_domain(DomainKind::S);
        for seed in 0..50 {
            let s = generate_scene(&spec, seed).unwrap();
            for (i, a) in s.objects.iter().enumerate() {
                for b in &s.objects[i + 1..] {
                    assert!(!overlaps(&a.bbox, &b.bbox, 0.0));
                }
                assert!(ShapeClass::SOURCE.iter().any(|c| c.category_id() == a.category_id));
            }
        }
    }

    #[test]
    fn target_is_denser_with_small_instances() {
        let (mut s_total, mut t_total, mut t_small) = (0usize, 0usize, 0usize);
        for seed in 0..1000 {
            s_total += generate_scene(&SceneSpec::for_domain(DomainKind::S), seed).unwrap().objects.len();
            let t = generate_scene(&SceneSpec::for_domain(DomainKind::T), seed).unwrap();
            t_total += t.objects.len();
            t_small += t.objects.iter().filter(|o| o.bbox[2] * o.bbox[3] < SMALL_AREA).count();
        }
        assert!(t_total as f64 / 1000.0 > s_total as f64 / 1000.0);
        assert!(t_small > 0);
    }

    #[test]
    fn invalid_spec() {
        let spec = SceneSpec { object_count_range: (3, 1), ..SceneSpec::for_domain(DomainKind::S) };
        assert!(generate_scene(&spec, 0).is_err());
        let spec = SceneSpec { image_size: 100, ..SceneSpec::for_domain(DomainKind::S) };
        assert!(generate_scene(&spec, 0).is_err());
    }
}
