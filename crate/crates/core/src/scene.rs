//! Procedural primitive scenes with analytic density, colour and depth.
//!
//! Each primitive has a signed distance `d` and density
//! `sigma0 * clamp(0.5 - d / RAMP, 0, 1)`; the scene is the max-density
//! union. Colour is taken from the densest primitive, or from the nearest
//! primitive within `COLOR_BAND` of empty space; farther away it is black.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::{ray_for_pixel, CameraPose, Intrinsics, Ray, Vec3};
use crate::nn::seeded;
use crate::raster::Image;
use crate::renderer::{render_image_field, Field, RenderConfig, Rendered, DENSITY_SCALE};
use crate::volume::FeatureVolume;

pub const RAMP: f64 = 0.08;
pub const COLOR_BAND: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Sphere { radius: f64 },
    Box { half_extents: [f64; 3] },
    /// Axis along `y`.
    Cylinder { radius: f64, half_height: f64 },
    /// Lies in the `xz` plane.
    Torus { major: f64, minor: f64 },
}

impl Shape {
    pub fn kind(&self) -> &'static str {
        match self {
            Shape::Sphere { .. } => "sphere",
            Shape::Box { .. } => "box",
            Shape::Cylinder { .. } => "cylinder",
            Shape::Torus { .. } => "torus",
        }
    }

    /// Caption word: equal-sided boxes are cubes.
    pub fn noun(&self) -> &'static str {
        match self {
            Shape::Box { half_extents: [a, b, c] } if a == b && b == c => "cube",
            s => s.kind(),
        }
    }

    /// Half extents of the axis-aligned bounding box around the centre.
    pub fn half_bounds(&self) -> [f64; 3] {
        match *self {
            Shape::Sphere { radius } => [radius; 3],
            Shape::Box { half_extents } => half_extents,
            Shape::Cylinder { radius, half_height } => [radius, half_height, radius],
            Shape::Torus { major, minor } => [major + minor, minor, major + minor],
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Shape::Sphere { radius } => radius > 0.0,
            Shape::Box { half_extents } => half_extents.iter().all(|&h| h > 0.0),
            Shape::Cylinder { radius, half_height } => radius > 0.0 && half_height > 0.0,
            Shape::Torus { major, minor } => minor > 0.0 && major > minor,
        };
        if ok {
            Ok(())
        } else {
            Err(invalid("primitive", format!("bad size parameters {self:?}")))
        }
    }

    /// Signed distance in the primitive's local frame.
    pub fn sdf(&self, q: Vec3) -> f64 {
        match *self {
            Shape::Sphere { radius } => q.norm() - radius,
            Shape::Box { half_extents } => {
                let d = q.abs() - Vec3::from(half_extents);
                d.map(|v| v.max(0.0)).norm() + d.max().min(0.0)
            }
            Shape::Cylinder { radius, half_height } => {
                let dx = (q.x * q.x + q.z * q.z).sqrt() - radius;
                let dy = q.y.abs() - half_height;
                dx.max(dy).min(0.0) + (dx.max(0.0).powi(2) + dy.max(0.0).powi(2)).sqrt()
            }
            Shape::Torus { major, minor } => {
                let r = (q.x * q.x + q.z * q.z).sqrt() - major;
                (r * r + q.y * q.y).sqrt() - minor
            }
        }
    }

    /// First `t > 0` where `o + t d` crosses the surface.
    pub fn intersect(&self, o: Vec3, d: Vec3) -> Option<f64> {
        const EPS: f64 = 1e-9;
        let smallest = |ts: &[f64]| ts.iter().copied().filter(|&t| t > EPS).fold(None, |m: Option<f64>, t| Some(m.map_or(t, |m| m.min(t))));
        match *self {
            Shape::Sphere { radius } => {
                let b = o.dot(&d);
                let disc = b * b - (o.norm_squared() - radius * radius);
                if disc < 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                smallest(&[-b - s, -b + s])
            }
            Shape::Box { half_extents } => {
                let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
                for a in 0..3 {
                    if d[a].abs() < 1e-15 {
                        if o[a].abs() > half_extents[a] {
                            return None;
                        }
                        continue;
                    }
                    let t1 = (-half_extents[a] - o[a]) / d[a];
                    let t2 = (half_extents[a] - o[a]) / d[a];
                    lo = lo.max(t1.min(t2));
                    hi = hi.min(t1.max(t2));
                }
                if lo > hi {
                    return None;
                }
                smallest(&[lo, hi])
            }
            Shape::Cylinder { radius, half_height } => {
                let mut ts = Vec::with_capacity(4);
                let a = d.x * d.x + d.z * d.z;
                if a > 1e-15 {
                    let b = o.x * d.x + o.z * d.z;
                    let c = o.x * o.x + o.z * o.z - radius * radius;
                    let disc = b * b - a * c;
                    if disc >= 0.0 {
                        for t in [(-b - disc.sqrt()) / a, (-b + disc.sqrt()) / a] {
                            if (o.y + t * d.y).abs() <= half_height {
                                ts.push(t);
                            }
                        }
                    }
                }
                if d.y.abs() > 1e-15 {
                    for cap in [-half_height, half_height] {
                        let t = (cap - o.y) / d.y;
                        let (x, z) = (o.x + t * d.x, o.z + t * d.z);
                        if x * x + z * z <= radius * radius {
                            ts.push(t);
                        }
                    }
                }
                smallest(&ts)
            }
            Shape::Torus { major, minor } => {
                // sphere tracing inside the bounding sphere
                let bound = major + minor;
                let b = o.dot(&d);
                let disc = b * b - (o.norm_squared() - bound * bound);
                if disc < 0.0 {
                    return None;
                }
                let (t0, t1) = ((-b - disc.sqrt()).max(0.0), -b + disc.sqrt());
                let mut t = t0;
                let inside = self.sdf(o + d * t) < 0.0;
                for _ in 0..2048 {
                    let s = self.sdf(o + d * t);
                    if s.abs() < 1e-9 {
                        return (t > EPS).then_some(t);
                    }
                    t += if inside { -s } else { s };
                    if t > t1 {
                        return None;
                    }
                }
                None
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    #[serde(flatten)]
    pub shape: Shape,
    pub center: [f64; 3],
    pub color: [f64; 3],
    pub sigma0: f64,
}

impl Primitive {
    pub fn validate(&self) -> Result<()> {
        self.shape.validate()?;
        let hb = self.shape.half_bounds();
        for a in 0..3 {
            if (self.center[a].abs() + hb[a]) > 1.0 {
                return Err(invalid("primitive", format!("{} at {:?} leaves the unit box", self.shape.kind(), self.center)));
            }
        }
        if self.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(invalid("primitive", format!("colour {:?} outside [0, 1]", self.color)));
        }
        if !(self.sigma0 > 0.0) {
            return Err(invalid("primitive", format!("sigma0 = {} must be positive", self.sigma0)));
        }
        Ok(())
    }

    pub fn sdf(&self, p: Vec3) -> f64 {
        self.shape.sdf(p - Vec3::from(self.center))
    }

    pub fn density(&self, p: Vec3) -> f64 {
        self.sigma0 * (0.5 - self.sdf(p) / RAMP).clamp(0.0, 1.0)
    }

    pub fn color_name(&self) -> &'static str {
        nearest_color_name(self.color)
    }
}

pub const PALETTE: [(&str, [f64; 3]); 7] = [
    ("red", [0.9, 0.15, 0.15]),
    ("green", [0.15, 0.75, 0.2]),
    ("blue", [0.15, 0.3, 0.9]),
    ("yellow", [0.95, 0.85, 0.15]),
    ("purple", [0.6, 0.2, 0.8]),
    ("orange", [0.95, 0.55, 0.1]),
    ("cyan", [0.1, 0.8, 0.85]),
];

pub fn nearest_color_name(c: [f64; 3]) -> &'static str {
    let dist = |p: &[f64; 3]| (0..3).map(|i| (p[i] - c[i]).powi(2)).sum::<f64>();
    PALETTE.iter().min_by(|a, b| dist(&a.1).total_cmp(&dist(&b.1))).map(|(n, _)| *n).unwrap()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub primitives: Vec<Primitive>,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        self.primitives.iter().try_for_each(Primitive::validate)
    }

    pub fn density(&self, p: Vec3) -> f64 {
        self.primitives.iter().map(|q| q.density(p)).fold(0.0, f64::max)
    }

    /// Density and colour at `p`.
    pub fn query(&self, p: Vec3) -> (f64, [f64; 3]) {
        let mut best: Option<(f64, usize)> = None;
        let mut nearest: Option<(f64, usize)> = None;
        for (i, q) in self.primitives.iter().enumerate() {
            let d = q.sdf(p);
            let s = q.sigma0 * (0.5 - d / RAMP).clamp(0.0, 1.0);
            if s > 0.0 && best.is_none_or(|(b, _)| s > b) {
                best = Some((s, i));
            }
            if nearest.is_none_or(|(n, _)| d < n) {
                nearest = Some((d, i));
            }
        }
        match (best, nearest) {
            (Some((s, i)), _) => (s, self.primitives[i].color),
            (None, Some((d, i))) if d < COLOR_BAND => (0.0, self.primitives[i].color),
            _ => (0.0, [0.0; 3]),
        }
    }

    /// Distance along the unit ray to the first primitive surface.
    pub fn first_hit(&self, ray: &Ray) -> Option<f64> {
        self.primitives
            .iter()
            .filter_map(|q| q.shape.intersect(ray.origin - Vec3::from(q.center), ray.dir))
            .fold(None, |m: Option<f64>, t| Some(m.map_or(t, |m| m.min(t))))
    }

    /// Caption from the toy grammar, e.g. "red cube above blue sphere".
    pub fn caption(&self) -> String {
        let phrase = |p: &Primitive| format!("{} {}", p.color_name(), p.shape.noun());
        match self.primitives.as_slice() {
            [] => "empty scene".to_string(),
            [a] => phrase(a),
            [a, b, rest @ ..] => {
                let mut s = format!("{} {} {}", phrase(a), relation(a.center, b.center), phrase(b));
                for p in rest {
                    s.push_str(" and ");
                    s.push_str(&phrase(p));
                }
                s
            }
        }
    }
}

/// Spatial relation of `a` to `b` along their dominant offset axis.
fn relation(a: [f64; 3], b: [f64; 3]) -> &'static str {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    let axis = (0..3).max_by(|&i, &j| d[i].abs().total_cmp(&d[j].abs())).unwrap();
    match (axis, d[axis] >= 0.0) {
        (0, true) => "right of",
        (0, false) => "left of",
        (1, true) => "above",
        (1, false) => "below",
        (_, true) => "in front of",
        (_, false) => "behind",
    }
}

impl Field for SceneSpec {
    fn eval(&self, points: &[[f64; 3]], sigma: &mut [f32], rgb: &mut [f32]) {
        for (i, p) in points.iter().enumerate() {
            let (s, c) = self.query(Vec3::from(*p));
            sigma[i] = s as f32;
            for j in 0..3 {
                rgb[3 * i + j] = c[j] as f32;
            }
        }
    }
}

/// Random scenes with exactly `complexity` primitives each.
pub fn scene_gen(seed: u64, count: usize, complexity: usize) -> Result<Vec<SceneSpec>> {
    if count == 0 {
        return Err(invalid("count", "must be at least 1"));
    }
    if complexity == 0 || complexity > PALETTE.len() {
        return Err(invalid("complexity", format!("{complexity} outside 1..={}", PALETTE.len())));
    }
    let mut rng = seeded(seed);
    let mut scenes = Vec::with_capacity(count);
    for _ in 0..count {
        let mut colors: Vec<usize> = (0..PALETTE.len()).collect();
        colors.shuffle(&mut rng);
        let scale = if complexity == 1 { 1.0 } else { 0.7 };
        let mut primitives = Vec::with_capacity(complexity);
        for &ci in colors.iter().take(complexity) {
            let shape = random_shape(&mut rng, scale);
            let hb = shape.half_bounds();
            let center = std::array::from_fn(|a| {
                let lim = (0.9 - hb[a]).max(0.0);
                if complexity == 1 {
                    rng.random_range(-0.5 * lim..=0.5 * lim)
                } else {
                    rng.random_range(-lim..=lim)
                }
            });
            let p = Primitive { shape, center, color: PALETTE[ci].1, sigma0: rng.random_range(30.0..DENSITY_SCALE as f64) };
            p.validate()?;
            primitives.push(p);
        }
        scenes.push(SceneSpec { primitives });
    }
    Ok(scenes)
}

fn random_shape(rng: &mut impl Rng, scale: f64) -> Shape {
    fn size(rng: &mut impl Rng, scale: f64, lo: f64, hi: f64) -> f64 {
        scale * rng.random_range(lo..hi)
    }
    match rng.random_range(0..4) {
        0 => Shape::Sphere { radius: size(rng, scale, 0.3, 0.55) },
        1 => {
            if rng.random_bool(0.5) {
                Shape::Box { half_extents: [size(rng, scale, 0.25, 0.45); 3] }
            } else {
                Shape::Box { half_extents: [size(rng, scale, 0.2, 0.5), size(rng, scale, 0.2, 0.5), size(rng, scale, 0.2, 0.5)] }
            }
        }
        2 => Shape::Cylinder { radius: size(rng, scale, 0.2, 0.4), half_height: size(rng, scale, 0.25, 0.5) },
        _ => {
            let minor = size(rng, scale, 0.1, 0.18);
            Shape::Torus { major: minor + size(rng, scale, 0.2, 0.35), minor }
        }
    }
}

/// Ground-truth feature volume: channel 0 is `density / DENSITY_SCALE`,
/// channels 1..=3 the colour field, further channels zero.
pub fn bake_volume(scene: &SceneSpec, n: usize, c: usize) -> Result<FeatureVolume> {
    if n < 4 {
        return Err(invalid("n", format!("{n} < 4")));
    }
    if c < 4 {
        return Err(invalid("channels", format!("{c} < 4")));
    }
    let mut vol = FeatureVolume::zeros(n, c);
    let m = n * n * n;
    let data = vol.data_mut();
    let mut idx = 0;
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                let p = crate::volume::voxel_center(n, [x, y, z]);
                let (s, col) = scene.query(Vec3::from(p));
                data[idx] = (s / DENSITY_SCALE as f64) as f32;
                for j in 0..3 {
                    data[(1 + j) * m + idx] = col[j] as f32;
                }
                idx += 1;
            }
        }
    }
    Ok(vol)
}

/// Quadrature colour plus analytic first-hit depth (0 where nothing is hit).
pub fn render_analytic(scene: &SceneSpec, pose: &CameraPose, k: &Intrinsics, cfg: &RenderConfig) -> Result<Rendered> {
    let mut out = render_image_field(scene, pose, k, cfg)?;
    let mut depth = Vec::with_capacity(k.pixel_count());
    for y in 0..k.height {
        for x in 0..k.width {
            depth.push(scene.first_hit(&ray_for_pixel(pose, k, x, y)).unwrap_or(0.0) as f32);
        }
    }
    out.depth = Image::new(k.width, k.height, 1, depth)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix3;

    fn sphere(center: [f64; 3], radius: f64) -> Primitive {
        Primitive { shape: Shape::Sphere { radius }, center, color: [0.9, 0.15, 0.15], sigma0: 40.0 }
    }

    fn on_axis(z: f64) -> CameraPose {
        CameraPose::new(Matrix3::identity(), Vec3::new(0.0, 0.0, z)).unwrap()
    }

    #[test]
    fn sdf_signs() {
        let shapes = [
            Shape::Sphere { radius: 0.5 },
            Shape::Box { half_extents: [0.3, 0.4, 0.5] },
            Shape::Cylinder { radius: 0.3, half_height: 0.4 },
            Shape::Torus { major: 0.4, minor: 0.1 },
        ];
        for s in shapes {
            assert!(s.sdf(Vec3::new(0.95, 0.95, 0.95)) > 0.0, "{s:?}");
        }
        assert!(shapes[0].sdf(Vec3::zeros()) < 0.0);
        assert!(shapes[1].sdf(Vec3::zeros()) < 0.0);
        assert!(shapes[2].sdf(Vec3::zeros()) < 0.0);
        assert!(shapes[3].sdf(Vec3::new(0.4, 0.0, 0.0)) < 0.0);
        assert!(shapes[3].sdf(Vec3::zeros()) > 0.0);
    }

    #[test]
    fn unit_sphere_depth_from_two() {
        let scene = SceneSpec { primitives: vec![sphere([0.0; 3], 1.0)] };
        let k = Intrinsics::new(50.0, 9, 9).unwrap();
        let r = render_analytic(&scene, &on_axis(2.0), &k, &RenderConfig::default()).unwrap();
        assert!((r.depth.pixel(4, 4)[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn empty_scene_renders_background() {
        let k = Intrinsics::new(50.0, 6, 4).unwrap();
        let r = render_analytic(&SceneSpec::default(), &on_axis(2.0), &k, &RenderConfig::default()).unwrap();
        assert!(r.rgb.data().iter().all(|&v| v == 1.0));
        assert!(r.depth.data().iter().all(|&v| v == 0.0));
        let v = bake_volume(&SceneSpec::default(), 8, 4).unwrap();
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn intersections_match_sphere_tracing() {
        let shapes = [
            Shape::Box { half_extents: [0.3, 0.2, 0.4] },
            Shape::Cylinder { radius: 0.3, half_height: 0.25 },
            Shape::Torus { major: 0.35, minor: 0.12 },
        ];
        let mut rng = seeded(4);
        for s in shapes {
            for _ in 0..200 {
                let o = Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), 2.5);
                let target = Vec3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), 0.0);
                let d = (target - o).normalize();
                // independent march with a conservative step
                let mut t = 0.0;
                let mut hit = None;
                while t < 6.0 {
                    let v = s.sdf(o + d * t);
                    if v < 1e-7 {
                        hit = Some(t);
                        break;
                    }
                    t += v.max(1e-4) * 0.9;
                }
                match (s.intersect(o, d), hit) {
                    (Some(a), Some(b)) => assert!((a - b).abs() < 1e-4, "{s:?}: {a} vs {b}"),
                    (None, None) => {}
                    (a, b) => panic!("{s:?}: analytic {a:?}, marched {b:?}"),
                }
            }
        }
    }

    #[test]
    fn centred_sphere_bake() {
        let scene = SceneSpec { primitives: vec![sphere([0.0; 3], 0.5)] };
        let v = bake_volume(&scene, 32, 4).unwrap();
        let max = v.channel(0).iter().copied().fold(0.0f32, f32::max);
        assert_eq!(v.sample([0.0; 3])[0], max);
        assert!(max > 0.0);
        let far = v.sample([0.9, 0.9, 0.9]);
        assert_eq!(far, vec![0.0; 4]);
    }

    #[test]
    fn generated_scenes_are_valid_and_captioned() {
        let a = scene_gen(11, 12, 2).unwrap();
        assert_eq!(a, scene_gen(11, 12, 2).unwrap());
        for s in &a {
            s.validate().unwrap();
            let cap = s.caption();
            for p in &s.primitives {
                assert!(cap.contains(p.color_name()) && cap.contains(p.shape.noun()), "{cap}");
            }
        }
        assert!(scene_gen(3, 5, 1).unwrap().iter().all(|s| s.primitives.len() == 1));
        assert!(scene_gen(3, 0, 1).is_err());
    }

    #[test]
    fn caption_grammar() {
        let mut top = sphere([0.0, 0.5, 0.0], 0.2);
        top.shape = Shape::Box { half_extents: [0.2; 3] };
        let mut bottom = sphere([0.0, -0.5, 0.0], 0.2);
        bottom.color = [0.15, 0.3, 0.9];
        let scene = SceneSpec { primitives: vec![top, bottom] };
        assert_eq!(scene.caption(), "red cube above blue sphere");
    }

    #[test]
    fn rejects_out_of_box_primitives() {
        assert!(sphere([0.8, 0.0, 0.0], 0.5).validate().is_err());
        let mut p = sphere([0.0; 3], 0.5);
        p.sigma0 = 0.0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn scene_json_round_trip() {
        let s = &scene_gen(5, 1, 3).unwrap()[0];
        let j = serde_json::to_string(s).unwrap();
        assert!(j.contains("\"kind\""));
        assert_eq!(&serde_json::from_str::<SceneSpec>(&j).unwrap(), s);
    }
}
