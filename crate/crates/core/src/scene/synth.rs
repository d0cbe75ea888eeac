use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use serde::{Deserialize, Serialize};

use super::{LabeledCloud, Result, SceneError, NUM_CLASSES};

const FLOOR: u32 = 0;
const CEILING: u32 = 1;
const WALL: u32 = 2;
const COLUMN: u32 = 3;
const TABLE: u32 = 4;
const CABINET: u32 = 5;
const SPHERE: u32 = 6;
const BOARD: u32 = 7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectCounts {
    pub floor: usize,
    pub ceiling: usize,
    /// Number of the four walls that are present (0..=4).
    pub walls: usize,
    pub columns: usize,
    pub tables: usize,
    pub cabinets: usize,
    pub spheres: usize,
    pub boards: usize,
}

impl Default for ObjectCounts {
    fn default() -> Self {
        Self { floor: 1, ceiling: 1, walls: 4, columns: 1, tables: 2, cabinets: 2, spheres: 2, boards: 2 }
    }
}

/// Train/test distribution shift applied on top of the base generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DomainShift {
    /// Std-dev of a per-scene, per-class RGB offset.
    pub color_jitter: f32,
    /// Whole-scene scale drawn uniformly from this range.
    pub scale_range: [f32; 2],
    /// Fraction of points dropped at random.
    pub dropout: f32,
}

impl DomainShift {
    pub fn none() -> Self {
        Self { color_jitter: 0.0, scale_range: [1.0, 1.0], dropout: 0.0 }
    }
}

impl Default for DomainShift {
    fn default() -> Self {
        Self { color_jitter: 0.15, scale_range: [0.9, 1.1], dropout: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    /// Nominal room size (x, y, z) in meters; each scene varies it by `room_jitter`.
    pub room: [f32; 3],
    pub room_jitter: f32,
    pub counts: ObjectCounts,
    /// Surface sampling density in points per square meter.
    pub density: f32,
    /// Base RGB per class.
    pub palette: Vec<[f32; 3]>,
    /// Std-dev of the per-object colour variation.
    pub object_color_sigma: f32,
    /// Std-dev of the per-point colour noise.
    pub point_color_sigma: f32,
    pub shift: DomainShift,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            room: [3.0, 2.5, 2.2],
            room_jitter: 0.15,
            counts: ObjectCounts::default(),
            density: 2500.0,
            palette: vec![
                [0.45, 0.36, 0.26],
                [0.82, 0.82, 0.78],
                [0.70, 0.67, 0.60],
                [0.60, 0.60, 0.64],
                [0.55, 0.38, 0.22],
                [0.36, 0.42, 0.52],
                [0.78, 0.32, 0.28],
                [0.25, 0.45, 0.32],
            ],
            object_color_sigma: 0.04,
            point_color_sigma: 0.03,
            shift: DomainShift::none(),
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SceneError::Spec(m.to_string()));
        if self.room.iter().any(|&e| !(e.is_finite() && e > 0.0)) {
            return bad("room extents must be positive");
        }
        if !(0.0..0.5).contains(&self.room_jitter) {
            return bad("room_jitter must be in [0, 0.5)");
        }
        if !(self.density.is_finite() && self.density > 0.0) {
            return bad("density must be positive");
        }
        if self.palette.len() != NUM_CLASSES {
            return bad("palette needs one colour per class");
        }
        if self.counts.walls > 4 {
            return bad("at most 4 walls");
        }
        let s = &self.shift;
        if !(0.0..1.0).contains(&s.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if !(s.scale_range[0] > 0.0 && s.scale_range[0] <= s.scale_range[1]) {
            return bad("scale_range must be positive and ordered");
        }
        if s.color_jitter < 0.0 || self.object_color_sigma < 0.0 || self.point_color_sigma < 0.0 {
            return bad("colour std-devs must be non-negative");
        }
        Ok(())
    }
}

type V3 = [f64; 3];

#[derive(Clone, Debug)]
enum Primitive {
    /// `origin + a*u + b*v` for a, b in [0, 1].
    Rect { origin: V3, u: V3, v: V3 },
    /// Lateral surface of a vertical cylinder.
    Cylinder { center: [f64; 2], radius: f64, z0: f64, z1: f64 },
    Sphere { center: V3, radius: f64 },
}

fn cross(a: V3, b: V3) -> V3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn norm(a: V3) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

impl Primitive {
    fn area(&self) -> f64 {
        match *self {
            Primitive::Rect { u, v, .. } => norm(cross(u, v)),
            Primitive::Cylinder { radius, z0, z1, .. } => 2.0 * std::f64::consts::PI * radius * (z1 - z0),
            Primitive::Sphere { radius, .. } => 4.0 * std::f64::consts::PI * radius * radius,
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> V3 {
        match *self {
            Primitive::Rect { origin, u, v } => {
                let (a, b): (f64, f64) = (rng.random(), rng.random());
                [0, 1, 2].map(|i| origin[i] + a * u[i] + b * v[i])
            }
            Primitive::Cylinder { center, radius, z0, z1 } => {
                let t = rng.random::<f64>() * std::f64::consts::TAU;
                let z = z0 + rng.random::<f64>() * (z1 - z0);
                [center[0] + radius * t.cos(), center[1] + radius * t.sin(), z]
            }
            Primitive::Sphere { center, radius } => {
                let d: [f64; 3] = UnitSphere.sample(rng);
                [0, 1, 2].map(|i| center[i] + radius * d[i])
            }
        }
    }
}

/// Five faces of an axis-aligned box (the bottom face is omitted).
fn open_box(lo: V3, hi: V3) -> Vec<Primitive> {
    let [dx, dy, dz] = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
    vec![
        Primitive::Rect { origin: [lo[0], lo[1], hi[2]], u: [dx, 0.0, 0.0], v: [0.0, dy, 0.0] },
        Primitive::Rect { origin: lo, u: [dx, 0.0, 0.0], v: [0.0, 0.0, dz] },
        Primitive::Rect { origin: [lo[0], hi[1], lo[2]], u: [dx, 0.0, 0.0], v: [0.0, 0.0, dz] },
        Primitive::Rect { origin: lo, u: [0.0, dy, 0.0], v: [0.0, 0.0, dz] },
        Primitive::Rect { origin: [hi[0], lo[1], lo[2]], u: [0.0, dy, 0.0], v: [0.0, 0.0, dz] },
    ]
}

struct Object {
    class: u32,
    parts: Vec<Primitive>,
}

/// Footprints already used on the floor, to keep furniture from overlapping.
struct Floorplan {
    taken: Vec<[f64; 4]>,
}

impl Floorplan {
    fn free(&self, r: [f64; 4]) -> bool {
        self.taken.iter().all(|t| r[2] <= t[0] || r[0] >= t[2] || r[3] <= t[1] || r[1] >= t[3])
    }

    /// Tries to place a `w × d` footprint; falls back to the last candidate.
    fn place(&mut self, rng: &mut ChaCha8Rng, room: V3, w: f64, d: f64, against_wall: bool) -> [f64; 4] {
        let mut cand = [0.0; 4];
        for _ in 0..32 {
            let (x, y) = if against_wall {
                match rng.random_range(0..4) {
                    0 => (rng.random_range(0.0..(room[0] - w).max(1e-3)), 0.02),
                    1 => (rng.random_range(0.0..(room[0] - w).max(1e-3)), room[1] - d - 0.02),
                    2 => (0.02, rng.random_range(0.0..(room[1] - d).max(1e-3))),
                    _ => (room[0] - w - 0.02, rng.random_range(0.0..(room[1] - d).max(1e-3))),
                }
            } else {
                (rng.random_range(0.1..(room[0] - w - 0.1).max(0.11)), rng.random_range(0.1..(room[1] - d - 0.1).max(0.11)))
            };
            cand = [x, y, x + w, y + d];
            if self.free(cand) {
                break;
            }
        }
        self.taken.push(cand);
        cand
    }
}

fn layout(spec: &SceneSpec, room: V3, rng: &mut ChaCha8Rng) -> Vec<Object> {
    let c = &spec.counts;
    let [rx, ry, rz] = room;
    let mut objects = Vec::new();
    for _ in 0..c.floor {
        objects.push(Object {
            class: FLOOR,
            parts: vec![Primitive::Rect { origin: [0.0; 3], u: [rx, 0.0, 0.0], v: [0.0, ry, 0.0] }],
        });
    }
    for _ in 0..c.ceiling {
        objects.push(Object {
            class: CEILING,
            parts: vec![Primitive::Rect { origin: [0.0, 0.0, rz], u: [rx, 0.0, 0.0], v: [0.0, ry, 0.0] }],
        });
    }
    let walls = [
        Primitive::Rect { origin: [0.0; 3], u: [rx, 0.0, 0.0], v: [0.0, 0.0, rz] },
        Primitive::Rect { origin: [0.0, ry, 0.0], u: [rx, 0.0, 0.0], v: [0.0, 0.0, rz] },
        Primitive::Rect { origin: [0.0; 3], u: [0.0, ry, 0.0], v: [0.0, 0.0, rz] },
        Primitive::Rect { origin: [rx, 0.0, 0.0], u: [0.0, ry, 0.0], v: [0.0, 0.0, rz] },
    ];
    if c.walls > 0 {
        objects.push(Object { class: WALL, parts: walls[..c.walls].to_vec() });
    }
    let mut plan = Floorplan { taken: Vec::new() };
    for _ in 0..c.columns {
        let r = rng.random_range(0.12..0.22);
        let f = plan.place(rng, room, 2.0 * r, 2.0 * r, false);
        objects.push(Object {
            class: COLUMN,
            parts: vec![Primitive::Cylinder { center: [f[0] + r, f[1] + r], radius: r, z0: 0.0, z1: rz }],
        });
    }
    let mut table_tops = Vec::new();
    for _ in 0..c.tables {
        let (w, d) = (rng.random_range(0.8..1.3), rng.random_range(0.55..0.85));
        let h = rng.random_range(0.70..0.78);
        let f = plan.place(rng, room, w, d, false);
        let mut parts = open_box([f[0], f[1], h - 0.04], [f[2], f[3], h]);
        let leg = 0.05;
        for (lx, ly) in [(f[0], f[1]), (f[2] - leg, f[1]), (f[0], f[3] - leg), (f[2] - leg, f[3] - leg)] {
            parts.extend(open_box([lx, ly, 0.0], [lx + leg, ly + leg, h - 0.04]));
        }
        table_tops.push((f, h));
        objects.push(Object { class: TABLE, parts });
    }
    for _ in 0..c.cabinets {
        let (w, d, h) = (rng.random_range(0.5..1.0), rng.random_range(0.4..0.6), rng.random_range(1.2f64..1.9).min(rz - 0.1));
        let f = plan.place(rng, room, w, d, true);
        objects.push(Object { class: CABINET, parts: open_box([f[0], f[1], 0.0], [f[2], f[3], h]) });
    }
    for k in 0..c.spheres {
        let r = rng.random_range(0.12..0.25);
        // every other sphere rests on a table when one exists
        let center = match table_tops.get(k / 2).filter(|_| k % 2 == 0) {
            Some(&(f, h)) => [(f[0] + f[2]) / 2.0, (f[1] + f[3]) / 2.0, h + r],
            None => {
                let f = plan.place(rng, room, 2.0 * r, 2.0 * r, false);
                [f[0] + r, f[1] + r, r]
            }
        };
        objects.push(Object { class: SPHERE, parts: vec![Primitive::Sphere { center, radius: r }] });
    }
    for _ in 0..c.boards {
        let (w, h) = (rng.random_range(0.8..1.5), rng.random_range(0.6..0.9));
        let zc = rng.random_range(1.2f64..1.5).min(rz - h / 2.0 - 0.05);
        let off = 0.01;
        let part = match rng.random_range(0..4) {
            0 => Primitive::Rect {
                origin: [rng.random_range(0.0..(rx - w).max(1e-3)), off, zc - h / 2.0],
                u: [w, 0.0, 0.0],
                v: [0.0, 0.0, h],
            },
            1 => Primitive::Rect {
                origin: [rng.random_range(0.0..(rx - w).max(1e-3)), ry - off, zc - h / 2.0],
                u: [w, 0.0, 0.0],
                v: [0.0, 0.0, h],
            },
            2 => Primitive::Rect {
                origin: [off, rng.random_range(0.0..(ry - w).max(1e-3)), zc - h / 2.0],
                u: [0.0, w, 0.0],
                v: [0.0, 0.0, h],
            },
            _ => Primitive::Rect {
                origin: [rx - off, rng.random_range(0.0..(ry - w).max(1e-3)), zc - h / 2.0],
                u: [0.0, w, 0.0],
                v: [0.0, 0.0, h],
            },
        };
        objects.push(Object { class: BOARD, parts: vec![part] });
    }
    objects
}

fn room_extents(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> V3 {
    let j = spec.room_jitter as f64;
    spec.room.map(|e| e as f64 * if j > 0.0 { rng.random_range(1.0 - j..=1.0 + j) } else { 1.0 })
}

fn quantize(c: f64) -> f32 {
    (c.clamp(0.0, 1.0) * 255.0).round() as f32 / 255.0
}

/// Analytic fraction of total surface area per class for the layout that
/// `generate_scene` would build from `spec`.
pub fn class_area_fractions(spec: &SceneSpec) -> Result<[f64; NUM_CLASSES]> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let room = room_extents(spec, &mut rng);
    let mut area = [0.0; NUM_CLASSES];
    for o in layout(spec, room, &mut rng) {
        area[o.class as usize] += o.parts.iter().map(Primitive::area).sum::<f64>();
    }
    let total: f64 = area.iter().sum();
    Ok(area.map(|a| a / total))
}

/// Samples a labelled room. Deterministic in `spec` (including its seed).
/// Colours are quantised to multiples of 1/255 so that PLY round-trips are exact.
pub fn generate_scene(spec: &SceneSpec, name: impl Into<String>) -> Result<LabeledCloud> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let room = room_extents(spec, &mut rng);
    let objects = layout(spec, room, &mut rng);

    let shift = &spec.shift;
    let normal = |s: f32| Normal::new(0.0, s as f64).expect("non-negative sigma");
    let class_offset: Vec<[f64; 3]> = {
        let n = normal(shift.color_jitter);
        (0..NUM_CLASSES).map(|_| [0; 3].map(|_| n.sample(&mut rng))).collect()
    };
    let scale = if shift.scale_range[1] > shift.scale_range[0] {
        rng.random_range(shift.scale_range[0] as f64..=shift.scale_range[1] as f64)
    } else {
        shift.scale_range[0] as f64
    };

    let obj_noise = normal(spec.object_color_sigma);
    let pt_noise = normal(spec.point_color_sigma);
    let mut positions = Vec::new();
    let mut colors = Vec::new();
    let mut labels = Vec::new();
    for obj in &objects {
        let base = spec.palette[obj.class as usize];
        let tint: [f64; 3] =
            [0, 1, 2].map(|i| base[i] as f64 + class_offset[obj.class as usize][i] + obj_noise.sample(&mut rng));
        for part in &obj.parts {
            let count = (part.area() * spec.density as f64).round() as usize;
            for _ in 0..count {
                let p = part.sample(&mut rng);
                let c = tint.map(|t| quantize(t + pt_noise.sample(&mut rng)));
                if shift.dropout > 0.0 && rng.random::<f32>() < shift.dropout {
                    continue;
                }
                positions.push(p.map(|v| (v * scale) as f32));
                colors.push(c);
                labels.push(obj.class);
            }
        }
    }
    if positions.is_empty() {
        return Err(SceneError::Spec("scene has no points".into()));
    }
    LabeledCloud::from_xyz_rgb(name, positions, &colors, Some(labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SceneSpec {
        SceneSpec { density: 300.0, seed: 4, ..Default::default() }
    }

    #[test]
    fn deterministic() {
        let a = generate_scene(&small(), "a").unwrap();
        let b = generate_scene(&small(), "a").unwrap();
        assert_eq!(a, b);
        let c = generate_scene(&SceneSpec { seed: 5, ..small() }, "a").unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn every_class_present_unless_zero() {
        let cloud = generate_scene(&small(), "s").unwrap();
        let labels = cloud.labels.unwrap();
        for c in 0..NUM_CLASSES as u32 {
            assert!(labels.contains(&c), "class {c}");
        }
        let spec = SceneSpec { counts: ObjectCounts { tables: 0, cabinets: 0, ..Default::default() }, ..small() };
        let labels = generate_scene(&spec, "s").unwrap().labels.unwrap();
        assert!(!labels.contains(&TABLE) && !labels.contains(&CABINET));
    }

    #[test]
    fn class_fractions_follow_area() {
        let spec = SceneSpec { density: 4000.0, ..small() };
        let frac = class_area_fractions(&spec).unwrap();
        let labels = generate_scene(&spec, "s").unwrap().labels.unwrap();
        for c in 0..NUM_CLASSES {
            let got = labels.iter().filter(|&&l| l as usize == c).count() as f64 / labels.len() as f64;
            assert!((got - frac[c]).abs() <= 0.05 * frac[c], "class {c}: {got} vs {}", frac[c]);
        }
    }

    #[test]
    fn colours_are_quantised_and_in_range() {
        let spec = SceneSpec { shift: DomainShift::default(), ..small() };
        let cloud = generate_scene(&spec, "s").unwrap();
        for i in 0..cloud.len() {
            for c in cloud.color(i) {
                assert!((0.0..=1.0).contains(&c));
                assert_eq!((c * 255.0).round() / 255.0, c);
            }
        }
    }

    #[test]
    fn rejects_degenerate_extents() {
        let spec = SceneSpec { room: [0.0, 2.0, 2.0], ..small() };
        assert!(matches!(generate_scene(&spec, "s"), Err(SceneError::Spec(_))));
    }
}
