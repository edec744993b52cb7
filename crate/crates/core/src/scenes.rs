//! Procedural scenes with exact labels: posed template, ground plane, boxes,
//! and an orthographic front-view rasterization.

use std::fs;
use std::path::Path;

use meshcontact_tensor::Tensor;
use nalgebra::{Rotation3, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::binio::{Reader, Writer};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::mesh::MeshTemplate;
use crate::nn::{stream, tag};

type V3 = Vector3<f64>;

const SAMPLE_MAGIC: &[u8] = b"GCSMP1\0";
const MANIFEST: &str = "manifest.txt";

/// Visible world window: x in `[-18, 18]`, y in `[-3, 33]` (cm).
pub const VIEW_MIN: [f64; 2] = [-18.0, -3.0];
pub const VIEW_SIZE: f64 = 36.0;
const VIEW_MARGIN: f64 = 0.5;
/// Fraction of a grid cell's pixels that must show the body for a body label.
pub const BODY_CELL_FRACTION: f64 = 0.15;

pub const SEM_BACKGROUND: usize = 0;
pub const SEM_GROUND: usize = 1;
pub const SEM_BOX: usize = 2;
pub const SEM_BODY: usize = 3;

/// Pose vector layout.
pub mod pose {
    pub const TX: usize = 0;
    pub const LIFT: usize = 1;
    pub const ROOT_RZ: usize = 2;
    pub const ROOT_RX: usize = 3;
    pub const NECK: usize = 4;
    pub const L_SHOULDER: usize = 5;
    pub const R_SHOULDER: usize = 6;
    pub const L_HIP: usize = 7;
    pub const R_HIP: usize = 8;
    pub const L_KNEE: usize = 9;
    pub const R_KNEE: usize = 10;
    pub const ROOT_RY: usize = 11;
    pub const COUNT: usize = 12;
}

/// Axis-aligned box resting on the ground.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneBox {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl SceneBox {
    fn new(x0: f64, x1: f64, top: f64) -> Self {
        Self {
            min: [x0.min(x1), 0.0, -30.0],
            max: [x0.max(x1), top, 30.0],
        }
    }

    pub fn distance(&self, p: &[f64; 3]) -> f64 {
        let mut s = 0.0;
        for a in 0..3 {
            let d = (self.min[a] - p[a]).max(0.0).max(p[a] - self.max[a]);
            s += d * d;
        }
        s.sqrt()
    }

    fn covers_column(&self, x: f64, z: f64) -> bool {
        x >= self.min[0] && x <= self.max[0] && z >= self.min[2] && z <= self.max[2]
    }

    fn strictly_contains(&self, p: &V3, tol: f64) -> bool {
        (0..3).all(|a| p[a] > self.min[a] + tol && p[a] < self.max[a] - tol)
    }
}

/// One training or evaluation example.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[3, H, W]` with values in `[0, 1]`.
    pub image: Tensor,
    /// `[V_full, 3]` posed vertices in cm.
    pub vertices: Tensor,
    /// `[V_full]` of 0/1 labels.
    pub contacts: Tensor,
    pub sem_grid: Vec<usize>,
    pub bp_grid: Vec<Option<usize>>,
    pub sem_pixels: Vec<usize>,
    pub bp_pixels: Vec<Option<usize>>,
    pub pose: Vec<f64>,
    pub boxes: Vec<SceneBox>,
}

impl Sample {
    pub fn contact_set(&self) -> Vec<usize> {
        self.contacts
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0.5)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries: Vec<(String, Tensor)> = vec![
            ("image".into(), self.image.clone()),
            ("vertices".into(), self.vertices.clone()),
            ("contacts".into(), self.contacts.clone()),
            ("sem_grid".into(), ids(&self.sem_grid.iter().map(|&c| Some(c)).collect::<Vec<_>>())),
            ("bp_grid".into(), ids(&self.bp_grid)),
            ("sem_pixels".into(), ids(&self.sem_pixels.iter().map(|&c| Some(c)).collect::<Vec<_>>())),
            ("bp_pixels".into(), ids(&self.bp_pixels)),
            ("pose".into(), Tensor::new([self.pose.len()], self.pose.clone()).expect("pose non-empty")),
        ];
        for (i, b) in self.boxes.iter().enumerate() {
            let data = b.min.iter().chain(&b.max).copied().collect();
            entries.push((format!("box.{i}"), Tensor::new([2, 3], data).expect("box extents")));
        }
        let mut w = Writer::new(SAMPLE_MAGIC);
        w.table(entries.iter().map(|(n, t)| (n, t)));
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8], what: &str) -> Result<Self> {
        let mut r = Reader::new(what, bytes, SAMPLE_MAGIC)?;
        let table = r.table()?;
        r.finish()?;
        let bad = || Error::Parse {
            what: what.to_string(),
            offset: SAMPLE_MAGIC.len(),
        };
        let get = |name: &str| -> Result<Tensor> {
            table
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(bad)
        };
        let labels = |t: Tensor| -> Vec<Option<usize>> {
            t.data().iter().map(|&x| if x < 0.0 { None } else { Some(x as usize) }).collect()
        };
        let required = |t: Tensor| -> Result<Vec<usize>> { labels(t).into_iter().map(|x| x.ok_or_else(bad)).collect() };
        let mut boxes = Vec::new();
        while let Ok(t) = get(&format!("box.{}", boxes.len())) {
            let d = t.data();
            if d.len() != 6 {
                return Err(bad());
            }
            boxes.push(SceneBox {
                min: [d[0], d[1], d[2]],
                max: [d[3], d[4], d[5]],
            });
        }
        Ok(Self {
            image: get("image")?,
            vertices: get("vertices")?,
            contacts: get("contacts")?,
            sem_grid: required(get("sem_grid")?)?,
            bp_grid: labels(get("bp_grid")?),
            sem_pixels: required(get("sem_pixels")?)?,
            bp_pixels: labels(get("bp_pixels")?),
            pose: get("pose")?.into_data(),
            boxes,
        })
    }
}

fn ids(xs: &[Option<usize>]) -> Tensor {
    Tensor::new([xs.len()], xs.iter().map(|x| x.map_or(-1.0, |v| v as f64)).collect()).expect("non-empty label map")
}

/// Distance from `p` to the nearest scene surface (ground plane or box).
pub fn surface_distance(p: &[f64; 3], boxes: &[SceneBox]) -> f64 {
    boxes.iter().map(|b| b.distance(p)).fold(p[1].abs(), f64::min)
}

/// Per-vertex contact labels under the `≤ eps` rule.
pub fn contact_labels(vertices: &Tensor, boxes: &[SceneBox], eps: f64) -> Tensor {
    let n = vertices.shape()[0];
    let data = (0..n)
        .map(|i| {
            let r = vertices.row(i);
            f64::from(surface_distance(&[r[0], r[1], r[2]], boxes) <= eps)
        })
        .collect();
    Tensor::new([n], data).expect("vertex count positive")
}

/// Rigid placement of every segment.
fn segment_transforms(template: &MeshTemplate, p: &[f64]) -> Vec<(Rotation3<f64>, V3)> {
    let rx = |a: f64| Rotation3::from_axis_angle(&V3::x_axis(), a);
    let ry = |a: f64| Rotation3::from_axis_angle(&V3::y_axis(), a);
    let rz = |a: f64| Rotation3::from_axis_angle(&V3::z_axis(), a);
    let local = [
        rz(p[pose::ROOT_RZ]) * rx(p[pose::ROOT_RX]) * ry(p[pose::ROOT_RY]),
        rx(p[pose::NECK]),
        rz(p[pose::L_SHOULDER]),
        rz(-p[pose::R_SHOULDER]),
        rx(-p[pose::L_HIP]),
        rx(p[pose::L_KNEE]),
        rx(-p[pose::R_HIP]),
        rx(p[pose::R_KNEE]),
    ];
    let mut out: Vec<(Rotation3<f64>, V3)> = Vec::with_capacity(local.len());
    for (s, rl) in local.iter().enumerate() {
        let pivot = V3::from(template.pivots()[s]);
        let (rp, tp) = match template.parents()[s] {
            Some(parent) => out[parent],
            None => (Rotation3::identity(), V3::new(p[pose::TX], 0.0, 0.0)),
        };
        let r = rp * rl;
        let t = rp * (pivot - rl * pivot) + tp;
        out.push((r, t));
    }
    out
}

/// Applies the articulated pose (without vertical placement) to the rest mesh.
pub fn pose_vertices(template: &MeshTemplate, params: &[f64]) -> Result<Vec<V3>> {
    if params.len() != pose::COUNT {
        return Err(Error::Contract(format!("pose needs {} parameters, got {}", pose::COUNT, params.len())));
    }
    let xf = segment_transforms(template, params);
    let rest = template.rest_vertices();
    Ok((0..template.v_full())
        .map(|i| {
            let (r, t) = &xf[template.segment_of()[i]];
            let v = rest.row(i);
            r * V3::new(v[0], v[1], v[2]) + t
        })
        .collect())
}

/// Vertical shift that rests the lowest point of each column on its support.
fn rest_offset(vertices: &[V3], boxes: &[SceneBox]) -> f64 {
    vertices
        .iter()
        .map(|v| {
            let support = boxes
                .iter()
                .filter(|b| b.covers_column(v.x, v.z))
                .map(|b| b.max[1])
                .fold(0.0, f64::max);
            support - v.y
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

fn shift(vertices: &mut [V3], d: V3) {
    vertices.iter_mut().for_each(|v| *v += d);
}

fn segment_bounds(vertices: &[V3], template: &MeshTemplate, segments: &[usize]) -> ([f64; 2], f64) {
    let mut x = [f64::INFINITY, f64::NEG_INFINITY];
    let mut min_y = f64::INFINITY;
    for (v, &s) in vertices.iter().zip(template.segment_of()) {
        if segments.contains(&s) {
            x[0] = x[0].min(v.x);
            x[1] = x[1].max(v.x);
            min_y = min_y.min(v.y);
        }
    }
    (x, min_y)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Scenario {
    Stand,
    HandSupport,
    Step,
    Crouch,
    Lean,
    Lying,
    Airborne,
}

fn pick_scenario(rng: &mut ChaCha8Rng) -> Scenario {
    let u: f64 = rng.random();
    match u {
        u if u < 0.24 => Scenario::Stand,
        u if u < 0.40 => Scenario::HandSupport,
        u if u < 0.58 => Scenario::Step,
        u if u < 0.72 => Scenario::Crouch,
        u if u < 0.84 => Scenario::Lean,
        u if u < 0.96 => Scenario::Lying,
        _ => Scenario::Airborne,
    }
}

/// Generator bound to one configuration and template.
pub struct SceneGenerator<'a> {
    cfg: &'a RunConfig,
    template: &'a MeshTemplate,
}

impl<'a> SceneGenerator<'a> {
    pub fn new(cfg: &'a RunConfig, template: &'a MeshTemplate) -> Result<Self> {
        cfg.validate()?;
        if template.joints() != cfg.scene.bp_classes {
            return Err(Error::Config("body-part classes must match template segments".into()));
        }
        Ok(Self { cfg, template })
    }

    /// The `index`-th sample of the stream seeded by `seed`.
    pub fn generate(&self, seed: u64, index: u64) -> Result<Sample> {
        let mut rng = stream(seed, &[tag("scene"), index]);
        self.generate_sample(&mut rng)
    }

    pub fn generate_sample(&self, rng: &mut ChaCha8Rng) -> Result<Sample> {
        for _ in 0..100 {
            if let Some((params, boxes)) = self.propose(rng)? {
                return self.render_scene(&params, &boxes);
            }
        }
        Err(Error::Generation("could not place the body after 100 attempts".into()))
    }

    fn propose(&self, rng: &mut ChaCha8Rng) -> Result<Option<(Vec<f64>, Vec<SceneBox>)>> {
        let eps = self.cfg.scene.contact_eps;
        let scenario = pick_scenario(rng);
        let mut p = vec![0.0; pose::COUNT];
        let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
        p[pose::TX] = u(-6.0, 6.0);
        p[pose::ROOT_RZ] = u(-0.08, 0.08);
        p[pose::ROOT_RX] = u(-0.12, 0.12);
        p[pose::ROOT_RY] = u(-0.6, 0.6);
        p[pose::NECK] = u(-0.3, 0.3);
        p[pose::L_SHOULDER] = u(0.05, 0.4);
        p[pose::R_SHOULDER] = u(0.05, 0.4);
        p[pose::L_HIP] = u(-0.15, 0.25);
        p[pose::R_HIP] = u(-0.15, 0.25);
        p[pose::L_KNEE] = u(0.0, 0.3);
        p[pose::R_KNEE] = u(0.0, 0.3);
        let left = u(0.0, 1.0) < 0.5;
        match scenario {
            Scenario::Stand | Scenario::Airborne => {}
            Scenario::HandSupport => {
                let k = if left { pose::L_SHOULDER } else { pose::R_SHOULDER };
                p[k] = u(0.5, 1.3);
            }
            Scenario::Step => {
                let (hip, knee) = if left { (pose::L_HIP, pose::L_KNEE) } else { (pose::R_HIP, pose::R_KNEE) };
                p[hip] = u(0.5, 1.3);
                p[knee] = u(0.4, 1.4);
            }
            Scenario::Crouch => {
                let flex = u(0.6, 1.3);
                p[pose::L_HIP] = flex + u(-0.1, 0.1);
                p[pose::R_HIP] = flex + u(-0.1, 0.1);
                p[pose::L_KNEE] = 1.5 * flex + u(-0.2, 0.2);
                p[pose::R_KNEE] = 1.5 * flex + u(-0.2, 0.2);
                p[pose::ROOT_RX] = u(0.0, 0.4);
                p[pose::L_SHOULDER] = u(0.1, 0.9);
                p[pose::R_SHOULDER] = u(0.1, 0.9);
            }
            Scenario::Lean => {
                p[pose::ROOT_RZ] = if left { -u(0.12, 0.35) } else { u(0.12, 0.35) };
            }
            Scenario::Lying => {
                let side = if left { 1.0 } else { -1.0 };
                p[pose::ROOT_RZ] = side * (std::f64::consts::FRAC_PI_2 + u(-0.12, 0.12));
                p[pose::ROOT_RY] = u(-0.25, 0.25);
                p[pose::ROOT_RX] = u(-0.3, 0.3);
                p[pose::TX] = u(-4.0, 4.0);
            }
        }

        let mut verts = pose_vertices(self.template, &p)?;
        let dy = rest_offset(&verts, &[]);
        shift(&mut verts, V3::new(0.0, dy, 0.0));
        let mut boxes = Vec::new();
        let arm = |l: bool| if l { 2 } else { 3 };
        let shin = |l: bool| if l { 5 } else { 7 };
        let thigh = |l: bool| if l { 4 } else { 6 };
        let max_boxes = self.cfg.scene.max_boxes;

        match scenario {
            Scenario::HandSupport if max_boxes > 0 => {
                let (hx, hy) = segment_bounds(&verts, self.template, &[arm(left)]);
                let (legs, _) = segment_bounds(&verts, self.template, &[4, 5, 6, 7]);
                let top = hy - rng.random_range(0.0..0.8 * eps);
                let (x0, x1) = if left {
                    (hx[0] - rng.random_range(0.2..1.0), hx[1] + rng.random_range(2.0..8.0))
                } else {
                    (hx[1] + rng.random_range(0.2..1.0), hx[0] - rng.random_range(2.0..8.0))
                };
                let clear = if left { x0.min(x1) > legs[1] + 0.3 } else { x0.max(x1) < legs[0] - 0.3 };
                if top < 0.5 || !clear {
                    return Ok(None);
                }
                boxes.push(SceneBox::new(x0, x1, top));
            }
            Scenario::Step if max_boxes > 0 => {
                let (fx, fy) = segment_bounds(&verts, self.template, &[shin(left), thigh(left)]);
                let (sx, _) = segment_bounds(&verts, self.template, &[shin(!left), thigh(!left)]);
                let top = fy - rng.random_range(0.0..0.8 * eps);
                let (split, outer) = if left {
                    (sx[1] + 0.3, fx[1] + rng.random_range(1.0..8.0))
                } else {
                    (sx[0] - 0.3, fx[0] - rng.random_range(1.0..8.0))
                };
                let covers = if left { split < fx[0] } else { split > fx[1] };
                if top < 0.5 || !covers {
                    return Ok(None);
                }
                boxes.push(SceneBox::new(split, outer, top));
            }
            Scenario::Lean if max_boxes > 0 => {
                let (bx, _) = segment_bounds(&verts, self.template, &[0, 1, 2, 3, 4, 5, 6, 7]);
                let gap = rng.random_range(0.0..0.8 * eps);
                let width = rng.random_range(3.0..10.0);
                let height = rng.random_range(14.0..26.0);
                // Leaning toward -x when `left`, toward +x otherwise.
                let (x0, x1) = if left { (bx[0] - gap - width, bx[0] - gap) } else { (bx[1] + gap, bx[1] + gap + width) };
                boxes.push(SceneBox::new(x0, x1, height));
            }
            Scenario::Airborne => {
                let lift = rng.random_range(2.0 * eps..6.0 * eps);
                p[pose::LIFT] = lift;
                shift(&mut verts, V3::new(0.0, lift, 0.0));
            }
            _ => {}
        }

        // Optional decor box well away from the body.
        if boxes.len() < max_boxes && rng.random::<f64>() < 0.4 {
            let (bx, _) = segment_bounds(&verts, self.template, &[0, 1, 2, 3, 4, 5, 6, 7]);
            let margin = eps + 0.5;
            let width = rng.random_range(2.0..8.0);
            let height = rng.random_range(2.0..14.0);
            let on_left = rng.random::<f64>() < 0.5;
            let (x0, x1) = if on_left {
                (bx[0] - margin - width, bx[0] - margin)
            } else {
                (bx[1] + margin, bx[1] + margin + width)
            };
            let clash = boxes.iter().any(|b| x0 < b.max[0] && x1 > b.min[0]);
            if !clash && x0 > VIEW_MIN[0] && x1 < VIEW_MIN[0] + VIEW_SIZE {
                boxes.push(SceneBox::new(x0, x1, height));
            }
        }

        // Final rest against every support, then the airborne lift if any.
        let mut final_verts = pose_vertices(self.template, &p)?;
        let dy = rest_offset(&final_verts, &boxes) + p[pose::LIFT];
        shift(&mut final_verts, V3::new(0.0, dy, 0.0));
        let in_view = final_verts.iter().all(|v| {
            v.x > VIEW_MIN[0] + VIEW_MARGIN
                && v.x < VIEW_MIN[0] + VIEW_SIZE - VIEW_MARGIN
                && v.y < VIEW_MIN[1] + VIEW_SIZE - VIEW_MARGIN
        });
        let penetrates = final_verts
            .iter()
            .any(|v| v.y < -1e-9 || boxes.iter().any(|b| b.strictly_contains(v, 1e-9)));
        if !in_view || penetrates {
            return Ok(None);
        }
        Ok(Some((p, boxes)))
    }

    /// Builds a sample from explicit pose parameters and boxes: the body is
    /// rested on its supports and then raised by the `LIFT` parameter.
    pub fn render_scene(&self, params: &[f64], boxes: &[SceneBox]) -> Result<Sample> {
        let mut verts = pose_vertices(self.template, params)?;
        let dy = rest_offset(&verts, boxes) + params[pose::LIFT];
        shift(&mut verts, V3::new(0.0, dy, 0.0));
        let flat: Vec<f64> = verts.iter().flat_map(|v| [v.x, v.y, v.z]).collect();
        let vertices = Tensor::new([verts.len(), 3], flat)?;
        let contacts = contact_labels(&vertices, boxes, self.cfg.scene.contact_eps);
        let raster = rasterize(self.template, &verts, boxes, self.cfg.backbone.image_size);
        let side = self.cfg.backbone.grid_side()?;
        let (sem_grid, bp_grid) = grid_masks(&raster.sem, &raster.bp, self.cfg.backbone.image_size, side, self.template.joints());
        Ok(Sample {
            image: raster.image,
            vertices,
            contacts,
            sem_grid,
            bp_grid,
            sem_pixels: raster.sem,
            bp_pixels: raster.bp,
            pose: params.to_vec(),
            boxes: boxes.to_vec(),
        })
    }
}

struct Raster {
    image: Tensor,
    sem: Vec<usize>,
    bp: Vec<Option<usize>>,
}

const BACKGROUND_RGB: [f64; 3] = [0.08, 0.08, 0.10];
const GROUND_RGB: [f64; 3] = [0.45, 0.36, 0.22];
const BOX_RGB: [f64; 3] = [0.30, 0.55, 0.85];
const PART_RGB: [[f64; 3]; 8] = [
    [0.90, 0.20, 0.20],
    [0.95, 0.85, 0.30],
    [0.25, 0.85, 0.35],
    [0.20, 0.65, 0.30],
    [0.85, 0.40, 0.90],
    [0.60, 0.25, 0.70],
    [0.95, 0.60, 0.25],
    [0.70, 0.40, 0.15],
];

fn part_rgb(segment: usize) -> [f64; 3] {
    PART_RGB[segment % PART_RGB.len()]
}

/// Orthographic front view (camera on +z) with a depth buffer for the body.
fn rasterize(template: &MeshTemplate, verts: &[V3], boxes: &[SceneBox], size: usize) -> Raster {
    let px = VIEW_SIZE / size as f64;
    let to_world = |i: usize, j: usize| -> (f64, f64) {
        (VIEW_MIN[0] + (j as f64 + 0.5) * px, VIEW_MIN[1] + VIEW_SIZE - (i as f64 + 0.5) * px)
    };
    let mut rgb = vec![[0.0; 3]; size * size];
    let mut sem = vec![SEM_BACKGROUND; size * size];
    let mut bp = vec![None; size * size];
    for i in 0..size {
        for j in 0..size {
            let (x, y) = to_world(i, j);
            let k = i * size + j;
            rgb[k] = BACKGROUND_RGB;
            if y < 0.0 {
                rgb[k] = GROUND_RGB;
                sem[k] = SEM_GROUND;
            }
            if boxes.iter().any(|b| x >= b.min[0] && x <= b.max[0] && y >= b.min[1] && y <= b.max[1]) {
                rgb[k] = BOX_RGB;
                sem[k] = SEM_BOX;
            }
        }
    }

    let mut depth = vec![f64::NEG_INFINITY; size * size];
    for f in template.faces() {
        let [a, b, c] = [verts[f[0]], verts[f[1]], verts[f[2]]];
        let normal = (b - a).cross(&(c - a));
        let area2 = (b.x - a.x) * (c.y - a.y) - (c.x - a.x) * (b.y - a.y);
        if area2.abs() < 1e-12 {
            continue;
        }
        let shade = 0.55 + 0.45 * (normal.z / normal.norm()).abs();
        // The face belongs to the segment of its first vertex; bridge faces
        // take the child segment.
        let segment = template.segment_of()[f[0]];
        let col = part_rgb(segment).map(|ch| ch * shade);
        let to_px = |x: f64| (x - VIEW_MIN[0]) / px;
        let to_py = |y: f64| (VIEW_MIN[1] + VIEW_SIZE - y) / px;
        let j0 = to_px(a.x.min(b.x).min(c.x)).floor().max(0.0) as usize;
        let j1 = (to_px(a.x.max(b.x).max(c.x)).ceil() as usize).min(size);
        let i0 = to_py(a.y.max(b.y).max(c.y)).floor().max(0.0) as usize;
        let i1 = (to_py(a.y.min(b.y).min(c.y)).ceil() as usize).min(size);
        for i in i0..i1 {
            for j in j0..j1 {
                let (x, y) = to_world(i, j);
                let w0 = ((b.x - x) * (c.y - y) - (c.x - x) * (b.y - y)) / area2;
                let w1 = ((c.x - x) * (a.y - y) - (a.x - x) * (c.y - y)) / area2;
                let w2 = 1.0 - w0 - w1;
                if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
                    continue;
                }
                let z = w0 * a.z + w1 * b.z + w2 * c.z;
                let k = i * size + j;
                if z > depth[k] {
                    depth[k] = z;
                    rgb[k] = col;
                    sem[k] = SEM_BODY;
                    bp[k] = Some(segment);
                }
            }
        }
    }

    let mut data = vec![0.0; 3 * size * size];
    for (k, c) in rgb.iter().enumerate() {
        for ch in 0..3 {
            data[ch * size * size + k] = c[ch].clamp(0.0, 1.0);
        }
    }
    Raster {
        image: Tensor::new([3, size, size], data).expect("image extents positive"),
        sem,
        bp,
    }
}

/// Reduces pixel masks to the feature grid.
///
/// A cell is body when at least [`BODY_CELL_FRACTION`] of its pixels show the
/// body; its part is then the most frequent part. Otherwise the cell takes the
/// most frequent scene class and has no part label.
pub fn grid_masks(
    sem: &[usize],
    bp: &[Option<usize>],
    size: usize,
    side: usize,
    parts: usize,
) -> (Vec<usize>, Vec<Option<usize>>) {
    let cell = size / side;
    let mut sem_grid = Vec::with_capacity(side * side);
    let mut bp_grid = Vec::with_capacity(side * side);
    for gi in 0..side {
        for gj in 0..side {
            let mut class_counts = [0usize; 4];
            let mut part_counts = vec![0usize; parts];
            for i in gi * cell..(gi + 1) * cell {
                for j in gj * cell..(gj + 1) * cell {
                    let k = i * size + j;
                    class_counts[sem[k]] += 1;
                    if let Some(p) = bp[k] {
                        part_counts[p] += 1;
                    }
                }
            }
            let argmax = |c: &[usize]| (0..c.len()).max_by_key(|&i| (c[i], std::cmp::Reverse(i))).unwrap_or(0);
            if class_counts[SEM_BODY] as f64 >= BODY_CELL_FRACTION * (cell * cell) as f64 {
                sem_grid.push(SEM_BODY);
                bp_grid.push(Some(argmax(&part_counts)));
            } else {
                sem_grid.push(argmax(&class_counts[..SEM_BODY]));
                bp_grid.push(None);
            }
        }
    }
    (sem_grid, bp_grid)
}

/// Writes `samples` as a dataset directory with a manifest.
pub fn write_dataset(dir: &Path, samples: &[Sample], cfg: &RunConfig, seed: u64) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, s) in samples.iter().enumerate() {
        let path = dir.join(sample_file(i));
        fs::write(&path, s.to_bytes()).map_err(|e| Error::io(&path, e))?;
    }
    let manifest = format!(
        "format=GCSMP1\nconfig_hash={}\ncount={}\nseed={}\nv_full={}\nimage_size={}\n",
        cfg.data_hash(),
        samples.len(),
        seed,
        cfg.mesh.v_full,
        cfg.backbone.image_size
    );
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

fn sample_file(i: usize) -> String {
    format!("sample_{i:05}.bin")
}

/// Parsed `manifest.txt`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub config_hash: String,
    pub count: usize,
    pub seed: u64,
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let field = |key: &str| -> Result<&str> {
        text.lines()
            .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
            .ok_or_else(|| Error::Load(format!("{}: missing `{key}`", path.display())))
    };
    let num = |key: &str| -> Result<u64> {
        field(key)?
            .trim()
            .parse()
            .map_err(|_| Error::Load(format!("{}: malformed `{key}`", path.display())))
    };
    if field("format")?.trim() != "GCSMP1" {
        return Err(Error::Load(format!("{}: unsupported format", path.display())));
    }
    Ok(Manifest {
        config_hash: field("config_hash")?.trim().to_string(),
        count: num("count")? as usize,
        seed: num("seed")?,
    })
}

/// Reads a dataset; with `strict`, the manifest hash must match `cfg`.
pub fn read_dataset(dir: &Path, cfg: &RunConfig, strict: bool) -> Result<Vec<Sample>> {
    let manifest = read_manifest(dir)?;
    if strict && manifest.config_hash != cfg.data_hash() {
        return Err(Error::Load(format!(
            "{}: dataset hash {} does not match configuration hash {}",
            dir.display(),
            manifest.config_hash,
            cfg.data_hash()
        )));
    }
    (0..manifest.count)
        .map(|i| {
            let path = dir.join(sample_file(i));
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            Sample::from_bytes(&bytes, &path.display().to_string())
        })
        .collect()
}

/// Generates `count` samples with indices `0..count` of the `seed` stream.
pub fn generate_dataset(cfg: &RunConfig, template: &MeshTemplate, seed: u64, count: usize) -> Result<Vec<Sample>> {
    let generator = SceneGenerator::new(cfg, template)?;
    (0..count as u64).map(|i| generator.generate(seed, i)).collect()
}
