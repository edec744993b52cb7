//! Procedural body template: capsule-chain mesh, coarse subset, upsampler,
//! joint regressor and edge-graph geodesics.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap};
use std::path::Path;

use meshcontact_tensor::{SparseMatrix, Tape, Tensor, Var};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::binio::{Reader, Writer};
use crate::config::MeshConfig;
use crate::error::{Error, Result};

const MAGIC: &[u8] = b"GCMESH1\0";

/// Edge lengths are rounded to this grid so that every path sum is exact in
/// `f64`, independent of summation order.
pub const LENGTH_QUANTUM: f64 = 1.0 / 65536.0;

type V3 = Vector3<f64>;

/// Capsule description of one body segment in the rest pose.
struct SegmentSpec {
    name: &'static str,
    parent: Option<usize>,
    /// Rotation pivot: the joint connecting this segment to its parent.
    pivot: [f64; 3],
    start: [f64; 3],
    end: [f64; 3],
    radius: f64,
    /// Cross-section depth relative to `radius` (1 = circular).
    depth_ratio: f64,
    /// Ring count and side count at the desk resolution.
    rings: usize,
    sides: usize,
    sole: bool,
}

const fn seg(
    name: &'static str,
    parent: Option<usize>,
    pivot: [f64; 3],
    start: [f64; 3],
    end: [f64; 3],
    radius: f64,
    rings: usize,
) -> SegmentSpec {
    SegmentSpec {
        name,
        parent,
        pivot,
        start,
        end,
        radius,
        depth_ratio: 1.0,
        rings,
        sides: 8,
        sole: false,
    }
}

/// Standing mannequin about 21 cm tall with soles on `y = 0`.
fn body_segments() -> Vec<SegmentSpec> {
    let mut segs = vec![
        SegmentSpec {
            depth_ratio: 0.62,
            sides: 10,
            ..seg("torso", None, [0.0, 10.4, 0.0], [0.0, 11.0, 0.0], [0.0, 15.6, 0.0], 2.3, 5)
        },
        seg("head", Some(0), [0.0, 17.0, 0.0], [0.0, 18.2, 0.0], [0.0, 19.6, 0.0], 1.5, 6),
        seg("left_arm", Some(0), [3.2, 16.2, 0.0], [3.2, 16.2, 0.0], [3.6, 10.2, 0.0], 0.75, 5),
        seg("right_arm", Some(0), [-3.2, 16.2, 0.0], [-3.2, 16.2, 0.0], [-3.6, 10.2, 0.0], 0.75, 5),
        seg("left_thigh", Some(0), [1.25, 10.0, 0.0], [1.25, 10.0, 0.0], [1.25, 5.6, 0.0], 1.0, 6),
        seg("left_shin", Some(4), [1.25, 5.6, 0.0], [1.25, 5.6, 0.0], [1.25, 0.8, 0.0], 0.8, 6),
        seg("right_thigh", Some(0), [-1.25, 10.0, 0.0], [-1.25, 10.0, 0.0], [-1.25, 5.6, 0.0], 1.0, 6),
        seg("right_shin", Some(6), [-1.25, 5.6, 0.0], [-1.25, 5.6, 0.0], [-1.25, 0.8, 0.0], 0.8, 6),
    ];
    segs[5].sole = true;
    segs[7].sole = true;
    segs
}

/// Names of the body segments, one per joint and body-part class.
pub fn segment_names() -> Vec<&'static str> {
    body_segments().iter().map(|s| s.name).collect()
}

/// Per-segment `(sides, ring sizes)` that hit `v_full` vertices exactly.
fn allocate_rings(specs: &[SegmentSpec], v_full: usize) -> Result<Vec<Vec<usize>>> {
    let desk: usize = specs.iter().map(|s| s.sides * s.rings + 2).sum();
    let f = (v_full as f64 / desk as f64).sqrt();
    let sides: Vec<usize> = specs
        .iter()
        .map(|s| ((s.sides as f64 * f).round() as usize).max(3))
        .collect();
    let mut rings: Vec<usize> = specs
        .iter()
        .map(|s| ((s.rings as f64 * f).round() as usize).max(1))
        .collect();
    let poles = 2 * specs.len();
    let total = |rings: &[usize]| -> usize { poles + rings.iter().zip(&sides).map(|(r, s)| r * s).sum::<usize>() };

    // Trim whole rings round-robin until under budget, then add whole rings
    // while they fit; the remainder widens individual rings by one vertex.
    let mut k = 0;
    while total(&rings) > v_full {
        if rings.iter().all(|&r| r == 1) {
            return Err(Error::Construction(format!(
                "v_full = {v_full} is too small for {} segments",
                specs.len()
            )));
        }
        if rings[k] > 1 {
            rings[k] -= 1;
        }
        k = (k + 1) % specs.len();
    }
    let mut k = 0;
    let mut misses = 0;
    while misses < specs.len() {
        if total(&rings) + sides[k] <= v_full {
            rings[k] += 1;
            misses = 0;
        } else {
            misses += 1;
        }
        k = (k + 1) % specs.len();
    }
    let mut out: Vec<Vec<usize>> = rings
        .iter()
        .zip(&sides)
        .map(|(&r, &s)| vec![s; r])
        .collect();
    let mut remainder = v_full - total(&rings);
    let mut ring_idx = 0;
    while remainder > 0 {
        let mut placed = false;
        for seg in out.iter_mut() {
            if remainder > 0 && ring_idx < seg.len() {
                seg[ring_idx] += 1;
                remainder -= 1;
                placed = true;
            }
        }
        if !placed {
            // Every ring already widened once; start another pass.
            ring_idx = 0;
        } else {
            ring_idx += 1;
        }
    }
    Ok(out)
}

fn perpendicular_frame(d: V3) -> (V3, V3) {
    // Prefer x as the first cross-section axis so vertical segments have
    // width along x and depth along z.
    let helper = if d.x.abs() < 0.9 { V3::x() } else { V3::z() };
    let e1 = (helper - d * d.dot(&helper)).normalize();
    let e2 = d.cross(&e1);
    (e1, e2)
}

struct CapsuleMesh {
    vertices: Vec<V3>,
    faces: Vec<[usize; 3]>,
}

/// Rings in `[first pole, rings..., last pole]` order along the capsule profile.
fn capsule(spec: &SegmentSpec, ring_sizes: &[usize]) -> CapsuleMesh {
    let p0 = V3::from(spec.start);
    let p1 = V3::from(spec.end);
    let axis = p1 - p0;
    let len = axis.norm();
    let d = axis / len;
    let (e1, e2) = perpendicular_frame(d);
    let r = spec.radius;
    let cap = std::f64::consts::FRAC_PI_2 * r;
    let profile = 2.0 * cap + len;
    let n = ring_sizes.len();

    let mut vertices = vec![p0 - d * r];
    let mut ring_start = Vec::with_capacity(n);
    for (j, &m) in ring_sizes.iter().enumerate() {
        let a = profile * (j + 1) as f64 / (n + 1) as f64;
        let (z, rho) = if a < cap {
            let t = a / r;
            (-r * t.cos(), r * t.sin())
        } else if a <= cap + len {
            (a - cap, r)
        } else {
            let t = (a - cap - len) / r;
            (len + r * t.sin(), r * t.cos())
        };
        ring_start.push(vertices.len());
        let offset = if j % 2 == 1 { std::f64::consts::PI / m as f64 } else { 0.0 };
        for k in 0..m {
            let phi = offset + std::f64::consts::TAU * k as f64 / m as f64;
            let radial = e1 * (rho * phi.cos()) + e2 * (rho * spec.depth_ratio * phi.sin());
            vertices.push(p0 + d * z + radial);
        }
    }
    vertices.push(p1 + d * r);
    let last = vertices.len() - 1;

    let mut faces = Vec::new();
    let ring = |j: usize, k: usize| ring_start[j] + k % ring_sizes[j];
    for k in 0..ring_sizes[0] {
        faces.push([0, ring(0, k + 1), ring(0, k)]);
    }
    for j in 0..n - 1 {
        stitch(&mut faces, ring_start[j], ring_sizes[j], j % 2 == 1, ring_start[j + 1], ring_sizes[j + 1], (j + 1) % 2 == 1);
    }
    for k in 0..ring_sizes[n - 1] {
        faces.push([last, ring(n - 1, k), ring(n - 1, k + 1)]);
    }
    CapsuleMesh { vertices, faces }
}

/// Zipper triangulation between two angularly ordered rings of any sizes.
fn stitch(faces: &mut Vec<[usize; 3]>, a0: usize, na: usize, a_odd: bool, b0: usize, nb: usize, b_odd: bool) {
    let angle = |k: usize, n: usize, odd: bool| (k as f64 + if odd { 0.5 } else { 0.0 }) / n as f64;
    let (mut i, mut j) = (0, 0);
    while i < na || j < nb {
        let ai = a0 + i % na;
        let bj = b0 + j % nb;
        let next_a = angle(i + 1, na, a_odd);
        let next_b = angle(j + 1, nb, b_odd);
        if j >= nb || (i < na && next_a <= next_b) {
            faces.push([ai, bj, a0 + (i + 1) % na]);
            i += 1;
        } else {
            faces.push([ai, bj, b0 + (j + 1) % nb]);
            j += 1;
        }
    }
}

fn triangle_area(a: &V3, b: &V3, c: &V3) -> f64 {
    0.5 * (b - a).cross(&(c - a)).norm()
}

/// Undirected weighted graph used for geodesic distances.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeGraph {
    adjacency: Vec<Vec<(usize, f64)>>,
}

#[derive(PartialEq)]
struct Frontier(f64, usize);

impl Eq for Frontier {}

impl Ord for Frontier {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then_with(|| other.1.cmp(&self.1))
    }
}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl EdgeGraph {
    pub fn from_edges(n: usize, edges: &[(usize, usize, f64)]) -> Result<Self> {
        let mut adjacency = vec![Vec::new(); n];
        for &(u, v, w) in edges {
            if u >= n || v >= n {
                return Err(Error::Contract(format!("edge ({u}, {v}) out of range for {n} vertices")));
            }
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Contract(format!("edge ({u}, {v}) has invalid length {w}")));
            }
            adjacency[u].push((v, w));
            adjacency[v].push((u, w));
        }
        Ok(Self { adjacency })
    }

    pub fn len(&self) -> usize {
        self.adjacency.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adjacency.is_empty()
    }

    pub fn neighbors(&self, v: usize) -> &[(usize, f64)] {
        &self.adjacency[v]
    }

    /// Multi-source Dijkstra; unreachable vertices stay at infinity.
    pub fn distances(&self, sources: &[usize]) -> Result<Vec<f64>> {
        if sources.is_empty() {
            return Err(Error::Contract("geodesic sources must be non-empty".into()));
        }
        let n = self.len();
        let mut dist = vec![f64::INFINITY; n];
        let mut heap = BinaryHeap::new();
        for &s in sources {
            if s >= n {
                return Err(Error::Contract(format!("source vertex {s} out of range for {n} vertices")));
            }
            dist[s] = 0.0;
            heap.push(Frontier(0.0, s));
        }
        while let Some(Frontier(d, u)) = heap.pop() {
            if d > dist[u] {
                continue;
            }
            for &(v, w) in &self.adjacency[u] {
                let nd = d + w;
                if nd < dist[v] {
                    dist[v] = nd;
                    heap.push(Frontier(nd, v));
                }
            }
        }
        Ok(dist)
    }

    pub fn is_connected(&self) -> bool {
        if self.is_empty() {
            return true;
        }
        self.distances(&[0])
            .map(|d| d.iter().all(|x| x.is_finite()))
            .unwrap_or(false)
    }

    /// Largest finite shortest-path distance between any two vertices.
    pub fn diameter(&self) -> f64 {
        (0..self.len())
            .filter_map(|s| self.distances(&[s]).ok())
            .flat_map(|d| d.into_iter().filter(|x| x.is_finite()))
            .fold(0.0, f64::max)
    }
}

/// Immutable template mesh shared by the model, the scene generator and the metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct MeshTemplate {
    rest_vertices: Tensor,
    faces: Vec<[usize; 3]>,
    segment_of: Vec<usize>,
    parents: Vec<Option<usize>>,
    pivots: Vec<[f64; 3]>,
    sole: Vec<bool>,
    coarse_indices: Vec<usize>,
    upsample: Tensor,
    upsample_sparse: SparseMatrix,
    regressor: Tensor,
    coarse_adjacency: Tensor,
    edges: Vec<(usize, usize, f64)>,
    graph: EdgeGraph,
    residual: f64,
}

/// Rest-pose geometry before the derived matrices are attached.
struct RawMesh {
    vertices: Vec<V3>,
    faces: Vec<[usize; 3]>,
    segment_of: Vec<usize>,
}

fn assemble(specs: &[SegmentSpec], v_full: usize) -> Result<RawMesh> {
    let alloc = allocate_rings(specs, v_full)?;
    let mut vertices = Vec::with_capacity(v_full);
    let mut faces = Vec::new();
    let mut segment_of = Vec::with_capacity(v_full);
    let mut ranges = Vec::with_capacity(specs.len());
    for (si, (spec, rings)) in specs.iter().zip(&alloc).enumerate() {
        let mut cap = capsule(spec, rings);
        if spec.sole {
            // Flatten everything below the ankle centre onto the ground.
            let floor = spec.end[1];
            for v in cap.vertices.iter_mut() {
                if v.y < floor {
                    v.y = 0.0;
                }
            }
        }
        let base = vertices.len();
        faces.extend(cap.faces.iter().map(|f| [f[0] + base, f[1] + base, f[2] + base]));
        ranges.push(base..base + cap.vertices.len());
        segment_of.extend(std::iter::repeat_n(si, cap.vertices.len()));
        vertices.extend(cap.vertices);
    }

    // Bridge each child's proximal pole to the nearest parent edge.
    for (si, spec) in specs.iter().enumerate() {
        let Some(parent) = spec.parent else { continue };
        let pole = ranges[si].start;
        let p = vertices[pole];
        let nearest = ranges[parent]
            .clone()
            .min_by(|&a, &b| (vertices[a] - p).norm_squared().total_cmp(&(vertices[b] - p).norm_squared()))
            .expect("segments are non-empty");
        let partner = faces
            .iter()
            .filter(|f| f.contains(&nearest) && segment_of[f[0]] == parent)
            .flat_map(|f| f.iter().copied())
            .filter(|&v| v != nearest)
            .max_by(|&a, &b| {
                let area = |x: usize| triangle_area(&p, &vertices[nearest], &vertices[x]);
                area(a).total_cmp(&area(b)).then(b.cmp(&a))
            })
            .ok_or_else(|| Error::Construction(format!("segment {} has no parent edge", spec.name)))?;
        faces.push([pole, nearest, partner]);
    }
    Ok(RawMesh {
        vertices,
        faces,
        segment_of,
    })
}

fn quantize(x: f64) -> f64 {
    (x / LENGTH_QUANTUM).round() * LENGTH_QUANTUM
}

/// Farthest-point sampling of `k` indices from `members`, starting at `first`.
fn farthest_points(vertices: &[V3], members: &[usize], k: usize, first: usize) -> Vec<usize> {
    let mut chosen = vec![members[first]];
    let mut best: Vec<f64> = members
        .iter()
        .map(|&v| (vertices[v] - vertices[members[first]]).norm_squared())
        .collect();
    while chosen.len() < k {
        let (i, _) = best
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .expect("members non-empty");
        let pick = members[i];
        chosen.push(pick);
        for (j, &v) in members.iter().enumerate() {
            best[j] = best[j].min((vertices[v] - vertices[pick]).norm_squared());
        }
    }
    chosen
}

/// Splits `total` across `weights` by largest remainder with at least one each.
fn apportion(total: usize, weights: &[usize]) -> Vec<usize> {
    let sum: usize = weights.iter().sum();
    let spare = total - weights.len();
    let exact: Vec<f64> = weights.iter().map(|&w| spare as f64 * w as f64 / sum as f64).collect();
    let mut out: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let short = spare - out.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        out[i] += 1;
    }
    out.iter().map(|x| x + 1).collect()
}

impl MeshTemplate {
    pub fn build(config: &MeshConfig) -> Result<Self> {
        let specs = body_segments();
        if config.joints != specs.len() {
            return Err(Error::Config(format!(
                "the built-in template has {} segments, mesh.joints is {}",
                specs.len(),
                config.joints
            )));
        }
        if config.v_coarse >= config.v_full || config.v_coarse < specs.len() {
            return Err(Error::Config(format!(
                "v_coarse must lie in [{}, v_full), got {} with v_full {}",
                specs.len(),
                config.v_coarse,
                config.v_full
            )));
        }
        let raw = assemble(&specs, config.v_full)?;
        let n = raw.vertices.len();
        for f in &raw.faces {
            if triangle_area(&raw.vertices[f[0]], &raw.vertices[f[1]], &raw.vertices[f[2]]) <= 1e-12 {
                return Err(Error::Construction(format!("degenerate face {f:?}")));
            }
        }

        let mut edge_set = BTreeSet::new();
        for f in &raw.faces {
            for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
                edge_set.insert((a.min(b), a.max(b)));
            }
        }
        let edges: Vec<(usize, usize, f64)> = edge_set
            .into_iter()
            .map(|(a, b)| (a, b, quantize((raw.vertices[a] - raw.vertices[b]).norm())))
            .collect();
        let graph = EdgeGraph::from_edges(n, &edges)?;
        if !graph.is_connected() {
            return Err(Error::Construction("template edge graph is disconnected".into()));
        }

        let j = specs.len();
        let members: Vec<Vec<usize>> = (0..j)
            .map(|s| (0..n).filter(|&v| raw.segment_of[v] == s).collect())
            .collect();
        let counts = apportion(config.v_coarse, &members.iter().map(Vec::len).collect::<Vec<_>>());
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut coarse_indices = Vec::with_capacity(config.v_coarse);
        for (m, &k) in members.iter().zip(&counts) {
            if k > m.len() {
                return Err(Error::Construction("coarse budget exceeds segment size".into()));
            }
            let first = rng.random_range(0..m.len());
            coarse_indices.extend(farthest_points(&raw.vertices, m, k, first));
        }
        let vc = coarse_indices.len();

        // Inverse-distance weights over the nearest same-segment coarse vertices.
        let mut upsample = vec![0.0; n * vc];
        let mut region = vec![0usize; n];
        for v in 0..n {
            let mut cands: Vec<(f64, usize)> = coarse_indices
                .iter()
                .enumerate()
                .filter(|(_, &c)| raw.segment_of[c] == raw.segment_of[v])
                .map(|(ci, &c)| ((raw.vertices[v] - raw.vertices[c]).norm(), ci))
                .collect();
            cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            cands.truncate(4);
            region[v] = cands[0].1;
            let row = &mut upsample[v * vc..(v + 1) * vc];
            if cands[0].0 <= 1e-12 {
                row[cands[0].1] = 1.0;
            } else {
                let inv: Vec<f64> = cands.iter().map(|c| 1.0 / c.0).collect();
                let total: f64 = inv.iter().sum();
                for (c, w) in cands.iter().zip(&inv) {
                    row[c.1] = w / total;
                }
            }
        }
        let upsample = Tensor::new([n, vc], upsample)?;

        let mut regressor = vec![0.0; j * n];
        for (s, m) in members.iter().enumerate() {
            for &v in m {
                regressor[s * n + v] = 1.0 / m.len() as f64;
            }
        }
        let regressor = Tensor::new([j, n], regressor)?;

        let mut adj = vec![0.0; vc * vc];
        for i in 0..vc {
            adj[i * vc + i] = 1.0;
        }
        for &(a, b, _) in &edges {
            let (ra, rb) = (region[a], region[b]);
            adj[ra * vc + rb] = 1.0;
            adj[rb * vc + ra] = 1.0;
        }
        for row in adj.chunks_mut(vc) {
            let deg: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= deg);
        }
        let coarse_adjacency = Tensor::new([vc, vc], adj)?;

        let flat: Vec<f64> = raw.vertices.iter().flat_map(|v| [v.x, v.y, v.z]).collect();
        let rest_vertices = Tensor::new([n, 3], flat)?;
        let mut template = Self {
            rest_vertices,
            faces: raw.faces,
            segment_of: raw.segment_of,
            parents: specs.iter().map(|s| s.parent).collect(),
            pivots: specs.iter().map(|s| s.pivot).collect(),
            sole: specs.iter().map(|s| s.sole).collect(),
            coarse_indices,
            upsample_sparse: SparseMatrix::from_dense(&upsample)?,
            upsample,
            regressor,
            coarse_adjacency,
            edges,
            graph,
            residual: 0.0,
        };
        let recon = template.upsample_tensor(&template.coarse_rest())?;
        template.residual = recon.max_abs_diff(&template.rest_vertices);
        Ok(template)
    }

    pub fn v_full(&self) -> usize {
        self.segment_of.len()
    }

    pub fn v_coarse(&self) -> usize {
        self.coarse_indices.len()
    }

    pub fn joints(&self) -> usize {
        self.parents.len()
    }

    pub fn rest_vertices(&self) -> &Tensor {
        &self.rest_vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn segment_of(&self) -> &[usize] {
        &self.segment_of
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }

    pub fn pivots(&self) -> &[[f64; 3]] {
        &self.pivots
    }

    /// Whether a segment carries a flattened sole.
    pub fn has_sole(&self, segment: usize) -> bool {
        self.sole[segment]
    }

    pub fn coarse_indices(&self) -> &[usize] {
        &self.coarse_indices
    }

    pub fn upsample_matrix(&self) -> &Tensor {
        &self.upsample
    }

    pub fn joint_regressor(&self) -> &Tensor {
        &self.regressor
    }

    /// Row-normalized coarse-vertex adjacency with self-loops.
    pub fn coarse_adjacency(&self) -> &Tensor {
        &self.coarse_adjacency
    }

    pub fn edges(&self) -> &[(usize, usize, f64)] {
        &self.edges
    }

    pub fn graph(&self) -> &EdgeGraph {
        &self.graph
    }

    /// Max abs coordinate error of upsampling the rest-pose coarse vertices.
    pub fn reconstruction_residual(&self) -> f64 {
        self.residual
    }

    pub fn coarse_rest(&self) -> Tensor {
        let data = self
            .coarse_indices
            .iter()
            .flat_map(|&c| self.rest_vertices.row(c).to_vec())
            .collect();
        Tensor::new([self.v_coarse(), 3], data).expect("coarse extents are positive")
    }

    fn check_rows(&self, t: &[usize], rows: usize, op: &'static str) -> Result<()> {
        if t != [rows, 3] {
            return Err(Error::Tensor(meshcontact_tensor::TensorError::Shape {
                op,
                lhs: vec![rows, 3],
                rhs: t.to_vec(),
            }));
        }
        Ok(())
    }

    pub fn upsample_tensor(&self, coarse: &Tensor) -> Result<Tensor> {
        self.check_rows(coarse.shape(), self.v_coarse(), "upsample")?;
        Ok(self.upsample.matmul(coarse)?)
    }

    /// Differentiable `U · coarse` for any `[V_coarse, k]` input.
    pub fn upsample(&self, tape: &mut Tape, coarse: Var) -> Result<Var> {
        Ok(tape.sparse_matmul(&self.upsample_sparse, coarse)?)
    }

    pub fn regress_joints_tensor(&self, full: &Tensor) -> Result<Tensor> {
        self.check_rows(full.shape(), self.v_full(), "regress_joints")?;
        Ok(self.regressor.matmul(full)?)
    }

    pub fn regress_joints(&self, tape: &mut Tape, full: Var) -> Result<Var> {
        self.check_rows(tape.shape(full), self.v_full(), "regress_joints")?;
        let r = tape.constant(self.regressor.clone());
        Ok(tape.matmul(r, full)?)
    }

    /// Shortest-path distances (cm) over the rest-pose edge graph.
    pub fn geodesic_distances(&self, sources: &[usize]) -> Result<Vec<f64>> {
        self.graph.distances(sources)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (n, vc, j) = (self.v_full(), self.v_coarse(), self.joints());
        let mut w = Writer::new(MAGIC);
        for x in [n, self.faces.len(), vc, j, self.edges.len()] {
            w.u32(x);
        }
        w.f64s(self.rest_vertices.data());
        w.i32s(self.faces.iter().flatten().map(|&i| i as i32));
        w.i32s(self.segment_of.iter().map(|&i| i as i32));
        w.i32s(self.parents.iter().map(|p| p.map_or(-1, |i| i as i32)));
        w.f64s(&self.pivots.concat());
        w.i32s(self.sole.iter().map(|&s| s as i32));
        w.i32s(self.coarse_indices.iter().map(|&i| i as i32));
        w.f64s(self.upsample.data());
        w.f64s(self.regressor.data());
        w.f64s(self.coarse_adjacency.data());
        w.i32s(self.edges.iter().flat_map(|e| [e.0 as i32, e.1 as i32]));
        w.f64s(&self.edges.iter().map(|e| e.2).collect::<Vec<_>>());
        w.f64s(&[self.residual]);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new("mesh template", bytes, MAGIC)?;
        let (n, nf, vc, j, ne) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?);
        let bad = |r: &Reader| r.err_at(MAGIC.len());
        if n == 0 || vc == 0 || j == 0 {
            return Err(bad(&r));
        }
        let index = |xs: Vec<i32>, bound: usize, r: &Reader| -> Result<Vec<usize>> {
            xs.into_iter()
                .map(|x| usize::try_from(x).ok().filter(|&i| i < bound).ok_or_else(|| bad(r)))
                .collect()
        };
        let verts = r.f64s(n * 3)?;
        let faces_flat = r.i32s(nf * 3)?;
        let faces_flat = index(faces_flat, n, &r)?;
        let segment_of = r.i32s(n)?;
        let segment_of = index(segment_of, j, &r)?;
        let parents = r
            .i32s(j)?
            .into_iter()
            .map(|p| usize::try_from(p).ok())
            .collect();
        let pivots_flat = r.f64s(j * 3)?;
        let sole = r.i32s(j)?.into_iter().map(|s| s != 0).collect();
        let coarse = r.i32s(vc)?;
        let coarse_indices = index(coarse, n, &r)?;
        let upsample = Tensor::new([n, vc], r.f64s(n * vc)?)?;
        let regressor = Tensor::new([j, n], r.f64s(j * n)?)?;
        let coarse_adjacency = Tensor::new([vc, vc], r.f64s(vc * vc)?)?;
        let ends = r.i32s(ne * 2)?;
        let ends = index(ends, n, &r)?;
        let lengths = r.f64s(ne)?;
        let residual = r.f64s(1)?[0];
        r.finish()?;
        let edges: Vec<(usize, usize, f64)> = ends
            .chunks_exact(2)
            .zip(lengths)
            .map(|(e, l)| (e[0], e[1], l))
            .collect();
        Ok(Self {
            rest_vertices: Tensor::new([n, 3], verts)?,
            faces: faces_flat.chunks_exact(3).map(|f| [f[0], f[1], f[2]]).collect(),
            segment_of,
            parents,
            pivots: pivots_flat.chunks_exact(3).map(|p| [p[0], p[1], p[2]]).collect(),
            sole,
            coarse_indices,
            upsample_sparse: SparseMatrix::from_dense(&upsample)?,
            upsample,
            regressor,
            coarse_adjacency,
            graph: EdgeGraph::from_edges(n, &edges)?,
            edges,
            residual,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ring_allocation_is_exact() {
        let specs = body_segments();
        for v in [386, 500, 1000, 6890] {
            let alloc = allocate_rings(&specs, v).unwrap();
            let total: usize = alloc.iter().map(|r| r.iter().sum::<usize>() + 2).sum();
            assert_eq!(total, v);
        }
        let desk = allocate_rings(&specs, 386).unwrap();
        assert_eq!(desk[0], vec![10; 5]);
        assert_eq!(desk[1], vec![8; 6]);
        assert!(allocate_rings(&specs, 30).is_err());
    }

    #[test]
    fn apportion_keeps_total() {
        let a = apportion(98, &[52, 50, 42, 42, 50, 50, 50, 50]);
        assert_eq!(a.iter().sum::<usize>(), 98);
        assert!(a.iter().all(|&k| k >= 1));
    }

    #[test]
    fn stitch_covers_both_rings() {
        let mut faces = Vec::new();
        stitch(&mut faces, 0, 5, false, 5, 7, true);
        assert_eq!(faces.len(), 12);
    }
}
