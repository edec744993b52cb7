//! Contact and reconstruction metrics.
//!
//! Internal lengths are centimetres; reconstruction errors are reported in
//! millimetres and geodesic error in centimetres.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use meshcontact_tensor::{ParamStore, Tensor};
use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{EdgeGraph, MeshTemplate};
use crate::model::Model;
use crate::nn::{stream, tag};
use crate::scenes::Sample;

const CM_TO_MM: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

fn membership(set: &[usize], n: usize, what: &str) -> Result<Vec<bool>> {
    let mut m = vec![false; n];
    for &i in set {
        if i >= n {
            return Err(Error::Contract(format!("{what} vertex {i} out of range for {n} vertices")));
        }
        m[i] = true;
    }
    Ok(m)
}

pub fn confusion(pred: &[usize], gt: &[usize], v_full: usize) -> Result<Confusion> {
    let p = membership(pred, v_full, "predicted")?;
    let g = membership(gt, v_full, "ground-truth")?;
    let mut c = Confusion::default();
    for (&pi, &gi) in p.iter().zip(&g) {
        match (pi, gi) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

impl Confusion {
    /// `(precision, recall, f1)` with zero for every undefined ratio.
    pub fn prf(&self) -> (f64, f64, f64) {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let p = ratio(self.tp, self.tp + self.fp);
        let r = ratio(self.tp, self.tp + self.fn_);
        let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        (p, r, f1)
    }
}

pub fn contact_prf(pred: &[usize], gt: &[usize], v_full: usize) -> Result<(f64, f64, f64)> {
    Ok(confusion(pred, gt, v_full)?.prf())
}

/// Symmetric false-set geodesic error on `graph` (cm).
///
/// The mean distance from false positives to the nearest ground-truth contact
/// and the mean distance from false negatives to the nearest prediction are
/// averaged; an empty false set contributes 0. Both sets empty gives 0. When
/// exactly one set is empty only its opposite term remains, with every vertex
/// charged the graph diameter.
pub fn geodesic_error_on(graph: &EdgeGraph, pred: &[usize], gt: &[usize]) -> Result<f64> {
    let n = graph.len();
    let p = membership(pred, n, "predicted")?;
    let g = membership(gt, n, "ground-truth")?;
    let any_p = p.iter().any(|&x| x);
    let any_g = g.iter().any(|&x| x);
    match (any_p, any_g) {
        (false, false) => return Ok(0.0),
        (true, false) | (false, true) => return Ok(graph.diameter()),
        (true, true) => {}
    }
    let fp: Vec<usize> = (0..n).filter(|&i| p[i] && !g[i]).collect();
    let fn_: Vec<usize> = (0..n).filter(|&i| g[i] && !p[i]).collect();
    let term = |false_set: &[usize], targets: &[bool]| -> Result<f64> {
        if false_set.is_empty() {
            return Ok(0.0);
        }
        let sources: Vec<usize> = (0..n).filter(|&i| targets[i]).collect();
        let d = graph.distances(&sources)?;
        Ok(false_set.iter().map(|&i| d[i]).sum::<f64>() / false_set.len() as f64)
    };
    Ok(0.5 * (term(&fp, &g)? + term(&fn_, &p)?))
}

pub fn geodesic_error(template: &MeshTemplate, pred: &[usize], gt: &[usize]) -> Result<f64> {
    geodesic_error_on(template.graph(), pred, gt)
}

fn points(t: &Tensor, what: &str) -> Result<Vec<Vector3<f64>>> {
    match t.shape() {
        [_, 3] => Ok(t.data().chunks_exact(3).map(|r| Vector3::new(r[0], r[1], r[2])).collect()),
        s => Err(Error::Contract(format!("{what} must be [n, 3], got {s:?}"))),
    }
}

fn paired(pred: &Tensor, gt: &Tensor) -> Result<(Vec<Vector3<f64>>, Vec<Vector3<f64>>)> {
    let (a, b) = (points(pred, "prediction")?, points(gt, "ground truth")?);
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Contract(format!(
            "point sets must be non-empty and equal in size, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok((a, b))
}

fn mean_distance(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).norm()).sum::<f64>() / a.len() as f64
}

/// Mean per-vertex Euclidean error in mm.
pub fn mpve(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let (a, b) = paired(pred, gt)?;
    Ok(CM_TO_MM * mean_distance(&a, &b))
}

fn root_centered(p: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
    p.iter().map(|x| x - p[0]).collect()
}

/// Mean per-joint error in mm after subtracting joint 0 from each set.
pub fn mpjpe(pred_joints: &Tensor, gt_joints: &Tensor) -> Result<f64> {
    let (a, b) = paired(pred_joints, gt_joints)?;
    Ok(CM_TO_MM * mean_distance(&root_centered(&a), &root_centered(&b)))
}

fn check_spread(p: &[Vector3<f64>], what: &str) -> Result<()> {
    let mean = p.iter().sum::<Vector3<f64>>() / p.len() as f64;
    let centered = DMatrix::from_fn(p.len(), 3, |i, j| p[i][j] - mean[j]);
    let sv = centered.singular_values();
    let mut s: Vec<f64> = sv.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    if p.len() < 3 || s[0] <= 1e-12 || s[1] <= 1e-9 * s[0] {
        return Err(Error::Alignment(format!("{what} joints are coincident or collinear")));
    }
    Ok(())
}

/// Similarity transform `(scale, rotation, translation)` that best maps `src` onto `dst`.
fn similarity(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Result<(f64, Matrix3<f64>, Vector3<f64>)> {
    check_spread(src, "predicted")?;
    check_spread(dst, "ground-truth")?;
    let n = src.len() as f64;
    let mu_s = src.iter().sum::<Vector3<f64>>() / n;
    let mu_d = dst.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let (sc, dc) = (s - mu_s, d - mu_d);
        cov += dc * sc.transpose();
        var_s += sc.norm_squared();
    }
    cov /= n;
    var_s /= n;
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let mut sign = Matrix3::identity();
    if (u.determinant() * v_t.determinant()) < 0.0 {
        sign[(2, 2)] = -1.0;
    }
    let rotation = u * sign * v_t;
    let trace: f64 = (0..3).map(|i| svd.singular_values[i] * sign[(i, i)]).sum();
    let scale = trace / var_s;
    let translation = mu_d - scale * rotation * mu_s;
    Ok((scale, rotation, translation))
}

/// `pred` mapped by the optimal similarity transform onto `gt`.
pub fn procrustes_align(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    let (a, b) = paired(pred, gt)?;
    let (s, r, t) = similarity(&a, &b)?;
    let data = a.iter().flat_map(|x| {
        let y = s * r * x + t;
        [y.x, y.y, y.z]
    });
    Ok(Tensor::new([a.len(), 3], data.collect())?)
}

/// Joint error after root-centering and similarity alignment, in mm.
pub fn pa_mpjpe(pred_joints: &Tensor, gt_joints: &Tensor) -> Result<f64> {
    let (a, b) = paired(pred_joints, gt_joints)?;
    let (a, b) = (root_centered(&a), root_centered(&b));
    let (s, r, t) = similarity(&a, &b)?;
    let aligned: Vec<Vector3<f64>> = a.iter().map(|x| s * r * x + t).collect();
    Ok(CM_TO_MM * mean_distance(&aligned, &b))
}

/// Aggregated evaluation; every field is a mean over samples except the
/// geodesic error, which skips samples without ground-truth contact.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub geo_cm: f64,
    pub mpve_mm: f64,
    pub mpjpe_mm: f64,
    pub pa_mpjpe_mm: f64,
    pub n_samples: usize,
    #[serde(skip)]
    pub geo_skipped: usize,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is plain data")
    }

    /// `key=value` lines, including `extra` entries after the metrics.
    pub fn to_text(&self, extra: &BTreeMap<String, String>) -> String {
        let mut out = String::new();
        for (k, v) in [
            ("precision", self.precision),
            ("recall", self.recall),
            ("f1", self.f1),
            ("geo_cm", self.geo_cm),
            ("mpve_mm", self.mpve_mm),
            ("mpjpe_mm", self.mpjpe_mm),
            ("pa_mpjpe_mm", self.pa_mpjpe_mm),
        ] {
            let _ = writeln!(out, "{k}={v}");
        }
        let _ = writeln!(out, "n_samples={}", self.n_samples);
        let _ = writeln!(out, "geo_skipped={}", self.geo_skipped);
        for (k, v) in extra {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    /// Contact row: precision, recall, F1, geodesic error.
    pub fn contact_row(&self) -> String {
        format!(
            "precision {:.4}  recall {:.4}  f1 {:.4}  geo {:.3} cm",
            self.precision, self.recall, self.f1, self.geo_cm
        )
    }

    /// Reconstruction row: MPVE, MPJPE, PA-MPJPE.
    pub fn reconstruction_row(&self) -> String {
        format!(
            "mpve {:.2} mm  mpjpe {:.2} mm  pa-mpjpe {:.2} mm",
            self.mpve_mm, self.mpjpe_mm, self.pa_mpjpe_mm
        )
    }
}

/// Metrics for one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// `None` when the sample has no ground-truth contact.
    pub geo_cm: Option<f64>,
    pub mpve_mm: f64,
    pub mpjpe_mm: f64,
    pub pa_mpjpe_mm: f64,
}

pub fn sample_metrics(template: &MeshTemplate, pred_set: &[usize], pred_vertices: &Tensor, sample: &Sample) -> Result<SampleMetrics> {
    let gt_set = sample.contact_set();
    let (precision, recall, f1) = contact_prf(pred_set, &gt_set, template.v_full())?;
    let geo_cm = if gt_set.is_empty() {
        None
    } else {
        Some(geodesic_error(template, pred_set, &gt_set)?)
    };
    let pj = template.regress_joints_tensor(pred_vertices)?;
    let gj = template.regress_joints_tensor(&sample.vertices)?;
    Ok(SampleMetrics {
        precision,
        recall,
        f1,
        geo_cm,
        mpve_mm: mpve(pred_vertices, &sample.vertices)?,
        mpjpe_mm: mpjpe(&pj, &gj)?,
        pa_mpjpe_mm: pa_mpjpe(&pj, &gj)?,
    })
}

/// Mean of per-sample metrics in sample order.
pub fn aggregate(per_sample: &[SampleMetrics]) -> MetricsReport {
    let n = per_sample.len().max(1) as f64;
    let mean = |f: fn(&SampleMetrics) -> f64| per_sample.iter().map(f).sum::<f64>() / n;
    let geo: Vec<f64> = per_sample.iter().filter_map(|m| m.geo_cm).collect();
    MetricsReport {
        precision: mean(|m| m.precision),
        recall: mean(|m| m.recall),
        f1: mean(|m| m.f1),
        geo_cm: if geo.is_empty() { 0.0 } else { geo.iter().sum::<f64>() / geo.len() as f64 },
        mpve_mm: mean(|m| m.mpve_mm),
        mpjpe_mm: mean(|m| m.mpjpe_mm),
        pa_mpjpe_mm: mean(|m| m.pa_mpjpe_mm),
        n_samples: per_sample.len(),
        geo_skipped: per_sample.len() - geo.len(),
    }
}

/// Single-path predictions for `samples`, in order.
pub fn per_sample_metrics(model: &Model, params: &ParamStore, samples: &[Sample], threshold: f64) -> Result<Vec<SampleMetrics>> {
    samples
        .par_iter()
        .map(|s| {
            let p = model.predict(params, &s.image)?;
            sample_metrics(model.template(), &p.contact_set(threshold), &p.vertices, s)
        })
        .collect()
}

pub fn evaluate(model: &Model, params: &ParamStore, samples: &[Sample], threshold: f64) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::Contract("evaluation set is empty".into()));
    }
    Ok(aggregate(&per_sample_metrics(model, params, samples, threshold)?))
}

/// Contact metrics of uniform random probabilities thresholded at `threshold`.
/// Reconstruction fields use the template rest pose as the prediction.
pub fn random_baseline(template: &MeshTemplate, samples: &[Sample], threshold: f64, seed: u64) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::Contract("evaluation set is empty".into()));
    }
    let rest = template.rest_vertices();
    let per = samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = stream(seed, &[tag("baseline"), i as u64]);
            let pred: Vec<usize> = (0..template.v_full()).filter(|_| rng.random::<f64>() >= threshold).collect();
            sample_metrics(template, &pred, rest, s)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(aggregate(&per))
}
