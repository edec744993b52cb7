use meshcontact_core::metrics::{
    aggregate, confusion, contact_prf, geodesic_error_on, mpjpe, mpve, pa_mpjpe, procrustes_align, sample_metrics, MetricsReport,
};
use meshcontact_core::{EdgeGraph, Error, MeshTemplate, RunConfig, SceneGenerator};
use meshcontact_tensor::Tensor;
use nalgebra::{Matrix3, Matrix4, Rotation3, SymmetricEigen, Unit, Vector3};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn path_graph(n: usize) -> EdgeGraph {
    let edges: Vec<_> = (0..n - 1).map(|i| (i, i + 1, 1.0)).collect();
    EdgeGraph::from_edges(n, &edges).unwrap()
}

fn pts(rows: &[[f64; 3]]) -> Tensor {
    Tensor::new([rows.len(), 3], rows.iter().flatten().copied().collect()).unwrap()
}

fn random_points(n: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    (0..n)
        .map(|_| [rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0)])
        .collect()
}

fn random_rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
    let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let angle = rng.random_range(-3.1..3.1);
    *Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle).matrix()
}

// Quaternion-eigenvector rotation with least-squares scale.
fn horn_align(src: &[[f64; 3]], dst: &[[f64; 3]]) -> Vec<[f64; 3]> {
    let n = src.len() as f64;
    let v = |p: &[f64; 3]| Vector3::new(p[0], p[1], p[2]);
    let ms = src.iter().map(v).sum::<Vector3<f64>>() / n;
    let md = dst.iter().map(v).sum::<Vector3<f64>>() / n;
    let mut m = Matrix3::zeros();
    for (a, b) in src.iter().zip(dst) {
        m += (v(a) - ms) * (v(b) - md).transpose();
    }
    let (sxx, sxy, sxz) = (m[(0, 0)], m[(0, 1)], m[(0, 2)]);
    let (syx, syy, syz) = (m[(1, 0)], m[(1, 1)], m[(1, 2)]);
    let (szx, szy, szz) = (m[(2, 0)], m[(2, 1)], m[(2, 2)]);
    #[rustfmt::skip]
    let k = Matrix4::new(
        sxx + syy + szz, syz - szy,        szx - sxz,        sxy - syx,
        syz - szy,       sxx - syy - szz,  sxy + syx,        szx + sxz,
        szx - sxz,       sxy + syx,        -sxx + syy - szz, syz + szy,
        sxy - syx,       szx + sxz,        syz + szy,        -sxx - syy + szz,
    );
    let eig = SymmetricEigen::new(k);
    let i = eig.eigenvalues.imax();
    let q = eig.eigenvectors.column(i);
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    #[rustfmt::skip]
    let r = Matrix3::new(
        w * w + x * x - y * y - z * z, 2.0 * (x * y - w * z),         2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),         w * w - x * x + y * y - z * z, 2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),         2.0 * (y * z + w * x),         w * w - x * x - y * y + z * z,
    );
    let (mut num, mut den) = (0.0, 0.0);
    for (a, b) in src.iter().zip(dst) {
        let ra = r * (v(a) - ms);
        num += ra.dot(&(v(b) - md));
        den += (v(a) - ms).norm_squared();
    }
    let s = num / den;
    src.iter()
        .map(|a| {
            let y = s * r * (v(a) - ms) + md;
            [y.x, y.y, y.z]
        })
        .collect()
}

#[test]
fn prf_forced_cases() {
    assert_eq!(contact_prf(&[1, 2, 3], &[1, 2, 3], 10).unwrap(), (1.0, 1.0, 1.0));
    let (p, r, f) = contact_prf(&[0, 1, 2], &[0, 1, 3], 10).unwrap();
    for x in [p, r, f] {
        assert!((x - 2.0 / 3.0).abs() < 1e-15);
    }
    assert_eq!(contact_prf(&[], &[4, 5], 10).unwrap(), (0.0, 0.0, 0.0));
    assert_eq!(contact_prf(&[4], &[], 10).unwrap(), (0.0, 0.0, 0.0));
    assert_eq!(contact_prf(&[], &[], 10).unwrap(), (0.0, 0.0, 0.0));
    assert!(matches!(contact_prf(&[10], &[], 10), Err(Error::Contract(_))));
}

#[test]
fn confusion_counts_cover_every_vertex() {
    let c = confusion(&[0, 1, 2], &[2, 3], 6).unwrap();
    assert_eq!((c.tp, c.fp, c.fn_, c.tn), (1, 2, 1, 2));
}

#[test]
fn geodesic_hand_cases() {
    let g = path_graph(3);
    assert_eq!(geodesic_error_on(&g, &[0], &[2]).unwrap(), 2.0);
    assert_eq!(geodesic_error_on(&g, &[0, 1], &[0, 1]).unwrap(), 0.0);
    assert_eq!(geodesic_error_on(&g, &[0], &[0, 1]).unwrap(), 0.5);
    assert_eq!(geodesic_error_on(&g, &[], &[]).unwrap(), 0.0);
    assert_eq!(geodesic_error_on(&g, &[], &[1]).unwrap(), 2.0);
    assert_eq!(geodesic_error_on(&g, &[1], &[]).unwrap(), 2.0);
}

#[test]
fn reconstruction_forced_cases() {
    let a = pts(&[[0.0, 0.0, 0.0], [1.0, 2.0, 3.0], [4.0, 0.0, 1.0], [2.0, 5.0, 0.0]]);
    assert_eq!(mpve(&a, &a).unwrap(), 0.0);
    let shifted = a.map(|x| x + 1.0 / 3f64.sqrt());
    assert!((mpve(&shifted, &a).unwrap() - 10.0).abs() < 1e-12);
    assert!(mpjpe(&shifted, &a).unwrap() < 1e-12);
    assert!(pa_mpjpe(&a, &a).unwrap() < 1e-12);
    assert!(mpve(&a, &pts(&[[0.0; 3]])).is_err());
}

#[test]
fn mpve_matches_direct_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (a, b) = (random_points(40, &mut rng), random_points(40, &mut rng));
    let mut sum = 0.0;
    for (x, y) in a.iter().zip(&b) {
        sum += ((x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2) + (x[2] - y[2]).powi(2)).sqrt();
    }
    assert!((mpve(&pts(&a), &pts(&b)).unwrap() - 10.0 * sum / 40.0).abs() < 1e-9);
}

#[test]
fn procrustes_matches_quaternion_oracle() {
    let gt = [[0.0, 0.0, 0.0], [3.0, 0.5, 0.0], [0.0, 4.0, 1.0], [1.0, 1.0, 5.0]];
    let pred = [[0.2, -0.1, 0.3], [2.5, 1.5, -0.2], [-0.8, 3.0, 2.0], [1.4, 0.1, 4.2]];
    let ours = procrustes_align(&pts(&pred), &pts(&gt)).unwrap();
    let oracle = horn_align(&pred, &gt);
    for (a, b) in ours.data().iter().zip(oracle.iter().flatten()) {
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }
}

#[test]
fn procrustes_random_sets_match_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let (a, b) = (random_points(8, &mut rng), random_points(8, &mut rng));
        let ours = procrustes_align(&pts(&a), &pts(&b)).unwrap();
        for (x, y) in ours.data().iter().zip(horn_align(&a, &b).iter().flatten()) {
            assert!((x - y).abs() < 1e-9);
        }
    }
}

#[test]
fn procrustes_undoes_reflection_free_similarity() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let gt = random_points(8, &mut rng);
    let r = random_rotation(&mut rng);
    let t = Vector3::new(3.0, -7.0, 1.5);
    let pred: Vec<[f64; 3]> = gt
        .iter()
        .map(|p| {
            let y = 2.0 * r * Vector3::new(p[0], p[1], p[2]) + t;
            [y.x, y.y, y.z]
        })
        .collect();
    assert!(pa_mpjpe(&pts(&pred), &pts(&gt)).unwrap() <= 1e-6);
    // A mirror image cannot be undone by a rotation.
    let mirrored: Vec<[f64; 3]> = gt.iter().map(|p| [-p[0], p[1], p[2]]).collect();
    assert!(pa_mpjpe(&pts(&mirrored), &pts(&gt)).unwrap() > 1.0);
}

#[test]
fn degenerate_joints_are_alignment_errors() {
    let line = pts(&[[0.0, 0.0, 0.0], [1.0, 1.0, 1.0], [2.0, 2.0, 2.0], [3.0, 3.0, 3.0]]);
    let ok = pts(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
    assert!(matches!(pa_mpjpe(&line, &ok), Err(Error::Alignment(_))));
    assert!(matches!(pa_mpjpe(&ok, &line), Err(Error::Alignment(_))));
    let point = pts(&[[1.0, 1.0, 1.0]; 4]);
    assert!(matches!(procrustes_align(&point, &ok), Err(Error::Alignment(_))));
}

#[test]
fn perfect_predictions_score_perfectly() {
    let cfg = RunConfig::default();
    let template = MeshTemplate::build(&cfg.mesh).unwrap();
    let generator = SceneGenerator::new(&cfg, &template).unwrap();
    let mut per = Vec::new();
    for i in 0..6 {
        let s = generator.generate(4, i).unwrap();
        let m = sample_metrics(&template, &s.contact_set(), &s.vertices, &s).unwrap();
        if !s.contact_set().is_empty() {
            assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));
            assert_eq!(m.geo_cm, Some(0.0));
        }
        assert_eq!((m.mpve_mm, m.mpjpe_mm), (0.0, 0.0));
        assert!(m.pa_mpjpe_mm < 1e-9);
        per.push(m);
    }
    let report = aggregate(&per);
    assert_eq!(report.n_samples, 6);
    assert_eq!(report.geo_cm, 0.0);
}

#[test]
fn report_json_has_exact_keys() {
    let r = MetricsReport {
        precision: 0.5,
        recall: 0.25,
        f1: 1.0 / 3.0,
        geo_cm: 1.5,
        mpve_mm: 10.0,
        mpjpe_mm: 9.0,
        pa_mpjpe_mm: 4.0,
        n_samples: 3,
        geo_skipped: 1,
    };
    let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
    let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
    keys.sort();
    assert_eq!(
        keys,
        ["f1", "geo_cm", "mpjpe_mm", "mpve_mm", "n_samples", "pa_mpjpe_mm", "precision", "recall"]
    );
    let text = r.to_text(&[("config_hash".to_string(), "abc".to_string())].into());
    assert!(text.contains("f1=0.3333333333333333\n"));
    assert!(text.ends_with("config_hash=abc\n"));
}

fn set_strategy(n: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::btree_set(0..n, 0..n).prop_map(|s| s.into_iter().collect())
}

proptest! {
    #[test]
    fn prf_matches_counting(pred in set_strategy(30), gt in set_strategy(30)) {
        let tp = pred.iter().filter(|i| gt.contains(i)).count() as f64;
        let (np, ng) = (pred.len() as f64, gt.len() as f64);
        let p = if np == 0.0 { 0.0 } else { tp / np };
        let r = if ng == 0.0 { 0.0 } else { tp / ng };
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        prop_assert_eq!(contact_prf(&pred, &gt, 30).unwrap(), (p, r, f));
    }

    #[test]
    fn geodesic_error_is_symmetric(pred in set_strategy(12), gt in set_strategy(12), seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut edges: Vec<_> = (0..11).map(|i| (i, i + 1, rng.random_range(0.5..2.0))).collect();
        edges.push((0, 6, 1.0));
        edges.push((3, 9, 0.7));
        let g = EdgeGraph::from_edges(12, &edges).unwrap();
        prop_assert_eq!(geodesic_error_on(&g, &pred, &gt).unwrap(), geodesic_error_on(&g, &gt, &pred).unwrap());
    }

    #[test]
    fn metrics_ignore_vertex_order(pred in set_strategy(15), gt in set_strategy(15), seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let edges: Vec<_> = (0..14).map(|i| (i, i + 1, rng.random_range(0.5..2.0))).chain([(2, 11, 1.3)]).collect();
        let mut perm: Vec<usize> = (0..15).collect();
        perm.shuffle(&mut rng);
        let moved: Vec<_> = edges.iter().map(|&(a, b, w)| (perm[a], perm[b], w)).collect();
        let remap = |s: &[usize]| s.iter().map(|&i| perm[i]).collect::<Vec<_>>();
        let g = EdgeGraph::from_edges(15, &edges).unwrap();
        let h = EdgeGraph::from_edges(15, &moved).unwrap();
        prop_assert_eq!(contact_prf(&pred, &gt, 15).unwrap(), contact_prf(&remap(&pred), &remap(&gt), 15).unwrap());
        let (a, b) = (geodesic_error_on(&g, &pred, &gt).unwrap(), geodesic_error_on(&h, &remap(&pred), &remap(&gt)).unwrap());
        prop_assert!((a - b).abs() < 1e-12);
        let (x, y) = (random_points(15, &mut rng), random_points(15, &mut rng));
        let mut xp = x.clone();
        let mut yp = y.clone();
        for i in 0..15 {
            xp[perm[i]] = x[i];
            yp[perm[i]] = y[i];
        }
        prop_assert!((mpve(&pts(&x), &pts(&y)).unwrap() - mpve(&pts(&xp), &pts(&yp)).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn alignment_never_raises_squared_error(seed in 0u64..10_000, spread in 0.1f64..30.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt = random_points(8, &mut rng);
        let pred: Vec<[f64; 3]> = gt.iter().map(|p| p.map(|c| c + rng.random_range(-spread..spread))).collect();
        let (a, b) = (root_centered(&pred), root_centered(&gt));
        let aligned = procrustes_align(&pts(&a), &pts(&b)).unwrap();
        prop_assert!(rms(aligned.data(), &b) <= rms(&a.concat(), &b) + 1e-9);
    }
}

fn root_centered(p: &[[f64; 3]]) -> Vec<[f64; 3]> {
    p.iter().map(|x| [x[0] - p[0][0], x[1] - p[0][1], x[2] - p[0][2]]).collect()
}

fn rms(flat: &[f64], gt: &[[f64; 3]]) -> f64 {
    let sq: f64 = flat.iter().zip(gt.concat()).map(|(a, b)| (a - b).powi(2)).sum();
    (sq / gt.len() as f64).sqrt()
}

// Least squares spreads a single outlier over every joint, so the mean norm can rise.
#[test]
fn alignment_can_raise_mean_joint_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let gt = root_centered(&random_points(8, &mut rng));
    let mut pred = gt.clone();
    pred[5][0] += 30.0;
    let (a, b) = (pts(&pred), pts(&gt));
    let (plain, aligned) = (mpjpe(&a, &b).unwrap(), pa_mpjpe(&a, &b).unwrap());
    assert!((plain - 37.5).abs() < 1e-9);
    assert!(aligned > plain, "{aligned} vs {plain}");
    let fitted = procrustes_align(&a, &b).unwrap();
    assert!(rms(fitted.data(), &gt) <= rms(&pred.concat(), &gt));
}
