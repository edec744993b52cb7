use std::collections::VecDeque;

use meshcontact_core::config::MeshConfig;
use meshcontact_core::mesh::{EdgeGraph, MeshTemplate};
use meshcontact_core::Error;
use meshcontact_tensor::{Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn desk() -> MeshTemplate {
    MeshTemplate::build(&MeshConfig::default()).unwrap()
}

fn floyd_warshall(n: usize, edges: &[(usize, usize, f64)]) -> Vec<Vec<f64>> {
    let mut d = vec![vec![f64::INFINITY; n]; n];
    for (i, row) in d.iter_mut().enumerate() {
        row[i] = 0.0;
    }
    for &(a, b, w) in edges {
        d[a][b] = d[a][b].min(w);
        d[b][a] = d[b][a].min(w);
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                let via = d[i][k] + d[k][j];
                if via < d[i][j] {
                    d[i][j] = via;
                }
            }
        }
    }
    d
}

#[test]
fn desk_template_extents() {
    let t = desk();
    assert_eq!(t.v_full(), 386);
    assert_eq!(t.v_coarse(), 98);
    assert_eq!(t.joints(), 8);
    assert_eq!(t.upsample_matrix().shape(), &[386, 98]);
    assert_eq!(t.joint_regressor().shape(), &[8, 386]);
}

#[test]
fn build_is_deterministic() {
    let a = desk();
    let b = desk();
    assert_eq!(a, b);
    assert_eq!(a.to_bytes(), b.to_bytes());
}

#[test]
fn matrix_rows_sum_to_one() {
    let t = desk();
    for m in [t.upsample_matrix(), t.joint_regressor(), t.coarse_adjacency()] {
        let (rows, cols) = m.dims2().unwrap();
        for r in 0..rows {
            let s: f64 = m.row(r).iter().sum();
            assert!((s - 1.0).abs() <= 1e-9, "row {r} sums to {s}");
            assert!(m.row(r).iter().all(|&x| x >= 0.0));
        }
        assert!(cols > 0);
    }
    let u = t.upsample_matrix();
    for r in 0..t.v_full() {
        assert!(u.row(r).iter().filter(|&&x| x > 0.0).count() <= 4);
    }
}

#[test]
fn coarse_adjacency_is_symmetric_before_normalization() {
    let t = desk();
    let a = t.coarse_adjacency();
    let n = t.v_coarse();
    for i in 0..n {
        assert!(a.at2(i, i) > 0.0);
        for j in 0..n {
            assert_eq!(a.at2(i, j) > 0.0, a.at2(j, i) > 0.0);
        }
    }
}

#[test]
fn edge_graph_is_connected_by_bfs() {
    let t = desk();
    let n = t.v_full();
    let mut adj = vec![Vec::new(); n];
    for &(a, b, _) in t.edges() {
        adj[a].push(b);
        adj[b].push(a);
    }
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([0]);
    seen[0] = true;
    while let Some(u) = queue.pop_front() {
        for &v in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                queue.push_back(v);
            }
        }
    }
    assert!(seen.iter().all(|&s| s));
}

#[test]
fn faces_are_valid_and_non_degenerate() {
    let t = desk();
    let v = t.rest_vertices();
    for f in t.faces() {
        assert!(f.iter().all(|&i| i < t.v_full()));
        let p: Vec<[f64; 3]> = f.iter().map(|&i| [v.at2(i, 0), v.at2(i, 1), v.at2(i, 2)]).collect();
        let e1 = [p[1][0] - p[0][0], p[1][1] - p[0][1], p[1][2] - p[0][2]];
        let e2 = [p[2][0] - p[0][0], p[2][1] - p[0][1], p[2][2] - p[0][2]];
        let c = [
            e1[1] * e2[2] - e1[2] * e2[1],
            e1[2] * e2[0] - e1[0] * e2[2],
            e1[0] * e2[1] - e1[1] * e2[0],
        ];
        assert!((c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt() > 1e-12);
    }
}

#[test]
fn soles_rest_on_the_ground() {
    let t = desk();
    let v = t.rest_vertices();
    let min_y = (0..t.v_full()).map(|i| v.at2(i, 1)).fold(f64::INFINITY, f64::min);
    assert_eq!(min_y, 0.0);
    let on_ground = (0..t.v_full()).filter(|&i| v.at2(i, 1) == 0.0).count();
    assert!(on_ground >= 8);
}

#[test]
fn upsample_constant_and_linear() {
    let t = desk();
    let c = Tensor::full([98, 3], 2.5);
    let up = t.upsample_tensor(&c).unwrap();
    assert!(up.data().iter().all(|&x| (x - 2.5).abs() <= 1e-12));

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut rand = || Tensor::new([98, 3], (0..294).map(|_| rng.random_range(-5.0..5.0)).collect()).unwrap();
    let (a, b) = (rand(), rand());
    let sum = a.zip_map(&b, |x, y| x + y).unwrap();
    let lhs = t.upsample_tensor(&sum).unwrap();
    let rhs = t
        .upsample_tensor(&a)
        .unwrap()
        .zip_map(&t.upsample_tensor(&b).unwrap(), |x, y| x + y)
        .unwrap();
    assert!(lhs.max_abs_diff(&rhs) <= 1e-12);
}

#[test]
fn upsampling_rest_coarse_matches_stored_residual() {
    let t = desk();
    let recon = t.upsample_tensor(&t.coarse_rest()).unwrap();
    let err = recon.max_abs_diff(t.rest_vertices());
    assert_eq!(err, t.reconstruction_residual());
    assert!(err < 2.0, "residual {err}");
    for (ci, &v) in t.coarse_indices().iter().enumerate() {
        assert_eq!(t.upsample_matrix().at2(v, ci), 1.0);
    }
}

#[test]
fn joints_are_segment_centroids() {
    let t = desk();
    let joints = t.regress_joints_tensor(t.rest_vertices()).unwrap();
    let v = t.rest_vertices();
    for s in 0..t.joints() {
        let members: Vec<usize> = (0..t.v_full()).filter(|&i| t.segment_of()[i] == s).collect();
        for axis in 0..3 {
            let c: f64 = members.iter().map(|&i| v.at2(i, axis)).sum::<f64>() / members.len() as f64;
            assert!((joints.at2(s, axis) - c).abs() <= 1e-9);
        }
    }
}

#[test]
fn joints_follow_translation() {
    let t = desk();
    let shift = [1.5, -2.0, 0.25];
    let moved = Tensor::new(
        [t.v_full(), 3],
        t.rest_vertices().data().iter().enumerate().map(|(i, &x)| x + shift[i % 3]).collect(),
    )
    .unwrap();
    let j0 = t.regress_joints_tensor(t.rest_vertices()).unwrap();
    let j1 = t.regress_joints_tensor(&moved).unwrap();
    for j in 0..t.joints() {
        for a in 0..3 {
            assert!((j1.at2(j, a) - j0.at2(j, a) - shift[a]).abs() <= 1e-9);
        }
    }
    let p = Tensor::full([t.v_full(), 3], -4.0);
    assert!(t.regress_joints_tensor(&p).unwrap().data().iter().all(|&x| (x + 4.0).abs() <= 1e-12));
}

#[test]
fn shape_mismatch_is_dimension_error() {
    let t = desk();
    let bad = Tensor::zeros([97, 3]);
    assert!(matches!(t.upsample_tensor(&bad), Err(Error::Tensor(_))));
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::zeros([10, 3]));
    assert!(t.regress_joints(&mut tape, v).is_err());
}

#[test]
fn geodesics_match_floyd_warshall_exactly() {
    let t = desk();
    let all = floyd_warshall(t.v_full(), t.edges());
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..5 {
        let k = 1 + trial * 3;
        let sources: Vec<usize> = (0..k).map(|_| rng.random_range(0..t.v_full())).collect();
        let d = t.geodesic_distances(&sources).unwrap();
        for v in 0..t.v_full() {
            let oracle = sources.iter().map(|&s| all[s][v]).fold(f64::INFINITY, f64::min);
            assert_eq!(d[v], oracle, "vertex {v}");
        }
    }
}

#[test]
fn geodesic_hand_cases() {
    let g = EdgeGraph::from_edges(3, &[(0, 1, 1.0), (1, 2, 1.0)]).unwrap();
    assert_eq!(g.distances(&[0]).unwrap(), vec![0.0, 1.0, 2.0]);
    let t = desk();
    let all: Vec<usize> = (0..t.v_full()).collect();
    assert!(t.geodesic_distances(&all).unwrap().iter().all(|&d| d == 0.0));
    assert!(matches!(t.geodesic_distances(&[]), Err(Error::Contract(_))));
    assert!(t.geodesic_distances(&[t.v_full()]).is_err());
}

#[test]
fn template_file_round_trip() {
    let t = desk();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("desk.mesh");
    t.save(&path).unwrap();
    let back = MeshTemplate::load(&path).unwrap();
    assert_eq!(back, t);
    let bytes = t.to_bytes();
    assert!(matches!(
        MeshTemplate::from_bytes(&bytes[..bytes.len() / 2]),
        Err(Error::Parse { .. })
    ));
}

#[test]
fn larger_templates_build() {
    let cfg = MeshConfig {
        v_full: 1200,
        v_coarse: 300,
        ..Default::default()
    };
    let t = MeshTemplate::build(&cfg).unwrap();
    assert_eq!(t.v_full(), 1200);
    assert_eq!(t.v_coarse(), 300);
    assert!(t.graph().is_connected());
}

#[test]
fn bad_configs_are_rejected() {
    let bad_joints = MeshConfig {
        joints: 5,
        ..Default::default()
    };
    assert!(matches!(MeshTemplate::build(&bad_joints), Err(Error::Config(_))));
    let bad_coarse = MeshConfig {
        v_coarse: 386,
        ..Default::default()
    };
    assert!(MeshTemplate::build(&bad_coarse).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn geodesics_respect_edge_triangle_inequality(src in 0usize..386) {
        let t = desk();
        let d = t.geodesic_distances(&[src]).unwrap();
        for &(a, b, w) in t.edges() {
            prop_assert!((d[a] - d[b]).abs() <= w + 1e-9);
        }
    }
}
