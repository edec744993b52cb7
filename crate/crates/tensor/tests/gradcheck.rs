use meshcontact_tensor::{
    gradient_check, GradCheckOptions, ParamStore, ParamVars, Result, SparseMatrix, Tape, Tensor, TensorError, Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn store(entries: &[(&str, &[usize])], seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    entries
        .iter()
        .map(|(n, s)| (n.to_string(), random(s, &mut rng)))
        .collect()
}

fn check<F>(params: &ParamStore, f: F) -> f64
where
    F: Fn(&mut Tape, &ParamVars) -> Result<Var>,
{
    let report = gradient_check(f, params, &GradCheckOptions::default()).unwrap();
    assert!(report.passed, "max rel error {}", report.max_rel_error);
    report.max_rel_error
}

// Weighted sum with fixed pseudo-random coefficients so every output entry
// contributes a distinct sensitivity.
fn probe(t: &mut Tape, v: Var) -> Result<Var> {
    let n = t.value(v).numel();
    let shape = t.shape(v).to_vec();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7919 % 13) as f64 - 6.0) / 6.0).collect();
    let c = t.constant(Tensor::new(shape, w)?);
    let m = t.mul(v, c)?;
    Ok(t.sum(m))
}

#[test]
fn sum_of_squares_is_near_exact() {
    let p = store(&[("x", &[3, 4])], 1);
    let err = check(&p, |t, v| {
        let x = v.get("x")?;
        let sq = t.mul(x, x)?;
        Ok(t.sum(sq))
    });
    assert!(err <= 1e-10);
}

#[test]
fn elementwise_and_broadcast_ops() {
    let p = store(&[("a", &[3, 4]), ("row", &[1, 4]), ("col", &[3, 1])], 2);
    check(&p, |t, v| {
        let (a, row, col) = (v.get("a")?, v.get("row")?, v.get("col")?);
        let x = t.add(a, row)?;
        let y = t.mul(x, col)?;
        let z = t.sub(y, a)?;
        let s = t.scale(z, 0.7);
        probe(t, s)
    });
}

#[test]
fn matmul_transpose_reshape() {
    let p = store(&[("a", &[3, 5]), ("b", &[5, 2])], 3);
    check(&p, |t, v| {
        let (a, b) = (v.get("a")?, v.get("b")?);
        let c = t.matmul(a, b)?;
        let ct = t.transpose(c)?;
        let r = t.reshape(ct, &[6])?;
        probe(t, r)
    });
}

#[test]
fn activations() {
    let p = store(&[("x", &[4, 3])], 4);
    check(&p, |t, v| {
        let x = v.get("x")?;
        let g = t.gelu(x);
        let s = t.sigmoid(x);
        let m = t.mul(g, s)?;
        probe(t, m)
    });
}

#[test]
fn softmax_then_dot() {
    let p = store(&[("x", &[3, 5]), ("w", &[3, 5])], 5);
    check(&p, |t, v| {
        let s0 = t.softmax(v.get("x")?, 1)?;
        let s1 = t.softmax(v.get("x")?, 0)?;
        let a = t.add(s0, s1)?;
        let d = t.mul(a, v.get("w")?)?;
        Ok(t.sum(d))
    });
}

#[test]
fn concat_slice_reductions() {
    let p = store(&[("a", &[2, 3]), ("b", &[2, 2])], 6);
    check(&p, |t, v| {
        let c = t.concat(&[v.get("a")?, v.get("b")?], 1)?;
        let s = t.slice(c, 1, 1, 3)?;
        let m = t.mean_axis(s, 0)?;
        let q = t.sum_axis(c, 1)?;
        let x = t.mul(m, m)?;
        let y = t.mul(q, q)?;
        let sx = t.sum(x);
        let my = t.mean(y);
        t.add(sx, my)
    });
}

#[test]
fn layer_norm_all_inputs() {
    let p = store(&[("x", &[4, 6]), ("g", &[6]), ("b", &[6])], 7);
    check(&p, |t, v| {
        let y = t.layer_norm(v.get("x")?, v.get("g")?, v.get("b")?, 1e-5)?;
        probe(t, y)
    });
}

#[test]
fn strided_conv2d() {
    let p = store(&[("x", &[2, 8, 8]), ("w", &[3, 2, 4, 4]), ("b", &[3])], 8);
    check(&p, |t, v| {
        let y = t.conv2d(v.get("x")?, v.get("w")?, v.get("b")?, 4)?;
        let g = t.gelu(y);
        probe(t, g)
    });
    let p = store(&[("x", &[1, 5, 5]), ("w", &[2, 1, 3, 3]), ("b", &[2])], 9);
    check(&p, |t, v| {
        let y = t.conv2d(v.get("x")?, v.get("w")?, v.get("b")?, 1)?;
        probe(t, y)
    });
}

#[test]
fn bce_and_cross_entropy() {
    let p = store(&[("z", &[6]), ("logits", &[4, 3])], 10);
    let labels = Tensor::new([6], vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
    check(&p, |t, v| {
        let pr = t.sigmoid(v.get("z")?);
        let b = t.bce_mean(pr, &labels, 1e-7)?;
        let ce = t.cross_entropy(v.get("logits")?, &[Some(2), None, Some(0), Some(1)])?;
        t.add(b, ce)
    });
}

#[test]
fn hard_threshold_is_reported() {
    let p = store(&[("x", &[3])], 11);
    let res = gradient_check(
        |t, v| {
            let s = t.step(v.get("x")?, 0.0);
            Ok(t.sum(s))
        },
        &p,
        &GradCheckOptions::default(),
    );
    assert_eq!(res.unwrap_err(), TensorError::NonDifferentiable { op: "step" });
}

#[test]
fn non_finite_objective_names_parameter() {
    let p: ParamStore = [("x".to_string(), Tensor::scalar(0.0))].into_iter().collect();
    // 1/(x²) style blow-up: finite at x=0 only through the guard below.
    let res = gradient_check(
        |t, v| {
            let x = v.get("x")?;
            let val = t.value(x).item();
            let c = t.constant(Tensor::scalar(if val != 0.0 { f64::INFINITY } else { 1.0 }));
            t.mul(x, c)
        },
        &p,
        &GradCheckOptions::default(),
    );
    assert_eq!(res.unwrap_err(), TensorError::Evaluation { param: "x".into() });
}

#[test]
fn step_size_out_of_range_is_config_error() {
    let p = store(&[("x", &[1])], 12);
    let opts = GradCheckOptions {
        step: 1e-2,
        ..Default::default()
    };
    let res = gradient_check(|t, v| Ok(t.sum(v.get("x")?)), &p, &opts);
    assert!(matches!(res, Err(TensorError::Config(_))));
}

#[test]
fn fused_attention_all_inputs() {
    let p = store(&[("q", &[3, 4]), ("k", &[5, 4]), ("v", &[5, 4])], 11);
    check(&p, |t, v| {
        let o = t.attention(v.get("q")?, v.get("k")?, v.get("v")?, 2)?;
        probe(t, o)
    });
}

#[test]
fn sparse_matmul_operand() {
    let a = Tensor::from_rows(&[&[0.5, 0.0, 0.5], &[0.0, 1.0, 0.0], &[0.2, 0.3, 0.5], &[0.0, 0.0, 0.0]]).unwrap();
    let a = SparseMatrix::from_dense(&a).unwrap();
    let p = store(&[("b", &[3, 2])], 12);
    check(&p, |t, v| {
        let y = t.sparse_matmul(&a, v.get("b")?)?;
        let y = t.gelu(y);
        probe(t, y)
    });
}
