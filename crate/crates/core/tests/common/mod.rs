//! Desk-scale gradient probes shared by the module tests and the acceptance suite.
#![allow(dead_code)]

use meshcontact_core::backbone::{self, TokenSequence};
use meshcontact_core::config::{BackboneConfig, EncoderConfig, LossConfig};
use meshcontact_core::encoder::{self, BlockVars};
use meshcontact_core::heads;
use meshcontact_core::simu::{self, TarmVars};
use meshcontact_core::{MeshTemplate, Model, PathSpec, RunConfig, SceneGenerator};
use meshcontact_tensor::{gradient_check, GradCheckOptions, ParamStore, ParamVars, Result, SparseMatrix, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Adds uniform noise to every entry so no parameter sits at its initial constant.
pub fn jitter(store: &mut ParamStore, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, t) in store.iter_mut() {
        for x in t.data_mut() {
            *x += rng.random_range(-scale..scale);
        }
    }
}

/// Weighted sum with fixed coefficients so every output entry matters.
pub fn probe(t: &mut Tape, v: Var) -> Result<Var> {
    let n = t.value(v).numel();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7919 % 13) as f64 - 6.0) / 6.0).collect();
    let c = t.constant(Tensor::new(t.shape(v).to_vec(), w)?);
    let m = t.mul(v, c)?;
    Ok(t.sum(m))
}

/// Row-normalized adjacency of a ring with chords over `n` nodes plus self-loops.
pub fn ring_adjacency(n: usize) -> SparseMatrix {
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in [i, (i + 1) % n, (i + n - 1) % n, (i + n / 2) % n] {
            a[i * n + j] = 1.0;
        }
    }
    for r in a.chunks_mut(n) {
        let s: f64 = r.iter().sum();
        r.iter_mut().for_each(|x| *x /= s);
    }
    SparseMatrix::from_dense(&Tensor::new([n, n], a).unwrap()).unwrap()
}

fn max_error<F>(params: &ParamStore, opts: &GradCheckOptions, f: F) -> f64
where
    F: Fn(&mut Tape, &ParamVars) -> Result<Var>,
{
    gradient_check(f, params, opts).unwrap().max_rel_error
}

fn exhaustive() -> GradCheckOptions {
    GradCheckOptions::default()
}

pub fn small_encoder() -> EncoderConfig {
    EncoderConfig {
        depth: 2,
        heads: 2,
        mlp_hidden: 6,
        ..EncoderConfig::default()
    }
}

pub fn backbone_probe() -> f64 {
    let cfg = BackboneConfig {
        image_size: 12,
        channels: [3, 4],
        kernel: 2,
        stride: 2,
        d_tok: 4,
    };
    let mut store = ParamStore::new();
    backbone::init(&mut store, &cfg, 2, 3, 1).unwrap();
    jitter(&mut store, 0.1, 2);
    let image = random(&[3, 12, 12], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(3));
    max_error(&store, &exhaustive(), |t, v| {
        let img = t.constant(image.clone());
        let (grid, global) = backbone::extract_features(t, v, img, &cfg).map_err(contract)?;
        let seq = backbone::tokenize(t, v, grid, global, 3).map_err(contract)?;
        probe(t, seq.tokens)
    })
}

pub fn encoder_block_probe() -> f64 {
    let cfg = small_encoder();
    let mut store = ParamStore::new();
    encoder::init(&mut store, "blk", &cfg, 4, 5);
    jitter(&mut store, 0.1, 6);
    store.insert("x", random(&[4, 4], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(7)));
    let adj = ring_adjacency(4);
    max_error(&store, &exhaustive(), |t, v| {
        let p = BlockVars::lookup(v, "blk.0").map_err(contract)?;
        let y = encoder::encoder_block(t, v.get("x")?, &adj, &p, cfg.heads, cfg.ln_eps).map_err(contract)?;
        probe(t, y)
    })
}

pub fn dual_encode_probe() -> f64 {
    let cfg = small_encoder();
    let mut store = ParamStore::new();
    encoder::init(&mut store, encoder::ENCODER_A, &cfg, 4, 8);
    encoder::init(&mut store, encoder::ENCODER_B, &cfg, 4, 9);
    jitter(&mut store, 0.1, 10);
    store.insert("x", random(&[16, 4], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(11)));
    let adj = ring_adjacency(16);
    max_error(&store, &exhaustive(), |t, v| {
        let seq = TokenSequence {
            tokens: v.get("x")?,
            n_image: 4,
            n_joint: 2,
            n_vertex: 10,
        };
        let out = encoder::dual_encode(t, &seq, &adj, v, &cfg).map_err(contract)?;
        probe(t, out.fused)
    })
}

pub fn tarm_probe() -> f64 {
    let mut store = ParamStore::new();
    simu::init_tarm(&mut store, 4, 12);
    jitter(&mut store, 0.2, 13);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for i in 0..3 {
        store.insert(format!("path{i}"), random(&[5, 4], -1.0, 1.0, &mut rng));
    }
    max_error(&store, &exhaustive(), |t, v| {
        let paths = [v.get("path0")?, v.get("path1")?, v.get("path2")?];
        let tarm = TarmVars::lookup(v).map_err(contract)?;
        let (fused, _) = simu::tarm_fuse(t, &paths, &tarm).map_err(contract)?;
        probe(t, fused)
    })
}

pub fn desk_template() -> MeshTemplate {
    MeshTemplate::build(&RunConfig::default().mesh).unwrap()
}

pub fn heads_probe(template: &MeshTemplate) -> f64 {
    let mut store = ParamStore::new();
    heads::init(&mut store, 4, 3, 5, 15).unwrap();
    jitter(&mut store, 0.2, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    store.insert("m", random(&[template.v_coarse(), 4], -1.0, 1.0, &mut rng));
    store.insert("grid", random(&[9, 4], -1.0, 1.0, &mut rng));
    max_error(&store, &exhaustive(), |t, v| {
        let m = v.get("m")?;
        let c = heads::contact_head(t, m, template, v.get("head.contact.weight")?, v.get("head.contact.bias")?).map_err(contract)?;
        let verts = heads::mesh_head(t, m, template, v.get("head.mesh.weight")?, v.get("head.mesh.bias")?).map_err(contract)?;
        let grid = v.get("grid")?;
        let s = heads::decoder(t, grid, v.get("decoder.sem.weight")?, v.get("decoder.sem.bias")?).map_err(contract)?;
        let b = heads::decoder(t, grid, v.get("decoder.bp.weight")?, v.get("decoder.bp.bias")?).map_err(contract)?;
        let terms = [probe(t, c)?, probe(t, verts)?, probe(t, s)?, probe(t, b)?];
        let mut acc = terms[0];
        for &x in &terms[1..] {
            acc = t.add(acc, x)?;
        }
        Ok(acc)
    })
}

pub fn losses_probe() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let mut store = ParamStore::new();
    store.insert("verts", random(&[6, 3], -2.0, 2.0, &mut rng));
    store.insert("probs_a", random(&[6], 0.05, 0.95, &mut rng));
    store.insert("probs_b", random(&[6], 0.05, 0.95, &mut rng));
    store.insert("sem", random(&[5, 4], -2.0, 2.0, &mut rng));
    store.insert("bp", random(&[5, 3], -2.0, 2.0, &mut rng));
    let gt = random(&[6, 3], -2.0, 2.0, &mut rng);
    let labels = Tensor::new([6], vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
    let sem = [Some(0), Some(3), Some(1), Some(1), Some(2)];
    let bp = [None, Some(2), Some(0), None, Some(1)];
    let cfg = LossConfig::default();
    max_error(&store, &exhaustive(), |t, v| {
        let terms = [
            heads::loss_mesh(t, v.get("verts")?, &gt).map_err(contract)?,
            heads::loss_contact(t, v.get("probs_a")?, &labels, cfg.clamp).map_err(contract)?,
            heads::loss_contact(t, v.get("probs_b")?, &labels, cfg.clamp).map_err(contract)?,
            heads::loss_segmentation(t, v.get("sem")?, &sem).map_err(contract)?,
            heads::loss_segmentation(t, v.get("bp")?, &bp).map_err(contract)?,
        ];
        heads::aggregate_vars(t, terms, &cfg).map_err(contract)
    })
}

/// Whole model at default configuration, four paths, sampled entries.
pub fn model_probe() -> f64 {
    let cfg = RunConfig::default();
    let model = Model::new(cfg.clone()).unwrap();
    let sample = SceneGenerator::new(&cfg, model.template()).unwrap().generate(21, 0).unwrap();
    let params = model.init_params(22).unwrap();
    let spec = PathSpec {
        n_paths: 4,
        seed: 3,
        epoch: 1,
        sample: 2,
    };
    let opts = GradCheckOptions {
        max_entries_per_param: Some(2),
        ..GradCheckOptions::default()
    };
    max_error(&params, &opts, |t, v| {
        let fwd = model.forward(t, v, &sample.image, &spec).map_err(contract)?;
        let (total, _) = model.loss(t, &fwd, &sample).map_err(contract)?;
        Ok(total)
    })
}

pub fn contract(e: meshcontact_core::Error) -> meshcontact_tensor::TensorError {
    meshcontact_tensor::TensorError::Contract(e.to_string())
}
