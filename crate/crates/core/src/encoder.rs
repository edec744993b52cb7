//! Graph-transformer encoder blocks and the fixed-weight dual-encoder fusion.

use meshcontact_tensor::{ParamStore, ParamVars, SparseMatrix, Tape, Tensor, Var};

use crate::backbone::TokenSequence;
use crate::config::EncoderConfig;
use crate::error::{Error, Result};
use crate::mesh::MeshTemplate;
use crate::nn::{linear, stream, tag, Init};

/// Handles to one block's parameters on the active tape.
#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub wg: Var,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl BlockVars {
    pub fn lookup(pv: &ParamVars, prefix: &str) -> Result<Self> {
        let g = |s: &str| pv.get(&format!("{prefix}.{s}"));
        Ok(Self {
            ln1_gamma: g("ln1.gamma")?,
            ln1_beta: g("ln1.beta")?,
            wq: g("attn.wq")?,
            wk: g("attn.wk")?,
            wv: g("attn.wv")?,
            wo: g("attn.wo")?,
            wg: g("graph.wg")?,
            ln2_gamma: g("ln2.gamma")?,
            ln2_beta: g("ln2.beta")?,
            w1: g("mlp.w1")?,
            b1: g("mlp.b1")?,
            w2: g("mlp.w2")?,
            b2: g("mlp.b2")?,
        })
    }
}

/// Registers `depth` blocks under `{prefix}.{i}`.
pub fn init(store: &mut ParamStore, prefix: &str, cfg: &EncoderConfig, d: usize, seed: u64) {
    let mut init = Init {
        store,
        rng: stream(seed, &[tag(prefix)]),
    };
    for i in 0..cfg.depth {
        let p = format!("{prefix}.{i}");
        init.fill(&format!("{p}.ln1.gamma"), &[d], 1.0);
        init.fill(&format!("{p}.ln1.beta"), &[d], 0.0);
        for w in ["wq", "wk", "wv", "wo"] {
            init.weight(&format!("{p}.attn.{w}"), &[d, d], d);
        }
        init.weight(&format!("{p}.graph.wg"), &[d, d], d);
        init.fill(&format!("{p}.ln2.gamma"), &[d], 1.0);
        init.fill(&format!("{p}.ln2.beta"), &[d], 0.0);
        init.weight(&format!("{p}.mlp.w1"), &[d, cfg.mlp_hidden], d);
        init.fill(&format!("{p}.mlp.b1"), &[cfg.mlp_hidden], 0.0);
        init.weight(&format!("{p}.mlp.w2"), &[cfg.mlp_hidden, d], cfg.mlp_hidden);
        init.fill(&format!("{p}.mlp.b2"), &[d], 0.0);
    }
}

/// Multi-head scaled dot-product self-attention over the rows of `x`.
pub fn mhsa(tape: &mut Tape, x: Var, wq: Var, wk: Var, wv: Var, wo: Var, heads: usize) -> Result<Var> {
    let d = tape.shape(x)[1];
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Config(format!("{heads} heads do not divide token width {d}")));
    }
    let q = tape.matmul(x, wq)?;
    let k = tape.matmul(x, wk)?;
    let v = tape.matmul(x, wv)?;
    let heads_out = tape.attention(q, k, v, heads)?;
    Ok(tape.matmul(heads_out, wo)?)
}

/// `GELU(Â · H · W_g) + H`.
pub fn graph_residual(tape: &mut Tape, h: Var, adjacency: &SparseMatrix, wg: Var) -> Result<Var> {
    let t = tape.shape(h)[0];
    if adjacency.rows() != t || adjacency.cols() != t {
        return Err(Error::Tensor(meshcontact_tensor::TensorError::Shape {
            op: "graph_residual",
            lhs: vec![adjacency.rows(), adjacency.cols()],
            rhs: tape.shape(h).to_vec(),
        }));
    }
    let ah = tape.sparse_matmul(adjacency, h)?;
    let z = tape.matmul(ah, wg)?;
    let z = tape.gelu(z);
    Ok(tape.add(z, h)?)
}

/// LN → MHSA (+res) → graph residual → LN → MLP (+res).
pub fn encoder_block(tape: &mut Tape, x: Var, adjacency: &SparseMatrix, p: &BlockVars, heads: usize, eps: f64) -> Result<Var> {
    let n1 = tape.layer_norm(x, p.ln1_gamma, p.ln1_beta, eps)?;
    let att = mhsa(tape, n1, p.wq, p.wk, p.wv, p.wo, heads)?;
    let x = tape.add(x, att)?;
    let x = graph_residual(tape, x, adjacency, p.wg)?;
    let n2 = tape.layer_norm(x, p.ln2_gamma, p.ln2_beta, eps)?;
    let hidden = linear(tape, n2, p.w1, p.b1)?;
    let hidden = tape.gelu(hidden);
    let out = linear(tape, hidden, p.w2, p.b2)?;
    Ok(tape.add(x, out)?)
}

pub fn encode(tape: &mut Tape, x: Var, adjacency: &SparseMatrix, pv: &ParamVars, prefix: &str, cfg: &EncoderConfig) -> Result<Var> {
    let mut h = x;
    for i in 0..cfg.depth {
        let p = BlockVars::lookup(pv, &format!("{prefix}.{i}"))?;
        h = encoder_block(tape, h, adjacency, &p, cfg.heads, cfg.ln_eps)?;
    }
    Ok(h)
}

/// Token-graph adjacency: mesh adjacency on vertex tokens, self-loops elsewhere.
pub fn token_adjacency(template: &MeshTemplate, n_image: usize, n_joint: usize) -> Tensor {
    let vc = template.v_coarse();
    let off = n_image + n_joint;
    let t = off + vc;
    let mut a = vec![0.0; t * t];
    for i in 0..off {
        a[i * t + i] = 1.0;
    }
    let coarse = template.coarse_adjacency();
    for i in 0..vc {
        a[(off + i) * t + off..(off + i) * t + t].copy_from_slice(coarse.row(i));
    }
    Tensor::new([t, t], a).expect("positive extents")
}

/// Vertex outputs of both encoders and their fixed-weight combination.
#[derive(Debug, Clone, Copy)]
pub struct DualOutput {
    pub m_a: Var,
    pub m_b: Var,
    pub fused: Var,
}

pub const ENCODER_A: &str = "enc_a";
pub const ENCODER_B: &str = "enc_b";

pub fn dual_encode(
    tape: &mut Tape,
    tokens: &TokenSequence,
    adjacency: &SparseMatrix,
    pv: &ParamVars,
    cfg: &EncoderConfig,
) -> Result<DualOutput> {
    let t = tape.shape(tokens.tokens)[0];
    if t != tokens.len() || adjacency.rows() != t || adjacency.cols() != t {
        return Err(Error::Contract(format!(
            "token layout {}+{}+{} does not match {t} tokens / adjacency {}x{}",
            tokens.n_image,
            tokens.n_joint,
            tokens.n_vertex,
            adjacency.rows(),
            adjacency.cols()
        )));
    }
    let ha = encode(tape, tokens.tokens, adjacency, pv, ENCODER_A, cfg)?;
    let hb = encode(tape, tokens.tokens, adjacency, pv, ENCODER_B, cfg)?;
    let start = tokens.vertex_range().start;
    let m_a = tape.slice(ha, 0, start, tokens.n_vertex)?;
    let m_b = tape.slice(hb, 0, start, tokens.n_vertex)?;
    let fused = fuse(tape, m_a, m_b, cfg.fusion)?;
    Ok(DualOutput { m_a, m_b, fused })
}

/// `w[0] · a + w[1] · b`.
pub fn fuse(tape: &mut Tape, a: Var, b: Var, w: [f64; 2]) -> Result<Var> {
    let sa = tape.scale(a, w[0]);
    let sb = tape.scale(b, w[1]);
    Ok(tape.add(sa, sb)?)
}
