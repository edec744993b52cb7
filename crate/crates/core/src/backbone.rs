//! Strided convolution stack and tokenizer.

use std::ops::Range;

use meshcontact_tensor::{ParamStore, ParamVars, Tape, Tensor, Var};

use crate::config::BackboneConfig;
use crate::error::{Error, Result};
use crate::nn::{linear, stream, tag, Init};

/// Token features laid out as `[image | joints | vertices]`.
#[derive(Debug, Clone, Copy)]
pub struct TokenSequence {
    pub tokens: Var,
    pub n_image: usize,
    pub n_joint: usize,
    pub n_vertex: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.n_image + self.n_joint + self.n_vertex
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image_range(&self) -> Range<usize> {
        0..self.n_image
    }

    pub fn joint_range(&self) -> Range<usize> {
        self.n_image..self.n_image + self.n_joint
    }

    pub fn vertex_range(&self) -> Range<usize> {
        self.n_image + self.n_joint..self.len()
    }

    pub fn with_tokens(self, tokens: Var) -> Self {
        Self { tokens, ..self }
    }
}

pub fn init(store: &mut ParamStore, cfg: &BackboneConfig, joints: usize, v_coarse: usize, seed: u64) -> Result<()> {
    let [c1, c2] = cfg.channels;
    let (k, d) = (cfg.kernel, cfg.d_tok);
    let g = cfg.grid_cells()?;
    let mut init = Init {
        store,
        rng: stream(seed, &[tag("backbone")]),
    };
    init.weight("backbone.conv1.weight", &[c1, 3, k, k], 3 * k * k);
    init.fill("backbone.conv1.bias", &[c1], 0.0);
    init.weight("backbone.conv2.weight", &[c2, c1, k, k], c1 * k * k);
    init.fill("backbone.conv2.bias", &[c2], 0.0);
    init.weight("backbone.grid_proj.weight", &[c2, d], c2);
    init.fill("backbone.grid_proj.bias", &[d], 0.0);
    init.weight("backbone.global_proj.weight", &[d, d], d);
    init.fill("backbone.global_proj.bias", &[d], 0.0);
    init.weight("tokens.pos", &[g, d], d);
    init.weight("tokens.joint_embed", &[joints, d], d);
    init.weight("tokens.vertex_embed", &[v_coarse, d], d);
    init.weight("tokens.query_proj.weight", &[2 * d, d], 2 * d);
    init.fill("tokens.query_proj.bias", &[d], 0.0);
    Ok(())
}

/// Returns `(grid tokens [G, D], global vector [1, D])`.
pub fn extract_features(tape: &mut Tape, pv: &ParamVars, image: Var, cfg: &BackboneConfig) -> Result<(Var, Var)> {
    let s = cfg.image_size;
    if tape.shape(image) != [3, s, s] {
        return Err(Error::Config(format!(
            "image extents {:?} do not match backbone.image_size {s}",
            tape.shape(image)
        )));
    }
    let side = cfg.grid_side()?;
    let h = tape.conv2d(image, pv.get("backbone.conv1.weight")?, pv.get("backbone.conv1.bias")?, cfg.stride)?;
    let h = tape.gelu(h);
    let h = tape.conv2d(h, pv.get("backbone.conv2.weight")?, pv.get("backbone.conv2.bias")?, cfg.stride)?;
    let h = tape.reshape(h, &[cfg.channels[1], side * side])?;
    let h = tape.transpose(h)?;
    let grid = linear(tape, h, pv.get("backbone.grid_proj.weight")?, pv.get("backbone.grid_proj.bias")?)?;
    let pooled = tape.mean_axis(grid, 0)?;
    let pooled = tape.reshape(pooled, &[1, cfg.d_tok])?;
    let global = linear(tape, pooled, pv.get("backbone.global_proj.weight")?, pv.get("backbone.global_proj.bias")?)?;
    Ok((grid, global))
}

pub fn tokenize(tape: &mut Tape, pv: &ParamVars, grid: Var, global: Var, v_coarse: usize) -> Result<TokenSequence> {
    let pos = pv.get("tokens.pos")?;
    let joint = pv.get("tokens.joint_embed")?;
    let vertex = pv.get("tokens.vertex_embed")?;
    let (n_image, d) = (tape.shape(grid)[0], tape.shape(grid)[1]);
    if tape.shape(vertex)[0] != v_coarse {
        return Err(Error::Config(format!(
            "vertex query count {} does not match template coarse count {v_coarse}",
            tape.shape(vertex)[0]
        )));
    }
    let n_joint = tape.shape(joint)[0];
    let image_tokens = tape.add(grid, pos)?;
    let queries = tape.concat(&[joint, vertex], 0)?;
    let nq = n_joint + v_coarse;
    let ones = tape.constant(Tensor::ones([nq, 1]));
    let g = tape.mul(ones, global)?;
    let q = tape.concat(&[queries, g], 1)?;
    let q = linear(tape, q, pv.get("tokens.query_proj.weight")?, pv.get("tokens.query_proj.bias")?)?;
    let tokens = tape.concat(&[image_tokens, q], 0)?;
    debug_assert_eq!(tape.shape(tokens), [n_image + nq, d]);
    Ok(TokenSequence {
        tokens,
        n_image,
        n_joint,
        n_vertex: v_coarse,
    })
}
