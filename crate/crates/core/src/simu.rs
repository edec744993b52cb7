//! Multi-path perturbation and token-wise adaptive routing.

use std::fmt;
use std::str::FromStr;

use meshcontact_tensor::{ParamStore, ParamVars, Tape, Tensor, TensorError, Var};
use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::SimuConfig;
use crate::error::{Error, Result};
use crate::nn::{linear, stream, tag, Init};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PerturbKind {
    Identity,
    SpatialDropout,
    EmbeddingNoise,
    TokenMasking,
}

impl PerturbKind {
    /// Path `i` (0-based) uses the `i`-th kind.
    pub const ORDER: [PerturbKind; 4] = [
        PerturbKind::Identity,
        PerturbKind::SpatialDropout,
        PerturbKind::EmbeddingNoise,
        PerturbKind::TokenMasking,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PerturbKind::Identity => "identity",
            PerturbKind::SpatialDropout => "spatial_dropout",
            PerturbKind::EmbeddingNoise => "embedding_noise",
            PerturbKind::TokenMasking => "token_masking",
        }
    }
}

impl fmt::Display for PerturbKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PerturbKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ORDER
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown perturbation kind `{s}`")))
    }
}

/// A perturbation realized as `y = x ⊙ row_scale + offset` over `rows × width` units.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbPlan {
    pub row_scale: Option<Vec<f64>>,
    pub offset: Option<Vec<f64>>,
}

impl PerturbPlan {
    pub fn identity() -> Self {
        Self {
            row_scale: None,
            offset: None,
        }
    }

    pub fn draw(kind: PerturbKind, rows: usize, width: usize, cfg: &SimuConfig, rng: &mut ChaCha8Rng) -> Self {
        match kind {
            PerturbKind::Identity => Self::identity(),
            PerturbKind::SpatialDropout => {
                let p = cfg.dropout;
                if p == 0.0 {
                    return Self::identity();
                }
                let keep = 1.0 / (1.0 - p);
                let scale = (0..rows)
                    .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
                    .collect();
                Self {
                    row_scale: Some(scale),
                    offset: None,
                }
            }
            PerturbKind::EmbeddingNoise => {
                if cfg.noise_sigma == 0.0 {
                    return Self::identity();
                }
                let normal = Normal::new(0.0, cfg.noise_sigma).expect("sigma validated");
                Self {
                    row_scale: None,
                    offset: Some((0..rows * width).map(|_| normal.sample(rng)).collect()),
                }
            }
            PerturbKind::TokenMasking => {
                let count = (cfg.mask_ratio * rows as f64).ceil() as usize;
                if count == 0 {
                    return Self::identity();
                }
                let mut scale = vec![1.0; rows];
                let mut offset = vec![0.0; rows * width];
                for r in index::sample(rng, rows, count.min(rows)) {
                    scale[r] = 0.0;
                    offset[r * width..(r + 1) * width].fill(cfg.mask_value);
                }
                Self {
                    row_scale: Some(scale),
                    offset: Some(offset),
                }
            }
        }
    }

    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let rows = tape.shape(x)[0];
        let mut y = x;
        if let Some(s) = &self.row_scale {
            let c = tape.constant(Tensor::new([rows, 1], s.clone())?);
            y = tape.mul(y, c)?;
        }
        if let Some(o) = &self.offset {
            let c = tape.constant(Tensor::new(tape.shape(x).to_vec(), o.clone())?);
            y = tape.add(y, c)?;
        }
        Ok(y)
    }

    pub fn apply_tensor(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let y = self.apply(&mut tape, v)?;
        Ok(tape.value(y).clone())
    }
}

/// Feature-level perturbation of a `[T, D]` token matrix.
pub fn perturb(tape: &mut Tape, x: Var, kind: PerturbKind, cfg: &SimuConfig, rng: &mut ChaCha8Rng) -> Result<Var> {
    let (rows, width) = (tape.shape(x)[0], tape.shape(x)[1]);
    PerturbPlan::draw(kind, rows, width, cfg, rng).apply(tape, x)
}

/// Image-level perturbation treating each `patch × patch` block as one unit.
pub fn perturb_image(image: &Tensor, patch: usize, kind: PerturbKind, cfg: &SimuConfig, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let [c, h, w] = image.shape() else {
        return Err(Error::Contract(format!("image must be [C, H, W], got {:?}", image.shape())));
    };
    let (c, h, w) = (*c, *h, *w);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Config(format!("patch size {patch} does not tile a {h}x{w} image")));
    }
    let (ph, pw) = (h / patch, w / patch);
    let units = ph * pw;
    let width = c * patch * patch;
    let plan = PerturbPlan::draw(kind, units, width, cfg, rng);
    // Gather pixels into unit-major order, perturb, scatter back.
    let unit_of = |ci: usize, y: usize, x: usize| -> (usize, usize) {
        let u = (y / patch) * pw + x / patch;
        let k = (ci * patch + y % patch) * patch + x % patch;
        (u, k)
    };
    let mut rows = vec![0.0; units * width];
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let (u, k) = unit_of(ci, y, x);
                rows[u * width + k] = image.data()[(ci * h + y) * w + x];
            }
        }
    }
    let out_rows = plan.apply_tensor(&Tensor::new([units, width], rows)?)?;
    let mut out = vec![0.0; c * h * w];
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let (u, k) = unit_of(ci, y, x);
                out[(ci * h + y) * w + x] = out_rows.data()[u * width + k];
            }
        }
    }
    Ok(Tensor::new([c, h, w], out)?)
}

/// RNG for path `path` of sample `sample` in epoch `epoch`.
pub fn path_rng(seed: u64, epoch: u64, sample: u64, path: u64) -> ChaCha8Rng {
    stream(seed, &[tag("simu"), epoch, sample, path])
}

/// Per-path kinds for `n` paths.
pub fn path_kinds(n: usize) -> Result<&'static [PerturbKind]> {
    if n == 0 || n > PerturbKind::ORDER.len() {
        return Err(Error::Contract(format!("path count must lie in 1..=4, got {n}")));
    }
    Ok(&PerturbKind::ORDER[..n])
}

/// Score transform applied before the routing vector.
#[derive(Debug, Clone, Copy)]
pub enum Phi {
    Identity,
    Dense { weight: Var, bias: Var },
}

#[derive(Debug, Clone, Copy)]
pub struct TarmVars {
    pub phi: Phi,
    /// Routing vector `[D_phi, 1]`.
    pub w: Var,
}

impl TarmVars {
    pub fn lookup(pv: &ParamVars) -> Result<Self> {
        Ok(Self {
            phi: Phi::Dense {
                weight: pv.get("tarm.phi.weight")?,
                bias: pv.get("tarm.phi.bias")?,
            },
            w: pv.get("tarm.w")?,
        })
    }
}

pub fn init_tarm(store: &mut ParamStore, d: usize, seed: u64) {
    let mut init = Init {
        store,
        rng: stream(seed, &[tag("tarm")]),
    };
    init.weight("tarm.phi.weight", &[d, d], d);
    init.fill("tarm.phi.bias", &[d], 0.0);
    init.weight("tarm.w", &[d, 1], d);
}

fn check_paths(tape: &Tape, paths: &[Var]) -> Result<()> {
    let Some(&first) = paths.first() else {
        return Err(Error::Contract("at least one path is required".into()));
    };
    for &p in &paths[1..] {
        if tape.shape(p) != tape.shape(first) {
            return Err(Error::Tensor(TensorError::Shape {
                op: "tarm_fuse",
                lhs: tape.shape(first).to_vec(),
                rhs: tape.shape(p).to_vec(),
            }));
        }
    }
    Ok(())
}

/// `Σ_i α[:, i] ⊙ paths[i]`.
pub fn weighted_sum(tape: &mut Tape, alpha: Var, paths: &[Var]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (i, &m) in paths.iter().enumerate() {
        let a = tape.slice(alpha, 1, i, 1)?;
        let term = tape.mul(a, m)?;
        acc = Some(match acc {
            None => term,
            Some(s) => tape.add(s, term)?,
        });
    }
    Ok(acc.expect("paths non-empty"))
}

/// Attention weights `α [V, N]` from per-vertex path scores.
pub fn tarm_weights(tape: &mut Tape, paths: &[Var], tarm: &TarmVars) -> Result<Var> {
    check_paths(tape, paths)?;
    let mut scores = Vec::with_capacity(paths.len());
    for &m in paths {
        let h = match tarm.phi {
            Phi::Identity => m,
            Phi::Dense { weight, bias } => {
                let z = linear(tape, m, weight, bias)?;
                tape.gelu(z)
            }
        };
        scores.push(tape.matmul(h, tarm.w)?);
    }
    let s = if scores.len() == 1 { scores[0] } else { tape.concat(&scores, 1)? };
    Ok(tape.softmax(s, 1)?)
}

/// Fused features and routing weights.
pub fn tarm_fuse(tape: &mut Tape, paths: &[Var], tarm: &TarmVars) -> Result<(Var, Var)> {
    let alpha = tarm_weights(tape, paths, tarm)?;
    let fused = weighted_sum(tape, alpha, paths)?;
    Ok((fused, alpha))
}

/// Plain averaging used when routing is disabled.
pub fn uniform_weights(tape: &mut Tape, paths: &[Var]) -> Result<Var> {
    check_paths(tape, paths)?;
    let v = tape.shape(paths[0])[0];
    let n = paths.len();
    Ok(tape.constant(Tensor::full([v, n], 1.0 / n as f64)))
}
