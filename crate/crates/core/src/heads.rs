//! Prediction heads, decoders and the weighted training objective.

use meshcontact_tensor::{ParamStore, ParamVars, Tape, Tensor, Var};

use crate::config::LossConfig;
use crate::error::{Error, Result};
use crate::mesh::MeshTemplate;
use crate::nn::{linear, stream, tag, Init};

pub fn init(store: &mut ParamStore, d: usize, sem_classes: usize, bp_classes: usize, seed: u64) -> Result<()> {
    for (name, c) in [("semantic", sem_classes), ("body-part", bp_classes)] {
        if c < 2 {
            return Err(Error::Config(format!("{name} decoder needs at least 2 classes, got {c}")));
        }
    }
    let mut init = Init {
        store,
        rng: stream(seed, &[tag("heads")]),
    };
    init.weight("head.contact.weight", &[d, 1], d);
    init.fill("head.contact.bias", &[1], 0.0);
    init.weight("head.mesh.weight", &[d, 3], d);
    init.fill("head.mesh.bias", &[3], 0.0);
    init.weight("decoder.sem.weight", &[d, sem_classes], d);
    init.fill("decoder.sem.bias", &[sem_classes], 0.0);
    init.weight("decoder.bp.weight", &[d, bp_classes], d);
    init.fill("decoder.bp.bias", &[bp_classes], 0.0);
    Ok(())
}

/// Per-vertex contact probabilities `[V_full, 1]` from coarse features.
pub fn contact_head(tape: &mut Tape, m: Var, template: &MeshTemplate, w: Var, b: Var) -> Result<Var> {
    let coarse = linear(tape, m, w, b)?;
    let full = template.upsample(tape, coarse)?;
    Ok(tape.sigmoid(full))
}

/// Full-mesh vertices `[V_full, 3]`: coarse offsets around the rest pose, upsampled.
pub fn mesh_head(tape: &mut Tape, m: Var, template: &MeshTemplate, w: Var, b: Var) -> Result<Var> {
    let offsets = linear(tape, m, w, b)?;
    let rest = tape.constant(template.coarse_rest());
    let coarse = tape.add(offsets, rest)?;
    template.upsample(tape, coarse)
}

/// Per-cell class logits `[G, C]`.
pub fn decoder(tape: &mut Tape, grid: Var, w: Var, b: Var) -> Result<Var> {
    linear(tape, grid, w, b)
}

/// Mean squared error over every coordinate.
pub fn loss_mesh(tape: &mut Tape, pred: Var, gt: &Tensor) -> Result<Var> {
    if tape.shape(pred) != gt.shape() {
        return Err(Error::Tensor(meshcontact_tensor::TensorError::Shape {
            op: "loss_mesh",
            lhs: tape.shape(pred).to_vec(),
            rhs: gt.shape().to_vec(),
        }));
    }
    let g = tape.constant(gt.clone());
    let diff = tape.sub(pred, g)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean(sq))
}

/// Mean binary cross-entropy with probabilities clamped to `[clamp, 1 - clamp]`.
pub fn loss_contact(tape: &mut Tape, probs: Var, labels: &Tensor, clamp: f64) -> Result<Var> {
    Ok(tape.bce_mean(probs, labels, clamp)?)
}

/// Mean cross-entropy over cells; `None` targets are ignored.
pub fn loss_segmentation(tape: &mut Tape, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
    Ok(tape.cross_entropy(logits, targets)?)
}

/// Individual objective terms.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub mesh: f64,
    pub cls_a: f64,
    pub cls_b: f64,
    pub sem: f64,
    pub bp: f64,
}

impl LossBreakdown {
    pub fn components(&self) -> [f64; 5] {
        [self.mesh, self.cls_a, self.cls_b, self.sem, self.bp]
    }

    pub fn from_components(c: [f64; 5]) -> Self {
        Self {
            mesh: c[0],
            cls_a: c[1],
            cls_b: c[2],
            sem: c[3],
            bp: c[4],
        }
    }
}

/// Weights in component order `[mesh, cls_a, cls_b, sem, bp]`.
pub fn loss_weights(cfg: &LossConfig) -> [f64; 5] {
    [cfg.w_m, cfg.w_cls[0], cfg.w_cls[1], cfg.w_sem, cfg.w_bp]
}

pub fn aggregate_losses(b: &LossBreakdown, cfg: &LossConfig) -> Result<f64> {
    let c = b.components();
    if let Some(x) = c.iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
        return Err(Error::Contract(format!("loss components must be finite and non-negative, got {x}")));
    }
    Ok(c.iter().zip(loss_weights(cfg)).map(|(x, w)| w * x).sum())
}

/// On-tape weighted sum matching [`aggregate_losses`] term for term.
pub fn aggregate_vars(tape: &mut Tape, terms: [Var; 5], cfg: &LossConfig) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (t, w) in terms.into_iter().zip(loss_weights(cfg)) {
        let s = tape.scale(t, w);
        acc = Some(match acc {
            None => s,
            Some(a) => tape.add(a, s)?,
        });
    }
    Ok(acc.expect("five terms"))
}

pub(crate) fn head_vars(pv: &ParamVars) -> Result<[Var; 8]> {
    Ok([
        pv.get("head.contact.weight")?,
        pv.get("head.contact.bias")?,
        pv.get("head.mesh.weight")?,
        pv.get("head.mesh.bias")?,
        pv.get("decoder.sem.weight")?,
        pv.get("decoder.sem.bias")?,
        pv.get("decoder.bp.weight")?,
        pv.get("decoder.bp.bias")?,
    ])
}
