//! Full forward pass: backbone, multi-path dual encoding, routing and heads.

use meshcontact_tensor::{ParamStore, ParamVars, SparseMatrix, Tape, Tensor, Var};

use crate::backbone::{self, TokenSequence};
use crate::config::{ClsMode, PerturbLevel, RunConfig};
use crate::encoder::{self, DualOutput};
use crate::error::{Error, Result};
use crate::heads::{self, head_vars};
use crate::mesh::MeshTemplate;
use crate::scenes::Sample;
use crate::simu::{self, path_kinds, path_rng, PerturbPlan, TarmVars};

/// Where a forward pass draws its perturbations from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PathSpec {
    pub n_paths: usize,
    pub seed: u64,
    pub epoch: u64,
    pub sample: u64,
}

impl PathSpec {
    /// Single unperturbed path, as used at inference.
    pub fn single() -> Self {
        Self {
            n_paths: 1,
            seed: 0,
            epoch: 0,
            sample: 0,
        }
    }
}

/// Handles to every model output on the tape.
#[derive(Debug, Clone)]
pub struct Forward {
    /// Contact probabilities `[V_full]` from the routed, fused features.
    pub probs: Var,
    pub probs_a: Var,
    pub probs_b: Var,
    pub vertices: Var,
    pub sem_logits: Var,
    pub bp_logits: Var,
    /// Routing weights `[V_coarse, N]`.
    pub alpha: Var,
    pub paths: Vec<DualOutput>,
}

pub struct Model {
    cfg: RunConfig,
    template: MeshTemplate,
    adjacency: SparseMatrix,
    n_image: usize,
}

impl Model {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        let template = MeshTemplate::build(&cfg.mesh)?;
        Self::with_template(cfg, template)
    }

    pub fn with_template(cfg: RunConfig, template: MeshTemplate) -> Result<Self> {
        cfg.validate()?;
        if template.v_full() != cfg.mesh.v_full || template.v_coarse() != cfg.mesh.v_coarse || template.joints() != cfg.mesh.joints {
            return Err(Error::Config(format!(
                "template extents ({}, {}, {}) do not match mesh config ({}, {}, {})",
                template.v_full(),
                template.v_coarse(),
                template.joints(),
                cfg.mesh.v_full,
                cfg.mesh.v_coarse,
                cfg.mesh.joints
            )));
        }
        let n_image = cfg.backbone.grid_cells()?;
        let adjacency = SparseMatrix::from_dense(&encoder::token_adjacency(&template, n_image, template.joints()))?;
        Ok(Self {
            cfg,
            template,
            adjacency,
            n_image,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn template(&self) -> &MeshTemplate {
        &self.template
    }

    pub fn token_count(&self) -> usize {
        self.adjacency.rows()
    }

    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        let c = &self.cfg;
        let d = c.backbone.d_tok;
        let mut store = ParamStore::new();
        backbone::init(&mut store, &c.backbone, self.template.joints(), self.template.v_coarse(), seed)?;
        encoder::init(&mut store, encoder::ENCODER_A, &c.encoder, d, seed);
        encoder::init(&mut store, encoder::ENCODER_B, &c.encoder, d, seed);
        simu::init_tarm(&mut store, d, seed);
        heads::init(&mut store, d, c.scene.sem_classes, c.scene.bp_classes, seed)?;
        Ok(store)
    }

    /// Checks that `params` has exactly the tensors this configuration expects.
    pub fn check_params(&self, params: &ParamStore) -> Result<()> {
        let expected = self.init_params(0)?;
        let mut problems = Vec::new();
        for (name, t) in expected.iter() {
            match params.get(name) {
                Ok(p) if p.shape() == t.shape() => {}
                Ok(p) => problems.push(format!("{name}: expected {:?}, found {:?}", t.shape(), p.shape())),
                Err(_) => problems.push(format!("{name}: missing")),
            }
        }
        for name in params.names() {
            if !expected.contains(name) {
                problems.push(format!("{name}: unexpected"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Load(format!("parameters do not match configuration: {}", problems.join("; "))))
        }
    }

    fn tokens(&self, tape: &mut Tape, pv: &ParamVars, image: &Tensor) -> Result<(Var, TokenSequence)> {
        let img = tape.constant(image.clone());
        let (grid, global) = backbone::extract_features(tape, pv, img, &self.cfg.backbone)?;
        let seq = backbone::tokenize(tape, pv, grid, global, self.template.v_coarse())?;
        debug_assert_eq!(seq.n_image, self.n_image);
        Ok((grid, seq))
    }

    pub fn forward(&self, tape: &mut Tape, pv: &ParamVars, image: &Tensor, spec: &PathSpec) -> Result<Forward> {
        let kinds = path_kinds(spec.n_paths)?;
        let simu_cfg = &self.cfg.simu;

        let (grid, base) = self.tokens(tape, pv, image)?;
        let mut paths = Vec::with_capacity(kinds.len());
        for (i, &kind) in kinds.iter().enumerate() {
            let mut rng = path_rng(spec.seed, spec.epoch, spec.sample, i as u64);
            let seq = match simu_cfg.level {
                PerturbLevel::Feature => {
                    let (rows, width) = (base.len(), self.cfg.backbone.d_tok);
                    let plan = PerturbPlan::draw(kind, rows, width, simu_cfg, &mut rng);
                    base.with_tokens(plan.apply(tape, base.tokens)?)
                }
                PerturbLevel::Image if i == 0 => base,
                PerturbLevel::Image => {
                    let patch = self.cfg.backbone.image_size / self.cfg.backbone.grid_side()?;
                    let perturbed = simu::perturb_image(image, patch, kind, simu_cfg, &mut rng)?;
                    self.tokens(tape, pv, &perturbed)?.1
                }
            };
            paths.push(encoder::dual_encode(tape, &seq, &self.adjacency, pv, &self.cfg.encoder)?);
        }

        let fused: Vec<Var> = paths.iter().map(|p| p.fused).collect();
        let alpha = if simu_cfg.tarm {
            simu::tarm_weights(tape, &fused, &TarmVars::lookup(pv)?)?
        } else {
            simu::uniform_weights(tape, &fused)?
        };
        let m_hat = simu::weighted_sum(tape, alpha, &fused)?;

        let [cw, cb, mw, mb, sw, sb, bw, bb] = head_vars(pv)?;
        let v = self.template.v_full();
        let contact = |tape: &mut Tape, m: Var| -> Result<Var> {
            let p = heads::contact_head(tape, m, &self.template, cw, cb)?;
            Ok(tape.reshape(p, &[v])?)
        };
        let probs = contact(tape, m_hat)?;
        let (probs_a, probs_b) = match self.cfg.loss.cls_mode {
            ClsMode::PerEncoder => {
                let ma: Vec<Var> = paths.iter().map(|p| p.m_a).collect();
                let mb: Vec<Var> = paths.iter().map(|p| p.m_b).collect();
                let ma = simu::weighted_sum(tape, alpha, &ma)?;
                let mb = simu::weighted_sum(tape, alpha, &mb)?;
                (contact(tape, ma)?, contact(tape, mb)?)
            }
            ClsMode::Fused => (probs, probs),
        };
        let vertices = heads::mesh_head(tape, m_hat, &self.template, mw, mb)?;
        let sem_logits = heads::decoder(tape, grid, sw, sb)?;
        let bp_logits = heads::decoder(tape, grid, bw, bb)?;
        Ok(Forward {
            probs,
            probs_a,
            probs_b,
            vertices,
            sem_logits,
            bp_logits,
            alpha,
            paths,
        })
    }

    /// Loss terms `[L_m, L_cls_A, L_cls_B, L_sem, L_bp]` and their weighted total.
    pub fn loss(&self, tape: &mut Tape, fwd: &Forward, sample: &Sample) -> Result<(Var, [Var; 5])> {
        let lc = &self.cfg.loss;
        let l_m = heads::loss_mesh(tape, fwd.vertices, &sample.vertices)?;
        let (l_a, l_b) = match lc.cls_mode {
            ClsMode::PerEncoder => (
                heads::loss_contact(tape, fwd.probs_a, &sample.contacts, lc.clamp)?,
                heads::loss_contact(tape, fwd.probs_b, &sample.contacts, lc.clamp)?,
            ),
            ClsMode::Fused => (
                heads::loss_contact(tape, fwd.probs, &sample.contacts, lc.clamp)?,
                tape.constant(Tensor::scalar(0.0)),
            ),
        };
        let sem: Vec<Option<usize>> = sample.sem_grid.iter().map(|&c| Some(c)).collect();
        let l_sem = heads::loss_segmentation(tape, fwd.sem_logits, &sem)?;
        let l_bp = heads::loss_segmentation(tape, fwd.bp_logits, &sample.bp_grid)?;
        let terms = [l_m, l_a, l_b, l_sem, l_bp];
        Ok((heads::aggregate_vars(tape, terms, lc)?, terms))
    }

    /// Single-path prediction; probabilities lie strictly inside (0, 1).
    pub fn predict(&self, params: &ParamStore, image: &Tensor) -> Result<Prediction> {
        let mut tape = Tape::new();
        let pv = params.register_frozen(&mut tape);
        let fwd = self.forward(&mut tape, &pv, image, &PathSpec::single())?;
        Ok(Prediction {
            probs: tape
                .value(fwd.probs)
                .data()
                .iter()
                .map(|p| p.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0))
                .collect(),
            vertices: tape.value(fwd.vertices).clone(),
        })
    }
}

/// Inference outputs for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probs: Vec<f64>,
    pub vertices: Tensor,
}

impl Prediction {
    /// Vertices with probability at least `threshold`.
    pub fn contact_set(&self, threshold: f64) -> Vec<usize> {
        self.probs
            .iter()
            .enumerate()
            .filter(|(_, &p)| p >= threshold)
            .map(|(i, _)| i)
            .collect()
    }
}
