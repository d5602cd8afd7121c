//! Alternating direction method of multipliers for compression-aware
//! training: a regularized training subproblem, a closed-form projection
//! subproblem, and a scaled dual update.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::microformer::{loss_and_grads, Adam, Example, ForwardOptions, MicroModel};
use crate::project::{euclidean_project, ConstraintSet};
use crate::quantize::{QuantSpec, ScaleSolver};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::search::{EncoderConfig, LayerScheme};
use crate::ste::FakeQuantNode;

/// Live weights `w`, feasible copy `z`, scaled dual `u` and penalty `rho`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdmmLayerState<T> {
    pub w: Matrix<T>,
    pub z: Matrix<T>,
    pub u: Matrix<T>,
    rho: f64,
    constraint: ConstraintSet,
}

impl<T: Scalar> AdmmLayerState<T> {
    /// Starts from `z = Π(w)` and `u = 0`.
    pub fn new(w: Matrix<T>, rho: f64, constraint: ConstraintSet) -> Result<Self> {
        let z = euclidean_project(&w, &constraint)?.value;
        let u = Matrix::zeros(w.rows(), w.cols());
        Self::from_parts(w, z, u, rho, constraint)
    }

    pub fn from_parts(
        w: Matrix<T>,
        z: Matrix<T>,
        u: Matrix<T>,
        rho: f64,
        constraint: ConstraintSet,
    ) -> Result<Self> {
        if !(rho > 0.0 && rho.is_finite()) {
            return Err(Error::Config(format!("rho must be positive, got {rho}")));
        }
        w.ensure_shape(&z)?;
        w.ensure_shape(&u)?;
        constraint.check_cols(w.cols())?;
        Ok(Self {
            w,
            z,
            u,
            rho,
            constraint,
        })
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn constraint(&self) -> &ConstraintSet {
        &self.constraint
    }

    /// `‖w − z‖_F`.
    pub fn primal_residual(&self) -> f64 {
        self.w.frobenius_dist(&self.z).expect("state shapes agree")
    }
}

fn offset<T: Scalar>(s: &AdmmLayerState<T>) -> impl Iterator<Item = f64> + '_ {
    s.w.as_slice()
        .iter()
        .zip(s.z.as_slice())
        .zip(s.u.as_slice())
        .map(|((w, z), u)| w.as_f64() - z.as_f64() + u.as_f64())
}

/// `(ρ/2)·‖w − z + u‖²_F`.
pub fn regularizer_value<T: Scalar>(s: &AdmmLayerState<T>) -> f64 {
    0.5 * s.rho * offset(s).map(|d| d * d).sum::<f64>()
}

/// `ρ·(w − z + u)`.
pub fn regularizer_grad<T: Scalar>(s: &AdmmLayerState<T>) -> Matrix<T> {
    let data = offset(s).map(|d| T::from_f64_lossy(s.rho * d)).collect();
    Matrix::new(s.w.rows(), s.w.cols(), data).expect("finite state")
}

/// `z ← Π(w + u)`.
pub fn projection_step<T: Scalar>(s: &mut AdmmLayerState<T>) -> Result<()> {
    let target = s.w.add(&s.u)?;
    s.z = euclidean_project(&target, &s.constraint)?.value;
    Ok(())
}

/// `u ← u + w − z`.
pub fn dual_update<T: Scalar>(s: &mut AdmmLayerState<T>) {
    for ((u, w), z) in
        s.u.as_mut_slice()
            .iter_mut()
            .zip(s.w.as_slice())
            .zip(s.z.as_slice())
    {
        *u += *w - *z;
    }
}

/// How the quantization part of a scheme is enforced during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum QuantMethod {
    /// Quantization is part of the ADMM projection, using this scale solver.
    Admm(ScaleSolver),
    /// Fake quantization in the forward pass with a straight-through
    /// gradient; ADMM handles only sparsity.
    #[default]
    Ste,
}

impl FromStr for QuantMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "max" => Ok(QuantMethod::Admm(ScaleSolver::Max)),
            "dist" => Ok(QuantMethod::Admm(ScaleSolver::Dist)),
            "ste" => Ok(QuantMethod::Ste),
            _ => Err(Error::Config(format!(
                "unknown solver {s:?} (expected max, dist or ste)"
            ))),
        }
    }
}

impl fmt::Display for QuantMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QuantMethod::Admm(s) => write!(f, "{s}"),
            QuantMethod::Ste => f.write_str("ste"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdmmSchedule {
    /// Optimizer steps between projections; `None` means one epoch.
    pub steps_per_projection: Option<usize>,
    pub epochs: usize,
    pub rho: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for AdmmSchedule {
    fn default() -> Self {
        Self {
            steps_per_projection: None,
            epochs: 10,
            rho: 1e-2,
            lr: 1e-3,
            batch_size: 32,
            weight_decay: 3.0,
            seed: 0,
        }
    }
}

impl AdmmSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.steps_per_projection == Some(0) {
            return Err(Error::Config(
                "steps_per_projection must be at least 1".into(),
            ));
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::Config(format!(
                "rho must be positive, got {}",
                self.rho
            )));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(
                "learning rate and weight decay must be non-negative".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdmmOptions {
    pub method: QuantMethod,
    /// Rows per quantization scale group (0 = whole matrix).
    pub group_size: usize,
    pub forward: ForwardOptions,
}

impl Default for AdmmOptions {
    fn default() -> Self {
        Self {
            method: QuantMethod::Ste,
            group_size: 32,
            forward: ForwardOptions::default(),
        }
    }
}

/// Per-projection record.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdmmRecord {
    pub step: usize,
    /// Mean task loss over the steps since the previous projection.
    pub task_loss: f64,
    /// `sqrt(Σ ‖w − z‖²_F)` over all constrained weights, before the dual update.
    pub residual: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdmmOutcome<T> {
    pub model: MicroModel<T>,
    pub history: Vec<AdmmRecord>,
}

struct Target<T> {
    idx: usize,
    scheme: LayerScheme,
    state: Option<AdmmLayerState<T>>,
    node: Option<FakeQuantNode<T>>,
}

/// Compresses every targeted weight of `model` according to `config`.
///
/// The returned model has each targeted weight hard-projected onto its
/// scheme's constraint set; all other parameters are trained but never
/// projected. With zero epochs the result is the one-shot projection.
pub fn run_admm<T: Scalar>(
    model: &MicroModel<T>,
    config: &EncoderConfig,
    train: &[Example],
    schedule: &AdmmSchedule,
    opts: &AdmmOptions,
) -> Result<AdmmOutcome<T>> {
    schedule.validate()?;
    config.check_geometry(model.geometry())?;
    if train.is_empty() {
        return Err(Error::Empty("training set"));
    }

    let mut targets = Vec::new();
    for (_, comp, idx) in model.targets() {
        let scheme = config.get(comp);
        let Some(bits) = scheme.bits() else { continue };
        let spec = QuantSpec::new(bits, opts.group_size)?;
        let (constraint, node) = match opts.method {
            QuantMethod::Admm(solver) => (scheme.constraint(opts.group_size, solver)?, None),
            QuantMethod::Ste => (
                scheme.pattern().map(ConstraintSet::sparse),
                Some(FakeQuantNode::new(spec)),
            ),
        };
        let state = constraint
            .map(|c| AdmmLayerState::new(model.params()[idx].clone(), schedule.rho, c))
            .transpose()?;
        targets.push(Target {
            idx,
            scheme,
            state,
            node,
        });
    }

    let g = *model.geometry();
    let mut params = model.params().to_vec();
    let mut adam = Adam::new(schedule.lr).with_weight_decay(schedule.weight_decay);
    let mut rng = Rng::new(schedule.seed);
    let steps_per_epoch = train.len().div_ceil(schedule.batch_size);
    let every = schedule.steps_per_projection.unwrap_or(steps_per_epoch);
    let mut history = Vec::new();
    let (mut step, mut loss_sum, mut loss_count) = (0usize, 0.0, 0usize);

    for _ in 0..schedule.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        rng.shuffle(&mut order);
        for chunk in order.chunks(schedule.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
            let mut effective = params.clone();
            for t in targets.iter_mut() {
                if let Some(node) = t.node.as_mut() {
                    effective[t.idx] = node.forward(&params[t.idx]);
                }
            }
            let (loss, mut grads) = loss_and_grads(&g, &effective, &batch, &opts.forward);
            for t in targets.iter_mut() {
                if let Some(node) = &t.node {
                    grads[t.idx] = node.backward(&grads[t.idx], &params[t.idx])?;
                }
                if let Some(state) = t.state.as_mut() {
                    state.w = params[t.idx].clone();
                    grads[t.idx].add_assign(&regularizer_grad(state))?;
                }
            }
            adam.step(&mut params, &grads);
            step += 1;
            loss_sum += loss;
            loss_count += 1;

            if step % every == 0 {
                let residual = admm_round(&mut targets, &params)?;
                history.push(AdmmRecord {
                    step,
                    task_loss: loss_sum / loss_count as f64,
                    residual,
                });
                loss_sum = 0.0;
                loss_count = 0;
            }
        }
    }

    for t in &targets {
        let w = match &t.state {
            Some(state) => state.z.clone(),
            None => params[t.idx].clone(),
        };
        params[t.idx] = match opts.method {
            QuantMethod::Admm(_) => w,
            QuantMethod::Ste => {
                let cs = t
                    .scheme
                    .constraint(opts.group_size, ScaleSolver::Max)?
                    .expect("targets are quantized");
                euclidean_project(&w, &cs)?.value
            }
        };
    }
    Ok(AdmmOutcome {
        model: MicroModel::from_params(g, params)?,
        history,
    })
}

/// Projection and dual update on every constrained weight. Returns the
/// combined primal residual measured after the projection.
fn admm_round<T: Scalar>(targets: &mut [Target<T>], params: &[Matrix<T>]) -> Result<f64> {
    let results: Vec<Result<f64>> = targets
        .par_iter_mut()
        .filter_map(|t| t.state.as_mut().map(|s| (t.idx, s)))
        .map(|(idx, state)| {
            state.w = params[idx].clone();
            projection_step(state)?;
            let r = state.primal_residual();
            dual_update(state);
            Ok(r * r)
        })
        .collect();
    let mut total = 0.0;
    for r in results {
        total += r?;
    }
    Ok(total.sqrt())
}
