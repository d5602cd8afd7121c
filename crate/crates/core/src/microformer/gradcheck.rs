//! Central finite-difference checks of the analytic gradients.

use super::data::Example;
use super::forward::{loss_and_grads, ForwardOptions};
use super::MicroModel;
use crate::matrix::Matrix;
use crate::quantize::QuantSpec;
use crate::rng::Rng;
use crate::ste::FakeQuantNode;

const STEP: f64 = 1e-5;
const FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct GradMismatch {
    pub name: String,
    pub offset: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub worst_relative: f64,
    pub failures: Vec<GradMismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.failures.is_empty()
    }

    fn record(&mut self, name: &str, offset: usize, analytic: f64, numeric: f64, tol: f64) {
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR);
        self.checked += 1;
        self.worst_relative = self.worst_relative.max(rel);
        if rel > tol {
            self.failures.push(GradMismatch {
                name: name.to_string(),
                offset,
                analytic,
                numeric,
            });
        }
    }
}

fn batch_loss(model: &MicroModel<f64>, params: &[Matrix<f64>], batch: &[&Example]) -> f64 {
    loss_and_grads(model.geometry(), params, batch, &ForwardOptions::default()).0
}

fn central_difference(
    model: &MicroModel<f64>,
    params: &mut [Matrix<f64>],
    batch: &[&Example],
    p: usize,
    i: usize,
) -> f64 {
    let x = params[p].as_slice()[i];
    params[p].as_mut_slice()[i] = x + STEP;
    let up = batch_loss(model, params, batch);
    params[p].as_mut_slice()[i] = x - STEP;
    let down = batch_loss(model, params, batch);
    params[p].as_mut_slice()[i] = x;
    (up - down) / (2.0 * STEP)
}

/// Compares `loss_and_grads` with central differences on `coords` parameter
/// entries drawn uniformly over all weights.
pub fn check_gradients(
    model: &MicroModel<f64>,
    batch: &[Example],
    coords: usize,
    tol: f64,
    rng: &mut Rng,
) -> GradCheckReport {
    let refs: Vec<&Example> = batch.iter().collect();
    let (_, grads) = loss_and_grads(
        model.geometry(),
        model.params(),
        &refs,
        &ForwardOptions::default(),
    );
    let names = model.names();
    let sizes: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut params = model.params().to_vec();
    let mut report = GradCheckReport::default();
    for _ in 0..coords {
        let mut k = rng.below(total);
        let mut p = 0;
        while k >= sizes[p] {
            k -= sizes[p];
            p += 1;
        }
        let numeric = central_difference(model, &mut params, &refs, p, k);
        report.record(&names[p], k, grads[p].as_slice()[k], numeric, tol);
    }
    report
}

/// Gradient check through weight fake-quant nodes on every compressible
/// matrix.
///
/// The loss is evaluated at the fake-quantized weights. For entries at least
/// `0.01·s` away from a rounding boundary the integer codes do not move under
/// small perturbations of the latent weight, so the straight-through gradient
/// is compared with central differences taken with respect to the dequantized
/// weight it passes through.
pub fn check_ste_gradients(
    model: &MicroModel<f64>,
    batch: &[Example],
    spec: QuantSpec,
    coords: usize,
    tol: f64,
    rng: &mut Rng,
) -> GradCheckReport {
    let refs: Vec<&Example> = batch.iter().collect();
    let targets = model.targets();
    let mut params = model.params().to_vec();
    let mut nodes = Vec::with_capacity(targets.len());
    for &(_, _, idx) in &targets {
        let mut node = FakeQuantNode::new(spec);
        params[idx] = node.forward(&model.params()[idx]);
        nodes.push(node);
    }
    let (_, grads) = loss_and_grads(model.geometry(), &params, &refs, &ForwardOptions::default());
    let ste: Vec<Matrix<f64>> = targets
        .iter()
        .zip(&nodes)
        .map(|(&(_, _, idx), node)| {
            node.backward(&grads[idx], &model.params()[idx])
                .expect("forward ran")
        })
        .collect();

    let names = model.names();
    let mut report = GradCheckReport::default();
    let mut attempts = 0;
    while report.checked < coords && attempts < coords * 100 {
        attempts += 1;
        let t = rng.below(targets.len());
        let idx = targets[t].2;
        let w = &model.params()[idx];
        let i = rng.below(w.len());
        let cols = w.cols();
        let group = spec
            .row_groups(w.rows())
            .iter()
            .position(|r| r.contains(&(i / cols)))
            .expect("row in a group");
        let s = nodes[t].scales()[group];
        let u = w.as_slice()[i] / s;
        if (u - u.floor() - 0.5).abs() < 0.01 {
            continue;
        }
        let numeric = central_difference(model, &mut params, &refs, idx, i);
        report.record(&names[idx], i, ste[t].as_slice()[i], numeric, tol);
    }
    report
}
