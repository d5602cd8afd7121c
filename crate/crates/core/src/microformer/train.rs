use rayon::prelude::*;

use super::data::Example;
use super::forward::{cross_entropy, logits_for, loss_and_grads, ForwardOptions};
use super::optim::Adam;
use super::{Geometry, MicroModel};
use crate::matrix::Matrix;
use crate::rng::Rng;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub forward: ForwardOptions,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 1e-3,
            batch_size: 32,
            weight_decay: 3.0,
            seed: 0,
            forward: ForwardOptions::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalStats {
    /// Mean cross-entropy.
    pub loss: f64,
    pub accuracy: f64,
}

/// Shuffled mini-batches of example indices for one epoch.
pub(crate) fn epoch_batches(n: usize, batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order
        .chunks(batch_size.max(1))
        .map(|c| c.to_vec())
        .collect()
}

/// Dense fine-tuning with Adam. Zero epochs returns the model unchanged.
pub fn train_dense<T: Scalar>(
    model: &MicroModel<T>,
    data: &[Example],
    opts: &TrainOptions,
) -> MicroModel<T> {
    let mut model = model.clone();
    if opts.epochs == 0 || data.is_empty() {
        return model;
    }
    let mut rng = Rng::new(opts.seed);
    let mut adam = Adam::new(opts.lr).with_weight_decay(opts.weight_decay);
    let g = *model.geometry();
    for _ in 0..opts.epochs {
        for batch in epoch_batches(data.len(), opts.batch_size, &mut rng) {
            let refs: Vec<&Example> = batch.iter().map(|&i| &data[i]).collect();
            let (_, grads) = loss_and_grads(&g, model.params(), &refs, &opts.forward);
            adam.step(model.params_mut(), &grads);
        }
    }
    model
}

/// Mean loss and accuracy under explicit parameters.
pub fn evaluate<T: Scalar>(
    g: &Geometry,
    params: &[Matrix<T>],
    data: &[Example],
    opts: &ForwardOptions,
) -> EvalStats {
    if data.is_empty() {
        return EvalStats {
            loss: 0.0,
            accuracy: 0.0,
        };
    }
    let per: Vec<(f64, bool)> = data
        .par_iter()
        .map(|ex| {
            let logits: Vec<f64> = logits_for(g, params, &ex.tokens, opts)
                .iter()
                .map(|v| v.as_f64())
                .collect();
            let (loss, _) = cross_entropy(&logits, ex.label);
            let pred = logits
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                .map_or(0, |(i, _)| i);
            (loss, pred == ex.label)
        })
        .collect();
    let n = data.len() as f64;
    let loss = per.iter().map(|p| p.0).sum::<f64>() / n;
    let accuracy = per.iter().filter(|p| p.1).count() as f64 / n;
    EvalStats { loss, accuracy }
}

impl<T: Scalar> MicroModel<T> {
    pub fn evaluate(&self, data: &[Example]) -> EvalStats {
        evaluate(
            self.geometry(),
            self.params(),
            data,
            &ForwardOptions::default(),
        )
    }
}
