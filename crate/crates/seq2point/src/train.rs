//! Minibatch SGD with momentum over the autodiff graph.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use nilm_core::preprocess::WindowBatch;

use crate::model::{snap_f32, S2PModel};
use crate::S2pError;

#[derive(Debug, Clone, PartialEq)]
pub struct S2PTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for S2PTrainConfig {
    fn default() -> Self {
        Self { epochs: 10, batch_size: 16, learning_rate: 1e-3, momentum: 0.9, seed: 0 }
    }
}

/// Trains in place; returns the mean training loss per epoch. Batch
/// order reshuffles every epoch from the config seed, so identical
/// inputs produce identical models.
pub fn train(
    model: &mut S2PModel,
    windows: &[WindowBatch],
    labels: &[Vec<f64>],
    config: &S2PTrainConfig,
) -> Result<Vec<f64>, S2pError> {
    if windows.is_empty() {
        return Err(S2pError::InvalidInput("empty training set".into()));
    }
    if windows.len() != labels.len() {
        return Err(S2pError::ShapeMismatch("labels/windows length mismatch".into()));
    }
    if config.batch_size == 0 {
        return Err(S2pError::InvalidInput("batch size must be positive".into()));
    }
    for y in labels {
        if y.len() != model.targets.len() {
            return Err(S2pError::ShapeMismatch("label width does not match targets".into()));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut velocity: Vec<Vec<f64>> =
        model.params().iter().map(|(_, p)| vec![0.0; p.values.len()]).collect();
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);

    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let bw: Vec<WindowBatch> = chunk.iter().map(|&i| windows[i].clone()).collect();
            let by: Vec<Vec<f64>> = chunk.iter().map(|&i| labels[i].clone()).collect();
            let (loss, grads) = model.loss_and_grads(&bw, &by)?;
            epoch_loss += loss;
            batches += 1;
            for (slot, ((_, grad), vel)) in
                grads.iter().zip(velocity.iter_mut()).enumerate()
            {
                let param = &mut model.params_mut()[slot].1;
                for ((v, &g), w) in vel.iter_mut().zip(grad).zip(param.values.iter_mut()) {
                    *v = config.momentum * *v - config.learning_rate * g;
                    *w += *v;
                }
                snap_f32(&mut param.values);
            }
        }
        history.push(epoch_loss / batches as f64);
    }
    Ok(history)
}
