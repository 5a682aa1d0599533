use std::collections::BTreeMap;

use super::data::PreparedBatch;
use super::loss::{contrastive_on_tape, detector_on_tape};
use super::TrainError;
use crate::netarch::{Bound, ModelParams, Mode, Net};
use crate::numcore::{BatchMoments, OptimizerState, Tape, Var};

/// Loss values of one batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub total: f32,
    pub contrastive: f32,
    pub detector: f32,
    pub temperature: f32,
}

/// Loss variables recorded for one batch.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub contrastive: Var,
    pub detector: Var,
}

/// Records the full training objective for `batch` on `tape`:
/// `contrastive + lambda_det · detector`.
pub fn batch_loss(tape: &mut Tape, net: &mut Net<'_>, batch: &PreparedBatch, lambda_det: f32) -> Result<LossVars, TrainError> {
    let images = tape.constant(batch.images.clone());
    let img = net.image_branch(tape, images)?;

    // Repeat the per-image global vectors to line up with the point inputs.
    let (b, cg) = (tape.shape(img.global)[0], tape.shape(img.global)[1]);
    let g3 = tape.reshape(img.global, &[b, cg, 1])?;
    let rows: Vec<(usize, usize)> = batch.pairs.iter().map(|&(s, _)| (s, 0)).collect();
    let global = tape.gather(g3, &rows)?;
    let clouds = tape.constant(batch.clouds.clone());
    let f_p = net.point_branch(tape, global, clouds)?;

    let s = tape.shape(img.semantic).to_vec();
    let f_i = tape.reshape(img.semantic, &[s[0], s[1], s[2] * s[3]])?;
    let b_p = tape.gather(f_i, &batch.layout.pixel_rows())?;
    let b_v = tape.gather(f_p, &batch.layout.vertex_rows())?;
    let gt = batch.layout.ground_truth();
    let contrastive = contrastive_on_tape(tape, b_p, b_v, &gt, net.bound.log_temperature())?;
    let detector = detector_on_tape(tape, img.detector, &batch.foreground)?;
    let weighted = tape.scale(detector, lambda_det);
    let total = tape.add(contrastive, weighted)?;
    Ok(LossVars {
        total,
        contrastive,
        detector,
    })
}

/// Gradients of the objective with respect to every parameter, by name.
pub struct Gradients {
    pub losses: StepLosses,
    pub grads: BTreeMap<String, Vec<f32>>,
    pub moments: Vec<(String, BatchMoments)>,
}

pub fn compute_gradients(params: &ModelParams, batch: &PreparedBatch, lambda_det: f32) -> Result<Gradients, TrainError> {
    let mut tape = Tape::new();
    let bound = Bound::new(params, &mut tape, true);
    let mut net = Net::new(params, &bound, Mode::Train);
    let vars = batch_loss(&mut tape, &mut net, batch, lambda_det)?;
    let moments = std::mem::take(&mut net.moments);
    let losses = StepLosses {
        total: tape.value(vars.total).item(),
        contrastive: tape.value(vars.contrastive).item(),
        detector: tape.value(vars.detector).item(),
        temperature: params.temperature(),
    };
    tape.backward(vars.total)?;
    let mut grads = BTreeMap::new();
    for name in params.params.keys() {
        let g = tape
            .grad(bound.var(name))
            .ok_or_else(|| TrainError::Data(format!("parameter `{name}` is not tracked")))?;
        grads.insert(name.clone(), g.to_vec());
    }
    Ok(Gradients { losses, grads, moments })
}

/// One optimizer update. Returns the losses evaluated before the update.
pub fn train_step(
    batch: &PreparedBatch,
    params: &mut ModelParams,
    optimizer: &mut OptimizerState,
    lambda_det: f32,
) -> Result<StepLosses, TrainError> {
    let g = compute_gradients(params, batch, lambda_det)?;
    if !g.losses.total.is_finite() {
        return Err(TrainError::Diverged(g.losses.total));
    }
    for (name, p) in params.params.iter_mut() {
        p.zero_grad();
        p.accumulate_grad(&g.grads[name])?;
    }
    optimizer.step(&mut params.params)?;
    params.update_running_stats(&g.moments);
    Ok(g.losses)
}
