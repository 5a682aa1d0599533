use super::sets::GroundTruth;
use super::TrainError;
use crate::numcore::{NumError, Tape, Tensor, Var, COSINE_EPS};

/// Mean BCE of `σ(τ · cos(B_P, B_V))` against the ground truth, recorded on a
/// tape. `log_temperature` is a `[1]` variable.
pub fn contrastive_on_tape(
    tape: &mut Tape,
    b_p: Var,
    b_v: Var,
    gt: &GroundTruth,
    log_temperature: Var,
) -> Result<Var, TrainError> {
    let (r, m) = (tape.shape(b_p)[0], tape.shape(b_v)[0]);
    if (gt.rows, gt.cols) != (r, m) {
        return Err(NumError::dim(
            "contrastive_loss",
            format!("ground truth {}x{} vs features {r}x{m}", gt.rows, gt.cols),
        )
        .into());
    }
    let sim = tape.cosine_similarity(b_p, b_v, COSINE_EPS)?;
    let logits = tape.scale_exp(sim, log_temperature)?;
    Ok(tape.sigmoid_bce(logits, &gt.to_tensor())?)
}

/// Mean per-cell BCE of detector logits `[..]` against a foreground mask of
/// the same element count.
pub fn detector_on_tape(tape: &mut Tape, logits: Var, foreground: &[bool]) -> Result<Var, TrainError> {
    let shape = tape.shape(logits).to_vec();
    let n: usize = shape.iter().product();
    if n != foreground.len() {
        return Err(NumError::dim(
            "detector_loss",
            format!("logits {shape:?} vs {} mask cells", foreground.len()),
        )
        .into());
    }
    let targets = Tensor::new(shape, foreground.iter().map(|&f| f as u8 as f32).collect())?;
    Ok(tape.sigmoid_bce(logits, &targets)?)
}

pub fn contrastive_loss(b_p: &Tensor, b_v: &Tensor, gt: &GroundTruth, log_temperature: f32) -> Result<f32, TrainError> {
    let mut tape = Tape::new();
    let p = tape.constant(b_p.detached());
    let v = tape.constant(b_v.detached());
    let t = tape.constant(Tensor::scalar(log_temperature));
    let l = contrastive_on_tape(&mut tape, p, v, gt, t)?;
    Ok(tape.value(l).item())
}

pub fn detector_loss(logits: &Tensor, foreground: &[bool]) -> Result<f32, TrainError> {
    let mut tape = Tape::new();
    let z = tape.constant(logits.detached());
    let l = detector_on_tape(&mut tape, z, foreground)?;
    Ok(tape.value(l).item())
}
