//! Interpretable 2D-3D human recognition.
//!
//! Synthetic articulated humans are rendered with exact part labels
//! ([`avatar`]); a two-branch network ([`netarch`]) embeds image cells and
//! point-cloud vertices into a shared space and is trained with a
//! temperature-scaled contrastive objective ([`trainloop`]); recognition is
//! thresholded semantic registration scored per body part ([`register`]).

pub mod avatar;
pub mod netarch;
pub mod numcore;
pub mod register;
pub mod trainloop;
