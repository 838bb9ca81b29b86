//! Differentiable simulation, rendering, and rendering-invariant state prediction.

pub mod autodiff;
pub mod data;
pub mod losses;
pub mod net;
pub mod render;
pub mod sim;
pub mod tasks;
