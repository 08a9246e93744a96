pub mod cocycle;
pub mod conformal;
pub mod dynamics;
pub mod error;
pub mod linalg;
pub mod lyapnorm;
mod par;
pub mod reduction;
pub mod splitting;
