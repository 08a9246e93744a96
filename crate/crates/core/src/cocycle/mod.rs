//! Cocycle generators, scaled orbit products, exponent estimates and
//! product-boundedness diagnostics.

mod exponents;
mod product;
mod spec;

pub use exponents::{
    doubling_schedule, fekete_upper, ExponentReport, HorizonBound, PeriodicExponents, Sampling,
};
pub use product::{Cocycle, ProductBounds, ScaledProduct};
pub use spec::{CocycleSpec, Generator, Rescaled, TrigPoly, DET_THRESHOLD};
