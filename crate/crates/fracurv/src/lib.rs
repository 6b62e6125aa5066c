//! Random self-similar code-tree fractals in the plane and Monte-Carlo
//! estimators for the mean curvature functionals of their parallel sets.

pub mod codetree;
pub mod meanlimits;
pub mod rasterlab;
pub mod rng;
pub mod simgeom;
pub mod spectrum;
