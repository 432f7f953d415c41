//! Binary-ternary Boltzmann solver for near-vacuum data.
//!
//! The crate provides elastic collision maps, kernels, transported collision
//! operators on a phase-space grid, the a-priori constants that control them,
//! and the monotone bracket iteration that produces a global mild solution.

pub mod collision_maps;
pub mod cross_sections;
pub mod error;
pub mod estimates;
pub mod ks_solver;
pub mod operators;
pub mod phase_space;
pub mod quadrature;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Grid2 = phase_space::PhaseGrid<f64, 2>;
pub type Grid3 = phase_space::PhaseGrid<f64, 3>;
pub type Density2 = phase_space::PhaseDensity<f64, 2>;
pub type Density3 = phase_space::PhaseDensity<f64, 3>;
pub type Slice2 = phase_space::PhaseSlice<f64, 2>;
pub type Slice3 = phase_space::PhaseSlice<f64, 3>;
pub type Envelope = phase_space::Maxwellian<f64>;
pub type Kernel = cross_sections::KernelConfig<f64>;


pub type Operators2 = operators::CollisionOperators<f64, 2>;
pub type Operators3 = operators::CollisionOperators<f64, 3>;
pub type Solver2<'a> = ks_solver::KsSolver<'a, f64, 2>;
pub type Constants = estimates::WellposednessConstants<f64>;
