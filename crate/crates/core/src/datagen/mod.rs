//! Synthetic data for the four tasks.

pub mod charge;
pub mod darcy;
pub mod grf;
pub mod topology;
pub mod turbulence;

pub use charge::{generate_charge_dataset, sample_point_charges, solve_poisson_dst};
pub use darcy::{generate_darcy_dataset, sample_rng, solve_darcy, DarcyParams, DarcySourceSpec};
pub use grf::{make_permeability, matern, sample_matern_grf, MaternSampler};
pub use topology::{generate_topology_fixtures, make_fixture, simp_optimize, SimpParams, TopologyCase};
pub use turbulence::{channel_grid, generate_turbulence_fixture, turbulence_fixture};
