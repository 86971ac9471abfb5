//! Single-particle cell model: parameters, OCV, kinetics, radial diffusion
//! and the voltage simulator.

pub mod config;
pub mod diffusion;
pub mod kinetics;
pub mod ocv;
pub mod params;
pub mod profile;
pub mod simulate;

pub use config::{ElectrodeSpec, ModelConfig};
pub use diffusion::{CellState, ParticleSolver, RadialGrid};
pub use kinetics::{boundary_flux, electrode_potential, exchange_current};
pub use ocv::{rk_ocv, rk_ocv_integral, SurfaceGuard};
pub use params::{
    cell_parameters, scale_parameters, synthetic_truth, unscale_parameters, CellParameters, ElectrodeConstants,
    ScaledParameterVector, PARAMETER_COUNT, SCALED_LOWER, SCALED_UPPER,
};
pub use profile::{CurrentProfile, InputArray};
pub use simulate::{initial_cathode_soc, CellModel, Simulation, VoltageTrace};
