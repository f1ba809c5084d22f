//! Joint distribution network: per-variable monotone units combined into a
//! joint CDF whose mixed partial is the joint density.

mod arch;
mod dist;
mod params;
pub mod tape;
mod unit;

pub use arch::{CouplingMode, JdanArch, MarginScale, UnitLayout, LAYERS_PER_BLOCK};
pub use dist::{ForecastDistribution, DENSITY_FLOOR, LIMIT_GAP_GUARD};
pub use params::{FlatParams, JdanParams, RandomInit};
pub use unit::{Direction, MonotoneUnit};
