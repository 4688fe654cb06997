//! Neural-network building blocks on top of the candle tensor/autodiff core.

pub mod adam;
pub mod conv;
pub mod layers;
pub mod params;

pub use adam::AdamW;
pub use layers::Mode;
pub use params::{Init, ParamStore};
