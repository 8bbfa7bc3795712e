mod cost;
mod sim;
mod sweep;

pub use cost::*;
pub use sim::*;
pub use sweep::*;
