mod config;
mod report;
mod reproduce;
mod summary;
mod trace;
mod verify;

pub use config::*;
pub use report::*;
pub use reproduce::*;
pub use summary::*;
pub use trace::*;
pub use verify::*;
