//! Functional and timing simulator plus command-stack compiler for
//! multi-module DRAM processing-in-memory LLM decoding.

pub mod compiler;
pub mod device;
pub mod dispatcher;
pub mod harness;
pub mod isa;
pub mod memmgr;
pub mod model;
pub mod partition;
pub mod plan;
pub mod request;
pub mod runtime;
pub mod scheduler;
