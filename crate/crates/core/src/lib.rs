//! Speculative-execution gadget discovery by simulating mispredicted
//! branches in duplicated code copies.

pub mod config;
pub mod corpus;
pub mod files;
pub mod fuzz;
pub mod gen;
pub mod image;
pub mod isa;
pub mod memory;
pub mod policy;
pub mod rewriter;
pub mod runtime;
pub mod sanitizers;
pub mod vm;
