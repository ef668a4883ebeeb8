//! Simulator for multi-tenant NPU virtualization: vNPU sizing, placement,
//! uTop lowering and a cycle-level scheduler with ME/VE harvesting.

pub mod allocator;
pub mod engine;
pub mod harness;
pub mod hwmodel;
pub mod mapper;
pub mod metrics;
pub mod neuisa;
pub mod workload;
