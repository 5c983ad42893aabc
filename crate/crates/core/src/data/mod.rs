//! Dataset generation and ingestion.

pub mod babi;
pub mod cifar;
