//! Synthetic grounded scenes and the on-disk grounded dataset format.

pub mod dataset;
pub mod registry;
pub mod scene;
