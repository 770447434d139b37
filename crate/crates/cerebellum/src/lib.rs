pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiments;
pub mod hash;
pub mod manifest;
pub mod protocol;
pub mod report;
