//! State-space primitives and the Mamba block.

pub mod block;
pub mod params;
pub mod scan;
pub mod selective;

pub use block::{mamba_block_forward, MambaBlock, MambaBlockWeights, MambaConfig};
pub use params::{zoh_discretize, DiscreteSsmParams, HiddenState, SsmParams};
pub use scan::{inclusive_scan, ssm_scan_parallel, ssm_scan_sequential, Affine, ScanMode};
pub use selective::selective_scan;
