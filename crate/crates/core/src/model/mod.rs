//! The dual-branch rectification network.
//!
//! A ResNet-style backbone reduces the spread to 1/8 resolution, a transformer
//! encoder contextualizes it, and two decoder branches (one per page) turn
//! learned query grids into per-region features. Between the two decoder
//! stages each page attends to the other. Flow heads predict coarse
//! displacements that are convex-upsampled ×8 and added to the identity grid.

mod config;
mod count;
pub mod layout;
mod net;

pub use config::BookNetConfig;
pub use count::param_count;
pub use layout::{sinusoidal_positions, Layout, FLOW_HEAD_STD};
pub use net::{grid_to_tokens, tokens_to_grid, BookNet, FlowVars, Prediction, Rectified};
