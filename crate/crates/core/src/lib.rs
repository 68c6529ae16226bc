pub mod cli;
pub mod evaluation;
pub mod frame_transform;
pub mod fusion_gate;
pub mod geodesy;
pub mod pipeline;
pub mod simulator;
pub mod state_estimator;
