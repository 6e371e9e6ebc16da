pub mod geom;
pub mod optim;
pub mod bim;
pub mod shapes;
pub mod pose;
pub mod chamfer;
pub mod filter;
pub mod cluster;
pub mod synth;
pub mod config;
pub mod pipeline;
