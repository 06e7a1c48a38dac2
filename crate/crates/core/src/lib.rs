pub mod autodiff;
pub mod fcgraph;
pub mod stagin;
pub mod synthdata;
pub mod train;
pub mod analysis;
pub mod cli;
