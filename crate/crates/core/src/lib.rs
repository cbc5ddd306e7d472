pub mod causal;
pub mod diffcore;
pub mod graphdata;
pub mod inject;
pub mod numfmt;
pub mod synthgen;
pub mod model;
pub mod train;
pub mod metrics;
pub mod harness;
