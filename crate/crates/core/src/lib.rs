pub mod data;
pub mod gradcheck;
pub mod graph;
pub mod init;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod par;
pub mod tensor;
pub mod train;
