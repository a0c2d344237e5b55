pub mod augment;
pub mod autodiff;
pub mod checkpoint;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod frame;
pub mod games;
pub mod gradcheck;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod probe;
pub mod selftest;
pub mod tensor;
pub mod trainer;
