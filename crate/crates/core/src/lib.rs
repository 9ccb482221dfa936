pub mod array;
pub mod beamform;
pub mod calib;
pub mod harness;
pub mod slepian;
pub mod sphere;
