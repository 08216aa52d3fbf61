pub mod augment;
pub mod detectkit;
pub mod datakit;
pub mod evalkit;
pub mod gpwgan;
pub mod ndgrad;
pub mod raster;
pub mod seed;
