pub mod nn;
pub mod raster;
pub mod unet;
pub mod annotations;
pub mod augment;
pub mod targets;
pub mod slide;
pub mod postprocess;
pub mod eval;
pub mod trainer;
pub mod pipeline;
pub mod experiment;
