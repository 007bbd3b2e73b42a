pub mod cli;
pub mod eval;
pub mod geoframe;
pub mod imaging;
pub mod mesh;
pub mod raycast;
pub mod refine;
pub mod rfm;
pub mod synthio;
