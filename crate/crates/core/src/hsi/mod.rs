//! Cube representation, file I/O, resampling, patches and synthetic scenes.

pub mod cube;
pub mod io;
pub mod patches;
pub mod resample;
pub mod synth;

pub use cube::{denormalize, normalize, HsiCube, ImagePair, PatchSpec};
pub use io::{load_cube, save_cube, CubeFormat};
pub use patches::extract_patches;
pub use resample::{degrade, upsample_bicubic};
pub use synth::synth_cube;
