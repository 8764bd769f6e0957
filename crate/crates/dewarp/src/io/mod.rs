//! File formats: binary pixmaps for images and the Middlebury container
//! for flow fields. Both are byte-deterministic.

pub mod flo;
pub mod ppm;

pub use flo::{read_flo, write_flo};
pub use ppm::{read_mask, read_ppm, write_ppm};
