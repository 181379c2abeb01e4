//! File formats: NTAT tensors, NTAB tensor bundles, binary PPM images.

pub mod ntat;
pub mod ppm;
