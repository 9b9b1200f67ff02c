//! Parametric 360-degree head model.
//!
//! A bilinear mesh model maps shape and expression codes to vertices; per-vertex
//! neural textures are rasterized onto six axis-aligned feature planes that
//! decode to a radiance field. A second, free-standing field carries the hair.
//! Fields are volume rendered and fitted with analytic gradients and Adam.

mod binio;
pub mod animate;
pub mod bilinear;
pub mod checkpoint;
pub mod error;
pub mod geometry;
pub mod hexplane;
pub mod imaging;
pub mod optim;
pub mod render;
pub mod synhead;
pub mod texture;

pub use error::{Error, Result};

pub type Vec3 = nalgebra::Vector3<f64>;
