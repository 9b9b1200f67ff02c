//! Cameras, meshes and the software rasterizer.

pub mod camera;
pub mod mesh;
pub mod raster;

pub use camera::{Camera, CameraRig, Intrinsics, Ray};
pub use mesh::{TriMesh, VertexAttributes};
pub use raster::{rasterize_mesh, Fragments, Lighting, RasterOptions, RasterOutput};
