//! Geometry proxy: meshes, cameras, the two-track view rig and the G-buffer
//! rasterizer.

mod camera;
mod conditions;
mod mesh;
mod raster;
mod rig;

pub use camera::{Camera, Intrinsics};
pub use conditions::{conditions_from_gbuffer, render_conditions, ConditionMaps};
pub use mesh::{TriMesh, Vec3};
pub use raster::{rasterize, GBuffer, NormalMode, RasterOptions, NO_FACE};
pub use rig::{azimuth_distance, build_rig, RigSpec, RigView, Track, ViewRig};
