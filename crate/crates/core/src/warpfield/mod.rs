//! Cross-view transport: codecs, depth-based warping, occlusion weights and
//! decode-warp-encode.

mod codec;
mod occlusion;
mod transport;
mod warp;

pub use codec::{Codec, CodecSpec, IdentityCodec, PoolCodec};
pub use occlusion::{occlusion_weights, OcclusionMap, OcclusionParams};
pub use transport::{
    area_downsample, mask_to_f64, transport_adjoint, transport_signal, SceneGeometry,
};
pub use warp::{visible_footprint, warp_image, DepthTolerance, WarpMap, WarpResult};
