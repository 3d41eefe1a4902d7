//! Mesh refinement from normal maps, vertex-color baking and free-view
//! compositing.

mod bake;
mod normals;
mod novel;
mod refine;
mod sobel;

pub use bake::{
    bake_vertex_colors, render_vertex_colors, sample_bilinear, vertex_footprint, BakeConfig,
};
pub use normals::{
    assign_faces, normal_loss_frozen, normal_loss_gradient, normal_refine_loss, render_normals,
    shade_normals, shared_mask, NormalTarget,
};
pub use novel::{
    blend_novel_view, composite, heuristic_blend_weights, nearest_views, BlendWeightProvider,
    BlendWeights, HeuristicBlend, NovelView, NovelViewInputs, StageTrace, WeightInputs,
};
pub use refine::{laplacian_energy, refine_mesh, RefineConfig, RefineOutcome, RefineRecord};
pub use sobel::sobel_gradient;
