//! Compositional 3D layout engine.
//!
//! Lifts a 2D bounding-box layout into an initial scene of per-instance point
//! clouds, then refines the per-instance transforms with a tolerant collision
//! loss, a feature-level reference loss and a pluggable guidance slot.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN

pub mod collision;
pub mod error;
pub mod guidance;
pub mod io;
pub mod layout;
pub mod optimizer;
pub mod raster;
pub mod scene;

pub use error::{Error, Result};
pub use guidance::{FeatureExtractor, FeatureVec, GuidanceTerm, SilhouetteDepthDescriptor, StubZero};
pub use layout::{initialize_layout, DepthInput, InitConfig};
pub use optimizer::{refine_layout, LayoutOptConfig, OptTrace, RefineInputs};
pub use raster::{normals_from_depth, render, CameraModel, RenderBuffers};
pub use scene::{
    apply_transform, compose_scene, normalize_cloud, BBox2D, Canvas, GaussianCloud, Instance,
    InstanceTransform, LayoutEntry, LayoutSpec, Pose, Scene, TransformGrad, Vec3,
};
