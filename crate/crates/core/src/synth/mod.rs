//! Synthetic articulated performers: capsule bodies, an analytic
//! ground-truth raytracer and the on-disk dataset layout.

mod body;
mod dataset;
mod raytrace;

pub use body::{
    generate_subject, pose_subject, pose_subject_with, BodyFrame, Bone, Capsule, RootMotion,
    SubjectSpec, BONE_COUNT, DEFAULT_VERTEX_COUNT,
};
pub use dataset::{
    capture_subject, decode_vertices, encode_vertices, generate_captures, read_dataset,
    ring_cameras, subject_name, subject_seeds, write_dataset, CaptureConfig, CaptureSet, SubjectCapture,
    MANIFEST, RING_TARGET,
};
pub use raytrace::{nearest_hit, ray_capsule, render_gt, surface_color, Hit, AMBIENT, LIGHT_DIR};
