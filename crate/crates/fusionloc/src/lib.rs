//! End-to-end planar relocalization from one RGB image and one 2D laser
//! scan: feature extraction per sensor, attention-based fusion, pose
//! regression, plus a synthetic planar-world generator so the whole
//! train/eval loop runs at desk scale.

pub mod dataset;
pub mod fusion;
pub mod geom;
pub mod image_branch;
pub mod model;
pub mod nn;
pub mod point_branch;
pub mod regression;
pub mod tensor;
pub mod training;
pub mod weights;
