//! Certification toolkit for keypoint-detection + PnP pose-estimation
//! pipelines: decides whether the 6D pose error stays within user budgets
//! for every image in a convex hull of perturbed inputs.

pub mod allocation;
pub mod camera;
pub mod graph;
pub mod heads;
pub mod hull;
pub mod pnp;
pub mod proxy;
pub mod sensitivity;
pub mod tensor;
