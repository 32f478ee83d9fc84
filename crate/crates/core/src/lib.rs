//! Explanation pipeline over saliency maps captured across training checkpoints.

pub mod artifact;
pub mod container;
pub mod datasets;
pub mod density;
pub mod explain;
pub mod guidance;
pub mod numerics;
pub mod prototypes;
pub mod refnet;
pub mod trajectory;
