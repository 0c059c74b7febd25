//! Deterministic balancing, augmentation and max-RGB normalization for
//! dermoscopic lesion datasets, plus weighted ensemble fusion and
//! balanced-accuracy evaluation of classifier outputs.

pub mod balancer;
pub mod baseline;
pub mod cli;
pub mod evalkit;
pub mod imgops;
pub mod manifest;
pub mod pipeline;

pub use balancer::{plan_auto, plan_from_factors, rotation_angles, AugmentationPlan, AutoTarget, ClassPlan};
pub use evalkit::{balanced_accuracy, confusion, fuse, load_probabilities, predict, EnsembleConfig, ProbabilityMatrix};
pub use imgops::{hflip, max_rgb_normalize, rotate, ImageBuffer};
pub use manifest::{class_counts, parse_ground_truth, ClassCounts, ClassLabel, DatasetManifest};
pub use pipeline::{execute, expand, output_name, ExecuteOptions, Operation, OutputManifest, WorkItem};
