//! HICO-style mean average precision and the synthetic dataset used for
//! desk-scale experiments.

mod ap;
mod dataset;
mod synth;

pub use ap::{average_precision, match_detections, mean_ap, APResult, CategoryAP, DetectionMatch, EvalConfig, SplitCounts};
pub use dataset::{all_hoi_pairs, hoi_frequencies, image_to_tensor, Annotation, Categories, Dataset, ImageInfo};
pub use synth::{generate_synthetic_dataset, simulate_detections, Scene, Split, SynthSceneSpec, SyntheticDataset, RELATION_RULES};
