//! Sensing pipeline: Doppler feature extraction, the gesture classifier R,
//! the keyed sub-model F and the small neural-network toolkit they share.

pub mod classifier;
pub mod features;
pub mod nn;
pub mod submodel;

pub use classifier::{train_classifier, ClassifierConfig, ClassifierR, NUM_CLASSES};
pub use features::{extract_features, FeatureConfig, FeatureMap};
pub use submodel::{key_embed, train_submodel, SubmodelConfig, SubmodelF, SubmodelSample, TrainRun};
