//! Zero-shot cross-lingual hate speech detection.
//!
//! The crate covers the full pipeline: harmonising the labels of the source
//! corpora, class-ratio resampling, classifiers over aligned cross-lingual
//! word embeddings (CNN and BiLSTM-CNN) and a multilingual transformer,
//! majority-vote bootstrapping of unlabelled target-language text,
//! fine-tuning, and classwise/macro evaluation.

pub mod bootstrap;
pub mod corpus;
pub mod embeddings;
pub mod evaluation;
pub mod experiments;
pub mod models;
pub mod nn;
pub mod sampling;
pub mod synthetic;
