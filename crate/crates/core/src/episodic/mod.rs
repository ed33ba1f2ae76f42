//! Few-shot episodes on a procedural dataset: sampling, a frozen toy
//! encoder, support prototypes with or without annotations, training and
//! evaluation.

mod dataset;
mod encoder;
mod prototypes;
mod run;
mod sampler;
mod synth;

pub use dataset::{Dataset, Sample, Split};
pub use encoder::{EncoderConfig, ToyEncoder};
pub use prototypes::{shot_prototype, support_prototypes, PrototypeMode};
pub use run::{
    evaluate_split, predict, run_inference, toy_spectral, train_toy, EvalConfig, LogRecord, TrainConfig, TrainOutput,
};
pub use sampler::{sample_class_episode, sample_episode, supports_for_query, Episode};
pub use synth::{synth_dataset, ShapeFamily, SynthConfig};
