//! Vocabulary, TSV datasets, the S/C/T augmentation sampler, and the
//! synthetic lookup task.

mod augment;
mod dataset;
mod synth;
pub mod vocab;

pub use augment::{apply_kind, augment, augment_rng, draw_kind, AugmentKind, AugmentationConfig};
pub use dataset::{format_dataset, load_dataset, parse_dataset, ExampleTriple};
pub use synth::{synth_lookup_task, SynthConfig, SynthTask};
pub use vocab::{Vocabulary, BOS, EOS, PAD, SEP, UNK};
