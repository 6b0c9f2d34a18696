//! Corpora, dataset files, split protocols, and synthetic data.

mod dataset;
mod gaze;
mod splits;
pub mod synthetic;
mod tsv;

pub use dataset::{
    dataset_to_string, load_dataset, parse_dataset, write_dataset, DatasetSpec, Label, LabelKind,
    MetricKind, TextInstance,
};
pub use gaze::{
    gaze_corpus_to_string, load_gaze_corpus, parse_gaze_corpus, write_gaze_corpus, GazeRecord,
    GAZE_HEADER,
};
pub use splits::{
    fold_split, kfold, low_resource_split, FoldSplit, LowResourceSplit, DATA_SEEDS,
    LOW_RESOURCE_DEV,
};
pub use synthetic::{make_synthetic_suite, MarkovGaze, SuiteConfig, SyntheticSuite, SyntheticTask};
