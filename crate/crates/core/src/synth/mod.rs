//! Synthetic word images over a built-in bitmap font, with disjoint
//! in-vocabulary and out-of-vocabulary lexicons.

mod dataset;
pub mod font;
mod lexicon;
mod render;

pub use dataset::{
    emit_dataset, load_png, load_train_set, plan_splits, save_png, DatasetManifest, LoadedManifest, Sample, SplitPlan, Tag,
    EVAL_MANIFEST, METADATA, TRAIN_MANIFEST,
};
pub use lexicon::{build_lexicons, word_space};
pub use render::{render_word, RenderSpec};
