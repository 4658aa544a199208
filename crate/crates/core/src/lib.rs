//! Harness for measuring whether a language model can reproduce its own
//! classification behaviour by following an algorithm it wrote itself.

pub mod backend;
pub mod config;
pub mod dataset;
pub mod enumeration;
pub mod labels;
pub mod metrics;
pub mod parser;
pub mod pipeline;
pub mod prompt;
pub mod report;

pub use labels::{GoldStandard, LabelSet, LabelSpace, Predictions, TaskKind};
pub use metrics::{jaccard, macro_f1, perrr, prerr, MacroF1Result, ReproScores};
