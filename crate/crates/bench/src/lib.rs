//! Synthetic multi-instance benchmark: layouts of colored shapes, ground-truth
//! renders, an oracle detector and the position/attribute evaluation.

pub mod color;
pub mod detect;
pub mod error;
pub mod eval;
pub mod io;
pub mod layout;
pub mod render;
pub mod run;

pub use color::{rgb_to_hsv, ColorRange, ColorRangeTable};
pub use detect::{detect_instances, Detection, DetectorConfig};
pub use error::{BenchError, Result};
pub use eval::{attribute_eval, compute_metrics, evaluate_image, position_eval, EvalConfig, EvalRecord, Metrics};
pub use layout::{assign_colors, build_benchmark, build_prompt, sample_layouts, BenchLayout, BenchmarkSpec, CorpusSpec, Layout};
pub use render::{render_ground_truth, Render};
