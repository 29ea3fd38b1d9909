//! Label sources for the adaptation loop: a configurable-precision oracle
//! and a small attention-based classifier over synthetic scene maps.

mod attention;
mod oracle;

pub use attention::{
    apply_attention, channel_attention, spatial_attention, AttentionBlockParams,
    AttentionClassifier, AttentionConfig, AttentionGradients, AttentionTeacher, FeatureMap,
    SceneGenerator, SPATIAL_KERNEL,
};
pub use oracle::{oracle_label, OracleTeacher, OracleTeacherConfig};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::sim::ActivityClass;

/// Label emitted by a teacher for one camera frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TeacherLabel {
    pub class: ActivityClass,
    /// In (0, 1].
    pub confidence: f64,
    pub timestamp_ns: u64,
}

/// Anything that can look at the scene at `timestamp_ns` and name the
/// activity. `truth` is what the camera would see; implementations decide
/// how faithfully they report it.
pub trait LabelSource: Send {
    fn label(&mut self, truth: ActivityClass, timestamp_ns: u64) -> Result<TeacherLabel>;

    /// Frame rate of the source in Hz.
    fn rate_hz(&self) -> f64;
}

impl<T: LabelSource + ?Sized> LabelSource for Box<T> {
    fn label(&mut self, truth: ActivityClass, timestamp_ns: u64) -> Result<TeacherLabel> {
        (**self).label(truth, timestamp_ns)
    }

    fn rate_hz(&self) -> f64 {
        (**self).rate_hz()
    }
}
