#![allow(dead_code)]

use mgaf::ExperimentConfig;

/// A few seconds per run: 3 classes, 16×16 images, a 4-filter CNN.
pub const TINY: &str = "\
synth_classes=3
synth_per_class=6
synth_frames=2
synth_depth_size=16
synth_inertial_len=78
image_size=16
filters=4,4,4
kernel=3
fc_width=8
epochs=2
batch_size=16
svm_epochs=10
splits=2
";

pub fn tiny() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.apply_text(TINY).unwrap();
    cfg
}
