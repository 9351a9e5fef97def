//! Image-quality metrics, significance testing and report emission.

mod metrics;
mod report;
mod stats;

pub use metrics::{abs_error_map, psnr, ssim, ssim_factors, ssim_windowed, SsimConstants, SsimFactors};
pub use report::{
    evaluate, predict_slices, predict_volumes, validation_ssim, write_pgm, Comparison, MetricsReport,
    VolumeMetrics, VolumePrediction,
};
pub use stats::{incomplete_beta, ln_gamma, paired_ttest, student_t_two_sided, TTest};
