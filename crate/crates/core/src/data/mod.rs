//! Image and mask I/O, the dataset layout, color conversion, thresholding
//! and the evaluation metrics.

mod color;
mod dataset;
mod io;
mod metrics;
mod threshold;

pub use color::{lab_to_rgb, lab_to_rgb_pixel, rgb_to_lab, rgb_to_lab_pixel};
pub use dataset::{DatasetIndex, Split, Triplet, TripletPaths, MASK_DIR, SHADOW_DIR, SHADOW_FREE_DIR};
pub use io::{gray_to_mask, load_gray, load_image, load_mask, mask_to_gray, save_gray, save_image, save_mask};
pub use metrics::{psnr, region_mae, ssim, Metric, RegionMetrics};
pub use threshold::{binarize_mask, otsu_threshold, video_region_split, OTSU_LEVELS, VIDEO_THRESHOLD};
