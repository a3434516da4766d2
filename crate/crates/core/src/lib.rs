//! Image inpainting with partial convolutions: masked convolution layers,
//! the inpainting loss, trainable encoder-decoder networks, preprocessing
//! and image-quality metrics.

mod binio;
pub mod imageproc;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod par;
pub mod pconv;
pub mod tensor;
pub mod trainer;
