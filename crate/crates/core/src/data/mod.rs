//! Image decoding, preprocessing, augmentation and dataset assembly.
//!
//! The network input for an image is `pixel / 255 - channel_mean`, laid out
//! as `[3, S, S]` after a bilinear resize to the model's input side `S`.

mod dataset;
mod image;
mod transform;

pub use dataset::{load_dataset, shuffle_split, Dataset, Sample};
pub use image::{decode_ppm, encode_ppm, load_image, save_ppm, ImageBuffer};
pub use transform::{augment, crop, flip_horizontal, resize_bilinear, rotate, scale_brightness, AugmentConfig};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `t[c, y, x] = pixel / 255 - channel_means[c]`.
pub fn normalize(img: &ImageBuffer, channel_means: [f32; 3]) -> Tensor {
    let (w, h) = (img.width(), img.height());
    let mut data = vec![0.0f32; 3 * w * h];
    for (i, px) in img.pixels().chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * w * h + i] = px[c] as f32 / 255.0 - channel_means[c];
        }
    }
    Tensor::from_vec(&[3, h, w], data).expect("image dimensions are non-zero")
}

/// Resize to `size x size` (if needed) and normalize.
pub fn preprocess(img: &ImageBuffer, size: usize, channel_means: [f32; 3]) -> Result<Tensor> {
    if (img.width(), img.height()) == (size, size) {
        Ok(normalize(img, channel_means))
    } else {
        Ok(normalize(&resize_bilinear(img, size, size)?, channel_means))
    }
}

/// Per-channel mean of `pixel / 255` over every pixel of every sample.
pub fn compute_channel_means(dataset: &Dataset) -> Result<[f32; 3]> {
    if dataset.is_empty() {
        return Err(Error::Data("cannot compute channel means of an empty dataset".into()));
    }
    let mut sums = [0u64; 3];
    let mut count = 0u64;
    for s in &dataset.samples {
        for px in s.image.pixels().chunks_exact(3) {
            for c in 0..3 {
                sums[c] += px[c] as u64;
            }
        }
        count += (s.image.width() * s.image.height()) as u64;
    }
    Ok(sums.map(|s| (s as f64 / count as f64 / 255.0) as f32))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn dataset_of(images: Vec<ImageBuffer>) -> Dataset {
        let samples = images
            .into_iter()
            .map(|image| Sample {
                image,
                label: 0,
                source_path: PathBuf::new(),
            })
            .collect();
        Dataset::new(samples, vec!["a".into(), "b".into()]).unwrap()
    }

    #[test]
    fn normalize_endpoints() {
        let white = ImageBuffer::solid(1, 1, [255, 255, 255]).unwrap();
        assert_eq!(normalize(&white, [0.5; 3]).data(), &[0.5; 3]);
        let black = ImageBuffer::solid(1, 1, [0, 0, 0]).unwrap();
        assert_eq!(normalize(&black, [0.5; 3]).data(), &[-0.5; 3]);
    }

    #[test]
    fn normalize_is_planar() {
        let img = ImageBuffer::new(2, 1, vec![255, 0, 0, 0, 0, 255]).unwrap();
        let t = normalize(&img, [0.0; 3]);
        assert_eq!(t.dims(), &[3, 1, 2]);
        assert_eq!(t.data(), &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn channel_mean_cases() {
        let black = ImageBuffer::solid(2, 2, [0, 0, 0]).unwrap();
        let white = ImageBuffer::solid(2, 2, [255, 255, 255]).unwrap();
        assert_eq!(
            compute_channel_means(&dataset_of(vec![black.clone()])).unwrap(),
            [0.0; 3]
        );
        assert_eq!(
            compute_channel_means(&dataset_of(vec![white.clone()])).unwrap(),
            [1.0; 3]
        );
        assert_eq!(
            compute_channel_means(&dataset_of(vec![black, white])).unwrap(),
            [0.5; 3]
        );
        assert!(matches!(
            compute_channel_means(&dataset_of(vec![])),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn preprocess_shape() {
        let img = ImageBuffer::solid(320, 320, [10, 128, 250]).unwrap();
        let t = preprocess(&img, 64, [0.2, 0.5, 0.9]).unwrap();
        assert_eq!(t.dims(), &[3, 64, 64]);
        assert!(t.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}
