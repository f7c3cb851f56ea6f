use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use super::image::{load_image, ImageBuffer};
use super::transform::resize_bilinear;
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: ImageBuffer,
    pub label: usize,
    pub source_path: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    /// Class names indexed by label.
    pub label_names: Vec<String>,
    /// Per-channel means of `pixel / 255`, subtracted during normalization.
    pub channel_means: [f32; 3],
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, label_names: Vec<String>) -> Result<Dataset> {
        let mut sorted = label_names.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != label_names.len() {
            return Err(Error::Data("duplicate class names".into()));
        }
        if let Some(s) = samples.iter().find(|s| s.label >= label_names.len()) {
            return Err(Error::Data(format!(
                "sample {} has label {} but only {} classes exist",
                s.source_path.display(),
                s.label,
                label_names.len()
            )));
        }
        Ok(Dataset {
            samples,
            label_names,
            channel_means: [0.0; 3],
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.label_names.len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    /// Same dataset with every image resized to `size x size`.
    pub fn resized(&self, size: usize) -> Result<Dataset> {
        let samples = self
            .samples
            .iter()
            .map(|s| {
                Ok(Sample {
                    image: resize_bilinear(&s.image, size, size)?,
                    label: s.label,
                    source_path: s.source_path.clone(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Dataset {
            samples,
            label_names: self.label_names.clone(),
            channel_means: self.channel_means,
        })
    }

    fn with_samples(&self, samples: Vec<Sample>) -> Dataset {
        Dataset {
            samples,
            label_names: self.label_names.clone(),
            channel_means: self.channel_means,
        }
    }
}

#[cfg(feature = "png")]
const EXTENSIONS: &[&str] = &["ppm", "pgm", "pnm", "png"];
#[cfg(not(feature = "png"))]
const EXTENSIONS: &[&str] = &["ppm", "pgm", "pnm"];

fn has_image_extension(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| EXTENSIONS.iter().any(|x| x.eq_ignore_ascii_case(e)))
}

fn sorted_entries(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut entries = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry
            .file_name()
            .into_string()
            .map_err(|n| Error::Data(format!("non-UTF-8 name {n:?} in {}", dir.display())))?;
        if name.starts_with('.') {
            continue;
        }
        entries.push((name, entry.path()));
    }
    // String ordering is byte-wise on UTF-8, hence platform independent.
    entries.sort();
    Ok(entries)
}

/// Loads `<root>/<class>/<image>`; classes are labelled in lexicographic
/// order of their directory names. Undecodable files are skipped with a
/// warning.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    if !root.is_dir() {
        return Err(Error::Data(format!("{} is not a directory", root.display())));
    }
    let class_dirs: Vec<_> = sorted_entries(root)?.into_iter().filter(|(_, p)| p.is_dir()).collect();
    if class_dirs.len() < 2 {
        return Err(Error::Data(format!(
            "{} must contain at least 2 class directories, found {}",
            root.display(),
            class_dirs.len()
        )));
    }
    let mut samples = Vec::new();
    let mut label_names = Vec::new();
    for (label, (name, dir)) in class_dirs.into_iter().enumerate() {
        let before = samples.len();
        for (_, path) in sorted_entries(&dir)? {
            if !path.is_file() || !has_image_extension(&path) {
                continue;
            }
            match load_image(&path) {
                Ok(image) => samples.push(Sample {
                    image,
                    label,
                    source_path: path,
                }),
                Err(e) => log::warn!("skipping {e}"),
            }
        }
        if samples.len() == before {
            return Err(Error::Data(format!(
                "class directory {} has no decodable images",
                dir.display()
            )));
        }
        label_names.push(name);
    }
    Dataset::new(samples, label_names)
}

/// Shuffles with a seeded Fisher-Yates permutation, then walks the permuted
/// order sending each sample to validation until its class has contributed
/// `ceil(val_fraction * class_count)` samples, with the product taken as
/// the decimal the fraction was written as.
pub fn shuffle_split(dataset: &Dataset, seed: u64, val_fraction: f32) -> Result<(Dataset, Dataset)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Config(format!(
            "validation fraction must be in (0, 1), got {val_fraction}"
        )));
    }
    let counts = dataset.class_counts();
    let quotas: Vec<usize> = counts
        .iter()
        // Shrinking by one part in a million absorbs the f32 representation
        // error of the fraction, so 0.1 of 20 is 2 rather than 3.
        .map(|&c| (val_fraction as f64 * c as f64 * (1.0 - 1e-6)).ceil() as usize)
        .collect();
    for (i, (&count, &quota)) in counts.iter().zip(&quotas).enumerate() {
        if count > 0 && quota >= count {
            return Err(Error::Data(format!(
                "class {:?} has {count} sample(s), too few to appear in both splits",
                dataset.label_names[i]
            )));
        }
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng_from_seed(seed));

    let mut taken = vec![0usize; counts.len()];
    let mut train = Vec::new();
    let mut val = Vec::new();
    for i in order {
        let s = &dataset.samples[i];
        if taken[s.label] < quotas[s.label] {
            taken[s.label] += 1;
            val.push(s.clone());
        } else {
            train.push(s.clone());
        }
    }
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data("split left one side empty".into()));
    }
    Ok((dataset.with_samples(train), dataset.with_samples(val)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::image::save_ppm;

    fn write_class(root: &Path, name: &str, n: usize, shade: u8) {
        let dir = root.join(name);
        std::fs::create_dir_all(&dir).unwrap();
        for i in 0..n {
            let img = ImageBuffer::solid(3, 2, [shade, i as u8, 0]).unwrap();
            save_ppm(&img, &dir.join(format!("{i}.ppm"))).unwrap();
        }
    }

    #[test]
    fn counts_and_labels() {
        let root = tempfile::tempdir().unwrap();
        write_class(root.path(), "a", 2, 10);
        write_class(root.path(), "b", 3, 20);
        let ds = load_dataset(root.path()).unwrap();
        assert_eq!(ds.len(), 5);
        let labels: Vec<_> = ds.samples.iter().map(|s| s.label).collect();
        assert_eq!(labels, [0, 0, 1, 1, 1]);
        assert_eq!(ds.label_names, ["a", "b"]);
        assert_eq!(load_dataset(root.path()).unwrap(), ds);
    }

    #[test]
    fn lexicographic_label_order() {
        let root = tempfile::tempdir().unwrap();
        write_class(root.path(), "z", 1, 1);
        write_class(root.path(), "a", 1, 2);
        let ds = load_dataset(root.path()).unwrap();
        assert_eq!(ds.label_names, ["a", "z"]);
        assert_eq!(ds.samples[0].image.get(0, 0, 0), 2);
    }

    #[test]
    fn skips_undecodable_and_rejects_empty_class() {
        let root = tempfile::tempdir().unwrap();
        write_class(root.path(), "a", 2, 1);
        write_class(root.path(), "b", 1, 2);
        std::fs::write(root.path().join("a/broken.ppm"), b"P6 9 9 255\n").unwrap();
        std::fs::write(root.path().join("a/notes.txt"), b"ignored").unwrap();
        assert_eq!(load_dataset(root.path()).unwrap().len(), 3);

        std::fs::create_dir(root.path().join("c")).unwrap();
        assert!(matches!(load_dataset(root.path()), Err(Error::Data(_))));
        std::fs::write(root.path().join("c/bad.ppm"), b"garbage").unwrap();
        assert!(matches!(load_dataset(root.path()), Err(Error::Data(_))));
    }

    #[test]
    fn needs_two_classes() {
        let root = tempfile::tempdir().unwrap();
        write_class(root.path(), "only", 2, 1);
        assert!(matches!(load_dataset(root.path()), Err(Error::Data(_))));
    }

    fn synthetic(per_class: &[usize]) -> Dataset {
        let mut samples = Vec::new();
        for (label, &n) in per_class.iter().enumerate() {
            for i in 0..n {
                samples.push(Sample {
                    image: ImageBuffer::solid(1, 1, [label as u8, i as u8, 0]).unwrap(),
                    label,
                    source_path: PathBuf::from(format!("{label}/{i}")),
                });
            }
        }
        let names = (0..per_class.len()).map(|i| format!("c{i}")).collect();
        Dataset::new(samples, names).unwrap()
    }

    #[test]
    fn stratified_half_split() {
        let ds = synthetic(&[10, 10]);
        let (train, val) = shuffle_split(&ds, 1, 0.5).unwrap();
        assert_eq!(train.class_counts(), [5, 5]);
        assert_eq!(val.class_counts(), [5, 5]);
        assert_eq!(shuffle_split(&ds, 1, 0.5).unwrap(), (train, val));
    }

    #[test]
    fn split_rounds_class_quota_up() {
        let ds = synthetic(&[5, 7]);
        let (train, val) = shuffle_split(&ds, 9, 0.3).unwrap();
        assert_eq!(val.class_counts(), [2, 3]);
        assert_eq!(train.class_counts(), [3, 4]);
    }

    #[test]
    fn split_quota_is_exact_for_decimal_products() {
        let ds = synthetic(&[20, 10]);
        let (_, val) = shuffle_split(&ds, 1, 0.1).unwrap();
        assert_eq!(val.class_counts(), [2, 1]);
        let (_, val) = shuffle_split(&ds, 1, 0.3).unwrap();
        assert_eq!(val.class_counts(), [6, 3]);
    }

    #[test]
    fn split_rejects_tiny_class() {
        let ds = synthetic(&[1, 5]);
        assert!(matches!(shuffle_split(&ds, 0, 0.2), Err(Error::Data(_))));
        assert!(matches!(shuffle_split(&ds, 0, 1.0), Err(Error::Config(_))));
    }
}
