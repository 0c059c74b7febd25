//! Nearest-centroid colour-histogram classifier.
//!
//! Each class is represented by the mean of its images' per-channel
//! histograms; an image is scored by a softmax over negative Euclidean
//! distances to the class centroids. It exists so the prediction, fusion
//! and evaluation stages can run end to end without an external model.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::evalkit::ProbabilityMatrix;
use crate::imgops::ImageBuffer;
use crate::manifest::{resolve_image_path, ClassLabel, DatasetManifest, NUM_CLASSES};
use crate::pipeline::load_image;

pub const DEFAULT_BINS: usize = 8;
pub const DEFAULT_TEMPERATURE: f64 = 0.05;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("bins must be between 2 and 256, got {0}")]
    BadBins(usize),
    #[error("temperature must be positive and finite, got {0}")]
    BadTemperature(f64),
    #[error("no training images")]
    EmptyTrainingSet,
    #[error("{id}: {message}")]
    Image { id: String, message: String },
    #[error("model file: {0}")]
    Model(String),
    #[error("worker pool: {0}")]
    Pool(String),
}

/// Concatenated per-channel histograms, each block L1-normalized.
pub fn color_histogram(img: &ImageBuffer, bins: usize) -> Vec<f64> {
    let mut counts = vec![0u64; 3 * bins];
    for p in img.pixels() {
        for (c, &v) in p.iter().enumerate() {
            counts[c * bins + usize::from(v) * bins / 256] += 1;
        }
    }
    let n = (img.width() as u64 * img.height() as u64) as f64;
    counts.into_iter().map(|k| k as f64 / n).collect()
}

/// Compensated (Neumaier) running sum over vectors of equal length.
struct VecAccumulator {
    sum: Vec<f64>,
    comp: Vec<f64>,
    n: usize,
}

impl VecAccumulator {
    fn new(len: usize) -> Self {
        VecAccumulator { sum: vec![0.0; len], comp: vec![0.0; len], n: 0 }
    }

    fn add(&mut self, v: &[f64]) {
        for ((s, c), &x) in self.sum.iter_mut().zip(&mut self.comp).zip(v) {
            let t = *s + x;
            if s.abs() >= x.abs() {
                *c += (*s - t) + x;
            } else {
                *c += (x - t) + *s;
            }
            *s = t;
        }
        self.n += 1;
    }

    fn mean(&self) -> Option<Vec<f64>> {
        (self.n > 0).then(|| self.sum.iter().zip(&self.comp).map(|(s, c)| (s + c) / self.n as f64).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CentroidModel {
    pub bins: usize,
    pub temperature: f64,
    /// `None` for classes without training images.
    pub centroids: [Option<Vec<f64>>; NUM_CLASSES],
}

fn check_params(bins: usize, temperature: f64) -> Result<(), BaselineError> {
    if !(2..=256).contains(&bins) {
        return Err(BaselineError::BadBins(bins));
    }
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(BaselineError::BadTemperature(temperature));
    }
    Ok(())
}

impl CentroidModel {
    /// Builds centroids from in-memory labelled images.
    pub fn fit<'a>(
        samples: impl IntoIterator<Item = (ClassLabel, &'a ImageBuffer)>,
        bins: usize,
        temperature: f64,
    ) -> Result<Self, BaselineError> {
        check_params(bins, temperature)?;
        let hists = samples.into_iter().map(|(l, img)| (l, color_histogram(img, bins)));
        Self::from_histograms(hists, bins, temperature)
    }

    fn from_histograms(
        hists: impl IntoIterator<Item = (ClassLabel, Vec<f64>)>,
        bins: usize,
        temperature: f64,
    ) -> Result<Self, BaselineError> {
        let mut acc: Vec<VecAccumulator> = (0..NUM_CLASSES).map(|_| VecAccumulator::new(3 * bins)).collect();
        for (label, h) in hists {
            acc[label.index()].add(&h);
        }
        if acc.iter().all(|a| a.n == 0) {
            return Err(BaselineError::EmptyTrainingSet);
        }
        Ok(CentroidModel { bins, temperature, centroids: std::array::from_fn(|i| acc[i].mean()) })
    }

    /// Class probabilities for one image.
    pub fn predict(&self, img: &ImageBuffer) -> [f64; NUM_CLASSES] {
        let h = color_histogram(img, self.bins);
        let distances = self
            .centroids
            .each_ref()
            .map(|c| c.as_ref().map(|c| c.iter().zip(&h).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()));
        softmax_neg_distance(&distances, self.temperature)
    }

    /// Two header lines (`bins,<n>` and `temperature,<t>`) followed by one
    /// `<class>,<values...>` or `<class>,absent` line per class.
    pub fn to_csv(&self) -> String {
        let mut out = format!("bins,{}\ntemperature,{}\n", self.bins, self.temperature);
        for c in ClassLabel::ALL {
            out.push_str(c.code());
            match &self.centroids[c.index()] {
                Some(v) => v.iter().for_each(|x| write!(out, ",{x}").unwrap()),
                None => out.push_str(",absent"),
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, BaselineError> {
        let err = |m: String| BaselineError::Model(m);
        let mut lines = text.lines().map(str::trim_end).filter(|l| !l.is_empty());
        let mut header = |key: &str| -> Result<String, BaselineError> {
            lines
                .next()
                .and_then(|l| l.strip_prefix(key)?.strip_prefix(',').map(str::to_string))
                .ok_or_else(|| err(format!("expected `{key},<value>` header line")))
        };
        let bins: usize = header("bins")?.parse().map_err(|_| err("bad bins value".into()))?;
        let temperature: f64 = header("temperature")?.parse().map_err(|_| err("bad temperature value".into()))?;
        check_params(bins, temperature)?;
        let mut centroids: [Option<Vec<f64>>; NUM_CLASSES] = Default::default();
        let mut seen = [false; NUM_CLASSES];
        for line in lines {
            let mut cells = line.split(',');
            let label: ClassLabel = cells.next().unwrap_or("").parse().map_err(|e| err(format!("{e}")))?;
            if std::mem::replace(&mut seen[label.index()], true) {
                return Err(err(format!("duplicate class {label}")));
            }
            let rest: Vec<&str> = cells.collect();
            if rest == ["absent"] {
                continue;
            }
            let values: Result<Vec<f64>, _> = rest.iter().map(|s| s.parse::<f64>()).collect();
            let values = values.map_err(|_| err(format!("bad centroid value for {label}")))?;
            if values.len() != 3 * bins {
                return Err(err(format!("{label} centroid has {} values, expected {}", values.len(), 3 * bins)));
            }
            centroids[label.index()] = Some(values);
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(err(format!("class {} missing", ClassLabel::ALL[i])));
        }
        if centroids.iter().all(Option::is_none) {
            return Err(BaselineError::EmptyTrainingSet);
        }
        Ok(CentroidModel { bins, temperature, centroids })
    }
}

/// `p_c ∝ exp(-d_c / temperature)` over classes with a distance; others get 0.
pub fn softmax_neg_distance(distances: &[Option<f64>; NUM_CLASSES], temperature: f64) -> [f64; NUM_CLASSES] {
    let min = distances.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    let weights = distances.map(|d| d.map_or(0.0, |d| (-(d - min) / temperature).exp()));
    let total: f64 = weights.iter().sum();
    weights.map(|w| w / total)
}

fn pool(workers: usize) -> Result<rayon::ThreadPool, BaselineError> {
    rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build().map_err(|e| BaselineError::Pool(e.to_string()))
}

fn load_entry(images_dir: &Path, id: &str, rel: &Path) -> Result<ImageBuffer, BaselineError> {
    let direct = images_dir.join(rel);
    let path = if direct.is_file() {
        direct
    } else {
        resolve_image_path(images_dir, id)
            .map(|p| images_dir.join(p))
            .ok_or_else(|| BaselineError::Image { id: id.to_string(), message: "image file not found".into() })?
    };
    load_image(&path).map_err(|message| BaselineError::Image { id: id.to_string(), message })
}

/// Trains from the manifest's images. Histograms are computed in parallel
/// and reduced in manifest order, so the model does not depend on `workers`.
pub fn train_centroids(
    m: &DatasetManifest,
    images_dir: &Path,
    bins: usize,
    temperature: f64,
    workers: usize,
) -> Result<CentroidModel, BaselineError> {
    check_params(bins, temperature)?;
    if m.is_empty() {
        return Err(BaselineError::EmptyTrainingSet);
    }
    let hists: Result<Vec<(ClassLabel, Vec<f64>)>, BaselineError> = pool(workers)?.install(|| {
        m.entries()
            .par_iter()
            .map(|e| Ok((e.label, color_histogram(&load_entry(images_dir, &e.image_id, &e.path)?, bins))))
            .collect()
    });
    CentroidModel::from_histograms(hists?, bins, temperature)
}

/// Scores `(image_id, relative path)` pairs into a probability matrix.
pub fn predict_images(
    model: &CentroidModel,
    images: &[(String, PathBuf)],
    images_dir: &Path,
    workers: usize,
) -> Result<ProbabilityMatrix, BaselineError> {
    let rows: Result<Vec<_>, BaselineError> = pool(workers)?.install(|| {
        images.par_iter().map(|(id, rel)| Ok((id.clone(), model.predict(&load_entry(images_dir, id, rel)?)))).collect()
    });
    ProbabilityMatrix::from_rows(rows?).map_err(|e| BaselineError::Model(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn solid(rgb: [u8; 3]) -> ImageBuffer {
        ImageBuffer::filled(4, 4, rgb).unwrap()
    }

    #[test]
    fn constant_red_histogram() {
        let red = solid([255, 0, 0]);
        let model = CentroidModel::fit([(ClassLabel::Mel, &red)], 2, DEFAULT_TEMPERATURE).unwrap();
        assert_eq!(model.centroids[0].as_deref(), Some(&[0.0, 1.0, 1.0, 0.0, 1.0, 0.0][..]));
        assert!(model.centroids[1..].iter().all(Option::is_none));
        let p = model.predict(&red);
        assert_eq!(p[0], 1.0);
        assert!(p[1..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mean_of_identical_images() {
        let img = ImageBuffer::from_fn(5, 3, |x, y| [(x * 50) as u8, (y * 90) as u8, 17]).unwrap();
        let model = CentroidModel::fit([(ClassLabel::Bcc, &img), (ClassLabel::Bcc, &img)], 8, 0.05).unwrap();
        let c = model.centroids[ClassLabel::Bcc.index()].as_ref().unwrap();
        let h = color_histogram(&img, 8);
        for (a, b) in c.iter().zip(&h) {
            assert!((a - b).abs() < 1e-15);
        }
        for block in c.chunks(8) {
            assert!((block.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn nearest_class_wins() {
        let (r, g, b) = (solid([250, 5, 5]), solid([5, 250, 5]), solid([5, 5, 250]));
        let model =
            CentroidModel::fit([(ClassLabel::Mel, &r), (ClassLabel::Nv, &g), (ClassLabel::Vasc, &b)], 8, 0.05).unwrap();
        let p = model.predict(&g);
        assert!(p[ClassLabel::Nv.index()] > 0.99);
        assert_eq!(p[ClassLabel::Df.index()], 0.0);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn softmax_cases() {
        let mut d = [None; NUM_CLASSES];
        d[0] = Some(0.3);
        d[4] = Some(0.3);
        let p = softmax_neg_distance(&d, 0.05);
        assert_eq!((p[0], p[4]), (0.5, 0.5));

        let mut d = [None; NUM_CLASSES];
        d[0] = Some(0.1);
        d[1] = Some(0.2);
        let p = softmax_neg_distance(&d, 0.05);
        let expected = (-2.0f64).exp() / ((-2.0f64).exp() + (-4.0f64).exp());
        assert!((p[0] - expected).abs() < 1e-12);
        assert!((p[0] - 0.8808).abs() < 5e-5 && (p[1] - 0.1192).abs() < 5e-5);
    }

    #[test]
    fn params_validated() {
        let img = solid([1, 2, 3]);
        assert!(matches!(CentroidModel::fit([(ClassLabel::Mel, &img)], 1, 0.05), Err(BaselineError::BadBins(1))));
        assert!(matches!(CentroidModel::fit([(ClassLabel::Mel, &img)], 8, 0.0), Err(BaselineError::BadTemperature(_))));
        assert!(matches!(CentroidModel::fit([], 8, 0.05), Err(BaselineError::EmptyTrainingSet)));
    }

    #[test]
    fn model_file_roundtrip() {
        let a = ImageBuffer::from_fn(7, 5, |x, y| [(x * 31) as u8, (y * 47) as u8, (x * y) as u8]).unwrap();
        let b = solid([9, 200, 100]);
        let model =
            CentroidModel::fit([(ClassLabel::Akiec, &a), (ClassLabel::Df, &b), (ClassLabel::Df, &a)], 6, 0.07).unwrap();
        let text = model.to_csv();
        assert!(text.starts_with("bins,6\ntemperature,0.07\n"));
        assert!(text.contains("MEL,absent"));
        assert_eq!(CentroidModel::from_csv(&text).unwrap(), model);
        assert!(CentroidModel::from_csv(&text.replace("bins,6", "bins,5")).is_err());
        assert!(CentroidModel::from_csv("bins,6\n").is_err());
    }

    #[test]
    fn training_from_files_ignores_worker_count() {
        let dir = tempfile::tempdir().unwrap();
        let mut entries = Vec::new();
        for i in 0..12u8 {
            let img = ImageBuffer::from_fn(8, 8, |x, y| [i * 20, (x * 30) as u8, (y * 30) as u8]).unwrap();
            let id = format!("img{i:02}");
            std::fs::write(dir.path().join(format!("{id}.png")), crate::pipeline::encode_png(&img)).unwrap();
            entries.push(crate::manifest::ManifestEntry {
                path: format!("{id}.png").into(),
                image_id: id,
                label: ClassLabel::ALL[usize::from(i) % 3],
            });
        }
        let m = DatasetManifest::from_entries(entries).unwrap();
        let one = train_centroids(&m, dir.path(), 8, 0.05, 1).unwrap();
        let four = train_centroids(&m, dir.path(), 8, 0.05, 4).unwrap();
        assert_eq!(one, four);

        let missing = DatasetManifest::from_entries(vec![crate::manifest::ManifestEntry {
            image_id: "nope".into(),
            path: "nope.jpg".into(),
            label: ClassLabel::Mel,
        }])
        .unwrap();
        assert!(matches!(train_centroids(&missing, dir.path(), 8, 0.05, 1), Err(BaselineError::Image { .. })));
    }
}
