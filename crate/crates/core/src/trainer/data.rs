use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Labelled images, NHWC, pixels in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
    /// H, W, C of one image.
    pub shape: [usize; 3],
    pub classes: usize,
}

/// One mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Vec<f64>,
    pub targets: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

impl Dataset {
    pub fn new(images: Vec<f64>, labels: Vec<usize>, shape: [usize; 3], classes: usize) -> Result<Self> {
        let per = shape.iter().product::<usize>();
        if per == 0 || images.len() != per * labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} pixels for {} images of {shape:?}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidParameter(format!("label {bad} with {classes} classes")));
        }
        Ok(Self {
            images,
            labels,
            shape,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        let per = self.image_len();
        let mut inputs = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            inputs.extend_from_slice(&self.images[i * per..(i + 1) * per]);
        }
        Batch {
            inputs,
            targets: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Index order for one epoch.
    pub fn shuffled(&self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        idx
    }

    /// The first `n` samples.
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            images: self.images[..n * self.image_len()].to_vec(),
            labels: self.labels[..n].to_vec(),
            shape: self.shape,
            classes: self.classes,
        }
    }
}

/// Parameters of the synthetic class-template dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub samples: usize,
    pub height: usize,
    pub width: usize,
    /// Scale of the class template around mid-grey.
    pub contrast: f64,
    /// Standard deviation of the per-pixel noise.
    pub noise: f64,
    /// Index of the sample stream. Specs differing only here share the class
    /// templates but draw independent samples (train/test splits).
    pub draw: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            samples: 1000,
            height: 28,
            width: 28,
            contrast: 0.25,
            noise: 0.2,
            draw: 0,
        }
    }
}

/// Class-conditional 8-bit images: every class has a frozen random template
/// (a few Gaussian blobs), each sample is its class template plus pixel
/// noise, quantized to bytes. Returns raw bytes (N×H×W) and labels.
/// Templates depend only on `seed`; samples also on `spec.draw`.
pub fn gen_synthetic_bytes(spec: &SyntheticSpec, seed: u64) -> Result<(Vec<u8>, Vec<u8>)> {
    if spec.classes == 0 || spec.classes > 256 || spec.height == 0 || spec.width == 0 {
        return Err(Error::InvalidParameter(format!("bad synthetic spec {spec:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (spec.height, spec.width);
    let templates: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| {
            let mut t = vec![0.0; h * w];
            for _ in 0..4 {
                let cy = rng.random_range(0.0..h as f64);
                let cx = rng.random_range(0.0..w as f64);
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                let r2 = (h.min(w) as f64 / 5.0).powi(2);
                for y in 0..h {
                    for x in 0..w {
                        let dist = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                        t[y * w + x] += sign * (-dist / (2.0 * r2)).exp();
                    }
                }
            }
            t
        })
        .collect();
    rng.set_stream(spec.draw + 1);
    let mut images = Vec::with_capacity(spec.samples * h * w);
    let mut labels = Vec::with_capacity(spec.samples);
    for i in 0..spec.samples {
        let class = (i + rng.random_range(0..spec.classes)) % spec.classes;
        labels.push(class as u8);
        for &t in &templates[class] {
            let n: f64 = StandardNormal.sample(&mut rng);
            let v = 0.5 + spec.contrast * t + spec.noise * n;
            images.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok((images, labels))
}

/// [`gen_synthetic_bytes`] decoded into a single-channel dataset.
pub fn gen_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    let (images, labels) = gen_synthetic_bytes(spec, seed)?;
    from_bytes(&images, &labels, spec.height, spec.width, spec.classes)
}

/// Builds a dataset from 8-bit pixels (scaled by 1/255) and byte labels.
pub fn from_bytes(images: &[u8], labels: &[u8], h: usize, w: usize, classes: usize) -> Result<Dataset> {
    Dataset::new(
        images.iter().map(|&b| b as f64 / 255.0).collect(),
        labels.iter().map(|&l| l as usize).collect(),
        [h, w, 1],
        classes,
    )
}
