use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{DataError, Dataset, LabeledSample};
use crate::tensor::Tensor;

/// Synthetic image classes.
///
/// Every class has a latent 2-D centre; class centres sit evenly on a circle
/// so that neighbouring centres are `separation` apart. A sample draws a
/// latent point from an isotropic Gaussian (std `spread`) around its class
/// centre and is rendered as a Gaussian bump at that point in a
/// `1×image_side×image_side` image, plus i.i.d. pixel noise.
#[derive(Debug, Clone, PartialEq)]
pub struct BlobParams {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub image_side: usize,
    pub separation: f64,
    pub spread: f64,
    pub pixel_noise: f64,
    pub seed: u64,
}

impl BlobParams {
    pub fn new(num_classes: usize, samples_per_class: usize, image_side: usize, separation: f64, seed: u64) -> Self {
        BlobParams {
            num_classes,
            samples_per_class,
            image_side,
            separation,
            spread: 1.0,
            pixel_noise: 0.05,
            seed,
        }
    }

    /// Latent class centres.
    pub fn centres(&self) -> Vec<(f64, f64)> {
        let c = self.num_classes as f64;
        let radius = if self.num_classes == 1 {
            0.0
        } else {
            self.separation / (2.0 * (PI / c).sin())
        };
        (0..self.num_classes)
            .map(|k| {
                let a = 2.0 * PI * k as f64 / c;
                (radius * a.cos(), radius * a.sin())
            })
            .collect()
    }

    /// Half-width of the latent square mapped onto the image: the circle plus
    /// three standard deviations.
    fn extent(&self) -> f64 {
        let (x, y) = self.centres()[0];
        (x * x + y * y).sqrt() + 3.0 * self.spread
    }
}

/// Two-way grouping of classes: the first half of the circle is group 0.
pub fn auxiliary_group(class: usize, num_classes: usize) -> usize {
    class * 2 / num_classes
}

/// Generates `num_classes × samples_per_class` samples in class order.
///
/// Draw order per sample: latent x, latent y, then pixel noise in row-major
/// order, all from one ChaCha8 stream seeded with `seed`.
pub fn generate_blobs(p: &BlobParams) -> Result<Dataset, DataError> {
    if !(p.separation > 0.0 && p.separation.is_finite()) {
        return Err(DataError::Invalid(format!("separation must be positive, got {}", p.separation)));
    }
    if p.num_classes < 2 || p.samples_per_class == 0 || p.image_side < 2 {
        return Err(DataError::Invalid(
            "need at least 2 classes, 1 sample per class and a 2-pixel image side".into(),
        ));
    }
    if p.spread.is_nan() || p.spread <= 0.0 || p.pixel_noise.is_nan() || p.pixel_noise < 0.0 {
        return Err(DataError::Invalid("spread must be positive and pixel noise non-negative".into()));
    }
    let side = p.image_side;
    let extent = p.extent();
    let latent_per_pixel = 2.0 * extent / side as f64;
    // A bump roughly a sixth of the image wide.
    let width = (side as f64 / 6.0).max(1.0) * latent_per_pixel;
    let inv = 1.0 / (2.0 * width * width);
    let coord = |i: usize| ((i as f64 + 0.5) / side as f64 - 0.5) * 2.0 * extent;

    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut samples = Vec::with_capacity(p.num_classes * p.samples_per_class);
    for (class, &(cx, cy)) in p.centres().iter().enumerate() {
        for _ in 0..p.samples_per_class {
            let dx: f64 = StandardNormal.sample(&mut rng);
            let dy: f64 = StandardNormal.sample(&mut rng);
            let (px, py) = (cx + p.spread * dx, cy + p.spread * dy);
            let mut pixels = Vec::with_capacity(side * side);
            for row in 0..side {
                // Row 0 is the top of the image, i.e. the largest y.
                let y = -coord(row);
                for col in 0..side {
                    let x = coord(col);
                    let d2 = (x - px).powi(2) + (y - py).powi(2);
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    pixels.push((-d2 * inv).exp() + p.pixel_noise * noise);
                }
            }
            samples.push(LabeledSample {
                input: Tensor::from_parts(vec![1, side, side], pixels),
                label: class,
                aux: Some(auxiliary_group(class, p.num_classes)),
            });
        }
    }
    Dataset::new(
        samples,
        p.num_classes,
        Some(2),
        format!(
            "blobs classes={} per_class={} side={} separation={} spread={} pixel_noise={} seed={}",
            p.num_classes, p.samples_per_class, side, p.separation, p.spread, p.pixel_noise, p.seed
        ),
    )
}
