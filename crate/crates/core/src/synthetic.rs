//! Synthetic feature tensors for tests, demos and smoke runs.
//!
//! Two generators: [`BlobScene`] places one salient rectangle on a flat
//! background, and [`PartScenes`] builds images of several "objects", each a
//! fixed set of part prototypes scattered over a noisy grid, so that the
//! max-masked descriptors of one object cluster together.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::tensor::FeatureTensor;

/// A salient rectangle whose activations have `contrast` times the background mean.
#[derive(Debug, Clone, Copy)]
pub struct BlobScene {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Fraction of the grid covered by the blob, approximately.
    pub blob_fraction: f64,
    pub contrast: f32,
}

impl BlobScene {
    /// Returns the tensor and the blob cells `(x0..=x1, y0..=y1)` as 1-based bounds.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (FeatureTensor, [usize; 4]) {
        let side = self.blob_fraction.sqrt();
        let bw = ((self.width as f64 * side).round() as usize).clamp(1, self.width);
        let bh = ((self.height as f64 * side).round() as usize).clamp(1, self.height);
        let x0 = rng.gen_range(1..=self.width - bw + 1);
        let y0 = rng.gen_range(1..=self.height - bh + 1);
        let bounds = [x0, x0 + bw - 1, y0, y0 + bh - 1];
        let t = FeatureTensor::from_fn(self.width, self.height, self.channels, |x, y, _| {
            let v: f32 = rng.gen_range(0.0..1.0);
            if (bounds[0]..=bounds[1]).contains(&x) && (bounds[2]..=bounds[3]).contains(&y) {
                v * self.contrast
            } else {
                v
            }
        })
        .expect("generator dimensions are positive");
        (t, bounds)
    }
}

/// Objects made of part prototypes on a noisy background.
#[derive(Debug, Clone)]
pub struct PartScenes {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Upper bound of the uniform background activation.
    pub background: f32,
    /// Relative multiplicative jitter applied to every part activation.
    pub jitter: f32,
    /// `objects × parts × channels` prototypes.
    prototypes: Vec<Vec<Vec<f32>>>,
}

impl PartScenes {
    pub fn new<R: Rng + ?Sized>(
        width: usize,
        height: usize,
        channels: usize,
        objects: usize,
        parts: usize,
        rng: &mut R,
    ) -> Self {
        assert!(parts <= width * height, "more parts than grid cells");
        let prototypes = (0..objects)
            .map(|_| {
                (0..parts)
                    .map(|_| (0..channels).map(|_| rng.gen_range(1.0..3.0)).collect())
                    .collect()
            })
            .collect();
        Self {
            width,
            height,
            channels,
            background: 0.3,
            jitter: 0.1,
            prototypes,
        }
    }

    pub fn objects(&self) -> usize {
        self.prototypes.len()
    }

    /// One image of `object`: every part at a distinct random cell.
    pub fn sample<R: Rng + ?Sized>(&self, object: usize, rng: &mut R) -> FeatureTensor {
        let cells = self.width * self.height;
        let mut order: Vec<usize> = (0..cells).collect();
        order.shuffle(rng);
        let mut data: Vec<f32> = (0..cells * self.channels)
            .map(|_| rng.gen_range(0.0..self.background))
            .collect();
        for (part, &cell) in self.prototypes[object].iter().zip(&order) {
            for (k, &p) in part.iter().enumerate() {
                let j: f32 = rng.gen_range(-self.jitter..=self.jitter);
                data[cell * self.channels + k] = p * (1.0 + j);
            }
        }
        FeatureTensor::new(self.width, self.height, self.channels, data)
            .expect("generator dimensions are positive")
    }
}
