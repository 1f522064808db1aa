use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{DataError, Dataset};

/// Class-conditional noisy images.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub shape: [usize; 3],
    pub num_classes: usize,
    /// Standard deviation of the per-pixel Gaussian noise.
    pub noise: f32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            n_train: 2000,
            n_test: 400,
            shape: [3, 16, 16],
            num_classes: 10,
            noise: 1.5,
        }
    }
}

/// Side of the coarse grid each class mean is drawn on before upsampling.
const GRID: usize = 4;

/// Returns `(train, test)`.
///
/// Each class has a mean image: a `4×4` grid of `U(0,1)` values per channel,
/// upsampled by nearest neighbour. A sample is its class mean plus Gaussian
/// noise, clipped to `[0, 1]`. Both splits are stratified (class counts differ
/// by at most one) and shuffled.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<(Dataset, Dataset), DataError> {
    let [c, h, w] = cfg.shape;
    if cfg.n_train == 0 || cfg.n_test == 0 || c * h * w == 0 || cfg.num_classes == 0 {
        return Err(DataError::Config(
            "synthetic dataset parameters must be positive".into(),
        ));
    }
    if !(cfg.noise >= 0.0 && cfg.noise.is_finite()) {
        return Err(DataError::Config(format!(
            "noise must be non-negative, got {}",
            cfg.noise
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let means: Vec<Vec<f32>> = (0..cfg.num_classes)
        .map(|_| {
            let grid: Vec<f32> = (0..c * GRID * GRID).map(|_| rng.random::<f32>()).collect();
            let mut img = Vec::with_capacity(c * h * w);
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        img.push(grid[ch * GRID * GRID + (y * GRID / h) * GRID + x * GRID / w]);
                    }
                }
            }
            img
        })
        .collect();
    let noise = Normal::new(0.0f32, cfg.noise).expect("validated");
    let mut make = |n: usize| {
        let mut labels: Vec<usize> = (0..n).map(|i| i % cfg.num_classes).collect();
        labels.shuffle(&mut rng);
        let mut pixels = Vec::with_capacity(n * c * h * w);
        for &label in &labels {
            pixels.extend(
                means[label]
                    .iter()
                    .map(|&m| (m + noise.sample(&mut rng)).clamp(0.0, 1.0)),
            );
        }
        Dataset::new(cfg.shape, cfg.num_classes, pixels, labels)
    };
    let train = make(cfg.n_train)?;
    let test = make(cfg.n_test)?;
    Ok((train, test))
}
