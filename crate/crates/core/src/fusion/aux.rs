use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, UnitSphere};

use crate::geom::{Point, PointCloud};
use crate::Result;

pub const AUX_CHANNELS: usize = 3;

/// Smooth color field over world coordinates: per channel, the mean of two
/// plane waves mapped into `[0, 1]`. Wavelengths lie in `[0.4, 1.5]` m so
/// neighboring flat structures get visibly different colors.
#[derive(Clone, Debug)]
pub struct ColorField {
    waves: [[(Point, f64); 2]; AUX_CHANNELS],
}

impl ColorField {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0105_f1e1d);
        let mut wave = || {
            let dir: [f64; 3] = UnitSphere.sample(&mut rng);
            let wavelength = rng.random_range(0.4..1.5);
            let k = Point::new(dir[0], dir[1], dir[2]) * (2.0 * PI / wavelength);
            (k, rng.random_range(0.0..2.0 * PI))
        };
        let mut waves = [[(Point::zeros(), 0.0); 2]; AUX_CHANNELS];
        for ch in waves.iter_mut() {
            for w in ch.iter_mut() {
                *w = wave();
            }
        }
        Self { waves }
    }

    pub fn eval(&self, p: &Point) -> [f64; AUX_CHANNELS] {
        let mut out = [0.0; AUX_CHANNELS];
        for (o, ch) in out.iter_mut().zip(&self.waves) {
            let s: f64 = ch.iter().map(|(k, phase)| (k.dot(p) + phase).sin()).sum();
            *o = (0.5 + 0.25 * s).clamp(0.0, 1.0);
        }
        out
    }
}

/// Three channels per point, row-major.
pub fn synth_aux_modality(cloud: &PointCloud, seed: u64) -> Vec<f64> {
    let field = ColorField::new(seed);
    cloud.points.iter().flat_map(|p| field.eval(p)).collect()
}

/// `cloud` with its auxiliary channels replaced by the synthetic field.
pub fn with_synth_aux(cloud: &PointCloud, seed: u64) -> Result<PointCloud> {
    let mut out = cloud.clone();
    out.set_aux(synth_aux_modality(cloud, seed), AUX_CHANNELS)?;
    Ok(out)
}
