use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::geom::Point;

/// Shell radius of the non-center points, as a fraction of the neighborhood
/// radius.
pub const SHELL_RADIUS: f64 = 0.66;

/// Rigid kernel: one point at the origin and the rest spread over a shell by
/// repulsion. Stored in unit form (neighborhood radius 1).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelDisposition {
    pub points: Vec<[f64; 3]>,
}

impl KernelDisposition {
    pub fn generate(k: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shell: Vec<Point> = (1..k)
            .map(|_| {
                let v = Point::new(
                    StandardNormal.sample(&mut rng),
                    StandardNormal.sample(&mut rng),
                    StandardNormal.sample(&mut rng),
                );
                v.normalize()
            })
            .collect();
        // Projected gradient descent on Σ 1/‖pᵢ − pⱼ‖ over the unit sphere.
        let step = 0.05;
        for _ in 0..400 {
            let forces: Vec<Point> = (0..shell.len())
                .map(|i| {
                    let mut f = Point::zeros();
                    for j in 0..shell.len() {
                        if i != j {
                            let d = shell[i] - shell[j];
                            let n = d.norm().max(1e-6);
                            f += d / (n * n * n);
                        }
                    }
                    f
                })
                .collect();
            for (p, f) in shell.iter_mut().zip(&forces) {
                let tangent = f - *p * p.dot(f);
                *p = (*p + tangent * step / shell_len_scale(k)).normalize();
            }
        }
        let mut points = vec![[0.0; 3]];
        points.extend(shell.iter().map(|p| {
            let q = p * SHELL_RADIUS;
            [q.x, q.y, q.z]
        }));
        points.truncate(k);
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Kernel points for a neighborhood of radius `radius`.
    pub fn scaled(&self, radius: f64) -> Vec<Point> {
        self.points
            .iter()
            .map(|p| Point::new(p[0], p[1], p[2]) * radius)
            .collect()
    }
}

fn shell_len_scale(k: usize) -> f64 {
    (k.max(2) - 1) as f64
}
