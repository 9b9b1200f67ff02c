//! Density smoothness regularizer: mean `|sigma(p) - sigma(p + rho u)|`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, UnitSphere};

use crate::error::{Error, Result};
use crate::hexplane::{sigmoid, MAX_CHANNELS};
use crate::optim::grad::BranchGrad;
use crate::render::Branch;
use crate::Vec3;

pub trait DensityField {
    type Grad: ?Sized;

    fn density(&self, p: &Vec3) -> f64;

    /// Add `scale * d sigma(p) / d params` into `grad`.
    fn add_density_grad(&self, p: &Vec3, scale: f64, grad: &mut Self::Grad);
}

impl DensityField for Branch<'_> {
    type Grad = BranchGrad;

    fn density(&self, p: &Vec3) -> f64 {
        self.eval(p).sigma
    }

    fn add_density_grad(&self, p: &Vec3, scale: f64, grad: &mut BranchGrad) {
        let fp = self.planes.footprint(p);
        let mut f = [0.0; MAX_CHANNELS];
        self.planes.gather(&fp, &mut f);
        let c = self.planes.channels();
        let z = self.decoder.logits(&f[..c]);
        grad.accumulate(self, &fp, &f[..c], [scale * sigmoid(z[0]), 0.0, 0.0, 0.0]);
    }
}

/// Where the point pairs come from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairSampler {
    pub seed: u64,
    /// Points are uniform in `[-half_extent, half_extent]^3`.
    pub half_extent: f64,
    /// Perturbation direction; a random unit vector per pair when `None`.
    pub direction: Option<Vec3>,
}

/// Returns the unweighted loss; when `grad` is given, adds `weight * d loss / d params`.
pub fn density_regularizer<F: DensityField>(
    field: &F,
    pairs: usize,
    rho: f64,
    sampler: PairSampler,
    weight: f64,
    mut grad: Option<&mut F::Grad>,
) -> Result<f64> {
    if pairs == 0 {
        return Err(Error::InvalidArgument("density regularizer needs at least one point pair".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sampler.seed);
    let h = sampler.half_extent;
    let mut loss = 0.0;
    for _ in 0..pairs {
        let p = Vec3::new(rng.random_range(-h..=h), rng.random_range(-h..=h), rng.random_range(-h..=h));
        let u = match sampler.direction {
            Some(d) => d.normalize(),
            None => Vec3::from(UnitSphere.sample(&mut rng)),
        };
        let q = p + u * rho;
        let d = field.density(&p) - field.density(&q);
        loss += d.abs();
        if let Some(g) = grad.as_deref_mut() {
            // Subgradient 0 at d = 0.
            let sign = if d > 0.0 { 1.0 } else if d < 0.0 { -1.0 } else { 0.0 };
            let s = weight * sign / pairs as f64;
            if s != 0.0 {
                field.add_density_grad(&p, s, g);
                field.add_density_grad(&q, -s, g);
            }
        }
    }
    Ok(loss / pairs as f64)
}
