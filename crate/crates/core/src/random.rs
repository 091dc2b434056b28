//! Random instances for tests, verification and synthetic pools.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Exp1};

use crate::domain::{complete_mask, normalize_belief, BeliefSnapshot, FJParameters};
use crate::error::{Error, Result};

/// Flat Dirichlet draw of length `k`.
pub fn random_simplex<R: Rng + ?Sized>(rng: &mut R, k: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..k)
        .map(|_| <Exp1 as Distribution<f64>>::sample(&Exp1, rng).max(f64::MIN_POSITIVE))
        .collect();
    let z: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= z);
    v
}

pub fn random_snapshot<R: Rng + ?Sized>(rng: &mut R, n: usize, d: usize) -> Result<BeliefSnapshot> {
    let rows = (0..n)
        .map(|_| normalize_belief(&random_simplex(rng, d)))
        .collect::<Result<Vec<_>>>()?;
    BeliefSnapshot::new(rows)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamRanges {
    pub gamma: (f64, f64),
    pub alpha: (f64, f64),
}

impl Default for ParamRanges {
    fn default() -> Self {
        Self {
            gamma: (0.05, 0.95),
            alpha: (0.0, 0.9),
        }
    }
}

fn draw_in<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Complete-graph parameters with Dirichlet rows of `W`. A positive lower
/// bound on `gamma` keeps the draw contractive.
pub fn random_params<R: Rng + ?Sized>(rng: &mut R, n: usize, ranges: ParamRanges) -> Result<FJParameters> {
    let (glo, ghi) = ranges.gamma;
    let (alo, ahi) = ranges.alpha;
    if !(0.0..=1.0).contains(&glo)
        || !(glo..=1.0).contains(&ghi)
        || !(0.0..=1.0).contains(&alo)
        || !(alo..=1.0).contains(&ahi)
    {
        return Err(Error::InvalidArgument(format!("bad parameter ranges {ranges:?}")));
    }
    let gamma = (0..n).map(|_| draw_in(rng, ranges.gamma)).collect();
    let alpha = (0..n).map(|_| draw_in(rng, ranges.alpha)).collect();
    let mut w = DMatrix::zeros(n, n);
    if n > 1 {
        for i in 0..n {
            let row = random_simplex(rng, n - 1);
            for (k, j) in (0..n).filter(|&j| j != i).enumerate() {
                w[(i, j)] = row[k];
            }
        }
    }
    FJParameters::new(gamma, alpha, w, complete_mask(n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn draws_are_valid_and_seeded() {
        let mut a = ChaCha8Rng::seed_from_u64(3);
        let mut b = ChaCha8Rng::seed_from_u64(3);
        let pa = random_params(&mut a, 4, ParamRanges::default()).unwrap();
        let pb = random_params(&mut b, 4, ParamRanges::default()).unwrap();
        assert_eq!(pa, pb);
        assert!(pa.gamma().iter().all(|g| (0.05..0.95).contains(g)));
        let s = random_snapshot(&mut a, 3, 5).unwrap();
        assert_eq!((s.n(), s.d()), (3, 5));
    }
}
