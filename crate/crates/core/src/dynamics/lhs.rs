use rand::seq::SliceRandom;
use rand::Rng;

/// Latin hypercube design: along every dimension each of the `count`
/// equal-width strata holds exactly one sample.
pub fn lhs_sample<R: Rng + ?Sized>(bounds: &[(f64, f64)], count: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut samples = vec![vec![0.0; bounds.len()]; count];
    for (d, &(lo, hi)) in bounds.iter().enumerate() {
        let mut strata: Vec<usize> = (0..count).collect();
        strata.shuffle(rng);
        for (s, &k) in samples.iter_mut().zip(&strata) {
            let frac = (k as f64 + rng.gen::<f64>()) / count as f64;
            s[d] = (lo + frac * (hi - lo)).clamp(lo, hi);
        }
    }
    samples
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn occupancy(samples: &[Vec<f64>], d: usize, (lo, hi): (f64, f64)) -> Vec<usize> {
        let n = samples.len();
        let mut hist = vec![0; n];
        for s in samples {
            let k = (((s[d] - lo) / (hi - lo)) * n as f64).floor() as usize;
            hist[k.min(n - 1)] += 1;
        }
        hist
    }

    #[test]
    fn single_sample_is_inside_box() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = lhs_sample(&[(0.01, 0.04), (0.025, 0.075)], 1, &mut rng);
        assert!((0.01..=0.04).contains(&s[0][0]) && (0.025..=0.075).contains(&s[0][1]));
    }

    #[test]
    fn one_sample_per_quarter() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = lhs_sample(&[(0.0, 1.0)], 4, &mut rng);
        assert_eq!(occupancy(&s, 0, (0.0, 1.0)), vec![1; 4]);
    }

    #[test]
    fn full_design_on_parameter_box_is_latin() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bounds = [(0.01, 0.04), (0.025, 0.075)];
        let s = lhs_sample(&bounds, 126, &mut rng);
        for (d, &b) in bounds.iter().enumerate() {
            assert_eq!(occupancy(&s, d, b), vec![1; 126]);
        }
    }
}
