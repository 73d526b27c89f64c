use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::model::MaskPlan;

/// Masks `round(ratio · M)` patches chosen uniformly at random. Visible
/// patches keep the shuffled order.
pub fn make_mask<R: Rng + ?Sized>(tokens: usize, ratio: f64, rng: &mut R) -> Result<MaskPlan> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::DegenerateMask(format!("ratio {ratio} is outside (0, 1)")));
    }
    let n_masked = (ratio * tokens as f64).round() as usize;
    if n_masked == 0 || n_masked >= tokens {
        return Err(Error::DegenerateMask(format!(
            "ratio {ratio} masks {n_masked} of {tokens} patches"
        )));
    }
    let mut order: Vec<usize> = (0..tokens).collect();
    order.shuffle(rng);
    let masked = order.split_off(tokens - n_masked);
    MaskPlan::new(tokens, order, masked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = make_mask(196, 0.75, &mut rng).unwrap();
        assert_eq!((p.n_visible(), p.n_masked()), (49, 147));
        let p = make_mask(64, 0.75, &mut rng).unwrap();
        assert_eq!(p.n_masked(), 48);
        assert_eq!(p.mask().iter().filter(|m| **m).count(), 48);
    }

    #[test]
    fn distinct_states_differ() {
        let mut a = ChaCha8Rng::seed_from_u64(1);
        let mut b = ChaCha8Rng::seed_from_u64(2);
        assert_ne!(make_mask(64, 0.75, &mut a).unwrap(), make_mask(64, 0.75, &mut b).unwrap());
    }

    #[test]
    fn degenerate_ratios() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for r in [0.0, 1.0, 0.01, 0.999] {
            assert!(matches!(make_mask(16, r, &mut rng), Err(Error::DegenerateMask(_))), "{r}");
        }
    }
}
