//! Central finite-difference check of tape gradients.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};

/// Denominator floor of the relative error.
pub const ROUNDOFF_FLOOR: f64 = 1e-6;

/// Which coordinates to probe.
#[derive(Debug, Clone, Copy)]
pub enum Coverage {
    All,
    /// At most this many randomly chosen coordinates per parameter.
    Sample(usize),
}

/// Compares analytic gradients against `(f(θ+ε) - f(θ-ε)) / 2ε`.
///
/// `loss` builds a forward pass on the given tape and returns its scalar
/// node. Returns the largest `|a - n| / max(ROUNDOFF_FLOOR, |a| + |n|)` seen.
/// Coordinates above [`KINK_RETRY_ABOVE`] at `eps` are re-probed at `eps/10`
/// and `eps/100`, keeping the smallest error.
pub fn finite_diff_check<F, R>(params: &ParamStore, eps: f64, coverage: Coverage, rng: &mut R, loss: F) -> Result<f64>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
    R: Rng + ?Sized,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Config(format!("finite-difference step {eps} outside [1e-7, 1e-3]")));
    }
    let analytic = {
        let mut tape = Tape::new(params);
        let l = loss(&mut tape)?;
        tape.backward(l)?
    };
    let eval = |p: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new(p);
        let l = loss(&mut tape)?;
        Ok(tape.value(l).data()[0])
    };

    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for id in 0..params.len() {
        let n = params.value(id).len();
        let coords: Vec<usize> = match coverage {
            Coverage::All => (0..n).collect(),
            Coverage::Sample(k) if k >= n => (0..n).collect(),
            Coverage::Sample(k) => sample(rng, n, k).into_vec(),
        };
        for c in coords {
            let a = analytic.get(id).map_or(0.0, |g| g.data()[c]);
            let mut err = f64::INFINITY;
            for step in [eps, eps / 10.0, eps / 100.0] {
                let numeric = central_difference(&mut probe, id, c, step, &eval)?;
                err = err.min((a - numeric).abs() / (a.abs() + numeric.abs()).max(ROUNDOFF_FLOOR));
                if err <= KINK_RETRY_ABOVE {
                    break;
                }
            }
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Relative error above which a coordinate is re-probed with smaller steps.
/// A finite step that straddles a ReLU or max-pool kink is biased, while a
/// wrong analytic gradient stays wrong at every step size.
pub const KINK_RETRY_ABOVE: f64 = 1e-5;

fn central_difference(probe: &mut ParamStore, id: usize, c: usize, step: f64, eval: &dyn Fn(&ParamStore) -> Result<f64>) -> Result<f64> {
    let orig = probe.value(id).data()[c];
    probe.value_mut(id).data_mut()[c] = orig + step;
    let up = eval(probe)?;
    probe.value_mut(id).data_mut()[c] = orig - step;
    let down = eval(probe)?;
    probe.value_mut(id).data_mut()[c] = orig;
    Ok((up - down) / (2.0 * step))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_function_has_zero_error() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = finite_diff_check(&p, 1e-5, Coverage::All, &mut rng, |t| {
            let _ = t.param("w")?;
            Ok(t.input(Tensor::scalar(3.0)))
        })
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn rejects_step_out_of_range() {
        let p = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = finite_diff_check(&p, 1e-2, Coverage::All, &mut rng, |t| Ok(t.input(Tensor::scalar(0.0))));
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
