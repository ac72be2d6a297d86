use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ParamSet, Tape, Var};
use crate::error::{Error, Result};

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is (near) zero are judged on an absolute scale.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// One scalar inside a [`ParamSet`]: parameter index and row-major offset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCoord {
    pub param: usize,
    pub offset: usize,
}

/// Draws `count` distinct coordinates among the trainable parameters.
pub fn sample_coords(params: &ParamSet, count: usize, seed: u64) -> Vec<ParamCoord> {
    let all: Vec<ParamCoord> = params
        .iter()
        .enumerate()
        .filter(|(_, p)| p.trainable())
        .flat_map(|(i, p)| (0..p.len()).map(move |offset| ParamCoord { param: i, offset }))
        .collect();
    if count >= all.len() {
        return all;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool = all;
    for i in 0..count {
        let j = rng.random_range(i..pool.len());
        pool.swap(i, j);
    }
    pool.truncate(count);
    pool
}

fn eval<F>(f: &mut F, params: &ParamSet) -> Result<f64>
where
    F: FnMut(&mut Tape, &ParamSet) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, params)?;
    let v = tape.scalar(out);
    if !v.is_finite() {
        return Err(Error::Numeric {
            op: "grad_check",
            detail: format!("loss evaluated to {v}"),
        });
    }
    Ok(v)
}

/// Compares the tape gradient of `f` with central differences at the given
/// coordinates (all trainable coordinates when `coords` is `None`) and
/// returns the worst relative error `|a - n| / max(|a|, |n|, floor)`.
pub fn grad_check<F>(
    params: &mut ParamSet,
    epsilon: f64,
    coords: Option<&[ParamCoord]>,
    mut f: F,
) -> Result<f64>
where
    F: FnMut(&mut Tape, &ParamSet) -> Result<Var>,
{
    if !(1e-6..=1e-4).contains(&epsilon) {
        return Err(Error::InvalidConfig(format!(
            "finite-difference step {epsilon} outside [1e-6, 1e-4]"
        )));
    }
    let mut tape = Tape::new();
    let out = f(&mut tape, params)?;
    if !tape.scalar(out).is_finite() {
        return Err(Error::Numeric {
            op: "grad_check",
            detail: "non-finite loss".into(),
        });
    }
    let grads = tape.backward(out)?;
    let owned;
    let coords = match coords {
        Some(c) => c,
        None => {
            owned = sample_coords(params, usize::MAX, 0);
            &owned
        }
    };
    let mut worst = 0.0f64;
    for c in coords {
        let analytic = grads
            .get(params.key(c.param))
            .and_then(|g| g.iter().nth(c.offset).copied())
            .unwrap_or(0.0);
        let original = params
            .value(c.param)
            .iter()
            .nth(c.offset)
            .copied()
            .ok_or_else(|| Error::InvalidInput(format!("coordinate {c:?} out of range")))?;
        set(params, *c, original + epsilon);
        let plus = eval(&mut f, params);
        set(params, *c, original - epsilon);
        let minus = eval(&mut f, params);
        set(params, *c, original);
        let numeric = (plus? - minus?) / (2.0 * epsilon);
        let denom = analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        worst = worst.max((analytic - numeric).abs() / denom);
    }
    Ok(worst)
}

fn set(params: &mut ParamSet, c: ParamCoord, v: f64) {
    if let Some(slot) = params.value_mut(c.param).iter_mut().nth(c.offset) {
        *slot = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    #[test]
    fn quadratic_in_ten_parameters() {
        let mut ps = ParamSet::new(0);
        ps.push(
            "x",
            Array2::from_shape_fn((1, 10), |(_, j)| j as f64 * 0.3 - 1.0),
            true,
        );
        let weights = Array2::from_shape_fn((1, 10), |(_, j)| 1.0 + j as f64);
        let err = grad_check(&mut ps, 1e-5, None, |tape, p| {
            let x = tape.param(p, 0)?;
            let w = tape.constant(weights.clone())?;
            let sq = tape.mul(x, x)?;
            let wsq = tape.mul(sq, w)?;
            tape.sum(wsq)
        })
        .unwrap();
        assert!(err <= 1e-7, "{err}");
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let mut ps = ParamSet::new(0);
        ps.push("x", array![[1.0, 2.0]], true);
        let err = grad_check(&mut ps, 1e-5, None, |tape, p| {
            let _ = tape.param(p, 0)?;
            tape.constant(array![[4.2]])
        })
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn rejects_out_of_range_epsilon() {
        let mut ps = ParamSet::new(0);
        ps.push("x", array![[1.0]], true);
        assert!(grad_check(&mut ps, 1e-2, None, |t, p| t.param(p, 0)).is_err());
    }

    #[test]
    fn sampled_coords_are_distinct() {
        let mut ps = ParamSet::new(0);
        ps.push("a", Array2::zeros((8, 8)), true);
        ps.push("b", Array2::zeros((1, 4)), false);
        let c = sample_coords(&ps, 20, 7);
        assert_eq!(c.len(), 20);
        assert!(c.iter().all(|c| c.param == 0));
        let mut seen: Vec<_> = c.iter().map(|c| c.offset).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 20);
    }
}
