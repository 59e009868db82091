use rand::seq::index::sample;

use super::params::ParamStore;
use super::tape::{Tape, Var};
use super::{seeded_rng, NumericError, Result, Scalar};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Central-difference step, within `[1e-7, 1e-3]`.
    pub eps: f64,
    /// Coordinates checked per parameter (all of them when fewer exist).
    pub samples_per_param: usize,
    /// Denominator floor for the relative error, so exact zeros compare cleanly.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            samples_per_param: 100,
            abs_floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub coords: usize,
    pub nonzero_coords: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<(String, usize)>,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn coords_checked(&self) -> usize {
        self.params.iter().map(|p| p.coords).sum()
    }
}

fn eval_loss<S, F>(params: &ParamStore<S>, forward: &F) -> Result<S>
where
    S: Scalar,
    F: for<'p> Fn(&'p ParamStore<S>, &mut Tape<'p, S>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = forward(params, &mut tape)?;
    tape.value(loss).item()
}

/// Compares tape gradients against central differences
/// `(f(x+eps) - f(x-eps)) / 2eps` on a random subsample of coordinates of
/// every parameter and returns the worst relative error.
///
/// Up to half of each sample is drawn from coordinates whose analytic
/// gradient is nonzero, so sparse gradients (embedding rows) get exercised.
pub fn grad_check<S, F>(
    params: &mut ParamStore<S>,
    forward: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    S: Scalar,
    F: for<'p> Fn(&'p ParamStore<S>, &mut Tape<'p, S>) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&opts.eps) {
        return Err(NumericError::Contract {
            op: "grad_check",
            msg: format!("eps {} outside [1e-7, 1e-3]", opts.eps),
        });
    }
    let analytic = {
        let mut tape = Tape::new();
        let loss = forward(params, &mut tape)?;
        let first = tape.value(loss).item()?;
        let second = eval_loss(params, &forward)?;
        if first.to_bits_eq(second) {
            tape.backward(loss)?
        } else {
            return Err(NumericError::Contract {
                op: "grad_check",
                msg: format!("forward is not deterministic: {first} vs {second}"),
            });
        }
    };

    let mut rng = seeded_rng(opts.seed);
    let eps = S::lit(opts.eps);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        params: Vec::new(),
    };
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let numel = params.value(id).numel();
        let grad: Vec<f64> = match analytic.get(id) {
            Some(g) => g.data().iter().map(|x| x.as_f64()).collect(),
            None => vec![0.0; numel],
        };
        let coords: Vec<usize> = if numel <= opts.samples_per_param {
            (0..numel).collect()
        } else {
            let support: Vec<usize> = (0..numel).filter(|&i| grad[i] != 0.0).collect();
            let from_support = support.len().min(opts.samples_per_param / 2);
            let mut chosen: Vec<usize> = sample(&mut rng, support.len(), from_support)
                .into_iter()
                .map(|k| support[k])
                .collect();
            let mut taken = vec![false; numel];
            for &c in &chosen {
                taken[c] = true;
            }
            let rest: Vec<usize> = (0..numel).filter(|&i| !taken[i]).collect();
            let need = opts.samples_per_param - chosen.len();
            chosen.extend(sample(&mut rng, rest.len(), need).into_iter().map(|k| rest[k]));
            chosen.sort_unstable();
            chosen
        };

        let mut check = ParamCheck {
            name: params.get(id).name.clone(),
            coords: coords.len(),
            nonzero_coords: coords.iter().filter(|&&i| grad[i] != 0.0).count(),
            max_rel_error: 0.0,
        };
        for &i in &coords {
            let orig = params.value(id).data()[i];
            params.get_mut(id).value.data_mut()[i] = orig + eps;
            let plus = eval_loss(params, &forward);
            params.get_mut(id).value.data_mut()[i] = orig - eps;
            let minus = eval_loss(params, &forward);
            params.get_mut(id).value.data_mut()[i] = orig;
            let numeric = ((plus? - minus?) / (eps + eps)).as_f64();
            let a = grad[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.abs_floor);
            if rel > check.max_rel_error {
                check.max_rel_error = rel;
            }
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((check.name.clone(), i));
            }
        }
        report.params.push(check);
    }
    Ok(report)
}

trait BitsEq {
    fn to_bits_eq(self, other: Self) -> bool;
}

impl<S: Scalar> BitsEq for S {
    fn to_bits_eq(self, other: Self) -> bool {
        self == other || (self.is_nan() && other.is_nan())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Tensor;
    use std::cell::Cell;

    #[test]
    fn linear_model_is_exact() {
        let mut rng = seeded_rng(9);
        let mut store = ParamStore::<f64>::new();
        let w = store.insert("w", Tensor::randn(&[4, 3], 1.0, &mut rng)).unwrap();
        let x = Tensor::<f64>::randn(&[3, 5], 1.0, &mut rng);
        let report = grad_check(
            &mut store,
            |p, tape| {
                let wv = tape.param(p, w);
                let xv = tape.constant(x.clone());
                let y = tape.matmul(wv, xv)?;
                tape.sum(y)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-8, "{report:?}");
        assert_eq!(report.coords_checked(), 12);
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        let mut rng = seeded_rng(21);
        let mut store = ParamStore::<f64>::new();
        let a = store.insert("a", Tensor::uniform(&[3, 4], -2.0, 2.0, &mut rng)).unwrap();
        let b = store.insert("b", Tensor::uniform(&[5, 4], -2.0, 2.0, &mut rng)).unwrap();
        let g = store.insert("g", Tensor::uniform(&[4], -2.0, 2.0, &mut rng)).unwrap();
        let be = store.insert("be", Tensor::uniform(&[4], -2.0, 2.0, &mut rng)).unwrap();
        let t = store.insert("t", Tensor::uniform(&[6, 4], -2.0, 2.0, &mut rng)).unwrap();
        let report = grad_check(
            &mut store,
            |p, tape| {
                let a = tape.param(p, a);
                let b = tape.param(p, b);
                let g = tape.param(p, g);
                let be = tape.param(p, be);
                let t = tape.param(p, t);
                let n = tape.layer_norm(a, g, be)?;
                let s = tape.matmul_nt(n, b)?;
                let sm = tape.softmax_rows(s)?;
                let bb = tape.matmul(sm, b)?;
                let ge = tape.gelu(bb)?;
                let rows = tape.gather_rows(t, &[1, 4, 1])?;
                let both = tape.concat_rows(&[ge, rows])?;
                let left = tape.slice_cols(both, 0, 2)?;
                let right = tape.slice_cols(both, 2, 4)?;
                let prod = tape.mul(left, right)?;
                let wide = tape.concat_cols(&[prod, left])?;
                let top = tape.slice_rows(wide, 1, 5)?;
                let mean = tape.mean_rows(top)?;
                let logits = tape.scale(mean, 1.7)?;
                let plus = tape.add(logits, logits)?;
                tape.cross_entropy(plus, 2)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
        assert!(report.params.iter().all(|p| p.nonzero_coords > 0), "{report:?}");
    }

    #[test]
    fn nondeterministic_forward_is_rejected() {
        let mut store = ParamStore::<f64>::new();
        let w = store.insert("w", Tensor::full(&[1], 1.0)).unwrap();
        let calls = Cell::new(0.0);
        let err = grad_check(
            &mut store,
            |p, tape| {
                calls.set(calls.get() + 1.0);
                let wv = tape.param(p, w);
                let c = tape.constant(Tensor::full(&[1], calls.get()));
                let y = tape.mul(wv, c)?;
                tape.sum(y)
            },
            &GradCheckOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, NumericError::Contract { op: "grad_check", .. }));
    }

    #[test]
    fn eps_out_of_range_is_rejected() {
        let mut store = ParamStore::<f64>::new();
        let opts = GradCheckOptions {
            eps: 1e-2,
            ..Default::default()
        };
        assert!(grad_check(&mut store, |_, tape| Ok(tape.constant(Tensor::scalar(0.0))), &opts).is_err());
    }
}
