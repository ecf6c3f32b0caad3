//! Central-difference gradient checking.

use crate::error::{Error, Result};
use crate::rng::{stream, Ns};
use crate::tensor::{ParamSet, Real};
use rand::seq::index;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
    pub checked: usize,
}

/// Compares analytic gradients against central differences on a random
/// subset of parameter coordinates.
///
/// `loss_grad` must fill `params` gradients and return the loss;
/// `loss` evaluates the loss only. The relative error per coordinate is
/// `|g - cd| / (|g| + |cd| + 1e-12)`. `eps` must lie in `[1e-5, 1e-2]`.
pub fn grad_check<T: Real>(
    params: &mut ParamSet<T>,
    mut loss: impl FnMut(&ParamSet<T>) -> Result<T>,
    mut loss_grad: impl FnMut(&mut ParamSet<T>) -> Result<T>,
    eps: f64,
    n_coords: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    if !(1e-5..=1e-2).contains(&eps) {
        return Err(Error::invalid(format!(
            "grad_check: eps {eps} outside [1e-5, 1e-2]"
        )));
    }
    params.zero_grads();
    let base = loss_grad(params)?.as_f64();
    if !base.is_finite() {
        return Err(Error::numeric(format!("grad_check: non-finite loss {base}")));
    }

    // Flatten (param, elem) coordinates and sample without replacement.
    let total = params.n_scalars();
    if total == 0 {
        return Err(Error::invalid("grad_check: empty parameter set"));
    }
    let take = n_coords.min(total);
    let mut rng = stream(seed, Ns::GradCheck, 0);
    let picks = index::sample(&mut rng, total, take);

    let mut offsets = Vec::with_capacity(params.len());
    let mut acc = 0usize;
    for p in params.iter() {
        offsets.push(acc);
        acc += p.len();
    }
    let locate = |flat: usize| -> (usize, usize) {
        let pi = match offsets.binary_search(&flat) {
            Ok(i) => i,
            Err(i) => i - 1,
        };
        (pi, flat - offsets[pi])
    };

    let mut max_rel = 0.0f64;
    let mut sum_rel = 0.0f64;
    for flat in picks.iter() {
        let (pi, ei) = locate(flat);
        let analytic = params.get(pi).grad[ei].as_f64();
        let orig = params.get(pi).data[ei];
        let step = T::from_f64(eps);

        params.get_mut(pi).data[ei] = orig + step;
        let up = loss(params)?.as_f64();
        params.get_mut(pi).data[ei] = orig - step;
        let dn = loss(params)?.as_f64();
        params.get_mut(pi).data[ei] = orig;

        if !up.is_finite() || !dn.is_finite() {
            return Err(Error::numeric(
                "grad_check: non-finite loss under perturbation".to_string(),
            ));
        }
        let cd = (up - dn) / (2.0 * eps);
        let rel = (analytic - cd).abs() / (analytic.abs() + cd.abs() + 1e-12);
        max_rel = max_rel.max(rel);
        sum_rel += rel;
    }

    Ok(GradCheckReport {
        max_rel_err: max_rel,
        mean_rel_err: sum_rel / take as f64,
        checked: take,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::tape::Tape;

    // Quadratic in three params: L = sum((w - t)^2); exact analytic grads,
    // so central differences must agree to machine-ish precision at f64.
    #[test]
    fn quadratic_passes_tightly() {
        let mut ps = ParamSet::<f64>::new();
        ps.add("w", vec![3], vec![0.3, -1.2, 2.0]).unwrap();
        let target = vec![1.0, 1.0, 1.0];
        let eval = |ps: &ParamSet<f64>, want_grad: bool, out: Option<&mut ParamSet<f64>>| {
            let mut t = Tape::<f64>::new();
            let w = t.param(0, &ps.get(0).data, [1, 3, 1, 1]).unwrap();
            let tgt = t.leaf(target.clone(), [1, 3, 1, 1]).unwrap();
            let l = t.sq_loss(w, tgt, 1.0).unwrap();
            if want_grad {
                t.backward(l).unwrap();
                let out = out.unwrap();
                for (slot, g) in t.param_grads() {
                    out.get_mut(slot).grad.copy_from_slice(&g);
                }
            }
            Ok(t.scalar(l))
        };
        let rep = grad_check(
            &mut ps,
            |p| eval(p, false, None),
            |p| {
                let snapshot = p.clone();
                let mut tmp = p.clone();
                let v = eval(&snapshot, true, Some(&mut tmp))?;
                for (i, q) in tmp.iter().enumerate() {
                    p.get_mut(i).grad.copy_from_slice(&q.grad);
                }
                Ok(v)
            },
            1e-3,
            50,
            0,
        )
        .unwrap();
        assert_eq!(rep.checked, 3);
        assert!(rep.max_rel_err < 1e-8, "rel err {}", rep.max_rel_err);
    }

    #[test]
    fn eps_is_range_checked() {
        let mut ps = ParamSet::<f64>::new();
        ps.add("w", vec![1], vec![1.0]).unwrap();
        let r = grad_check(&mut ps, |_| Ok(0.0), |_| Ok(0.0), 1e-6, 1, 0);
        assert!(r.is_err());
    }
}
