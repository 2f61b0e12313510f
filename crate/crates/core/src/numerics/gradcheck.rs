use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{invalid, Error, Result};

const GRAD_FLOOR: f64 = 1e-6;

/// Worst coordinate found by [`finite_diff_report`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// `f` builds a scalar loss from one leaf per entry of `params`. Returns the
/// maximum over all coordinates of
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-6)`. The floor sits
/// above the rounding noise of the central difference, so coordinates whose
/// true gradient vanishes are compared in absolute terms.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    Ok(finite_diff_report(f, params, step)?.max_rel_error)
}

/// [`finite_diff_check`] with the location of the worst coordinate.
pub fn finite_diff_report<F>(f: F, params: &[Tensor], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-4).contains(&step) {
        return Err(invalid!("finite-difference step {step} outside [1e-6, 1e-4]"));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|v| grads.get(*v).cloned())
        .collect::<Result<_>>()?;

    let eval = |point: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = point.iter().map(|p| g.param(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out).item()?;
        if !v.is_finite() {
            return Err(Error::NonFinite("finite-difference evaluation".into()));
        }
        Ok(v)
    };

    let mut point = params.to_vec();
    let mut worst = GradCheckReport::default();
    for (pi, grad) in analytic.iter().enumerate() {
        for ci in 0..grad.len() {
            let orig = point[pi].data()[ci];
            point[pi].data_mut()[ci] = orig + step;
            let plus = eval(&point)?;
            point[pi].data_mut()[ci] = orig - step;
            let minus = eval(&point)?;
            point[pi].data_mut()[ci] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = grad.data()[ci];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_FLOOR);
            if rel > worst.max_rel_error {
                worst = GradCheckReport {
                    max_rel_error: rel,
                    param: pi,
                    index: ci,
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{seeded_gaussian, SeededRng};

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::from_vec(vec![0.3, -1.2, 2.0]).unwrap();
        let err = finite_diff_check(
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                let s = g.scale(sq, 1.5)?;
                g.sum(s)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn rejects_bad_step() {
        let x = Tensor::scalar(1.0);
        assert!(finite_diff_check(|g, v| g.sum(v[0]), &[x.clone()], 1e-2).is_err());
        assert!(finite_diff_check(|g, v| g.sum(v[0]), &[x], 1e-8).is_err());
    }

    /// Every differentiable op against central differences at random points.
    #[test]
    fn every_op_matches_central_differences() {
        let mut rng = SeededRng::new(11);
        for trial in 0..100 {
            let a = seeded_gaussian(&mut rng, &[3, 4]).unwrap();
            let b = seeded_gaussian(&mut rng, &[4, 2]).unwrap();
            let row = seeded_gaussian(&mut rng, &[4]).unwrap();
            let pos = seeded_gaussian(&mut rng, &[3, 4]).unwrap().map(|v| v.abs() + 0.5);
            let w = seeded_gaussian(&mut rng, &[3, 4]).unwrap();
            let err = finite_diff_check(
                |g, v| {
                    let wts = g.constant(w.clone());
                    let ln = g.layer_norm(v[0])?;
                    let ln = g.mul_row(ln, v[2])?;
                    let ln = g.add_row(ln, v[2])?;
                    let ge = g.gelu(ln)?;
                    let sm = g.softmax(ge)?;
                    let lsm = g.log_softmax(v[0])?;
                    let nrm = g.l2_normalize(v[0])?;
                    let lg = g.log(v[3])?;
                    let ex = g.exp(nrm)?;
                    let mm = g.matmul(v[0], v[1], false)?;
                    let mt = g.matmul(v[0], v[0], true)?;
                    let rs = g.reshape(v[0], &[3, 2, 2])?;
                    let pm = g.permute(rs, &[2, 0, 1])?;
                    let bm = g.batch_matmul(pm, pm, true)?;
                    let cat = g.concat(&[mm, mm], 1)?;
                    let sel = g.select_rows(cat, &[2, 0, 0])?;
                    let gat = g.gather_last(sel, &[1, 3, 0])?;
                    let mut terms = Vec::new();
                    for t in [sm, lsm, lg, ex] {
                        let prod = g.mul(t, wts)?;
                        terms.push(g.sum(prod)?);
                    }
                    terms.push(g.mean(mt)?);
                    let sq = g.mul(bm, bm)?;
                    terms.push(g.mean(sq)?);
                    let gs = g.mul(gat, gat)?;
                    terms.push(g.sum(gs)?);
                    let mut total = terms[0];
                    for t in &terms[1..] {
                        total = g.add(total, *t)?;
                    }
                    let d = g.sub(total, terms[1])?;
                    g.scale(d, 0.7)
                },
                &[a, b, row, pos],
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "trial {trial}: relative error {err}");
        }
    }
}
