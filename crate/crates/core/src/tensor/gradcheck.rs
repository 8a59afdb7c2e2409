use super::{ParamStore, Tape, Tensor, Var};
use crate::error::Result;

/// Below this magnitude both gradients are finite-difference noise and the
/// absolute difference is reported instead.
const RELATIVE_FLOOR: f64 = 1e-6;

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    let scale = analytic.abs().max(numeric.abs());
    if scale < RELATIVE_FLOOR {
        diff
    } else {
        diff / scale
    }
}

/// Largest relative disagreement between reverse-mode gradients of the scalar
/// function `f` and central finite differences with step `eps`.
pub fn check_gradients<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.scalar(out))
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let zeros = vec![0.0; inputs[i].numel()];
        let analytic = grads.wrt(*v).unwrap_or(&zeros).to_vec();
        for (j, a) in analytic.iter().enumerate() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - eps;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            worst = worst.max(relative_error(*a, (plus - minus) / (2.0 * eps)));
        }
    }
    Ok(worst)
}

/// Same check over every scalar of every parameter in `store`.
pub fn check_param_gradients<F>(store: &ParamStore, f: F, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let grads = tape.backward(loss)?;
    let mut analytic: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.tensor.numel()]).collect();
    for (id, g) in grads.params() {
        analytic[id.index()].copy_from_slice(g);
    }

    let mut work = store.clone();
    let mut worst = 0.0f64;
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        for j in 0..store.get(id).tensor.numel() {
            let orig = store.get(id).tensor.data()[j];
            work.get_mut(id).tensor.data_mut()[j] = orig + eps;
            let plus = {
                let mut t = Tape::new();
                let out = f(&mut t, &work)?;
                t.scalar(out)
            };
            work.get_mut(id).tensor.data_mut()[j] = orig - eps;
            let minus = {
                let mut t = Tape::new();
                let out = f(&mut t, &work)?;
                t.scalar(out)
            };
            work.get_mut(id).tensor.data_mut()[j] = orig;
            worst = worst.max(relative_error(
                analytic[id.index()][j],
                (plus - minus) / (2.0 * eps),
            ));
        }
    }
    Ok(worst)
}
