//! Central finite-difference oracle for unit tests.

use super::{DiffArray, Tape, Var};

/// Relative error `|a - n| / max(|a|, |n|)` between analytic and numeric
/// gradients (vector 2-norms); 0 when both vanish.
pub(crate) fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Compares the tape gradient of `f` with central differences for every
/// input. Returns the worst relative error.
pub(crate) fn check<F>(inputs: &[DiffArray], step: f64, f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let eval = |arrays: &[DiffArray]| {
        let mut t = Tape::new();
        let vars: Vec<Var> = arrays.iter().map(|a| t.leaf(a.clone(), true)).collect();
        let out = f(&mut t, &vars);
        (t, vars, out)
    };
    let (mut tape, vars, out) = eval(inputs);
    tape.backward(out).expect("scalar output");
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        let mut numeric = vec![0.0; inputs[k].len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[j] += step;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[j] -= step;
            let (tp, _, op) = eval(&plus);
            let (tm, _, om) = eval(&minus);
            *slot = (tp.data(op)[0] - tm.data(om)[0]) / (2.0 * step);
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}
