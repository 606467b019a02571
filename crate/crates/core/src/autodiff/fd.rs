//! Central finite-difference gradient checking.

use ndarray::ArrayD;

use super::{Tape, Var};

/// Compare analytic gradients of a scalar-valued graph against central finite
/// differences, returning the worst relative error over all components.
///
/// `build` must construct the same computation on any tape it is given; it is
/// re-invoked for every perturbed evaluation. Components where both gradients
/// are below `1e-7` in magnitude are treated as matching zeros.
pub fn max_relative_error<F>(inputs: &[ArrayD<f64>], build: F, step: f64) -> f64
where
    F: Fn(&Tape, &[Var]) -> Var,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let loss = build(&tape, &vars);
    let base = tape.scalar_value(loss);
    assert!(base.is_finite(), "loss must be finite, got {base}");
    let grads = tape.backward(loss);

    let eval = |perturbed: &[ArrayD<f64>]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var> = perturbed
            .iter()
            .map(|x| tape.leaf(x.clone(), false))
            .collect();
        tape.scalar_value(build(&tape, &vars))
    };

    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let zero = ArrayD::zeros(input.raw_dim());
        let analytic = grads.get(vars[i]).unwrap_or(&zero);
        for (idx, _) in input.indexed_iter() {
            let mut plus: Vec<ArrayD<f64>> = inputs.to_vec();
            plus[i][&idx] += step;
            let mut minus: Vec<ArrayD<f64>> = inputs.to_vec();
            minus[i][&idx] -= step;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * step);
            let a = analytic[&idx];
            let scale = a.abs().max(numeric.abs());
            if scale < 1e-7 {
                continue;
            }
            worst = worst.max((a - numeric).abs() / scale);
        }
    }
    worst
}

/// Assert the worst relative error stays below `tol`.
pub fn check_gradients<F>(inputs: &[ArrayD<f64>], build: F, step: f64, tol: f64)
where
    F: Fn(&Tape, &[Var]) -> Var,
{
    let worst = max_relative_error(inputs, build, step);
    assert!(
        worst < tol,
        "gradient check failed: max relative error {worst:.3e} >= {tol:.0e}"
    );
}
