//! The one-point estimate `g = Φ f(x + γΦ, S)`: its exact conditional mean
//! against `α₂γ∇F`, and the Monte-Carlo bias on a logistic loss against the
//! bound `γα₃³α₁/(2α₂)`.

use nalgebra::DVector;
use zo_dsgt::analysis::bias_probe;
use zo_dsgt::estimator::{bias_bound, exact_conditional_mean, PerturbationSpec};
use zo_dsgt::objective::{make_logistic, make_quadratic, Dataset, NoiseSpec};
use zo_dsgt::streams::AgentStreams;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // A quadratic has vanishing odd moments, so the mean is exactly α₂γ∇F.
    let quad = make_quadratic(1, 4, 5.0, 3)?;
    let spec = PerturbationSpec::new(4, 1.0)?;
    let x = DVector::from_vec(vec![0.3, -1.0, 0.5, 2.0]);
    let gamma = 0.7;
    let mean = exact_conditional_mean(|p| quad.local_value(0, p).unwrap(), &x, gamma, &spec)?;
    let target = quad.local_gradient(0, &x)? * (spec.alpha2 * gamma);
    println!("quadratic: |E[g] - a2*gamma*grad| = {:.3e}", (mean - target).norm());

    let data = Dataset::synthetic_two_class(400, 4, 3.0, 1)?.partitioned(2)?;
    let logit = make_logistic(data, 0.1, 0.01, NoiseSpec::NONE)?;
    let alpha1 = logit.analytic().unwrap().alpha1;
    let mut streams = AgentStreams::new(5, 0);
    for gamma in [1.0, 0.5, 0.25] {
        let probe = bias_probe(&logit, 0, &x, gamma, &spec, alpha1, 200_000, &mut streams)?;
        println!(
            "logistic, gamma {gamma:<4}: |bias| = {:.4e} +- {:.1e}, bound {:.4e}",
            probe.empirical_bias.norm(),
            probe.standard_error,
            bias_bound(gamma, &spec, alpha1)
        );
    }
    Ok(())
}
