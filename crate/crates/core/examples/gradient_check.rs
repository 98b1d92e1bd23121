//! Checks the analytic gradient of every training objective against central
//! finite differences on random small networks.
//!
//! cargo run --release --example gradient_check -- 100

use fscil::losses::{grad_check, random_grad_check_case, GradCheckOptions, Objective};
use fscil::mathcore::RandomStream;

fn main() -> fscil::Result<()> {
    let cases: usize = std::env::args()
        .nth(1)
        .map_or(Ok(20), |s| s.parse())
        .expect("case count");
    let objectives = [
        Objective::CrossEntropy,
        Objective::CovarianceConstraint,
        Objective::Base { gamma: 0.01 },
        Objective::Kl,
        Objective::Incremental { alpha: 0.01 },
    ];
    let mut stream = RandomStream::new(0, "example/gradcheck");
    for objective in objectives {
        let mut worst = 0.0_f64;
        let mut params = 0;
        for _ in 0..cases {
            let (net, batch) = random_grad_check_case(objective, &mut stream)?;
            let r = grad_check(&net, objective, &batch, GradCheckOptions::default())?;
            worst = worst.max(r.max_rel_error);
            params += r.coordinates;
        }
        println!(
            "{:<24} {cases} cases, {params} coordinates, max rel error {worst:.2e}",
            objective.name()
        );
    }
    Ok(())
}
