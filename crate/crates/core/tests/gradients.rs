use geodp_core::gradcheck::suite::{diffusion_loss_error, primitive_cases, proprio_loss_error, run_case};

const TOL: f64 = 1e-4;
const SEEDS: u64 = 100;

#[test]
fn every_primitive_matches_finite_differences() {
    let mut failures = Vec::new();
    for c in primitive_cases() {
        let err = run_case(&c, SEEDS).unwrap();
        if err > TOL {
            failures.push(format!("{}: {err:e}", c.name));
        }
    }
    assert!(failures.is_empty(), "{failures:?}");
}

#[test]
fn diffusion_objective_wrt_denoiser_params() {
    let err = diffusion_loss_error(SEEDS).unwrap();
    assert!(err <= TOL, "{err:e}");
}

#[test]
fn proprio_and_combined_wrt_decoder_params() {
    let err = proprio_loss_error(SEEDS).unwrap();
    assert!(err <= TOL, "{err:e}");
}
