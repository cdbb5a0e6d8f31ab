#![allow(dead_code)]

use fedrecon_core::{Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Relative error with a floor on the denominator so that gradients that
/// are zero analytically and ~1e-12 numerically compare as equal.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Central-difference check of `build` at `inputs`. `build` must return a
/// scalar. Checks at most `max_checks` coordinates per input (all if the
/// input is smaller), returning the worst relative error seen.
pub fn gradcheck<F>(inputs: &[Tensor], max_checks: usize, seed: u64, build: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let report = gradcheck_piecewise(inputs, max_checks, 0, seed, build);
    assert_eq!(report.skipped, 0, "operator checks must not straddle a kink");
    report.worst
}

#[derive(Debug, Clone, Default)]
pub struct FdReport {
    pub worst: f64,
    pub checked: usize,
    pub skipped: usize,
    /// Valid checks per input.
    pub per_input: Vec<usize>,
}

/// Central differences are only an oracle where `x ± h` stay on one smooth
/// piece. Coordinates whose two evaluations take different branches (per
/// [`Tape::branch_signature`]) are skipped and redrawn, at most `max_skips`
/// times per input. Callers decide how many valid checks they require.
pub fn gradcheck_piecewise<F>(
    inputs: &[Tensor],
    max_checks: usize,
    max_skips: usize,
    seed: u64,
    build: F,
) -> FdReport
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let forward = |values: &[Tensor]| -> (f64, u64) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.variable(t.clone())).collect();
        let out = build(&mut tape, &vars).unwrap();
        (tape.value(out).item(), tape.branch_signature())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = build(&mut tape, &vars).unwrap();
    let grads = tape.backward(out).unwrap();

    let mut pick = rng(seed);
    let mut report = FdReport::default();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).map(|g| g.to_vec()).unwrap_or(vec![0.0; input.numel()]);
        let exhaustive = input.numel() <= max_checks;
        let wanted = if exhaustive { input.numel() } else { max_checks };
        let (mut done, mut skips, mut valid) = (0, 0, 0);
        while done < wanted && skips <= max_skips {
            let j = if exhaustive { done } else { pick.random_range(0..input.numel()) };
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let ((fp, sp), (fm, sm)) = (forward(&plus), forward(&minus));
            if sp != sm {
                skips += 1;
                report.skipped += 1;
                if exhaustive {
                    done += 1;
                }
                continue;
            }
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            let e = rel_err(analytic[j], numeric);
            report.worst = report.worst.max(e);
            report.checked += 1;
            valid += 1;
            done += 1;
            assert!(
                e < FD_TOL,
                "input {i} coord {j}: analytic {} vs numeric {numeric} (rel {e:.3e})",
                analytic[j]
            );
        }
        report.per_input.push(valid);
    }
    report
}

/// Projects a tensor-valued op onto a scalar with fixed random weights so
/// every output element contributes a distinct upstream gradient.
pub fn project(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(v).to_vec();
    let w = random_tensor(&mut rng(seed ^ 0x5eed), &shape, 1.0);
    let w = tape.constant(w);
    let p = tape.mul(v, w)?;
    tape.sum(p)
}

pub fn small_site(index: usize, n_train: usize, n_test: usize, size: usize) -> fedrecon_core::sites::SiteDataset {
    let profile = fedrecon_core::sites::default_profiles().remove(index);
    fedrecon_core::sites::generate_site(&profile, n_train, n_test, size, Default::default()).unwrap()
}

pub fn tiny_config(rounds: usize, epochs: usize) -> fedrecon_core::fl::FLConfig {
    fedrecon_core::fl::FLConfig {
        global_epochs: rounds,
        local_epochs: epochs,
        batch_size: 4,
        unet: fedrecon_core::model::UNetConfig {
            base_channels: 4,
            ..Default::default()
        },
        ..Default::default()
    }
}
