// Scratch probe: drive the training loop manually and track the retention
// curve's spread over x ∈ [0, 10] as optimization proceeds.

use reinopt::experiments::surplus_grid;
use reinopt::model::{sample_scenarios, ModelParams};
use reinopt::objective::ObjectiveParams;
use reinopt::policy::{init_policy, MlpArchitecture, ReinsurancePolicy};
use reinopt::seed::derive_seed;
use reinopt::train::{adam_step, episode_loss_and_grad, AdamState};

fn spread(policy: &ReinsurancePolicy, grid: &[f64]) -> (f64, f64, f64) {
    let net = match policy {
        ReinsurancePolicy::Shared(net) => net,
        _ => unreachable!(),
    };
    let values = net.eval_retention_batch(grid);
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (max - min, min, max)
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let beta: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1.0);
    let n_batches: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(2000);
    let batch_size: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(1 << 12);
    let lr_floor_after: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(800);

    let model = ModelParams::default();
    let obj = ObjectiveParams::new(beta, 10.0, 0.3);
    let arch = MlpArchitecture::default();
    let seed = 4242u64;
    let mut policy = ReinsurancePolicy::Shared(init_policy(&arch, seed).unwrap());
    let mut state = AdamState::new(&policy);
    let grid = surplus_grid(0.0, 10.0, 0.1);

    for iter in 0..n_batches {
        // Crude fixed schedule for probing: 1e-3, then 1e-4, then 1e-5.
        let lr = if iter < lr_floor_after {
            1e-3
        } else if iter < 2 * lr_floor_after {
            1e-4
        } else {
            1e-5
        };
        let scenarios = sample_scenarios(&model, batch_size, derive_seed(seed, "probe", iter as u64));
        let (loss, tape) = episode_loss_and_grad(&policy, &scenarios, &model, &obj).unwrap();
        adam_step(&mut policy, &tape, &mut state, lr);
        if (iter + 1) % 100 == 0 {
            let (sp, min, max) = spread(&policy, &grid);
            println!(
                "batch {:>5} lr {lr:.0e} loss {loss:+.6} spread {sp:.5} [{min:.4}, {max:.4}] b(3)={:.4} b(6)={:.4}",
                iter + 1,
                policy.retention(0, 3.0),
                policy.retention(0, 6.0),
            );
        }
    }
}
