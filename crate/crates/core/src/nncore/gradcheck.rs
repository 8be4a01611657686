//! Central finite-difference gradient checking. The loss closure must be
//! deterministic (seed any dropout identically per call) so the two
//! perturbed evaluations see the same program.

use super::{ParamSource, ParamTensor};

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub worst: String,
    pub coords_checked: usize,
}

/// Compares analytic gradients against (f(x+h) - f(x-h)) / 2h coordinate by
/// coordinate. `loss` must run the forward pass and accumulate gradients
/// into the net when asked; gradients are snapshotted once up front.
/// Large tensors are subsampled deterministically to `max_coords` entries.
pub fn check_gradients<S: ParamSource>(
    net: &mut S,
    loss: &mut dyn FnMut(&mut S) -> f64,
    h: f64,
    max_coords: usize,
) -> GradCheck {
    net.zero_grads();
    let _ = loss(net);
    let mut analytic: Vec<(String, Vec<f64>)> = Vec::new();
    net.visit(&mut |p| analytic.push((p.name.clone(), p.grad.clone())));

    let mut report = GradCheck { max_rel_err: 0.0, worst: String::new(), coords_checked: 0 };
    let tensor_count = analytic.len();
    for ti in 0..tensor_count {
        let (name, grads) = analytic[ti].clone();
        let len = grads.len();
        let picks: Vec<usize> = if len <= max_coords {
            (0..len).collect()
        } else {
            (0..max_coords).map(|i| (i * len) / max_coords).collect()
        };
        for &ci in &picks {
            let nudge = |net: &mut S, delta: f64| {
                let mut k = 0usize;
                net.visit(&mut |p: &mut ParamTensor| {
                    if k == ti {
                        p.value[ci] += delta;
                    }
                    k += 1;
                });
            };
            nudge(net, h);
            let lp = loss(net);
            nudge(net, -2.0 * h);
            let lm = loss(net);
            nudge(net, h);
            let fd = (lp - lm) / (2.0 * h);
            let g = grads[ci];
            let rel = (fd - g).abs() / fd.abs().max(g.abs()).max(1e-2);
            report.coords_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = format!("{name}[{ci}] analytic {g} vs fd {fd}");
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::{smooth_l1, Mat, MlpStack};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let mut seeds = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..5 {
            let seed = seeds.gen::<u64>();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut net = MlpStack::new("mlp", &[4, 8, 8, 3], false, &mut rng);
            let x = Mat::from_vec(3, 4, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let target: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let report = check_gradients(
                &mut net,
                &mut |n: &mut MlpStack| {
                    let y = n.forward(&x, true);
                    let (loss, grad) = smooth_l1(&y.data, &target);
                    n.backward(&Mat::from_vec(y.rows, y.cols, grad));
                    loss
                },
                1e-5,
                500,
            );
            assert!(report.max_rel_err < 1e-4, "seed {seed}: {}", report.worst);
        }
    }
}
