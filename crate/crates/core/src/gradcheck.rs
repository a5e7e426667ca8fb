//! Finite-difference verification harness covering every differentiable
//! op and loss, used by both the test suite and the `gradcheck` subcommand.

use crate::error::{Error, Result};
use crate::losses::{kd_combined_loss, DistillationConfig};
use crate::rng::SplitMix64;
use crate::tensor::{finite_diff_grad, max_rel_error, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckCase {
    pub name: String,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub cases: Vec<GradCheckCase>,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn passed(&self, threshold: f64) -> bool {
        self.max_rel_err < threshold
    }
}

/// Compares the tape gradient of a scalar-valued graph with central finite
/// differences, differentiating with respect to the tensor handed to `build`.
fn run_case<F>(x0: &Tensor, mut build: F) -> Result<f64>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(x0.clone(), true);
    let scalar = build(&mut tape, x)?;
    let grads = tape.backward(scalar)?;
    let analytic = grads
        .get(x)
        .ok_or(Error::Domain("scalar does not depend on the probe tensor".into()))?
        .to_vec();
    let numeric = finite_diff_grad(
        |xt| {
            let mut tp = Tape::new();
            let xv = tp.leaf(xt.clone(), false);
            let sv = build(&mut tp, xv).expect("forward re-evaluation failed");
            tp.value(sv).item()
        },
        x0,
        1e-5,
    );
    Ok(max_rel_error(&analytic, &numeric.data))
}

fn rand_tensor(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut SplitMix64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform(lo, hi)).collect())
}

/// Reduces `y` to a scalar via a fixed random projection so every output
/// entry influences the objective.
fn project(tape: &mut Tape, y: Var, rng: &mut SplitMix64) -> Result<Var> {
    let shape = tape.value(y).shape.clone();
    let w = rand_tensor(shape, -1.0, 1.0, rng);
    let wv = tape.leaf(w, false);
    let prod = tape.mul(y, wv)?;
    Ok(tape.sum(prod))
}

/// Runs `num_configs` randomized checks cycling over all layer and loss
/// kinds. Deterministic in `seed`.
pub fn gradient_check_suite(num_configs: usize, seed: u64) -> Result<GradCheckReport> {
    let mut rng = SplitMix64::new(seed);
    let mut cases = Vec::with_capacity(num_configs);
    for i in 0..num_configs {
        let (name, err) = match i % 10 {
            0 => {
                // linear wrt input
                let (b, fin, fout) = (
                    1 + rng.gen_range(4),
                    1 + rng.gen_range(6),
                    1 + rng.gen_range(5),
                );
                let x0 = rand_tensor(vec![b, fin], -2.0, 2.0, &mut rng);
                let w = rand_tensor(vec![fin, fout], -1.0, 1.0, &mut rng);
                let prng = rng.clone();
                let err = run_case(&x0, |tape, x| {
                    let wv = tape.leaf(w.clone(), false);
                    let y = tape.matmul(x, wv)?;
                    project(tape, y, &mut prng.clone())
                })?;
                ("linear/input", err)
            }
            1 => {
                // linear wrt weight, with bias broadcast via add_bias_2d
                let (b, fin, fout) = (
                    1 + rng.gen_range(4),
                    1 + rng.gen_range(6),
                    1 + rng.gen_range(5),
                );
                let x = rand_tensor(vec![b, fin], -2.0, 2.0, &mut rng);
                let w0 = rand_tensor(vec![fin, fout], -1.0, 1.0, &mut rng);
                let bias = rand_tensor(vec![fout], -0.5, 0.5, &mut rng);
                let prng = rng.clone();
                let err = run_case(&w0, |tape, wv| {
                    let xv = tape.leaf(x.clone(), false);
                    let bv = tape.leaf(bias.clone(), false);
                    let y = tape.matmul(xv, wv)?;
                    let y = tape.add_bias_2d(y, bv)?;
                    project(tape, y, &mut prng.clone())
                })?;
                ("linear/weight+bias", err)
            }
            2 => {
                // conv2d wrt input
                let (cin, cout, s) = (
                    1 + rng.gen_range(2),
                    1 + rng.gen_range(3),
                    5 + rng.gen_range(3),
                );
                let x0 = rand_tensor(vec![1, cin, s, s], -1.0, 1.0, &mut rng);
                let w = rand_tensor(vec![cout, cin, 3, 3], -0.5, 0.5, &mut rng);
                let bias = rand_tensor(vec![cout], -0.2, 0.2, &mut rng);
                let prng = rng.clone();
                let err = run_case(&x0, |tape, x| {
                    let wv = tape.leaf(w.clone(), false);
                    let bv = tape.leaf(bias.clone(), false);
                    let y = tape.conv2d(x, wv, bv, 1, 1)?;
                    project(tape, y, &mut prng.clone())
                })?;
                ("conv2d/input", err)
            }
            3 => {
                // conv2d wrt weight
                let (cin, cout, s) = (
                    1 + rng.gen_range(2),
                    1 + rng.gen_range(3),
                    5 + rng.gen_range(3),
                );
                let x = rand_tensor(vec![2, cin, s, s], -1.0, 1.0, &mut rng);
                let w0 = rand_tensor(vec![cout, cin, 3, 3], -0.5, 0.5, &mut rng);
                let bias = rand_tensor(vec![cout], -0.2, 0.2, &mut rng);
                let prng = rng.clone();
                let err = run_case(&w0, |tape, wv| {
                    let xv = tape.leaf(x.clone(), false);
                    let bv = tape.leaf(bias.clone(), false);
                    let y = tape.conv2d(xv, wv, bv, 1, 1)?;
                    project(tape, y, &mut prng.clone())
                })?;
                ("conv2d/weight", err)
            }
            4 => {
                // relu / exp / log chain; inputs kept away from the kinks
                let n = 4 + rng.gen_range(12);
                let mut x0 = rand_tensor(vec![n], -2.0, 2.0, &mut rng);
                for v in &mut x0.data {
                    if v.abs() < 0.05 {
                        *v += 0.1;
                    }
                }
                let prng = rng.clone();
                let err = run_case(&x0, |tape, x| {
                    let r = tape.relu(x);
                    let shifted = tape.add_scalar(r, 1.0);
                    let lg = tape.log(shifted)?;
                    let e = tape.exp(lg);
                    project(tape, e, &mut prng.clone())
                })?;
                ("relu-log-exp", err)
            }
            5 => {
                // maxpool wrt input
                let (c, s) = (1 + rng.gen_range(2), 4 + 2 * rng.gen_range(3));
                let x0 = rand_tensor(vec![1, c, s, s], 0.0, 1.0, &mut rng);
                let prng = rng.clone();
                let err = run_case(&x0, |tape, x| {
                    let y = tape.maxpool2d(x, 2)?;
                    project(tape, y, &mut prng.clone())
                })?;
                ("maxpool2d", err)
            }
            6 => {
                // dropout with a replayable mask
                let n = 8 + rng.gen_range(16);
                let x0 = rand_tensor(vec![n], -1.0, 1.0, &mut rng);
                let p = 0.1 + 0.3 * rng.next_f64();
                let mask_seed = rng.next_u64();
                let prng = rng.clone();
                let err = run_case(&x0, |tape, x| {
                    let mut mask_rng = SplitMix64::new(mask_seed);
                    let y = tape.dropout(x, p, &mut mask_rng)?;
                    project(tape, y, &mut prng.clone())
                })?;
                ("dropout", err)
            }
            7 => {
                // residual composite with a flatten in the projection path
                let (c, s) = (1 + rng.gen_range(2), 4 + rng.gen_range(3));
                let x0 = rand_tensor(vec![1, c, s, s], -1.0, 1.0, &mut rng);
                let w = rand_tensor(vec![c, c, 3, 3], -0.3, 0.3, &mut rng);
                let bias = rand_tensor(vec![c], -0.1, 0.1, &mut rng);
                let prng = rng.clone();
                let err = run_case(&x0, |tape, x| {
                    let wv = tape.leaf(w.clone(), false);
                    let bv = tape.leaf(bias.clone(), false);
                    let inner = tape.conv2d(x, wv, bv, 1, 1)?;
                    let inner = tape.relu(inner);
                    let y = tape.add(x, inner)?;
                    let n = tape.value(y).len();
                    let flat = tape.reshape(y, vec![1, n])?;
                    project(tape, flat, &mut prng.clone())
                })?;
                ("residual+flatten", err)
            }
            8 => {
                // cross-entropy wrt logits
                let (b, k) = (1 + rng.gen_range(6), 2 + rng.gen_range(8));
                let z0 = rand_tensor(vec![b, k], -3.0, 3.0, &mut rng);
                let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(k)).collect();
                let err = run_case(&z0, |tape, z| {
                    crate::losses::cross_entropy(tape, z, &labels)
                })?;
                ("cross-entropy", err)
            }
            _ => {
                // combined distillation loss wrt student logits
                let (b, k) = (1 + rng.gen_range(6), 2 + rng.gen_range(8));
                let z0 = rand_tensor(vec![b, k], -3.0, 3.0, &mut rng);
                let zt = rand_tensor(vec![b, k], -3.0, 3.0, &mut rng);
                let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(k)).collect();
                let cfg = DistillationConfig::new(1.0 + 9.0 * rng.next_f64(), rng.next_f64())?;
                let err = run_case(&z0, |tape, z| {
                    kd_combined_loss(tape, z, &zt, &labels, &cfg)
                })?;
                ("kd-combined-loss", err)
            }
        };
        cases.push(GradCheckCase {
            name: format!("{name}#{i}"),
            max_rel_err: err,
        });
    }
    let max_rel_err = cases.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport { cases, max_rel_err })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_stays_under_tolerance() {
        let report = gradient_check_suite(30, 123).unwrap();
        assert!(report.passed(1e-4), "max rel err {}", report.max_rel_err);
        assert_eq!(report.cases.len(), 30);
    }

    #[test]
    fn suite_is_deterministic() {
        let a = gradient_check_suite(10, 9).unwrap();
        let b = gradient_check_suite(10, 9).unwrap();
        for (x, y) in a.cases.iter().zip(&b.cases) {
            assert_eq!(x.max_rel_err.to_bits(), y.max_rel_err.to_bits());
        }
    }
}
