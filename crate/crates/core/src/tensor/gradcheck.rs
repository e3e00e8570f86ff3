//! Central finite-difference checks of the analytic backward rules.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, OpKind, Result, Tensor, Var};

/// Worst component found by a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Input tensor and element where the worst error occurred.
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Number of scalar components compared.
    pub checked: usize,
}

impl GradCheckReport {
    fn empty() -> Self {
        Self {
            max_relative_error: 0.0,
            input: 0,
            element: 0,
            analytic: 0.0,
            numeric: 0.0,
            checked: 0,
        }
    }

    /// Keeps whichever report has the larger error, summing the counts.
    pub fn merge(self, other: Self) -> Self {
        let checked = self.checked + other.checked;
        let mut worst = if other.max_relative_error > self.max_relative_error {
            other
        } else {
            self
        };
        worst.checked = checked;
        worst
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Compare at most this many randomly chosen elements per input.
    pub max_elements_per_input: Option<usize>,
    pub seed: u64,
    /// Perturb the backward rule of this op (negative control).
    pub corrupt: Option<OpKind>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_elements_per_input: None,
            seed: 0,
            corrupt: None,
        }
    }
}

/// Relative error with a `max(1, |a|, |n|)` denominator.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Compares the backward gradient of a scalar-valued composition against
/// central differences with the given step, over every input element.
pub fn grad_check<F>(inputs: &[Tensor<f64>], step: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    grad_check_with(
        inputs,
        &GradCheckOptions {
            step,
            ..GradCheckOptions::default()
        },
        f,
    )
}

pub fn grad_check_with<F>(inputs: &[Tensor<f64>], options: &GradCheckOptions, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = tensors.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out);
        v.item().ok_or_else(|| super::TensorError::NonScalarLoss(v.shape().to_vec()))
    };

    let mut graph = Graph::new();
    graph.corrupt_backward(options.corrupt);
    let vars: Vec<Var> = inputs.iter().map(|t| graph.input(t.clone().with_grad(true))).collect();
    let loss = f(&mut graph, &vars)?;
    graph.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| graph.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut report = GradCheckReport::empty();
    for (input, grads) in analytic.iter().enumerate() {
        let mut elements: Vec<usize> = (0..grads.len()).collect();
        if let Some(limit) = options.max_elements_per_input {
            if limit < elements.len() {
                elements.shuffle(&mut rng);
                elements.truncate(limit);
                elements.sort_unstable();
            }
        }
        for element in elements {
            let original = work[input].data()[element];
            work[input].data_mut()[element] = original + options.step;
            let plus = eval(&work)?;
            work[input].data_mut()[element] = original - options.step;
            let minus = eval(&work)?;
            work[input].data_mut()[element] = original;
            let numeric = (plus - minus) / (2.0 * options.step);
            let err = relative_error(grads[element], numeric);
            report.checked += 1;
            if err > report.max_relative_error || report.checked == 1 {
                report = GradCheckReport {
                    max_relative_error: err,
                    input,
                    element,
                    analytic: grads[element],
                    numeric,
                    checked: report.checked,
                };
            }
        }
    }
    Ok(report)
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("positive dims")
}

fn dims(rng: &mut ChaCha8Rng, rank: usize, max: usize) -> Vec<usize> {
    (0..rank).map(|_| rng.gen_range(1..=max)).collect()
}

/// Reduces any tensor to a scalar through a fixed random weighting, so every
/// output element's gradient path is exercised.
fn weighted_sum(g: &mut Graph<f64>, out: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = g.constant(weights.clone());
    let prod = g.mul(out, w)?;
    g.sum(prod)
}

type Composition = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

/// One random instance of `kind` wrapped into a scalar composition.
pub fn op_case(kind: OpKind, rng: &mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Composition) {
    // Output weights are drawn after the output shape is known.
    macro_rules! reduce {
        ($inputs:expr, $out_shape:expr, |$g:ident, $v:ident| $body:expr) => {{
            let weights = random_tensor(rng, &$out_shape, -1.0, 1.0);
            let comp: Composition = Box::new(move |$g: &mut Graph<f64>, $v: &[Var]| {
                let out = $body?;
                weighted_sum($g, out, &weights)
            });
            ($inputs, comp)
        }};
    }
    match kind {
        OpKind::Add | OpKind::Sub | OpKind::Mul => {
            let s = dims(rng, 2, 4);
            let inputs = vec![random_tensor(rng, &s, -2.0, 2.0), random_tensor(rng, &s, -2.0, 2.0)];
            match kind {
                OpKind::Add => reduce!(inputs, s, |g, v| g.add(v[0], v[1])),
                OpKind::Sub => reduce!(inputs, s, |g, v| g.sub(v[0], v[1])),
                _ => reduce!(inputs, s, |g, v| g.mul(v[0], v[1])),
            }
        }
        OpKind::Scale => {
            let s = dims(rng, 3, 3);
            let c = rng.gen_range(-3.0..3.0);
            reduce!(vec![random_tensor(rng, &s, -2.0, 2.0)], s, |g, v| g.scale(v[0], c))
        }
        OpKind::AddScalar => {
            let s = dims(rng, 2, 4);
            let c = rng.gen_range(-3.0..3.0);
            reduce!(vec![random_tensor(rng, &s, -2.0, 2.0)], s, |g, v| g.add_scalar(v[0], c))
        }
        OpKind::AddBias => {
            let s = dims(rng, 3, 4);
            let axis = rng.gen_range(0..3);
            let inputs = vec![random_tensor(rng, &s, -2.0, 2.0), random_tensor(rng, &[s[axis]], -1.0, 1.0)];
            reduce!(inputs, s, |g, v| g.add_bias(v[0], v[1], axis))
        }
        OpKind::MatMul => {
            let (m, k, n) = (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..5));
            let a = random_tensor(rng, &[m, k], -1.0, 1.0);
            if rng.gen_bool(0.5) {
                let b = random_tensor(rng, &[k, n], -1.0, 1.0);
                reduce!(vec![a, b], vec![m, n], |g, v| g.matmul(v[0], v[1]))
            } else {
                let b = random_tensor(rng, &[k], -1.0, 1.0);
                reduce!(vec![a, b], vec![m], |g, v| g.matmul(v[0], v[1]))
            }
        }
        OpKind::Conv2d => {
            let (cin, cout) = (rng.gen_range(1..3), rng.gen_range(1..3));
            let (h, w) = (rng.gen_range(1..5), rng.gen_range(1..5));
            let (kh, kw) = (*[1, 3].choose(rng).unwrap(), *[1, 3].choose(rng).unwrap());
            let x = random_tensor(rng, &[cin, h, w], -1.0, 1.0);
            let k = random_tensor(rng, &[cout, cin, kh, kw], -1.0, 1.0);
            reduce!(vec![x, k], vec![cout, h, w], |g, v| g.conv2d(v[0], v[1]))
        }
        OpKind::Conv3d => {
            let (cin, cout) = (rng.gen_range(1..3), rng.gen_range(1..3));
            let s = dims(rng, 3, 4);
            let kd = *[1, 3].choose(rng).unwrap();
            let x = random_tensor(rng, &[cin, s[0], s[1], s[2]], -1.0, 1.0);
            let k = random_tensor(rng, &[cout, cin, kd, 3, 3], -1.0, 1.0);
            reduce!(vec![x, k], vec![cout, s[0], s[1], s[2]], |g, v| g.conv3d(v[0], v[1]))
        }
        OpKind::Sigmoid => {
            let s = dims(rng, 2, 5);
            reduce!(vec![random_tensor(rng, &s, -4.0, 4.0)], s, |g, v| g.sigmoid(v[0]))
        }
        OpKind::Tanh => {
            let s = dims(rng, 2, 5);
            reduce!(vec![random_tensor(rng, &s, -3.0, 3.0)], s, |g, v| g.tanh(v[0]))
        }
        OpKind::Softmax => {
            let s = dims(rng, 2, 5);
            let axis = rng.gen_range(0..2);
            reduce!(vec![random_tensor(rng, &s, -3.0, 3.0)], s, |g, v| g.softmax(v[0], axis))
        }
        OpKind::Mean => {
            let s = dims(rng, 3, 4);
            let axis = rng.gen_range(0..3);
            let mut out = s.clone();
            out.remove(axis);
            reduce!(vec![random_tensor(rng, &s, -2.0, 2.0)], out, |g, v| g.mean(v[0], axis))
        }
        OpKind::Sum => {
            let s = dims(rng, 2, 5);
            let x = random_tensor(rng, &s, -2.0, 2.0);
            let comp: Composition = Box::new(|g, v| {
                let total = g.sum(v[0])?;
                g.mul(total, total)
            });
            (vec![x], comp)
        }
        OpKind::MaxGlobal => {
            // Distinct values at least 0.1 apart so the step never flips the argmax.
            let n = rng.gen_range(2..12);
            let mut values: Vec<f64> = (0..n).map(|i| i as f64 * 0.1 + rng.gen_range(0.0..0.05)).collect();
            values.shuffle(rng);
            let x = Tensor::new(vec![n], values).unwrap();
            let comp: Composition = Box::new(|g, v| {
                let m = g.max_global(v[0])?;
                g.mul(m, m)
            });
            (vec![x], comp)
        }
        OpKind::DotAlongChannel => {
            let (d, cells) = (rng.gen_range(1..5), rng.gen_range(1..7));
            let inputs = vec![
                random_tensor(rng, &[d, cells], -1.0, 1.0),
                random_tensor(rng, &[d], -1.0, 1.0),
            ];
            reduce!(inputs, vec![cells], |g, v| g.dot_along_channel(v[0], v[1]))
        }
        OpKind::BceLoss => {
            let n = rng.gen_range(1..6);
            let p = random_tensor(rng, &[n], 0.1, 0.9);
            let target: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
            let comp: Composition = Box::new(move |g, v| g.bce_loss(v[0], &target));
            (vec![p], comp)
        }
        OpKind::Concat => {
            let base = dims(rng, 3, 3);
            let axis = rng.gen_range(0..3);
            let parts = rng.gen_range(1..4);
            let mut out = base.clone();
            out[axis] = 0;
            let inputs: Vec<Tensor<f64>> = (0..parts)
                .map(|_| {
                    let mut s = base.clone();
                    s[axis] = rng.gen_range(1..4);
                    out[axis] += s[axis];
                    random_tensor(rng, &s, -1.0, 1.0)
                })
                .collect();
            reduce!(inputs, out, |g, v| g.concat(v, axis))
        }
        OpKind::Select => {
            let s = dims(rng, 3, 4);
            let axis = rng.gen_range(0..3);
            let index = rng.gen_range(0..s[axis]);
            let mut out = s.clone();
            out.remove(axis);
            reduce!(vec![random_tensor(rng, &s, -1.0, 1.0)], out, |g, v| g.select(v[0], axis, index))
        }
        OpKind::AvgPool => {
            let mut s = dims(rng, 3, 3);
            let axis = rng.gen_range(0..3);
            let factor = rng.gen_range(1..4);
            s[axis] *= factor;
            let mut out = s.clone();
            out[axis] /= factor;
            reduce!(vec![random_tensor(rng, &s, -1.0, 1.0)], out, |g, v| g.avg_pool(v[0], axis, factor))
        }
        OpKind::Reshape => {
            let s = dims(rng, 3, 3);
            let target = vec![s[0] * s[1], s[2]];
            reduce!(vec![random_tensor(rng, &s, -1.0, 1.0)], target.clone(), |g, v| g.reshape(v[0], &target))
        }
    }
}

/// Worst gradient-check result for `kind` over `draws` random instances.
pub fn check_op(kind: OpKind, seed: u64, draws: usize, corrupt: Option<OpKind>) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (kind as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut worst = GradCheckReport::empty();
    for draw in 0..draws {
        let (inputs, comp) = op_case(kind, &mut rng);
        let options = GradCheckOptions {
            seed: seed.wrapping_add(draw as u64),
            corrupt,
            ..GradCheckOptions::default()
        };
        worst = worst.merge(grad_check_with(&inputs, &options, comp)?);
    }
    Ok(worst)
}

/// Checks every registered op, in [`OpKind::ALL`] order.
pub fn check_all_ops(seed: u64, draws: usize, corrupt: Option<OpKind>) -> Result<Vec<(OpKind, GradCheckReport)>> {
    OpKind::ALL
        .into_iter()
        .map(|kind| check_op(kind, seed, draws, corrupt).map(|r| (kind, r)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_map_is_exact() {
        let x = Tensor::new(vec![3], vec![0.3, -1.2, 2.0]).unwrap();
        let a = Tensor::new(vec![2, 3], vec![1.0, 2.0, -1.0, 0.5, 0.25, 3.0]).unwrap();
        let report = grad_check(&[a, x], 1e-5, |g, v| {
            let y = g.matmul(v[0], v[1])?;
            g.sum(y)
        })
        .unwrap();
        // Linear in each coordinate, so central differences are exact up to rounding.
        assert!(report.max_relative_error <= 1e-10, "{report:?}");
        assert_eq!(report.checked, 9);
    }

    #[test]
    fn sigmoid_of_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = random_tensor(&mut rng, &[4, 5], -1.0, 1.0);
        let x = random_tensor(&mut rng, &[5, 2], -1.0, 1.0);
        let report = grad_check(&[w, x], 1e-5, |g, v| {
            let y = g.matmul(v[0], v[1])?;
            let s = g.sigmoid(y)?;
            g.sum(s)
        })
        .unwrap();
        assert!(report.max_relative_error <= 1e-6, "{report:?}");
    }

    #[test]
    fn every_op_passes() {
        for (kind, report) in check_all_ops(11, 3, None).unwrap() {
            assert!(report.max_relative_error <= 1e-4, "{kind}: {report:?}");
            assert!(report.checked > 0, "{kind}");
        }
    }

    #[test]
    fn corrupted_rule_is_caught() {
        let report = check_op(OpKind::Tanh, 5, 2, Some(OpKind::Tanh)).unwrap();
        assert!(report.max_relative_error > 1e-4);
        let clean = check_op(OpKind::Tanh, 5, 2, Some(OpKind::Sigmoid)).unwrap();
        assert!(clean.max_relative_error <= 1e-4);
    }

    #[test]
    fn element_budget_limits_comparisons() {
        let x = Tensor::new(vec![50], vec![0.5; 50]).unwrap();
        let options = GradCheckOptions {
            max_elements_per_input: Some(7),
            ..GradCheckOptions::default()
        };
        let report = grad_check_with(&[x], &options, |g, v| {
            let t = g.tanh(v[0])?;
            g.sum(t)
        })
        .unwrap();
        assert_eq!(report.checked, 7);
    }
}
