//! Central finite-difference verification of backward passes.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::error::{Result, TensorError};
use crate::conv::Padding;
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

/// Finite-difference step.
pub const STEP: f64 = 1e-4;

/// Gradients smaller than this are compared on an absolute scale.
pub const RELATIVE_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub elements_checked: usize,
    pub max_rel_error: f64,
    /// (input index, element index) of the worst disagreement.
    pub worst: Option<(usize, usize)>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// `|a - n| / max(|a|, |n|, RELATIVE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Compare the analytic gradient of `op` against central differences.
///
/// `op` receives one node per entry of `inputs` and returns an output node of
/// any shape; it is reduced to a scalar by a fixed random projection so every
/// output element contributes.
pub fn grad_check<F>(op: F, inputs: &[Tensor<f64>], tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let mut projection: Option<Tensor<f64>> = None;
    let mut eval = |values: &[Tensor<f64>], track: bool| -> Result<(f64, Graph<f64>, Vec<NodeId>, NodeId)> {
        let mut g = Graph::new();
        let ids = values
            .iter()
            .map(|v| if track { g.variable(v.clone()) } else { g.constant(v.clone()) })
            .collect::<Result<Vec<_>>>()?;
        let out = op(&mut g, &ids)?;
        let w = projection
            .get_or_insert_with(|| {
                let mut rng = StdRng::seed_from_u64(0x6772_6164);
                Tensor::uniform(g.value(out).shape(), 1.0, &mut rng)
            })
            .clone();
        if w.shape() != g.value(out).shape() {
            return Err(TensorError::ShapeMismatch {
                op: "grad_check",
                lhs: w.shape().to_vec(),
                rhs: g.value(out).shape().to_vec(),
            });
        }
        let w = g.constant(w)?;
        let prod = g.mul(out, w)?;
        let loss = g.sum_all(prod)?;
        Ok((g.value(loss).data()[0], g, ids, loss))
    };

    let (_, mut graph, ids, loss) = eval(inputs, true)?;
    let grads = graph.backward(loss)?;

    let mut report = GradCheckReport { elements_checked: 0, max_rel_error: 0.0, worst: None, tolerance };
    let mut probe = inputs.to_vec();
    for (i, id) in ids.iter().enumerate() {
        let zero = Tensor::zeros(inputs[i].shape());
        let analytic = grads.wrt(*id).unwrap_or(&zero).clone();
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + STEP;
            let plus = eval(&probe, false)?.0;
            probe[i].data_mut()[j] = orig - STEP;
            let minus = eval(&probe, false)?.0;
            probe[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            let err = relative_error(analytic.data()[j], numeric);
            report.elements_checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((i, j));
            }
        }
    }
    Ok(report)
}

/// One differentiable op with a random-shape generator, for sweeping
/// [`grad_check`] across the whole op set.
pub struct OpCase {
    pub name: &'static str,
    pub build: fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
    /// Input shapes for one random trial.
    pub shapes: fn(&mut StdRng) -> Vec<Vec<usize>>,
    /// Keep sampled inputs at least 0.1 away from zero (ops with a kink there).
    pub avoid_zero: bool,
}

fn dims(rng: &mut StdRng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

fn image_shape(rng: &mut StdRng) -> Vec<usize> {
    vec![dims(rng, 1, 2), dims(rng, 2, 5), dims(rng, 2, 5), dims(rng, 1, 3)]
}

fn any_shape(rng: &mut StdRng) -> Vec<usize> {
    (0..dims(rng, 1, 3)).map(|_| dims(rng, 1, 4)).collect()
}

fn paired_shape(rng: &mut StdRng) -> Vec<usize> {
    vec![dims(rng, 1, 3), dims(rng, 1, 3), 2 * dims(rng, 1, 3)]
}

/// Every differentiable op exposed by [`Graph`].
pub fn registered_ops() -> Vec<OpCase> {
    vec![
        OpCase {
            name: "conv2d_same",
            build: |g, x| g.conv2d(x[0], x[1], 1, Padding::Same),
            shapes: |r| {
                let s = image_shape(r);
                let k = vec![dims(r, 1, 3), dims(r, 1, 3), s[3], dims(r, 1, 3)];
                vec![s, k]
            },
            avoid_zero: false,
        },
        OpCase {
            name: "conv2d_same_stride2",
            build: |g, x| g.conv2d(x[0], x[1], 2, Padding::Same),
            shapes: |r| {
                let s = image_shape(r);
                vec![s.clone(), vec![3, 3, s[3], dims(r, 1, 3)]]
            },
            avoid_zero: false,
        },
        OpCase {
            name: "conv2d_valid",
            build: |g, x| g.conv2d(x[0], x[1], 1, Padding::Valid),
            shapes: |r| {
                let s = vec![dims(r, 1, 2), dims(r, 3, 5), dims(r, 3, 5), dims(r, 1, 3)];
                vec![s.clone(), vec![dims(r, 1, 3), dims(r, 1, 3), s[3], dims(r, 1, 3)]]
            },
            avoid_zero: false,
        },
        OpCase {
            name: "conv2d_transpose_stride2",
            build: |g, x| g.conv2d_transpose(x[0], x[1], 2, Padding::Same),
            shapes: |r| {
                let s = image_shape(r);
                vec![s.clone(), vec![3, 3, dims(r, 1, 3), s[3]]]
            },
            avoid_zero: false,
        },
        OpCase {
            name: "conv2d_transpose_valid",
            build: |g, x| g.conv2d_transpose(x[0], x[1], 1, Padding::Valid),
            shapes: |r| {
                let s = image_shape(r);
                vec![s.clone(), vec![dims(r, 1, 3), dims(r, 1, 3), dims(r, 1, 3), s[3]]]
            },
            avoid_zero: false,
        },
        OpCase {
            name: "dense",
            build: |g, x| g.dense(x[0], x[1], x[2]),
            shapes: |r| {
                let (b, f, o) = (dims(r, 1, 4), dims(r, 1, 6), dims(r, 1, 6));
                vec![vec![b, f], vec![f, o], vec![o]]
            },
            avoid_zero: false,
        },
        OpCase {
            name: "bias_add",
            build: |g, x| g.bias_add(x[0], x[1]),
            shapes: |r| {
                let s = image_shape(r);
                vec![s.clone(), vec![s[3]]]
            },
            avoid_zero: false,
        },
        OpCase { name: "relu", build: |g, x| g.relu(x[0]), shapes: |r| vec![any_shape(r)], avoid_zero: true },
        OpCase { name: "sigmoid", build: |g, x| g.sigmoid(x[0]), shapes: |r| vec![any_shape(r)], avoid_zero: false },
        OpCase {
            name: "prelu",
            build: |g, x| g.prelu(x[0], x[1]),
            shapes: |r| {
                let s = image_shape(r);
                vec![s.clone(), vec![s[3]]]
            },
            avoid_zero: true,
        },
        OpCase {
            name: "global_avg_pool",
            build: |g, x| g.global_avg_pool(x[0]),
            shapes: |r| vec![image_shape(r)],
            avoid_zero: false,
        },
        OpCase {
            name: "add",
            build: |g, x| g.add(x[0], x[1]),
            shapes: |r| {
                let s = any_shape(r);
                vec![s.clone(), s]
            },
            avoid_zero: false,
        },
        OpCase {
            name: "mul",
            build: |g, x| g.mul(x[0], x[1]),
            shapes: |r| {
                let s = any_shape(r);
                vec![s.clone(), s]
            },
            avoid_zero: false,
        },
        OpCase { name: "scale", build: |g, x| g.scale(x[0], -1.7), shapes: |r| vec![any_shape(r)], avoid_zero: false },
        OpCase {
            name: "concat",
            build: |g, x| g.concat(x[0], x[1]),
            shapes: |r| {
                let b = dims(r, 1, 4);
                vec![vec![b, dims(r, 1, 5)], vec![b, dims(r, 1, 5)]]
            },
            avoid_zero: false,
        },
        OpCase {
            name: "mse",
            build: |g, x| g.mse(x[0], x[1]),
            shapes: |r| {
                let s = any_shape(r);
                vec![s.clone(), s]
            },
            avoid_zero: false,
        },
        OpCase { name: "sum_all", build: |g, x| g.sum_all(x[0]), shapes: |r| vec![any_shape(r)], avoid_zero: false },
        OpCase {
            name: "channel_mul",
            build: |g, x| g.channel_mul(x[0], x[1]),
            shapes: |r| {
                let s = image_shape(r);
                vec![s.clone(), vec![s[0], s[3]]]
            },
            avoid_zero: false,
        },
        OpCase {
            name: "row_normalize",
            build: |g, x| g.row_normalize(x[0], 3.0, 1e-12),
            shapes: |r| vec![paired_shape(r)],
            avoid_zero: false,
        },
        OpCase {
            name: "complex_mul",
            build: |g, x| g.complex_mul(x[0], x[1]),
            shapes: |r| {
                let s = paired_shape(r);
                vec![s.clone(), s]
            },
            avoid_zero: false,
        },
        OpCase {
            name: "reshape",
            build: |g, x| {
                let n = g.value(x[0]).numel();
                g.reshape(x[0], &[n])
            },
            shapes: |r| vec![any_shape(r)],
            avoid_zero: false,
        },
    ]
}

/// Random inputs in `[-1, 1]` (or `±[0.1, 1]` when `avoid_zero`).
pub fn sample_inputs(shapes: &[Vec<usize>], avoid_zero: bool, rng: &mut StdRng) -> Vec<Tensor<f64>> {
    shapes
        .iter()
        .map(|s| {
            Tensor::from_fn(s.clone(), |_| {
                let v: f64 = rng.random_range(-1.0..1.0);
                if avoid_zero {
                    v.signum() * (0.1 + 0.9 * v.abs())
                } else {
                    v
                }
            })
        })
        .collect()
}

/// Run [`grad_check`] on `trials` random shapes of `case`; returns the worst report.
pub fn check_case(case: &OpCase, trials: usize, tolerance: f64, seed: u64) -> Result<GradCheckReport> {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut worst = GradCheckReport { elements_checked: 0, max_rel_error: 0.0, worst: None, tolerance };
    for _ in 0..trials {
        let shapes = (case.shapes)(&mut rng);
        let inputs = sample_inputs(&shapes, case.avoid_zero, &mut rng);
        let report = grad_check(case.build, &inputs, tolerance)?;
        worst.elements_checked += report.elements_checked;
        if report.max_rel_error >= worst.max_rel_error {
            worst.max_rel_error = report.max_rel_error;
            worst.worst = report.worst;
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_corrupted_derivative() {
        let x = Tensor::from_fn([6], |i| 0.3 * i as f64 - 0.7);
        let good = grad_check(|g, ids| g.map(ids[0], f64::sin, f64::cos), std::slice::from_ref(&x), 1e-5).unwrap();
        assert!(good.passed(), "{good:?}");
        let bad = grad_check(|g, ids| g.map(ids[0], f64::sin, |v| 1.01 * v.cos()), &[x], 1e-5).unwrap();
        assert!(!bad.passed(), "{bad:?}");
        assert!(bad.worst.is_some());
    }

    #[test]
    fn relative_error_floors_small_gradients() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(1e-9, 0.0) - 1e-6).abs() < 1e-18);
    }
}
