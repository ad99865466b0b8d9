//! Central finite-difference checks of every differentiable operator, a
//! squeeze-and-excitation block, the detection loss, and a full micro network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::boxes::{assign_labels, encode_box, generate_anchors, AnchorLabel, AssignConfig, Box3};
use crate::error::Result;
use crate::losses::{detection_loss, AnchorTarget, LossConfig};
use crate::nn::{Binder, Network, NetworkConfig, SeResidualBlock};
use crate::tensor::tape::{NormMode, NormSettings, RunningStats};
use crate::tensor::{Tape, Tensor, Var};

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub name: String,
    /// `max |analytic − numeric| / max(max |analytic|, max |numeric|)`, worst over inputs.
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

impl std::fmt::Display for GradCheck {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<28} rel err {:.3e} (tol {:.0e}) {}",
            self.name,
            self.max_rel_error,
            self.tolerance,
            if self.passed() { "ok" } else { "FAIL" }
        )
    }
}

fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    let scale = analytic.iter().chain(numeric).fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Compares tape gradients of `f` against central differences for every
/// element of every input (or `samples` random elements per input).
pub fn check_fn<F>(inputs: &[Tensor], f: F, h: f64, samples: Option<(usize, u64)>) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check_fn_guarded(inputs, f, h, samples, false)
}

/// Like [`check_fn`]. With `kink_guard`, an element whose differences at `h`
/// and `h / 2` disagree sits within one step of a ReLU kink or a max-pool
/// switch; it is replaced by another random element (at most 20 redraws).
pub fn check_fn_guarded<F>(inputs: &[Tensor], f: F, h: f64, samples: Option<(usize, u64)>, kink_guard: bool) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = vals.iter().map(|v| t.leaf(v.clone(), false)).collect();
        let l = f(&mut t, &vs)?;
        Ok(t.value(l).item())
    };
    let central = |vals: &mut Vec<Tensor>, i: usize, j: usize, h: f64| -> Result<f64> {
        let orig = vals[i].data()[j];
        vals[i].data_mut()[j] = orig + h;
        let up = eval(vals)?;
        vals[i].data_mut()[j] = orig - h;
        let down = eval(vals)?;
        vals[i].data_mut()[j] = orig;
        Ok((up - down) / (2.0 * h))
    };
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(samples.map_or(0, |s| s.1));
    for (i, input) in inputs.iter().enumerate() {
        let grad = tape.grad(vars[i]).expect("leaf gradient");
        let sampled = matches!(samples, Some((k, _)) if k < input.len());
        let elems: Vec<usize> = match samples {
            Some((k, _)) if sampled => (0..k).map(|_| rng.random_range(0..input.len())).collect(),
            _ => (0..input.len()).collect(),
        };
        let mut analytic = Vec::with_capacity(elems.len());
        let mut numeric = Vec::with_capacity(elems.len());
        let mut vals = inputs.to_vec();
        for &first in &elems {
            let mut j = first;
            let mut fd = central(&mut vals, i, j, h)?;
            if kink_guard && sampled {
                for _ in 0..20 {
                    let half = central(&mut vals, i, j, h / 2.0)?;
                    let scale = fd.abs().max(half.abs()).max(1e-8);
                    if (fd - half).abs() <= 1e-4 * scale {
                        break;
                    }
                    j = rng.random_range(0..input.len());
                    fd = central(&mut vals, i, j, h)?;
                }
            }
            analytic.push(grad.data()[j]);
            numeric.push(fd);
        }
        worst = worst.max(rel_error(&analytic, &numeric));
    }
    Ok(worst)
}

/// Values bounded away from zero, so ReLU kinks are not crossed by a step.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Distinct values spaced well apart, so no max-pool window holds a near tie.
fn distinct(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.random_range(0..=i));
    }
    Tensor::new(shape, vals).unwrap()
}

struct Case {
    name: &'static str,
    tolerance: f64,
    h: f64,
    error: f64,
}

const OP_TOL: f64 = 1e-4;
const ELEMENTWISE_TOL: f64 = 1e-6;
const NETWORK_TOL: f64 = 1e-3;

fn probe(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Runs every check. Deterministic for a given seed.
pub fn suite(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::new();
    let norm = NormSettings { eps: 1e-5, momentum: 0.1 };

    // convolution family
    {
        let x = probe(&[2, 2, 4, 5, 3], &mut rng);
        let w = probe(&[3, 2, 3, 3, 3], &mut rng);
        let b = probe(&[3], &mut rng);
        let out = probe(&[2, 3, 4, 5, 3], &mut rng);
        let e = check_fn(&[x, w, b], |t, v| {
            let y = t.conv3d(v[0], v[1], Some(v[2]), 1, 1)?;
            t.weighted_sum(y, &out)
        }, 1e-4, None)?;
        cases.push(Case { name: "conv3d (stride 1, pad 1)", tolerance: OP_TOL, h: 1e-4, error: e });

        let x = probe(&[1, 2, 6, 5, 7], &mut rng);
        let w = probe(&[2, 2, 3, 3, 3], &mut rng);
        let out = probe(&[1, 2, 3, 3, 4], &mut rng);
        let e = check_fn(&[x, w], |t, v| {
            let y = t.conv3d(v[0], v[1], None, 2, 1)?;
            t.weighted_sum(y, &out)
        }, 1e-4, None)?;
        cases.push(Case { name: "conv3d (stride 2)", tolerance: OP_TOL, h: 1e-4, error: e });

        let x = probe(&[2, 3, 2, 3, 2], &mut rng);
        let w = probe(&[3, 2, 2, 2, 2], &mut rng);
        let b = probe(&[2], &mut rng);
        let out = probe(&[2, 2, 4, 6, 4], &mut rng);
        let e = check_fn(&[x, w, b], |t, v| {
            let y = t.conv3d_transpose(v[0], v[1], Some(v[2]), 2, 0)?;
            t.weighted_sum(y, &out)
        }, 1e-4, None)?;
        cases.push(Case { name: "conv3d_transpose", tolerance: OP_TOL, h: 1e-4, error: e });
    }

    // pooling
    {
        let x = distinct(&[2, 2, 4, 4, 6], &mut rng);
        let out = probe(&[2, 2, 2, 2, 3], &mut rng);
        let e = check_fn(&[x], |t, v| {
            let y = t.max_pool3d(v[0], 2, 2)?;
            t.weighted_sum(y, &out)
        }, 1e-4, None)?;
        cases.push(Case { name: "max_pool3d", tolerance: OP_TOL, h: 1e-4, error: e });

        let x = probe(&[2, 3, 2, 3, 2], &mut rng);
        let out = probe(&[2, 3], &mut rng);
        let e = check_fn(&[x], |t, v| {
            let y = t.global_avg_pool(v[0])?;
            t.weighted_sum(y, &out)
        }, 1e-4, None)?;
        cases.push(Case { name: "global_avg_pool", tolerance: OP_TOL, h: 1e-4, error: e });
    }

    // elementwise
    {
        let shape = [2, 3, 2, 2, 2];
        let out = probe(&shape, &mut rng);
        let x = away_from_zero(&shape, &mut rng);
        let e = check_fn(&[x], |t, v| {
            let y = t.relu(v[0])?;
            t.weighted_sum(y, &out)
        }, 1e-6, None)?;
        cases.push(Case { name: "relu", tolerance: ELEMENTWISE_TOL, h: 1e-6, error: e });

        let x = probe(&shape, &mut rng).scale(3.0);
        let e = check_fn(&[x], |t, v| {
            let y = t.sigmoid(v[0])?;
            t.weighted_sum(y, &out)
        }, 1e-5, None)?;
        cases.push(Case { name: "sigmoid", tolerance: ELEMENTWISE_TOL, h: 1e-5, error: e });

        let (a, b) = (probe(&shape, &mut rng), probe(&shape, &mut rng));
        let e = check_fn(&[a.clone(), b.clone()], |t, v| {
            let y = t.add(v[0], v[1])?;
            t.weighted_sum(y, &out)
        }, 1e-5, None)?;
        cases.push(Case { name: "add", tolerance: ELEMENTWISE_TOL, h: 1e-5, error: e });

        let e = check_fn(&[a.clone(), b], |t, v| {
            let y = t.mul(v[0], v[1])?;
            t.weighted_sum(y, &out)
        }, 1e-5, None)?;
        cases.push(Case { name: "mul", tolerance: ELEMENTWISE_TOL, h: 1e-5, error: e });

        let s = probe(&[2, 3], &mut rng);
        let e = check_fn(&[a, s], |t, v| {
            let y = t.scale_channels(v[0], v[1])?;
            t.weighted_sum(y, &out)
        }, 1e-5, None)?;
        cases.push(Case { name: "scale_channels", tolerance: ELEMENTWISE_TOL, h: 1e-5, error: e });
    }

    // dense, normalization, concatenation
    {
        let (x, w, b) = (probe(&[3, 4], &mut rng), probe(&[5, 4], &mut rng), probe(&[5], &mut rng));
        let out = probe(&[3, 5], &mut rng);
        let e = check_fn(&[x, w, b], |t, v| {
            let y = t.dense(v[0], v[1], Some(v[2]))?;
            t.weighted_sum(y, &out)
        }, 1e-5, None)?;
        cases.push(Case { name: "dense", tolerance: OP_TOL, h: 1e-5, error: e });

        let shape = [2, 3, 2, 3, 2];
        let x = probe(&shape, &mut rng);
        let (g, b) = (probe(&[3], &mut rng), probe(&[3], &mut rng));
        let out = probe(&shape, &mut rng);
        for mode in [NormMode::Train, NormMode::Eval] {
            let e = check_fn(&[x.clone(), g.clone(), b.clone()], |t, v| {
                let mut stats = RunningStats { mean: vec![0.1, -0.2, 0.3], var: vec![0.5, 1.5, 2.0] };
                let y = t.batch_norm(v[0], v[1], v[2], &mut stats, mode, norm)?;
                t.weighted_sum(y, &out)
            }, 1e-5, None)?;
            let name = if mode == NormMode::Train { "batch_norm (train)" } else { "batch_norm (eval)" };
            cases.push(Case { name, tolerance: OP_TOL, h: 1e-5, error: e });
        }

        let (a, b) = (probe(&[2, 1, 2, 2, 2], &mut rng), probe(&[2, 3, 2, 2, 2], &mut rng));
        let out = probe(&[2, 4, 2, 2, 2], &mut rng);
        let e = check_fn(&[a, b], |t, v| {
            let y = t.concat_channels(&[v[0], v[1]])?;
            t.weighted_sum(y, &out)
        }, 1e-5, None)?;
        cases.push(Case { name: "concat_channels", tolerance: ELEMENTWISE_TOL, h: 1e-5, error: e });
    }

    // detection loss over a small labeled head
    {
        let grid = [2, 2, 2];
        let anchors = generate_anchors(grid, 4, &[5.0, 10.0, 20.0]);
        let gts = [Box3::new(3.0, 2.5, 5.0, 3.0)];
        let labels = assign_labels(&anchors, &gts, &AssignConfig::default())?;
        let targets: Vec<AnchorTarget> = anchors
            .iter()
            .zip(&labels)
            .map(|(a, &label)| AnchorTarget {
                label,
                deltas: match label {
                    AnchorLabel::Positive(g) => encode_box(&gts[g], &a.bbox).unwrap(),
                    _ => [0.0; 4],
                },
            })
            .collect();
        // regression residuals kept away from the smooth-L1 knee at |x| = 1
        let head = Tensor::from_fn(&[1, 15, 2, 2, 2], |_| rng.random_range(-0.8..0.8));
        let e = check_fn(&[head], |t, v| {
            let mut r = ChaCha8Rng::seed_from_u64(1);
            Ok(detection_loss(t, v[0], &targets, &LossConfig::default(), &mut r)?.0)
        }, 1e-6, None)?;
        cases.push(Case { name: "detection loss", tolerance: OP_TOL, h: 1e-6, error: e });
    }

    // full squeeze-and-excitation residual block, parameters and input
    {
        let block = SeResidualBlock::new(4, 8, 2, true, seed ^ 0x5e);
        let mut inputs: Vec<Tensor> = block.params().iter().map(|(_, t)| t.clone()).collect();
        inputs.push(probe(&[2, 4, 4, 4, 4], &mut rng));
        let out = probe(&[2, 8, 2, 2, 2], &mut rng);
        let e = check_fn(&inputs, |t, v| {
            let (x, params) = v.split_last().unwrap();
            let mut b = Binder::new(t, block.params(), NormMode::Train, norm, false);
            b.bind_all(params);
            let y = block.forward_raw(&mut b, *x)?;
            b.tape.weighted_sum(y, &out)
        }, 1e-5, None)?;
        cases.push(Case { name: "SE residual block", tolerance: OP_TOL, h: 1e-5, error: e });
    }

    // micro network on a 16³ input, sampled parameters
    {
        let cfg = NetworkConfig::micro();
        let net = Network::new(&cfg, seed ^ 0x77)?;
        // jittered off the initialization, whose zero biases put exact zeros on ReLU kinks
        let inputs: Vec<Tensor> = net
            .params()
            .iter()
            .map(|(_, t)| t.map(|v| v + rng.random_range(-0.05..0.05)))
            .collect();
        let x = Tensor::uniform(&[2, 1, 16, 16, 16], 0.0, 1.0, &mut rng);
        let out = probe(&[2, 15, 4, 4, 4], &mut rng);
        let e = check_fn_guarded(&inputs, |t, v| {
            let mut b = Binder::new(t, net.params(), NormMode::Train, net.norm_settings(), false);
            b.bind_all(v);
            let xv = b.tape.leaf(x.clone(), false);
            let y = net.forward_raw(&mut b, xv)?;
            b.tape.weighted_sum(y, &out)
        }, 1e-5, Some((3, seed)), true)?;
        cases.push(Case { name: "micro network", tolerance: NETWORK_TOL, h: 1e-5, error: e });
    }

    Ok(cases
        .into_iter()
        .map(|c| GradCheck {
            name: format!("{} [h={:.0e}]", c.name, c.h),
            max_rel_error: c.error,
            tolerance: c.tolerance,
        })
        .collect())
}
