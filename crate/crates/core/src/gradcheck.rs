//! Central finite-difference checks of every backward pass, in `f64`.
//!
//! Each op is reduced to the scalar `f = Σ r ⊙ op(inputs)` with a random
//! cotangent `r`; the analytic input gradients (the op's backward fed with
//! `r`) are compared against `(f(x+h) − f(x−h)) / 2h`. The error of one
//! input is normwise: `max|a − n| / max(max|a|, max|n|)`.

use std::fmt;

use crate::error::{Error, Result};
use crate::loss::composite_loss;
use crate::model::{build_ternausnet, init_params, InitScheme, TernausNet};
use crate::ops::{
    concat_channels, conv2d_backward, conv2d_forward, convtranspose2_backward,
    convtranspose2_forward, maxpool2_backward, maxpool2_forward, min_window_gap, relu_backward,
    relu_forward, sigmoid_backward, sigmoid_forward, split_channels_backward,
};
use crate::rng::Rng;
use crate::tensor::{Shape, Tensor4};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-5;
pub const DEFAULT_NETWORK_TOL: f64 = 1e-4;
/// Parameters sampled by the whole-network check.
pub const NETWORK_SAMPLES: usize = 20;

/// Checkable op identifiers, in suite order.
pub const OP_IDS: [&str; 7] = [
    "conv2d",
    "convtranspose2",
    "maxpool2",
    "relu",
    "sigmoid",
    "concat",
    "network",
];

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckOptions {
    pub step: f64,
    /// Tolerance for the single-op checks.
    pub tol: f64,
    /// Tolerance for the whole-network check.
    pub network_tol: f64,
    pub seed: u64,
    /// Test fixture: corrupts one analytic gradient entry so the harness
    /// can be shown to catch a broken backward.
    pub perturb_backward: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            step: DEFAULT_STEP,
            tol: DEFAULT_TOL,
            network_tol: DEFAULT_NETWORK_TOL,
            seed: 0x5eed,
            perturb_backward: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InputCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Entries compared.
    pub checked: usize,
    /// Entries skipped because they sit on a kink of the function.
    pub excluded: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum CheckStatus {
    Pass,
    Fail,
    /// The input is at a non-differentiable point; nothing was compared.
    Excluded(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub op: String,
    pub shapes: Vec<Shape>,
    pub tol: f64,
    pub inputs: Vec<InputCheck>,
    pub status: CheckStatus,
}

impl CheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.inputs.iter().map(|i| i.max_rel_err).fold(0.0, f64::max)
    }

    /// `Fail` is the only failing status.
    pub fn passed(&self) -> bool {
        self.status != CheckStatus::Fail
    }

    fn finish(op: &str, shapes: Vec<Shape>, tol: f64, inputs: Vec<InputCheck>) -> Self {
        let checked: usize = inputs.iter().map(|i| i.checked).sum();
        let status = if checked == 0 {
            CheckStatus::Excluded("every entry sits on a kink".into())
        } else if inputs.iter().all(|i| i.max_rel_err <= tol) {
            CheckStatus::Pass
        } else {
            CheckStatus::Fail
        };
        CheckReport {
            op: op.to_string(),
            shapes,
            tol,
            inputs,
            status,
        }
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let shapes: Vec<String> = self.shapes.iter().map(|s| s.to_string()).collect();
        let status = match &self.status {
            CheckStatus::Pass => "PASS".to_string(),
            CheckStatus::Fail => "FAIL".to_string(),
            CheckStatus::Excluded(why) => format!("EXCLUDED ({why})"),
        };
        write!(
            f,
            "{:<15} {:<28} max_rel_err={:<10.3e} tol={:<8.1e} {status}",
            self.op,
            shapes.join(","),
            self.max_rel_err(),
            self.tol
        )
    }
}

/// Input shapes used when the caller gives none.
pub fn default_shapes(op_id: &str) -> Result<Vec<Shape>> {
    let s = |d: [usize; 4]| Shape::from(d);
    Ok(match op_id {
        "conv2d" => vec![s([1, 2, 5, 4]), s([3, 2, 3, 3])],
        "convtranspose2" => vec![s([2, 3, 3, 2]), s([3, 2, 4, 4])],
        "maxpool2" => vec![s([2, 3, 6, 4])],
        "relu" | "sigmoid" => vec![s([2, 3, 4, 5])],
        "concat" => vec![s([2, 2, 3, 3]), s([2, 3, 3, 3])],
        "network" => vec![s([1, 3, 32, 32])],
        other => return Err(Error::UnknownOp(other.to_string())),
    })
}

fn uniform(shape: Shape, lo: f64, hi: f64, rng: &mut Rng) -> Tensor4<f64> {
    Tensor4::from_fn(shape, |_| rng.uniform_in(lo, hi))
}

/// Values with magnitude in `[0.1, 1]` and random sign: far from ReLU's kink.
fn off_zero(shape: Shape, rng: &mut Rng) -> Tensor4<f64> {
    Tensor4::from_fn(shape, |_| {
        let m = rng.uniform_in(0.1, 1.0);
        if rng.uniform() < 0.5 {
            -m
        } else {
            m
        }
    })
}

fn bias_tensor(b: &[f64]) -> Tensor4<f64> {
    Tensor4::from_vec([b.len(), 1, 1, 1], b.to_vec()).expect("length matches")
}

/// Compares an analytic gradient with central differences of `f` along
/// every entry of `inputs[which]` not masked out by `skip`.
fn compare(
    name: &str,
    inputs: &[Tensor4<f64>],
    which: usize,
    analytic: &Tensor4<f64>,
    f: &dyn Fn(&[Tensor4<f64>]) -> Result<f64>,
    step: f64,
    skip: &dyn Fn(usize) -> bool,
) -> Result<InputCheck> {
    let mut work = inputs.to_vec();
    let (mut max_diff, mut scale) = (0.0f64, f64::MIN_POSITIVE);
    let (mut checked, mut excluded) = (0, 0);
    for i in 0..inputs[which].len() {
        if skip(i) {
            excluded += 1;
            continue;
        }
        let orig = inputs[which].data()[i];
        work[which].data_mut()[i] = orig + step;
        let up = f(&work)?;
        work[which].data_mut()[i] = orig - step;
        let down = f(&work)?;
        work[which].data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let a = analytic.data()[i];
        max_diff = max_diff.max((a - numeric).abs());
        scale = scale.max(a.abs()).max(numeric.abs());
        checked += 1;
    }
    Ok(InputCheck {
        name: name.to_string(),
        max_rel_err: if checked == 0 { 0.0 } else { max_diff / scale },
        max_abs_err: max_diff,
        checked,
        excluded,
    })
}

fn perturb(g: &mut Tensor4<f64>, on: bool) {
    if on {
        let v = &mut g.data_mut()[0];
        *v = *v * 1.01 + 1e-3;
    }
}

fn expect_inputs(op: &str, shapes: &[Shape], n: usize) -> Result<()> {
    if shapes.len() != n {
        return Err(Error::InvalidArgument(format!(
            "{op} takes {n} input shape(s), got {}",
            shapes.len()
        )));
    }
    for s in shapes {
        s.validate()?;
    }
    Ok(())
}

/// Runs the check for one op. `input_shapes` may be empty to use
/// [`default_shapes`].
pub fn finite_diff_check(op_id: &str, input_shapes: &[Shape], step: f64, tol: f64) -> Result<CheckReport> {
    let opts = GradcheckOptions {
        step,
        tol,
        network_tol: tol,
        ..GradcheckOptions::default()
    };
    finite_diff_check_with(op_id, input_shapes, &opts)
}

pub fn finite_diff_check_with(
    op_id: &str,
    input_shapes: &[Shape],
    opts: &GradcheckOptions,
) -> Result<CheckReport> {
    let shapes = if input_shapes.is_empty() {
        default_shapes(op_id)?
    } else {
        input_shapes.to_vec()
    };
    if !(opts.step > 0.0 && opts.step.is_finite()) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {}", opts.step)));
    }
    let mut rng = Rng::new(opts.seed);
    let h = opts.step;
    let no_skip = |_: usize| false;
    match op_id {
        "conv2d" => {
            expect_inputs(op_id, &shapes, 2)?;
            let (xs, ws) = (shapes[0], shapes[1]);
            let x = uniform(xs, -1.0, 1.0, &mut rng);
            let w = uniform(ws, -1.0, 1.0, &mut rng);
            let b = uniform(Shape::new(ws.n, 1, 1, 1), -1.0, 1.0, &mut rng);
            let y = conv2d_forward(&x, &w, b.data())?;
            let r = uniform(y.shape(), -1.0, 1.0, &mut rng);
            let g = conv2d_backward(&x, &w, &r)?;
            let f = |t: &[Tensor4<f64>]| Ok(conv2d_forward(&t[0], &t[1], t[2].data())?.dot(&r));
            let inputs = [x, w, b];
            let mut gx = g.x.expect("requested");
            perturb(&mut gx, opts.perturb_backward);
            let checks = vec![
                compare("x", &inputs, 0, &gx, &f, h, &no_skip)?,
                compare("w", &inputs, 1, &g.w, &f, h, &no_skip)?,
                compare("b", &inputs, 2, &bias_tensor(&g.b), &f, h, &no_skip)?,
            ];
            Ok(CheckReport::finish(op_id, shapes, opts.tol, checks))
        }
        "convtranspose2" => {
            expect_inputs(op_id, &shapes, 2)?;
            let (xs, ws) = (shapes[0], shapes[1]);
            let x = uniform(xs, -1.0, 1.0, &mut rng);
            let w = uniform(ws, -1.0, 1.0, &mut rng);
            let b = uniform(Shape::new(ws.c, 1, 1, 1), -1.0, 1.0, &mut rng);
            let y = convtranspose2_forward(&x, &w, b.data())?;
            let r = uniform(y.shape(), -1.0, 1.0, &mut rng);
            let g = convtranspose2_backward(&x, &w, &r)?;
            let f = |t: &[Tensor4<f64>]| Ok(convtranspose2_forward(&t[0], &t[1], t[2].data())?.dot(&r));
            let inputs = [x, w, b];
            let mut gx = g.x.expect("always computed");
            perturb(&mut gx, opts.perturb_backward);
            let checks = vec![
                compare("x", &inputs, 0, &gx, &f, h, &no_skip)?,
                compare("w", &inputs, 1, &g.w, &f, h, &no_skip)?,
                compare("b", &inputs, 2, &bias_tensor(&g.b), &f, h, &no_skip)?,
            ];
            Ok(CheckReport::finish(op_id, shapes, opts.tol, checks))
        }
        "maxpool2" => {
            expect_inputs(op_id, &shapes, 1)?;
            let x = uniform(shapes[0], -1.0, 1.0, &mut rng);
            maxpool_report(x, shapes, opts, &mut rng)
        }
        "relu" => {
            expect_inputs(op_id, &shapes, 1)?;
            let x = off_zero(shapes[0], &mut rng);
            let r = uniform(x.shape(), -1.0, 1.0, &mut rng);
            let mut gx = relu_backward(&x, &r)?;
            perturb(&mut gx, opts.perturb_backward);
            let f = |t: &[Tensor4<f64>]| Ok(relu_forward(&t[0]).dot(&r));
            let kink = |i: usize| x.data()[i].abs() <= 2.0 * h;
            let inputs = [x.clone()];
            let checks = vec![compare("x", &inputs, 0, &gx, &f, h, &kink)?];
            Ok(CheckReport::finish(op_id, shapes, opts.tol, checks))
        }
        "sigmoid" => {
            expect_inputs(op_id, &shapes, 1)?;
            let x = uniform(shapes[0], -3.0, 3.0, &mut rng);
            let r = uniform(x.shape(), -1.0, 1.0, &mut rng);
            let mut gx = sigmoid_backward(&sigmoid_forward(&x), &r)?;
            perturb(&mut gx, opts.perturb_backward);
            let f = |t: &[Tensor4<f64>]| Ok(sigmoid_forward(&t[0]).dot(&r));
            let checks = vec![compare("x", &[x], 0, &gx, &f, h, &no_skip)?];
            Ok(CheckReport::finish(op_id, shapes, opts.tol, checks))
        }
        "concat" => {
            expect_inputs(op_id, &shapes, 2)?;
            let a = uniform(shapes[0], -1.0, 1.0, &mut rng);
            let b = uniform(shapes[1], -1.0, 1.0, &mut rng);
            let y = concat_channels(&a, &b)?;
            let r = uniform(y.shape(), -1.0, 1.0, &mut rng);
            let (mut ga, gb) = split_channels_backward(&r, a.shape().c, b.shape().c)?;
            perturb(&mut ga, opts.perturb_backward);
            let f = |t: &[Tensor4<f64>]| Ok(concat_channels(&t[0], &t[1])?.dot(&r));
            let inputs = [a, b];
            let checks = vec![
                compare("a", &inputs, 0, &ga, &f, h, &no_skip)?,
                compare("b", &inputs, 1, &gb, &f, h, &no_skip)?,
            ];
            Ok(CheckReport::finish(op_id, shapes, opts.tol, checks))
        }
        "network" => {
            expect_inputs(op_id, &shapes, 1)?;
            network_check(shapes[0], opts, &mut rng)
        }
        other => Err(Error::UnknownOp(other.to_string())),
    }
}

/// Checks a max pool at `x`, or reports it as tie-ambiguous when two
/// candidates of a window are closer than the finite-difference step can
/// separate.
pub fn maxpool_report(
    x: Tensor4<f64>,
    shapes: Vec<Shape>,
    opts: &GradcheckOptions,
    rng: &mut Rng,
) -> Result<CheckReport> {
    let h = opts.step;
    let (y, am) = maxpool2_forward(&x)?;
    let gap = min_window_gap(&x);
    if gap <= 4.0 * h {
        return Ok(CheckReport {
            op: "maxpool2".into(),
            shapes,
            tol: opts.tol,
            inputs: vec![],
            status: CheckStatus::Excluded(format!("tie-ambiguous input (window gap {gap:.1e})")),
        });
    }
    let r = uniform(y.shape(), -1.0, 1.0, rng);
    let mut gx = maxpool2_backward(&r, &am, x.shape())?;
    perturb(&mut gx, opts.perturb_backward);
    let f = |t: &[Tensor4<f64>]| Ok(maxpool2_forward(&t[0])?.0.dot(&r));
    let checks = vec![compare("x", &[x], 0, &gx, &f, h, &|_| false)?];
    Ok(CheckReport::finish("maxpool2", shapes, opts.tol, checks))
}

/// Composite loss of the whole network against a random mask, checked on
/// [`NETWORK_SAMPLES`] randomly chosen parameter entries.
///
/// ReLUs and pools make the loss piecewise smooth; an entry whose central
/// difference changes when the step is halved straddles a kink and is
/// replaced by another draw.
fn network_check(x_shape: Shape, opts: &GradcheckOptions, rng: &mut Rng) -> Result<CheckReport> {
    let h = opts.step;
    let arch = build_ternausnet();
    let params = init_params::<f64>(&arch, &InitScheme::Lecun, rng)?;
    let mut net = TernausNet::new(arch, params)?;
    let x = uniform(x_shape, 0.0, 1.0, rng);
    let y = Tensor4::from_fn([x_shape.n, 1, x_shape.h, x_shape.w], |_| {
        if rng.uniform() < 0.5 {
            1.0
        } else {
            0.0
        }
    });

    let (p, tape) = net.forward_with_tape(&x)?;
    let (_, gp) = composite_loss(&y, &p)?;
    net.params_mut().zero_grads();
    net.backward(&tape, &gp)?;

    let names: Vec<String> = net.params().names().map(String::from).collect();
    let loss_at = |name: &str, idx: usize, v: f64, net: &mut TernausNet<f64>| -> Result<f64> {
        net.params_mut().value_mut(name).expect("known name").data_mut()[idx] = v;
        let p = net.forward(&x)?;
        Ok(composite_loss(&y, &p)?.0.l)
    };

    let (mut max_diff, mut scale) = (0.0f64, f64::MIN_POSITIVE);
    let (mut checked, mut excluded) = (0, 0);
    let mut diffs = Vec::new();
    let max_draws = NETWORK_SAMPLES * 4;
    for _ in 0..max_draws {
        if checked == NETWORK_SAMPLES {
            break;
        }
        let name = &names[rng.int_in(0, names.len() - 1)];
        let t = net.params().get(name).expect("known name");
        let idx = rng.int_in(0, t.value.len() - 1);
        let (orig, analytic) = (t.value.data()[idx], t.grad.data()[idx]);
        let central = |step: f64, net: &mut TernausNet<f64>| -> Result<f64> {
            let up = loss_at(name, idx, orig + step, net)?;
            let down = loss_at(name, idx, orig - step, net)?;
            Ok((up - down) / (2.0 * step))
        };
        let n1 = central(h, &mut net)?;
        let n2 = central(h / 2.0, &mut net)?;
        loss_at(name, idx, orig, &mut net)?;
        let local = analytic.abs().max(n1.abs()).max(1e-8);
        if (n1 - n2).abs() > 0.1 * opts.network_tol * local {
            excluded += 1;
            continue;
        }
        if opts.perturb_backward && checked == 0 {
            diffs.push((analytic * 1.01 + 1e-3, n1));
        } else {
            diffs.push((analytic, n1));
        }
        checked += 1;
    }
    for &(a, n) in &diffs {
        max_diff = max_diff.max((a - n).abs());
        scale = scale.max(a.abs()).max(n.abs());
    }
    let input = InputCheck {
        name: format!("{checked} sampled parameters"),
        max_rel_err: if checked == 0 { 0.0 } else { max_diff / scale },
        max_abs_err: max_diff,
        checked,
        excluded,
    };
    Ok(CheckReport::finish("network", vec![x_shape], opts.network_tol, vec![input]))
}

/// Runs every op (or only `filter`) with default shapes.
pub fn run_suite(filter: Option<&str>, opts: &GradcheckOptions) -> Result<Vec<CheckReport>> {
    if let Some(f) = filter {
        if !OP_IDS.contains(&f) {
            return Err(Error::UnknownOp(f.to_string()));
        }
    }
    OP_IDS
        .iter()
        .filter(|op| filter.is_none_or(|f| f == **op))
        .map(|op| finite_diff_check_with(op, &[], opts))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ops_pass_at_default_tolerance() {
        for op in OP_IDS.iter().filter(|&&o| o != "network") {
            let r = finite_diff_check(op, &[], DEFAULT_STEP, DEFAULT_TOL).unwrap();
            assert_eq!(r.status, CheckStatus::Pass, "{r}");
        }
    }

    #[test]
    fn conv_on_small_input() {
        let r = finite_diff_check("conv2d", &[[1, 2, 4, 4].into(), [2, 2, 3, 3].into()], 1e-5, 1e-5).unwrap();
        assert!(r.passed() && r.max_rel_err() < 1e-5, "{r}");
        assert_eq!(r.inputs.len(), 3);
    }

    #[test]
    fn constant_maxpool_input_is_excluded() {
        let opts = GradcheckOptions::default();
        let x = Tensor4::full([1, 1, 4, 4], 0.5);
        let r = maxpool_report(x, vec![[1, 1, 4, 4].into()], &opts, &mut Rng::new(0)).unwrap();
        assert!(matches!(r.status, CheckStatus::Excluded(_)), "{r}");
        assert!(r.passed());
    }

    #[test]
    fn perturbed_backward_is_caught() {
        let opts = GradcheckOptions {
            perturb_backward: true,
            ..GradcheckOptions::default()
        };
        for op in ["conv2d", "relu", "concat", "maxpool2"] {
            let r = finite_diff_check_with(op, &[], &opts).unwrap();
            assert_eq!(r.status, CheckStatus::Fail, "{r}");
        }
    }

    #[test]
    fn unknown_op_and_bad_arity() {
        assert!(matches!(finite_diff_check("softmax", &[], 1e-5, 1e-5), Err(Error::UnknownOp(_))));
        assert!(finite_diff_check("relu", &[[1, 1, 2, 2].into(), [1, 1, 2, 2].into()], 1e-5, 1e-5).is_err());
        assert!(run_suite(Some("nope"), &GradcheckOptions::default()).is_err());
    }

    #[test]
    fn whole_network_sampled() {
        let r = finite_diff_check_with("network", &[], &GradcheckOptions::default()).unwrap();
        assert_eq!(r.status, CheckStatus::Pass, "{r} {:?}", r.inputs);
        assert_eq!(r.inputs[0].checked, NETWORK_SAMPLES);
    }

    #[test]
    fn suite_filter_runs_one_row() {
        let rows = run_suite(Some("sigmoid"), &GradcheckOptions::default()).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].op, "sigmoid");
    }
}
