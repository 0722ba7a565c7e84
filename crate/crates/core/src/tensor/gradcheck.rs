//! Finite-difference self-verification for differentiable operations.
//!
//! The numeric side only ever calls the forward path, so it stays independent
//! of the backward implementation it is checking.

use super::Tensor;
use crate::error::Result;

/// Step size for central differences.
pub const DEFAULT_H: f64 = 1e-5;

/// Relative-error threshold for accepting an analytic gradient.
pub const DEFAULT_TOL: f64 = 1e-4;

/// Central finite differences of a scalar-valued function at `x`.
pub fn numeric_gradient<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let fp = f(&probe);
        probe[i] = x[i] - h;
        let fm = f(&probe);
        probe[i] = x[i];
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Guarded relative error, elementwise maximum over both gradients.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-3))
        .fold(0.0, f64::max)
}

/// Checks the analytic gradient of `loss_fn` (a scalar-valued graph builder)
/// against central differences at `x0`. Returns the observed maximum
/// relative error; `Err` carries a description when it exceeds `tol`.
pub fn check_gradient<F>(
    loss_fn: F,
    shape: Vec<usize>,
    x0: &[f64],
    h: f64,
    tol: f64,
) -> std::result::Result<f64, String>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let param = Tensor::param(shape.clone(), x0.to_vec()).map_err(|e| e.to_string())?;
    let loss = loss_fn(&param).map_err(|e| e.to_string())?;
    loss.backward().map_err(|e| e.to_string())?;
    let analytic = param
        .grad()
        .ok_or_else(|| "no gradient reached the parameter".to_string())?;

    let numeric = numeric_gradient(
        |vals| {
            let p = Tensor::from_vec(shape.clone(), vals.to_vec()).expect("probe shape");
            loss_fn(&p).expect("forward during finite differences").item()
        },
        x0,
        h,
    );

    let err = max_rel_err(&analytic, &numeric);
    if err < tol {
        Ok(err)
    } else {
        Err(format!(
            "gradient mismatch: max rel err {err:.3e} (tol {tol:.1e})\nanalytic: {analytic:?}\nnumeric:  {numeric:?}"
        ))
    }
}

/// Outcome of checking one operation over several random instances.
pub struct OpGradReport {
    pub name: &'static str,
    pub max_err: f64,
    pub failures: Vec<String>,
}

impl OpGradReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

type CaseBuilder = Box<dyn Fn(&mut crate::rng::Rng) -> Case>;

struct Case {
    shape: Vec<usize>,
    x0: Vec<f64>,
    loss: Box<dyn Fn(&Tensor) -> Result<Tensor>>,
}

fn smooth_sample(rng: &mut crate::rng::Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.normal()).collect()
}

/// Samples away from zero so kinked activations (ReLU family) are not probed
/// across their non-differentiable point.
fn kink_safe_sample(rng: &mut crate::rng::Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v = rng.uniform(0.05, 1.5);
            if rng.next_f64() < 0.5 {
                -v
            } else {
                v
            }
        })
        .collect()
}

fn positive_sample(rng: &mut crate::rng::Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.uniform(0.3, 2.0)).collect()
}

/// Random constant projection so the checked loss has distinct per-element
/// gradients rather than the all-ones pattern of a bare sum.
fn project(out: Tensor, proj: &Tensor) -> Result<Tensor> {
    Ok(out.mul(proj)?.sum())
}

/// Runs central-difference verification for every differentiable operation
/// in the engine, `seeds` random instances each. Intended for the test and
/// acceptance suites; runtime is a few seconds.
pub fn verify_tensor_ops(seeds: u64) -> Vec<OpGradReport> {
    let mut cases: Vec<(&'static str, CaseBuilder)> = Vec::new();

    fn proj_for(rng: &mut crate::rng::Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape.to_vec(), smooth_sample(rng, n)).unwrap()
    }

    cases.push((
        "add (lhs)",
        Box::new(|r| {
            let c = Tensor::randn(vec![2, 3], r);
            let p = proj_for(r, &[2, 3]);
            Case {
                shape: vec![2, 3],
                x0: smooth_sample(r, 6),
                loss: Box::new(move |x| project(x.add(&c)?, &p)),
            }
        }),
    ));
    cases.push((
        "add (rhs)",
        Box::new(|r| {
            let c = Tensor::randn(vec![2, 3], r);
            let p = proj_for(r, &[2, 3]);
            Case {
                shape: vec![2, 3],
                x0: smooth_sample(r, 6),
                loss: Box::new(move |x| project(c.add(x)?, &p)),
            }
        }),
    ));
    cases.push((
        "sub (both)",
        Box::new(|r| {
            let c = Tensor::randn(vec![5], r);
            let p = proj_for(r, &[5]);
            Case {
                shape: vec![5],
                x0: smooth_sample(r, 5),
                loss: Box::new(move |x| {
                    let d = x.sub(&c)?.add(&c.sub(x)?)?.add(x)?;
                    project(d, &p)
                }),
            }
        }),
    ));
    cases.push((
        "mul (both)",
        Box::new(|r| {
            let c = Tensor::randn(vec![4], r);
            let p = proj_for(r, &[4]);
            Case {
                shape: vec![4],
                x0: smooth_sample(r, 4),
                loss: Box::new(move |x| project(x.mul(&c)?.add(&c.mul(x)?)?.add(&x.mul(x)?)?, &p)),
            }
        }),
    ));
    cases.push((
        "div (lhs)",
        Box::new(|r| {
            let c = Tensor::from_vec(vec![4], positive_sample(r, 4)).unwrap();
            let p = proj_for(r, &[4]);
            Case {
                shape: vec![4],
                x0: smooth_sample(r, 4),
                loss: Box::new(move |x| project(x.div(&c)?, &p)),
            }
        }),
    ));
    cases.push((
        "div (rhs)",
        Box::new(|r| {
            let c = Tensor::randn(vec![4], r);
            let p = proj_for(r, &[4]);
            Case {
                shape: vec![4],
                x0: positive_sample(r, 4),
                loss: Box::new(move |x| project(c.div(x)?, &p)),
            }
        }),
    ));
    cases.push((
        "add_scalar/mul_scalar/neg",
        Box::new(|r| {
            let p = proj_for(r, &[6]);
            Case {
                shape: vec![6],
                x0: smooth_sample(r, 6),
                loss: Box::new(move |x| project(x.add_scalar(0.7).mul_scalar(-1.3).neg(), &p)),
            }
        }),
    ));
    cases.push((
        "add_bias (input)",
        Box::new(|r| {
            let b = Tensor::randn(vec![4], r);
            let p = proj_for(r, &[3, 4]);
            Case {
                shape: vec![3, 4],
                x0: smooth_sample(r, 12),
                loss: Box::new(move |x| project(x.add_bias(&b)?, &p)),
            }
        }),
    ));
    cases.push((
        "add_bias (bias)",
        Box::new(|r| {
            let x = Tensor::randn(vec![3, 4], r);
            let p = proj_for(r, &[3, 4]);
            Case {
                shape: vec![4],
                x0: smooth_sample(r, 4),
                loss: Box::new(move |b| project(x.add_bias(b)?, &p)),
            }
        }),
    ));
    cases.push((
        "add_channel_bias (bias)",
        Box::new(|r| {
            let x = Tensor::randn(vec![2, 3, 2, 2], r);
            let p = proj_for(r, &[2, 3, 2, 2]);
            Case {
                shape: vec![3],
                x0: smooth_sample(r, 3),
                loss: Box::new(move |b| project(x.add_channel_bias(b)?, &p)),
            }
        }),
    ));
    cases.push((
        "matmul (lhs)",
        Box::new(|r| {
            let b = Tensor::randn(vec![4, 3], r);
            let p = proj_for(r, &[2, 3]);
            Case {
                shape: vec![2, 4],
                x0: smooth_sample(r, 8),
                loss: Box::new(move |a| project(a.matmul(&b)?, &p)),
            }
        }),
    ));
    cases.push((
        "matmul (rhs)",
        Box::new(|r| {
            let a = Tensor::randn(vec![2, 4], r);
            let p = proj_for(r, &[2, 3]);
            Case {
                shape: vec![4, 3],
                x0: smooth_sample(r, 12),
                loss: Box::new(move |b| project(a.matmul(b)?, &p)),
            }
        }),
    ));
    cases.push((
        "transpose2d/reshape",
        Box::new(|r| {
            let p = proj_for(r, &[6]);
            Case {
                shape: vec![2, 3],
                x0: smooth_sample(r, 6),
                loss: Box::new(move |x| project(x.transpose2d()?.reshape(vec![6])?, &p)),
            }
        }),
    ));
    cases.push((
        "narrow",
        Box::new(|r| {
            let p = proj_for(r, &[2, 2]);
            Case {
                shape: vec![2, 4],
                x0: smooth_sample(r, 8),
                loss: Box::new(move |x| project(x.narrow(1, 1, 2)?, &p)),
            }
        }),
    ));
    cases.push((
        "gather_flat",
        Box::new(|r| {
            let p = proj_for(r, &[5]);
            Case {
                shape: vec![4],
                x0: smooth_sample(r, 4),
                loss: Box::new(move |x| {
                    project(x.gather_flat(vec![5], vec![0, 3, 3, 1, 2])?, &p)
                }),
            }
        }),
    ));
    cases.push((
        "concat",
        Box::new(|r| {
            let c = Tensor::randn(vec![2, 2], r);
            let p = proj_for(r, &[2, 5]);
            Case {
                shape: vec![2, 3],
                x0: smooth_sample(r, 6),
                loss: Box::new(move |x| project(Tensor::concat(&[x, &c], 1)?, &p)),
            }
        }),
    ));
    cases.push((
        "relu",
        Box::new(|r| {
            let p = proj_for(r, &[8]);
            Case {
                shape: vec![8],
                x0: kink_safe_sample(r, 8),
                loss: Box::new(move |x| project(x.relu(), &p)),
            }
        }),
    ));
    cases.push((
        "leaky_relu(0.2)",
        Box::new(|r| {
            let p = proj_for(r, &[8]);
            Case {
                shape: vec![8],
                x0: kink_safe_sample(r, 8),
                loss: Box::new(move |x| project(x.leaky_relu(0.2), &p)),
            }
        }),
    ));
    cases.push((
        "gelu",
        Box::new(|r| {
            let p = proj_for(r, &[8]);
            Case {
                shape: vec![8],
                x0: smooth_sample(r, 8),
                loss: Box::new(move |x| project(x.gelu(), &p)),
            }
        }),
    ));
    cases.push((
        "sigmoid",
        Box::new(|r| {
            let p = proj_for(r, &[8]);
            Case {
                shape: vec![8],
                x0: smooth_sample(r, 8),
                loss: Box::new(move |x| project(x.sigmoid(), &p)),
            }
        }),
    ));
    cases.push((
        "tanh",
        Box::new(|r| {
            let p = proj_for(r, &[8]);
            Case {
                shape: vec![8],
                x0: smooth_sample(r, 8),
                loss: Box::new(move |x| project(x.tanh(), &p)),
            }
        }),
    ));
    cases.push((
        "log",
        Box::new(|r| {
            let p = proj_for(r, &[6]);
            Case {
                shape: vec![6],
                x0: positive_sample(r, 6),
                loss: Box::new(move |x| project(x.log(), &p)),
            }
        }),
    ));
    cases.push((
        "exp",
        Box::new(|r| {
            let p = proj_for(r, &[6]);
            Case {
                shape: vec![6],
                x0: smooth_sample(r, 6),
                loss: Box::new(move |x| project(x.exp(), &p)),
            }
        }),
    ));
    cases.push((
        "sqrt",
        Box::new(|r| {
            let p = proj_for(r, &[6]);
            Case {
                shape: vec![6],
                x0: positive_sample(r, 6),
                loss: Box::new(move |x| project(x.sqrt(), &p)),
            }
        }),
    ));
    cases.push((
        "smooth_l1",
        Box::new(|r| {
            let p = proj_for(r, &[8]);
            Case {
                shape: vec![8],
                x0: smooth_sample(r, 8),
                loss: Box::new(move |x| project(x.smooth_l1(), &p)),
            }
        }),
    ));
    cases.push((
        "sum",
        Box::new(|r| Case {
            shape: vec![7],
            x0: smooth_sample(r, 7),
            loss: Box::new(|x| Ok(x.sum())),
        }),
    ));
    cases.push((
        "mean",
        Box::new(|r| Case {
            shape: vec![7],
            x0: smooth_sample(r, 7),
            loss: Box::new(|x| Ok(x.mean())),
        }),
    ));
    cases.push((
        "softmax_t (T=1, last axis)",
        Box::new(|r| {
            let p = proj_for(r, &[3, 4]);
            Case {
                shape: vec![3, 4],
                x0: smooth_sample(r, 12),
                loss: Box::new(move |x| project(x.softmax_t(1.0, 1)?, &p)),
            }
        }),
    ));
    cases.push((
        "softmax_t (T=2.5, axis 0)",
        Box::new(|r| {
            let p = proj_for(r, &[3, 4]);
            Case {
                shape: vec![3, 4],
                x0: smooth_sample(r, 12),
                loss: Box::new(move |x| project(x.softmax_t(2.5, 0)?, &p)),
            }
        }),
    ));
    cases.push((
        "log_softmax_t",
        Box::new(|r| {
            let p = proj_for(r, &[2, 5]);
            Case {
                shape: vec![2, 5],
                x0: smooth_sample(r, 10),
                loss: Box::new(move |x| project(x.log_softmax_t(1.7, 1)?, &p)),
            }
        }),
    ));
    cases.push((
        "conv2d (input)",
        Box::new(|r| {
            let w = Tensor::randn(vec![2, 2, 3, 3], r);
            let p = proj_for(r, &[1, 2, 3, 3]);
            Case {
                shape: vec![1, 2, 5, 5],
                x0: smooth_sample(r, 50),
                loss: Box::new(move |x| project(x.conv2d(&w, 2, 1)?, &p)),
            }
        }),
    ));
    cases.push((
        "conv2d (weight)",
        Box::new(|r| {
            let x = Tensor::randn(vec![2, 2, 5, 5], r);
            let p = proj_for(r, &[2, 2, 3, 3]);
            Case {
                shape: vec![2, 2, 3, 3],
                x0: smooth_sample(r, 36),
                loss: Box::new(move |w| project(x.conv2d(w, 2, 1)?, &p)),
            }
        }),
    ));
    cases.push((
        "conv_transpose2d (input)",
        Box::new(|r| {
            let w = Tensor::randn(vec![2, 3, 4, 4], r);
            let p = proj_for(r, &[1, 3, 6, 6]);
            Case {
                shape: vec![1, 2, 3, 3],
                x0: smooth_sample(r, 18),
                loss: Box::new(move |x| project(x.conv_transpose2d(&w, 2, 1)?, &p)),
            }
        }),
    ));
    cases.push((
        "conv_transpose2d (weight)",
        Box::new(|r| {
            let x = Tensor::randn(vec![1, 2, 3, 3], r);
            let p = proj_for(r, &[1, 3, 6, 6]);
            Case {
                shape: vec![2, 3, 4, 4],
                x0: smooth_sample(r, 96),
                loss: Box::new(move |w| project(x.conv_transpose2d(w, 2, 1)?, &p)),
            }
        }),
    ));
    cases.push((
        "layernorm (input)",
        Box::new(|r| {
            let gamma = Tensor::from_vec(vec![6], positive_sample(r, 6)).unwrap();
            let beta = Tensor::randn(vec![6], r);
            let p = proj_for(r, &[3, 6]);
            Case {
                shape: vec![3, 6],
                x0: smooth_sample(r, 18),
                loss: Box::new(move |x| project(x.layernorm(&gamma, &beta, 1e-5)?, &p)),
            }
        }),
    ));
    cases.push((
        "layernorm (gamma)",
        Box::new(|r| {
            let x = Tensor::randn(vec![3, 6], r);
            let beta = Tensor::randn(vec![6], r);
            let p = proj_for(r, &[3, 6]);
            Case {
                shape: vec![6],
                x0: smooth_sample(r, 6),
                loss: Box::new(move |g| project(x.layernorm(g, &beta, 1e-5)?, &p)),
            }
        }),
    ));
    cases.push((
        "layernorm (beta)",
        Box::new(|r| {
            let x = Tensor::randn(vec![3, 6], r);
            let gamma = Tensor::from_vec(vec![6], positive_sample(r, 6)).unwrap();
            let p = proj_for(r, &[3, 6]);
            Case {
                shape: vec![6],
                x0: smooth_sample(r, 6),
                loss: Box::new(move |b| project(x.layernorm(&gamma, b, 1e-5)?, &p)),
            }
        }),
    ));
    cases.push((
        "batchnorm2d train (input)",
        Box::new(|r| {
            let gamma = Tensor::from_vec(vec![2], positive_sample(r, 2)).unwrap();
            let beta = Tensor::randn(vec![2], r);
            let p = proj_for(r, &[2, 2, 2, 2]);
            Case {
                shape: vec![2, 2, 2, 2],
                x0: smooth_sample(r, 16),
                loss: Box::new(move |x| project(x.batchnorm2d_train(&gamma, &beta, 1e-5)?.0, &p)),
            }
        }),
    ));
    cases.push((
        "batchnorm2d train (gamma)",
        Box::new(|r| {
            let x = Tensor::randn(vec![2, 2, 2, 2], r);
            let beta = Tensor::randn(vec![2], r);
            let p = proj_for(r, &[2, 2, 2, 2]);
            Case {
                shape: vec![2],
                x0: positive_sample(r, 2),
                loss: Box::new(move |g| project(x.batchnorm2d_train(g, &beta, 1e-5)?.0, &p)),
            }
        }),
    ));
    cases.push((
        "batchnorm2d eval (input)",
        Box::new(|r| {
            let gamma = Tensor::from_vec(vec![2], positive_sample(r, 2)).unwrap();
            let beta = Tensor::randn(vec![2], r);
            let mean = smooth_sample(r, 2);
            let var = positive_sample(r, 2);
            let p = proj_for(r, &[2, 2, 2, 2]);
            Case {
                shape: vec![2, 2, 2, 2],
                x0: smooth_sample(r, 16),
                loss: Box::new(move |x| {
                    project(x.batchnorm2d_eval(&gamma, &beta, &mean, &var, 1e-5)?, &p)
                }),
            }
        }),
    ));
    cases.push((
        "dropout (fixed mask)",
        Box::new(|r| {
            let mask_rng = r.child(99);
            let p = proj_for(r, &[10]);
            Case {
                shape: vec![10],
                x0: smooth_sample(r, 10),
                loss: Box::new(move |x| project(x.dropout(0.3, &mut mask_rng.clone(), true)?, &p)),
            }
        }),
    ));
    cases.push((
        "embedding (table)",
        Box::new(|r| {
            let p = proj_for(r, &[3, 4]);
            Case {
                shape: vec![5, 4],
                x0: smooth_sample(r, 20),
                loss: Box::new(move |t| project(t.embedding(&[4, 0, 4])?, &p)),
            }
        }),
    ));
    cases.push((
        "bce_with_logits (logits)",
        Box::new(|r| {
            let targets =
                Tensor::from_vec(vec![6], (0..6).map(|_| r.next_f64()).collect()).unwrap();
            Case {
                shape: vec![6],
                x0: smooth_sample(r, 6),
                loss: Box::new(move |x| x.bce_with_logits(&targets)),
            }
        }),
    ));

    cases
        .iter()
        .map(|(name, build)| {
            let mut max_err: f64 = 0.0;
            let mut failures = Vec::new();
            for seed in 0..seeds {
                let mut rng = crate::rng::Rng::new(0xC0FFEE ^ seed.wrapping_mul(7919));
                let case = build(&mut rng);
                match check_gradient(&case.loss, case.shape, &case.x0, DEFAULT_H, DEFAULT_TOL) {
                    Ok(err) => max_err = max_err.max(err),
                    Err(msg) => failures.push(format!("seed {seed}: {msg}")),
                }
            }
            OpGradReport { name, max_err, failures }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numeric_gradient_of_quadratic() {
        let g = numeric_gradient(|x| x.iter().map(|v| v * v).sum(), &[1.0, -2.0, 3.0], 1e-5);
        assert!((g[0] - 2.0).abs() < 1e-8);
        assert!((g[1] + 4.0).abs() < 1e-8);
        assert!((g[2] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn check_gradient_accepts_correct_and_flags_nothing_reached() {
        let err = check_gradient(
            |x| Ok(x.mul(x)?.sum()),
            vec![3],
            &[0.5, -1.5, 2.0],
            DEFAULT_H,
            DEFAULT_TOL,
        )
        .unwrap();
        assert!(err < DEFAULT_TOL);

        let detached = check_gradient(
            |x| Ok(x.detach().sum()),
            vec![2],
            &[1.0, 2.0],
            DEFAULT_H,
            DEFAULT_TOL,
        );
        assert!(detached.is_err());
    }
}
