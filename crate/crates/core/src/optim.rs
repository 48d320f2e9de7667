//! Unconstrained minimization: BFGS with central finite-difference
//! gradients and a backtracking line search, with a Nelder-Mead restart
//! when BFGS stalls.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub max_iter: usize,
    /// Convergence threshold on the scaled gradient
    /// `max_i |g_i| max(|x_i|, 1) / max(|f|, 1)`.
    pub grad_tol: f64,
    /// Relative step below which BFGS stops.
    pub step_tol: f64,
    /// Relative finite-difference step.
    pub fd_step: f64,
    /// Largest step (max-norm) BFGS may take in one iteration.
    pub max_step: f64,
    pub nelder_mead_iter: usize,
    /// Run Nelder-Mead and a second BFGS pass if the first does not converge.
    pub fallback: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            max_iter: 500,
            grad_tol: 1e-6,
            step_tol: 1e-10,
            fd_step: 1e-5,
            max_step: 5.0,
            nelder_mead_iter: 4000,
            fallback: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub converged: bool,
    pub iterations: usize,
    pub evaluations: usize,
    /// Scaled gradient at `x`.
    pub gradient: f64,
    pub method: String,
    pub message: String,
}

struct Counted<'a, F> {
    f: &'a F,
    count: std::sync::atomic::AtomicUsize,
}

impl<F: Fn(&[f64]) -> f64 + Sync> Counted<'_, F> {
    fn eval(&self, x: &[f64]) -> f64 {
        self.count
            .fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        let v = (self.f)(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    }

    fn count(&self) -> usize {
        self.count.load(std::sync::atomic::Ordering::Relaxed)
    }
}

fn gradient<F: Fn(&[f64]) -> f64 + Sync>(
    f: &Counted<'_, F>,
    x: &[f64],
    fx: f64,
    rel: f64,
) -> Vec<f64> {
    (0..x.len())
        .into_par_iter()
        .map(|i| {
            let h = rel * x[i].abs().max(1.0);
            let mut xp = x.to_vec();
            xp[i] = x[i] + h;
            let fp = f.eval(&xp);
            xp[i] = x[i] - h;
            let fm = f.eval(&xp);
            match (fp.is_finite(), fm.is_finite()) {
                (true, true) => (fp - fm) / (2.0 * h),
                (true, false) => (fp - fx) / h,
                (false, true) => (fx - fm) / h,
                (false, false) => 0.0,
            }
        })
        .collect()
}

fn scaled_gradient(g: &[f64], x: &[f64], fx: f64) -> f64 {
    let denom = fx.abs().max(1.0);
    g.iter()
        .zip(x)
        .map(|(gi, xi)| gi.abs() * xi.abs().max(1.0) / denom)
        .fold(0.0, f64::max)
}

fn bfgs<F: Fn(&[f64]) -> f64 + Sync>(
    f: &Counted<'_, F>,
    x0: &[f64],
    config: &OptimizerConfig,
) -> Outcome {
    let n = x0.len();
    let mut x = DVector::from_column_slice(x0);
    let mut fx = f.eval(x.as_slice());
    let mut g = DVector::from_vec(gradient(f, x.as_slice(), fx, config.fd_step));
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut fresh = true;
    let mut message = String::from("iteration limit reached");
    let mut converged = false;
    let mut iterations = 0;

    if !fx.is_finite() {
        return Outcome {
            x: x0.to_vec(),
            value: fx,
            converged: false,
            iterations: 0,
            evaluations: f.count(),
            gradient: f64::INFINITY,
            method: "bfgs".into(),
            message: "objective is not finite at the start".into(),
        };
    }

    while iterations < config.max_iter {
        if scaled_gradient(g.as_slice(), x.as_slice(), fx) < config.grad_tol {
            converged = true;
            message = "gradient below tolerance".into();
            break;
        }
        iterations += 1;
        let mut dir = -(&h * &g);
        let mut slope = dir.dot(&g);
        if slope >= 0.0 {
            h = DMatrix::identity(n, n);
            fresh = true;
            dir = -g.clone();
            slope = dir.dot(&g);
        }
        let longest = dir.amax();
        if longest > config.max_step {
            dir *= config.max_step / longest;
            slope *= config.max_step / longest;
        }

        let mut step = 1.0;
        let mut accepted = None;
        while step > 1e-12 {
            let trial = &x + &dir * step;
            let ft = f.eval(trial.as_slice());
            if ft.is_finite() && ft <= fx + 1e-4 * step * slope {
                accepted = Some((trial, ft));
                break;
            }
            step *= 0.5;
        }
        let Some((x_new, f_new)) = accepted else {
            if fresh {
                message = "line search failed".into();
                break;
            }
            h = DMatrix::identity(n, n);
            fresh = true;
            continue;
        };

        let s = &x_new - &x;
        let rel_step = s
            .iter()
            .zip(x_new.iter())
            .map(|(si, xi)| si.abs() / xi.abs().max(1.0))
            .fold(0.0, f64::max);
        let g_new = DVector::from_vec(gradient(f, x_new.as_slice(), f_new, config.fd_step));
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > 1e-10 * s.norm() * y.norm() {
            if fresh {
                h *= sy / y.dot(&y);
            }
            let rho = 1.0 / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            // H+ = H - rho (H y s' + s y' H) + (rho^2 y'Hy + rho) s s'
            h -= (&hy * s.transpose() + &s * hy.transpose()) * rho;
            h += (&s * s.transpose()) * (rho * rho * yhy + rho);
            fresh = false;
        }
        x = x_new;
        fx = f_new;
        g = g_new;
        if rel_step < config.step_tol {
            let sg = scaled_gradient(g.as_slice(), x.as_slice(), fx);
            converged = sg < config.grad_tol.sqrt();
            message = format!("step below tolerance, scaled gradient {sg:.2e}");
            break;
        }
    }
    Outcome {
        gradient: scaled_gradient(g.as_slice(), x.as_slice(), fx),
        x: x.as_slice().to_vec(),
        value: fx,
        converged,
        iterations,
        evaluations: f.count(),
        method: "bfgs".into(),
        message,
    }
}

/// Nelder-Mead with standard coefficients, stopping when the spread of
/// vertex values falls below `tol`.
fn nelder_mead<F: Fn(&[f64]) -> f64 + Sync>(
    f: &Counted<'_, F>,
    x0: &[f64],
    max_iter: usize,
    tol: f64,
) -> (Vec<f64>, f64, usize) {
    let n = x0.len();
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    simplex.push((x0.to_vec(), f.eval(x0)));
    for i in 0..n {
        let mut v = x0.to_vec();
        v[i] += 0.5 * x0[i].abs().max(1.0);
        let fv = f.eval(&v);
        simplex.push((v, fv));
    }
    let mut iter = 0;
    while iter < max_iter {
        iter += 1;
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let (best, worst) = (simplex[0].1, simplex[n].1);
        if worst.is_finite() && (worst - best).abs() <= tol * (best.abs() + tol) {
            break;
        }
        let centroid: Vec<f64> = (0..n)
            .map(|j| simplex[..n].iter().map(|v| v.0[j]).sum::<f64>() / n as f64)
            .collect();
        let along = |t: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&simplex[n].0)
                .map(|(c, w)| c + t * (w - c))
                .collect()
        };
        let xr = along(-1.0);
        let fr = f.eval(&xr);
        if fr < simplex[0].1 {
            let xe = along(-2.0);
            let fe = f.eval(&xe);
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
        } else {
            let (xc, fc) = if fr < simplex[n].1 {
                let xc = along(-0.5);
                let fc = f.eval(&xc);
                (xc, fc)
            } else {
                let xc = along(0.5);
                let fc = f.eval(&xc);
                (xc, fc)
            };
            if fc < simplex[n].1.min(fr) {
                simplex[n] = (xc, fc);
            } else {
                let b = simplex[0].0.clone();
                for v in simplex.iter_mut().skip(1) {
                    for (x, bj) in v.0.iter_mut().zip(&b) {
                        *x = bj + 0.5 * (*x - bj);
                    }
                    v.1 = f.eval(&v.0);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, v) = simplex.swap_remove(0);
    (x, v, iter)
}

/// Minimizes `f` from `x0`. Non-finite values are treated as +infinity.
pub fn minimize<F: Fn(&[f64]) -> f64 + Sync>(f: &F, x0: &[f64], config: &OptimizerConfig) -> Outcome {
    let counted = Counted {
        f,
        count: Default::default(),
    };
    if x0.is_empty() {
        let v = counted.eval(x0);
        return Outcome {
            x: Vec::new(),
            value: v,
            converged: v.is_finite(),
            iterations: 0,
            evaluations: 1,
            gradient: 0.0,
            method: "none".into(),
            message: "no free parameters".into(),
        };
    }
    let first = bfgs(&counted, x0, config);
    if first.converged || !config.fallback || !first.value.is_finite() {
        return first;
    }
    let (x_nm, _, nm_iter) = nelder_mead(&counted, &first.x, config.nelder_mead_iter, 1e-12);
    let mut second = bfgs(&counted, &x_nm, config);
    second.iterations += first.iterations + nm_iter;
    second.evaluations = counted.count();
    second.method = "bfgs+nelder-mead".into();
    if second.value > first.value && !second.converged {
        let mut out = first;
        out.evaluations = counted.count();
        out.method = "bfgs+nelder-mead".into();
        return out;
    }
    second
}
