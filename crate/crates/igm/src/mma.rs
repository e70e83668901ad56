//! Method of moving asymptotes: convex separable approximations with
//! per-variable asymptotes that expand on monotone progress and shrink on
//! oscillation. The subproblem is solved in the dual (coordinate-wise
//! bisection on the multipliers, exact per-variable primal minimizers).

use crate::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct MmaOptions {
    /// Initial asymptote distance as a fraction of the variable range.
    pub asym_init: f64,
    /// Expansion factor on oscillation-free iterates.
    pub asym_grow: f64,
    /// Shrink factor on sign flips.
    pub asym_shrink: f64,
    /// Move limit as a fraction of the variable range.
    pub move_frac: f64,
    /// Target KKT residual of the subproblem.
    pub kkt_tol: f64,
}

impl Default for MmaOptions {
    fn default() -> Self {
        Self {
            asym_init: 0.1,
            asym_grow: 1.2,
            asym_shrink: 0.7,
            move_frac: 0.5,
            kkt_tol: 1e-9,
        }
    }
}

/// Result of one MMA update.
#[derive(Debug, Clone)]
pub struct MmaStep {
    pub x: Vec<f64>,
    pub kkt_residual: f64,
    pub lambda: Vec<f64>,
    /// Positive slack reported when no multiplier can restore
    /// feasibility of the subproblem (constraint relaxed).
    pub infeasible_slack: Option<f64>,
}

/// Optimizer state carried across iterations.
#[derive(Debug, Clone)]
pub struct MmaState {
    pub opts: MmaOptions,
    pub iter: usize,
    pub low: Vec<f64>,
    pub upp: Vec<f64>,
    pub x_prev: Vec<f64>,
    pub x_prev2: Vec<f64>,
}

impl MmaState {
    pub fn new(n: usize, opts: MmaOptions) -> Self {
        Self {
            opts,
            iter: 0,
            low: vec![0.0; n],
            upp: vec![0.0; n],
            x_prev: vec![0.0; n],
            x_prev2: vec![0.0; n],
        }
    }

    /// One MMA update. Constraints are in `g_i(x) <= 0` form; `frozen`
    /// variables are pinned at their current value.
    #[allow(clippy::too_many_arguments)]
    pub fn step(
        &mut self,
        x: &[f64],
        df0: &[f64],
        gval: &[f64],
        dg: &[Vec<f64>],
        lo: &[f64],
        hi: &[f64],
        frozen: &[bool],
    ) -> Result<MmaStep> {
        let n = x.len();
        let m = gval.len();
        for v in df0.iter().chain(dg.iter().flatten()) {
            if !v.is_finite() {
                return Err(Error::Numerical("non-finite gradient passed to MMA".into()));
            }
        }
        self.iter += 1;

        // asymptote update
        for j in 0..n {
            let range = (hi[j] - lo[j]).max(1e-12);
            if self.iter <= 2 {
                self.low[j] = x[j] - self.opts.asym_init * range;
                self.upp[j] = x[j] + self.opts.asym_init * range;
            } else {
                let osc = (x[j] - self.x_prev[j]) * (self.x_prev[j] - self.x_prev2[j]);
                let gamma = if osc > 0.0 {
                    self.opts.asym_grow
                } else if osc < 0.0 {
                    self.opts.asym_shrink
                } else {
                    1.0
                };
                self.low[j] = x[j] - gamma * (self.x_prev[j] - self.low[j]);
                self.upp[j] = x[j] + gamma * (self.upp[j] - self.x_prev[j]);
            }
            // a tiny lower floor on the asymptote distance lets
            // oscillation damping contract all the way to convergence
            self.low[j] = self.low[j].clamp(x[j] - 10.0 * range, x[j] - 1e-8 * range);
            self.upp[j] = self.upp[j].clamp(x[j] + 1e-8 * range, x[j] + 10.0 * range);
        }

        // feasible box inside the asymptotes
        let mut alpha = vec![0.0; n];
        let mut beta = vec![0.0; n];
        for j in 0..n {
            let range = (hi[j] - lo[j]).max(1e-12);
            alpha[j] = lo[j]
                .max(self.low[j] + 0.1 * (x[j] - self.low[j]))
                .max(x[j] - self.opts.move_frac * range);
            beta[j] = hi[j]
                .min(self.upp[j] - 0.1 * (self.upp[j] - x[j]))
                .min(x[j] + self.opts.move_frac * range);
            if frozen[j] || alpha[j] > beta[j] {
                alpha[j] = x[j];
                beta[j] = x[j];
            }
        }

        // separable approximation coefficients
        let raa = 1e-5;
        let coeff = |d: f64, uxd: f64, xld: f64, range: f64| -> (f64, f64) {
            let dp = d.max(0.0);
            let dm = (-d).max(0.0);
            let p = uxd * uxd * (1.001 * dp + 0.001 * dm + raa / range);
            let q = xld * xld * (0.001 * dp + 1.001 * dm + raa / range);
            (p, q)
        };
        let mut p0 = vec![0.0; n];
        let mut q0 = vec![0.0; n];
        let mut pg = vec![vec![0.0; n]; m];
        let mut qg = vec![vec![0.0; n]; m];
        for j in 0..n {
            let range = (hi[j] - lo[j]).max(1e-12);
            let uxd = self.upp[j] - x[j];
            let xld = x[j] - self.low[j];
            let (p, q) = coeff(df0[j], uxd, xld, range);
            p0[j] = p;
            q0[j] = q;
            for i in 0..m {
                let (p, q) = coeff(dg[i][j], uxd, xld, range);
                pg[i][j] = p;
                qg[i][j] = q;
            }
        }
        let mut r = vec![0.0; m];
        for i in 0..m {
            let mut s = gval[i];
            for j in 0..n {
                s -= pg[i][j] / (self.upp[j] - x[j]) + qg[i][j] / (x[j] - self.low[j]);
            }
            r[i] = s;
        }

        // primal minimizer for fixed multipliers
        let primal = |lambda: &[f64], out: &mut [f64]| {
            for j in 0..n {
                let mut pj = p0[j];
                let mut qj = q0[j];
                for i in 0..m {
                    pj += lambda[i] * pg[i][j];
                    qj += lambda[i] * qg[i][j];
                }
                let sp = pj.sqrt();
                let sq = qj.sqrt();
                let xj = (self.low[j] * sp + self.upp[j] * sq) / (sp + sq);
                out[j] = xj.clamp(alpha[j], beta[j]);
            }
        };
        let conval = |xs: &[f64], i: usize| -> f64 {
            let mut s = r[i];
            for j in 0..n {
                s += pg[i][j] / (self.upp[j] - xs[j]) + qg[i][j] / (xs[j] - self.low[j]);
            }
            s
        };

        // dual coordinate ascent: bisection per multiplier (each dual
        // coordinate function is monotone)
        let mut lambda = vec![0.0; m];
        let mut xs = vec![0.0; n];
        let mut infeasible_slack = None;
        // constraints none of the free variables can influence carry no
        // multiplier and are excluded from the subproblem KKT measure
        let influenced: Vec<bool> = (0..m)
            .map(|i| {
                let inf = (0..n)
                    .filter(|&j| !frozen[j])
                    .map(|j| dg[i][j].abs())
                    .fold(0.0f64, f64::max);
                if inf == 0.0 && gval[i] > 0.0 {
                    log::warn!(
                        "constraint {i} violated by {:.3e} but no free variable affects it",
                        gval[i]
                    );
                }
                inf > 0.0
            })
            .collect();
        let sweeps = if m <= 1 { 1 } else { 40 };
        for _ in 0..sweeps {
            for i in 0..m {
                if !influenced[i] {
                    lambda[i] = 0.0;
                    continue;
                }
                lambda[i] = 0.0;
                primal(&lambda, &mut xs);
                if conval(&xs, i) <= 1e-12 {
                    continue;
                }
                let mut hi_l = 1.0;
                loop {
                    lambda[i] = hi_l;
                    primal(&lambda, &mut xs);
                    if conval(&xs, i) <= 0.0 {
                        break;
                    }
                    hi_l *= 10.0;
                    if hi_l > 1e14 {
                        infeasible_slack = Some(conval(&xs, i));
                        break;
                    }
                }
                if infeasible_slack.is_some() {
                    continue;
                }
                let mut lo_l = 0.0;
                for _ in 0..200 {
                    let mid = 0.5 * (lo_l + hi_l);
                    lambda[i] = mid;
                    primal(&lambda, &mut xs);
                    if conval(&xs, i) > 0.0 {
                        lo_l = mid;
                    } else {
                        hi_l = mid;
                    }
                    if hi_l - lo_l <= 1e-15 * hi_l.max(1.0) {
                        break;
                    }
                }
                lambda[i] = hi_l;
            }
        }
        primal(&lambda, &mut xs);

        // projected KKT residual of the subproblem
        let mut kkt: f64 = 0.0;
        for j in 0..n {
            if frozen[j] {
                continue;
            }
            let uxd = self.upp[j] - xs[j];
            let xld = xs[j] - self.low[j];
            let mut gradl = p0[j] / (uxd * uxd) - q0[j] / (xld * xld);
            for i in 0..m {
                gradl += lambda[i] * (pg[i][j] / (uxd * uxd) - qg[i][j] / (xld * xld));
            }
            let res = if xs[j] <= alpha[j] + 1e-14 * (beta[j] - alpha[j]).abs() {
                (-gradl).max(0.0)
            } else if xs[j] >= beta[j] - 1e-14 * (beta[j] - alpha[j]).abs() {
                gradl.max(0.0)
            } else {
                gradl.abs()
            };
            kkt = kkt.max(res);
        }
        for i in 0..m {
            if !influenced[i] {
                continue;
            }
            let g = conval(&xs, i);
            if infeasible_slack.is_none() {
                kkt = kkt.max(g.max(0.0));
                kkt = kkt.max((lambda[i] * g).abs());
            }
        }
        if infeasible_slack.is_none() && kkt > self.opts.kkt_tol {
            return Err(Error::Numerical(format!(
                "MMA subproblem KKT residual {kkt:.3e} above tolerance"
            )));
        }

        self.x_prev2.copy_from_slice(&self.x_prev);
        self.x_prev.copy_from_slice(x);
        Ok(MmaStep { x: xs, kkt_residual: kkt, lambda, infeasible_slack })
    }

    /// Shrink move limits after a rejected step.
    pub fn halve_move_limit(&mut self) {
        self.opts.move_frac = (0.5 * self.opts.move_frac).max(1e-3);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimize<F>(
        mut f: F,
        x0: Vec<f64>,
        lo: Vec<f64>,
        hi: Vec<f64>,
        iters: usize,
    ) -> (Vec<f64>, MmaStep)
    where
        F: FnMut(&[f64]) -> (f64, Vec<f64>, Vec<f64>, Vec<Vec<f64>>),
    {
        let n = x0.len();
        let mut state = MmaState::new(n, MmaOptions::default());
        let mut x = x0;
        let frozen = vec![false; n];
        let mut last = None;
        for _ in 0..iters {
            let (_f0, df0, gval, dg) = f(&x);
            let step = state.step(&x, &df0, &gval, &dg, &lo, &hi, &frozen).unwrap();
            x = step.x.clone();
            last = Some(step);
        }
        (x, last.expect("at least one iteration"))
    }

    #[test]
    fn scalar_quadratic_converges() {
        // min (d-3)^2 s.t. d <= 10, start 0
        let (x, step) = minimize(
            |x| {
                let d = x[0];
                (
                    (d - 3.0) * (d - 3.0),
                    vec![2.0 * (d - 3.0)],
                    vec![d - 10.0],
                    vec![vec![1.0]],
                )
            },
            vec![0.0],
            vec![-20.0],
            vec![20.0],
            50,
        );
        assert!((x[0] - 3.0).abs() < 1e-6, "converged to {}", x[0]);
        assert!(step.kkt_residual < 1e-9);
    }

    #[test]
    fn active_constraint_boundary_optimum() {
        // min -d s.t. d <= 1
        let (x, _) = minimize(
            |x| (-x[0], vec![-1.0], vec![x[0] - 1.0], vec![vec![1.0]]),
            vec![0.0],
            vec![-5.0],
            vec![5.0],
            40,
        );
        assert!((x[0] - 1.0).abs() < 1e-6, "converged to {}", x[0]);
    }

    #[test]
    fn two_variable_quadratic_with_linear_constraint() {
        // min (x-1)^2 + (y-2)^2 s.t. x + y <= 2; optimum (0.5, 1.5)
        let (x, step) = minimize(
            |x| {
                (
                    (x[0] - 1.0).powi(2) + (x[1] - 2.0).powi(2),
                    vec![2.0 * (x[0] - 1.0), 2.0 * (x[1] - 2.0)],
                    vec![x[0] + x[1] - 2.0],
                    vec![vec![1.0, 1.0]],
                )
            },
            vec![0.0, 0.0],
            vec![-5.0, -5.0],
            vec![5.0, 5.0],
            80,
        );
        assert!((x[0] - 0.5).abs() < 1e-4 && (x[1] - 1.5).abs() < 1e-4, "{x:?}");
        assert!(step.kkt_residual < 1e-6);
    }

    #[test]
    fn frozen_variables_are_pinned() {
        let mut state = MmaState::new(2, MmaOptions::default());
        let x = vec![0.3, 0.7];
        let step = state
            .step(
                &x,
                &[1.0, 1.0],
                &[-1.0],
                &[vec![0.0, 0.0]],
                &[0.0, 0.0],
                &[1.0, 1.0],
                &[false, true],
            )
            .unwrap();
        assert_eq!(step.x[1], 0.7);
        assert!(step.x[0] < 0.3); // free variable moves downhill
    }

    #[test]
    fn infeasible_subproblem_reports_slack() {
        // constraint g = x + 10 <= 0 cannot be met within [0, 1]
        let mut state = MmaState::new(1, MmaOptions::default());
        let step = state
            .step(
                &[0.5],
                &[1.0],
                &[10.5],
                &[vec![1.0]],
                &[0.0],
                &[1.0],
                &[false],
            )
            .unwrap();
        let slack = step.infeasible_slack.expect("must report slack");
        assert!(slack > 0.0);
    }

    #[test]
    fn rejects_non_finite_gradients() {
        let mut state = MmaState::new(1, MmaOptions::default());
        let r = state.step(
            &[0.5],
            &[f64::NAN],
            &[-0.1],
            &[vec![0.0]],
            &[0.0],
            &[1.0],
            &[false],
        );
        assert!(r.is_err());
    }
}
