//! Learning the AND/OR split `γ_T` and the bounded noise residual `δ_T` that
//! make the extracted interactions as sparse as possible.
//!
//! For a table `v` the decomposition is
//!
//! ```text
//! v'(T)     = v(T) − δ_T,              |δ_T| ≤ κ
//! v_and(T)  = 0.5·v'(T) + γ_T
//! v_or(T)   = 0.5·v'(T) − γ_T
//! ```
//!
//! with `γ_∅ = 0.5·v'(∅)` pinned so that `v_and(∅) = v'(∅)` and
//! `v_or(∅) = 0`. The objective is `Σ_{S≠∅} |I_and(S)| + |I_or(S)|`.
//!
//! Both solvers work on the equivalent coefficient form: AND effects `p`,
//! OR effects `q`, the base `b = I_and(∅)` and `δ`, subject to
//! `b + Σ_{∅≠S⊆T} p(S) + Σ_{S∩T≠∅} q(S) + δ_T = v(T)` for every `T`.

use microlp::{ComparisonOp, LinearExpr, OptimizationDirection, Problem, SolveOutcome};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interaction::{or_interactions, InteractionSpectrum};
use crate::lattice::{
    moebius_transform, order_of, superset_zeta_in_place, zeta_in_place, LatticeArray,
};

/// Default κ as a fraction of `|v(N) − v(∅)|`.
pub const DEFAULT_KAPPA_RATIO: f64 = 0.04;

/// Largest variable count that [`Method::Auto`] hands to the exact solver.
pub const EXACT_AUTO_MAX_VARIABLES: usize = 8;

/// `κ = 0.04·|v(N) − v(∅)|` on the raw table.
pub fn default_kappa(v: &LatticeArray) -> f64 {
    kappa_for_ratio(v, DEFAULT_KAPPA_RATIO)
}

pub fn kappa_for_ratio(v: &LatticeArray, ratio: f64) -> f64 {
    ratio * (v.at_full() - v.at_empty()).abs()
}

/// Learnable split and residual parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecompositionParams {
    pub gamma: LatticeArray,
    pub delta: LatticeArray,
    pub kappa: f64,
}

impl DecompositionParams {
    /// Even split with no residual. `γ_∅` is pinned for table `v`.
    pub fn initial(v: &LatticeArray, kappa: f64) -> Self {
        let n = v.n();
        let mut gamma = vec![0.0; v.len()];
        gamma[0] = 0.5 * v.at_empty();
        Self {
            gamma: LatticeArray::from_raw(n, gamma),
            delta: LatticeArray::from_raw(n, vec![0.0; v.len()]),
            kappa,
        }
    }

    /// Parameters that assign the whole residual-free table to AND effects.
    pub fn pure_and(v: &LatticeArray) -> Self {
        Self {
            gamma: v.map(|x| 0.5 * x),
            delta: LatticeArray::from_raw(v.n(), vec![0.0; v.len()]),
            kappa: 0.0,
        }
    }

    pub fn max_abs_delta(&self) -> f64 {
        self.delta.iter().map(|d| d.abs()).fold(0.0, f64::max)
    }
}

/// Splits `v − δ` into the AND and OR components.
///
/// `γ_∅` is taken from the table rather than from `params`, so the boundary
/// `v_and(∅) = v(∅) − δ_∅`, `v_or(∅) = 0` always holds.
pub fn split(v: &LatticeArray, params: &DecompositionParams) -> Result<(LatticeArray, LatticeArray)> {
    for other in [&params.gamma, &params.delta] {
        if other.n() != v.n() {
            return Err(Error::Dimension {
                expected: v.len(),
                found: other.len(),
            });
        }
    }
    let n = v.n();
    let mut v_and = Vec::with_capacity(v.len());
    let mut v_or = Vec::with_capacity(v.len());
    for t in 0..v.len() {
        let denoised = v[t] - params.delta[t];
        if t == 0 {
            v_and.push(denoised);
            v_or.push(0.0);
        } else {
            v_and.push(0.5 * denoised + params.gamma[t]);
            v_or.push(0.5 * denoised - params.gamma[t]);
        }
    }
    Ok((LatticeArray::from_raw(n, v_and), LatticeArray::from_raw(n, v_or)))
}

/// Spectrum of `v` under the given parameters.
pub fn spectrum_for(v: &LatticeArray, params: &DecompositionParams) -> Result<InteractionSpectrum> {
    let (v_and, v_or) = split(v, params)?;
    InteractionSpectrum::from_split(&v_and, &v_or)
}

/// Which solver [`optimize`] runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Exact for `n ≤ EXACT_AUTO_MAX_VARIABLES`, first-order above, and
    /// first-order whenever the exact solver fails.
    #[default]
    Auto,
    /// Restarted primal-dual hybrid gradient iteration.
    FirstOrder,
    /// Simplex on the linear-program form; returns a vertex optimum.
    Exact,
}

/// Settings for [`optimize`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub method: Method,
    pub max_iters: usize,
    /// Primal step weight as a fraction of `max_T |v(T) − v(∅)|`.
    pub step: f64,
    /// Iterations between restarts from the running average; 0 disables.
    pub restart_period: usize,
    /// Converged once the loss changes by less than this (relative) between
    /// two checks and the constraint residual is below `tol` times the
    /// table range.
    pub tol: f64,
    /// Iterations between convergence checks.
    pub patience: usize,
    pub seed: u64,
    /// Extra first-order runs from seeded random splits; the lowest loss wins.
    pub restarts: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            method: Method::Auto,
            max_iters: 5000,
            step: 0.1,
            restart_period: 300,
            tol: 1e-6,
            patience: 50,
            seed: 0,
            restarts: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecompositionResult {
    pub params: DecompositionParams,
    pub spectrum: InteractionSpectrum,
    /// Loss of the initial split, then of every accepted improvement.
    pub loss_history: Vec<f64>,
    /// First-order iterations run (0 for the exact solver).
    pub iterations: usize,
    pub converged: bool,
}

impl DecompositionResult {
    pub fn final_loss(&self) -> f64 {
        *self.loss_history.last().expect("history always holds the initial loss")
    }
}

/// Minimizes the L1 mass of both interaction families over `γ` and the box
/// constrained `δ`.
pub fn optimize(v: &LatticeArray, kappa: f64, config: &OptimizerConfig) -> Result<DecompositionResult> {
    if !(kappa >= 0.0 && kappa.is_finite()) {
        return Err(Error::Domain(format!("kappa must be finite and >= 0, got {kappa}")));
    }
    if config.max_iters == 0 || config.patience == 0 {
        return Err(Error::Config("max_iters and patience must be positive".into()));
    }
    if !(config.step > 0.0 && config.step.is_finite()) || !(config.tol >= 0.0) {
        return Err(Error::Config("step must be positive and tol non-negative".into()));
    }

    let start = DecompositionParams::initial(v, kappa);
    let initial_loss = spectrum_for(v, &start)?.l1_mass();
    if !initial_loss.is_finite() {
        return Err(Error::Optimization {
            iteration: 0,
            last_stable: Box::new(start),
        });
    }

    // a constant table has the closed-form optimum `b = v(∅)`
    let exact = range_scale(v) == 0.0
        || match config.method {
            Method::Exact => true,
            Method::FirstOrder => false,
            Method::Auto => v.n() <= EXACT_AUTO_MAX_VARIABLES,
        };
    if exact {
        match solve_exact(v, kappa) {
            Ok(coef) => {
                let (params, spectrum) = rebuild(v, kappa, &coef)?;
                let loss = spectrum.l1_mass();
                if loss < initial_loss {
                    return Ok(DecompositionResult {
                        params,
                        spectrum,
                        loss_history: vec![initial_loss, loss],
                        iterations: 0,
                        converged: true,
                    });
                }
                if loss.is_finite() {
                    let spectrum = spectrum_for(v, &start)?;
                    return Ok(DecompositionResult {
                        params: start,
                        spectrum,
                        loss_history: vec![initial_loss],
                        iterations: 0,
                        converged: true,
                    });
                }
                if config.method == Method::Exact {
                    return Err(Error::Optimization {
                        iteration: 0,
                        last_stable: Box::new(start),
                    });
                }
            }
            Err(e) if config.method == Method::Exact => return Err(e),
            Err(_) => {}
        }
    }

    let mut best = first_order(v, kappa, config, start, initial_loss)?;
    if config.restarts > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let spread = range_scale(v);
        for _ in 0..config.restarts {
            let mut from = DecompositionParams::initial(v, kappa);
            for g in from.gamma.as_mut_slice().iter_mut().skip(1) {
                *g = rng.random_range(-0.5..0.5) * spread;
            }
            let candidate = first_order(v, kappa, config, from, initial_loss)?;
            if candidate.final_loss() < best.final_loss() {
                best = candidate;
            }
        }
    }
    Ok(best)
}

fn range_scale(v: &LatticeArray) -> f64 {
    let base = v.at_empty();
    v.iter().map(|x| (x - base).abs()).fold(0.0, f64::max)
}

/// Coefficient form of a decomposition. Index 0 of `p` and `q` is unused.
#[derive(Clone, Debug)]
struct Coefficients {
    p: Vec<f64>,
    q: Vec<f64>,
    b: f64,
    delta: Vec<f64>,
}

impl Coefficients {
    fn from_params(v: &LatticeArray, params: &DecompositionParams) -> Result<Self> {
        let (v_and, v_or) = split(v, params)?;
        let mut p = moebius_transform(&v_and).into_vec();
        let b = p[0];
        p[0] = 0.0;
        let mut q = or_interactions(&v_or).into_vec();
        q[0] = 0.0;
        Ok(Self {
            p,
            q,
            b,
            delta: params.delta.as_slice().to_vec(),
        })
    }
}

/// Exact parameters for a coefficient vector. The AND side is taken as is;
/// any constraint residual lands on the OR side, so reconstruction is exact
/// whatever the accuracy of `coef`.
fn rebuild(v: &LatticeArray, kappa: f64, coef: &Coefficients) -> Result<(DecompositionParams, InteractionSpectrum)> {
    let n = v.n();
    let len = v.len();
    let mut v_and = coef.p.clone();
    v_and[0] = coef.b;
    zeta_in_place(&mut v_and);
    let mut delta: Vec<f64> = coef.delta.iter().map(|d| d.clamp(-kappa, kappa)).collect();
    delta[0] = (v.at_empty() - coef.b).clamp(-kappa, kappa);
    let mut gamma = vec![0.0; len];
    gamma[0] = 0.5 * (v.at_empty() - delta[0]);
    for t in 1..len {
        gamma[t] = v_and[t] - 0.5 * (v[t] - delta[t]);
    }
    let params = DecompositionParams {
        gamma: LatticeArray::from_raw(n, gamma),
        delta: LatticeArray::from_raw(n, delta),
        kappa,
    };
    let spectrum = spectrum_for(v, &params)?;
    Ok((params, spectrum))
}

/// Solves the linear program on the table normalized to `(v − v(∅))/range`.
fn solve_exact(v: &LatticeArray, kappa: f64) -> Result<Coefficients> {
    let len = v.len();
    let base = v.at_empty();
    let scale = range_scale(v);
    if scale == 0.0 {
        return Ok(Coefficients {
            p: vec![0.0; len],
            q: vec![0.0; len],
            b: base,
            delta: vec![0.0; len],
        });
    }
    let bound = kappa / scale;
    let mut problem = Problem::new(OptimizationDirection::Minimize);
    let nonneg = (0.0, f64::INFINITY);
    let mut and_pos = Vec::with_capacity(len);
    let mut and_neg = Vec::with_capacity(len);
    let mut or_pos = Vec::with_capacity(len);
    let mut or_neg = Vec::with_capacity(len);
    for _ in 1..len {
        and_pos.push(problem.add_var(1.0, nonneg));
        and_neg.push(problem.add_var(1.0, nonneg));
        or_pos.push(problem.add_var(1.0, nonneg));
        or_neg.push(problem.add_var(1.0, nonneg));
    }
    let b = problem.add_var(0.0, (f64::NEG_INFINITY, f64::INFINITY));
    let delta: Vec<_> = (0..len).map(|_| problem.add_var(0.0, (-bound, bound))).collect();
    for t in 0..len {
        let mut row = LinearExpr::empty();
        row.add(b, 1.0);
        row.add(delta[t], 1.0);
        for s in 1..len {
            if s & !t == 0 {
                row.add(and_pos[s - 1], 1.0);
                row.add(and_neg[s - 1], -1.0);
            }
            if s & t != 0 {
                row.add(or_pos[s - 1], 1.0);
                row.add(or_neg[s - 1], -1.0);
            }
        }
        problem.add_constraint(row, ComparisonOp::Eq, (v[t] - base) / scale);
    }
    let solution = match problem.solve() {
        Ok(SolveOutcome::Solution(s)) => s,
        Ok(SolveOutcome::Interrupted(_)) => {
            return Err(Error::Domain("exact solver interrupted".into()));
        }
        Err(e) => return Err(Error::Domain(format!("exact solver failed: {e}"))),
    };
    let mut p = vec![0.0; len];
    let mut q = vec![0.0; len];
    for s in 1..len {
        p[s] = scale * (solution[and_pos[s - 1]] - solution[and_neg[s - 1]]);
        q[s] = scale * (solution[or_pos[s - 1]] - solution[or_neg[s - 1]]);
    }
    Ok(Coefficients {
        p,
        q,
        b: base + scale * solution[b],
        delta: delta.iter().map(|&d| scale * solution[d]).collect(),
    })
}

/// `out(T) = b + Σ_{∅≠S⊆T} p(S) + Σ_{S∩T≠∅} q(S) + δ_T`.
fn forward(p: &[f64], q: &[f64], b: f64, delta: &[f64], out: &mut [f64], scratch: &mut [f64]) {
    let full = out.len() - 1;
    out.copy_from_slice(p);
    out[0] = 0.0;
    zeta_in_place(out);
    scratch.copy_from_slice(q);
    scratch[0] = 0.0;
    zeta_in_place(scratch);
    let total = scratch[full];
    for t in 0..out.len() {
        out[t] += b + total - scratch[full ^ t] + delta[t];
    }
}

/// Transpose of [`forward`]: fills the `p` and `q` gradients and returns the
/// `b` gradient. The `δ` gradient is `y` itself.
fn adjoint(y: &[f64], grad_p: &mut [f64], grad_q: &mut [f64], scratch: &mut [f64]) -> f64 {
    let full = y.len() - 1;
    let total: f64 = y.iter().sum();
    grad_p.copy_from_slice(y);
    superset_zeta_in_place(grad_p);
    scratch.copy_from_slice(y);
    zeta_in_place(scratch);
    // a q column S reaches every row except those inside N\S
    for s in 0..y.len() {
        grad_q[s] = total - scratch[full ^ s];
    }
    grad_p[0] = 0.0;
    grad_q[0] = 0.0;
    total
}

fn first_order(
    v: &LatticeArray,
    kappa: f64,
    config: &OptimizerConfig,
    start: DecompositionParams,
    initial_loss: f64,
) -> Result<DecompositionResult> {
    let n = v.n();
    let len = v.len();
    let pow2 = |k: usize| (1u64 << k) as f64;
    let scale = range_scale(v);

    let mut x = Coefficients::from_params(v, &start)?;
    for d in x.delta.iter_mut() {
        *d = d.clamp(-kappa, kappa);
    }
    let mut best = x.clone();
    let mut best_loss = initial_loss;
    let mut history = vec![initial_loss];
    let mut iterations = 0;
    let mut converged = initial_loss == 0.0;

    // Diagonal step sizes from the absolute column and row sums.
    let omega = config.step * scale.max(f64::MIN_POSITIVE);
    let mut tau_p = vec![0.0; len];
    let mut tau_q = vec![0.0; len];
    let mut sigma = vec![0.0; len];
    for s in 1..len {
        let k = order_of(s);
        tau_p[s] = omega / pow2(n - k);
        tau_q[s] = omega / (pow2(n) - pow2(n - k));
    }
    for t in 0..len {
        let k = order_of(t);
        sigma[t] = 1.0 / (omega * (1.0 + pow2(k) + pow2(n) - pow2(n - k)));
    }
    let tau_b = omega / pow2(n);
    let tau_delta = omega;

    let mut y = vec![0.0; len];
    let mut grad_p = vec![0.0; len];
    let mut grad_q = vec![0.0; len];
    let mut bar = Coefficients {
        p: vec![0.0; len],
        q: vec![0.0; len],
        b: 0.0,
        delta: vec![0.0; len],
    };
    let mut avg = bar.clone();
    let mut avg_y = vec![0.0; len];
    let mut avg_count = 0usize;
    let mut image = vec![0.0; len];
    let mut scratch = vec![0.0; len];
    let mut previous_check = initial_loss;

    while !converged && iterations < config.max_iters {
        iterations += 1;
        let grad_b = adjoint(&y, &mut grad_p, &mut grad_q, &mut scratch);
        for s in 1..len {
            let np = soft(x.p[s] - tau_p[s] * grad_p[s], tau_p[s]);
            let nq = soft(x.q[s] - tau_q[s] * grad_q[s], tau_q[s]);
            bar.p[s] = 2.0 * np - x.p[s];
            bar.q[s] = 2.0 * nq - x.q[s];
            x.p[s] = np;
            x.q[s] = nq;
        }
        let nb = x.b - tau_b * grad_b;
        bar.b = 2.0 * nb - x.b;
        x.b = nb;
        for t in 0..len {
            let nd = (x.delta[t] - tau_delta * y[t]).clamp(-kappa, kappa);
            bar.delta[t] = 2.0 * nd - x.delta[t];
            x.delta[t] = nd;
        }
        forward(&bar.p, &bar.q, bar.b, &bar.delta, &mut image, &mut scratch);
        for t in 0..len {
            y[t] += sigma[t] * (image[t] - v[t]);
        }

        if config.restart_period > 0 {
            avg_count += 1;
            let w = 1.0 / avg_count as f64;
            for t in 0..len {
                avg.p[t] += w * (x.p[t] - avg.p[t]);
                avg.q[t] += w * (x.q[t] - avg.q[t]);
                avg.delta[t] += w * (x.delta[t] - avg.delta[t]);
                avg_y[t] += w * (y[t] - avg_y[t]);
            }
            avg.b += w * (x.b - avg.b);
            if avg_count == config.restart_period {
                std::mem::swap(&mut x, &mut avg);
                std::mem::swap(&mut y, &mut avg_y);
                for buf in [&mut avg.p, &mut avg.q, &mut avg.delta, &mut avg_y] {
                    buf.iter_mut().for_each(|e| *e = 0.0);
                }
                avg.b = 0.0;
                avg_count = 0;
            }
        }

        if iterations % config.patience == 0 || iterations == config.max_iters {
            let (_, spectrum) = rebuild(v, kappa, &x)?;
            let loss = spectrum.l1_mass();
            if !loss.is_finite() {
                let (last_stable, _) = rebuild(v, kappa, &best)?;
                return Err(Error::Optimization {
                    iteration: iterations,
                    last_stable: Box::new(last_stable),
                });
            }
            if loss < best_loss {
                best_loss = loss;
                best.clone_from(&x);
                history.push(loss);
            }
            forward(&x.p, &x.q, x.b, &x.delta, &mut image, &mut scratch);
            let residual = image
                .iter()
                .zip(v.iter())
                .map(|(r, t)| (r - t).abs())
                .fold(0.0, f64::max);
            if (previous_check - loss).abs() <= config.tol * previous_check && residual <= config.tol * scale {
                converged = true;
            }
            previous_check = loss;
        }
    }

    let (params, spectrum) = if best_loss < initial_loss {
        rebuild(v, kappa, &best)?
    } else {
        let spectrum = spectrum_for(v, &start)?;
        (start, spectrum)
    };
    Ok(DecompositionResult {
        params,
        spectrum,
        loss_history: history,
        iterations,
        converged,
    })
}

fn soft(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interaction::{merge_first_order, InteractionKind};
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn table(values: Vec<f64>) -> LatticeArray {
        let n = values.len().trailing_zeros() as usize;
        LatticeArray::new(n, values).unwrap()
    }

    fn random_table(n: usize, seed: u64) -> LatticeArray {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LatticeArray::from_fn(n, |_| rng.random_range(-1.0..1.0)).unwrap()
    }

    fn planted(n: usize, terms: &[(usize, InteractionKind, f64)]) -> LatticeArray {
        LatticeArray::from_fn(n, |t| {
            terms
                .iter()
                .map(|&(m, kind, c)| match kind {
                    InteractionKind::And if m & !t == 0 => c,
                    InteractionKind::Or if m & t != 0 => c,
                    _ => 0.0,
                })
                .sum()
        })
        .unwrap()
    }

    fn with_method(method: Method) -> OptimizerConfig {
        OptimizerConfig {
            method,
            ..OptimizerConfig::default()
        }
    }

    const METHODS: [Method; 2] = [Method::Exact, Method::FirstOrder];

    #[test]
    fn default_kappa_examples() {
        let mut v = vec![0.0; 4];
        v[3] = 5.0;
        assert!((default_kappa(&table(v)) - 0.2).abs() < 1e-15);
        assert_eq!(default_kappa(&table(vec![1.5, 0.0, 9.0, 1.5])), 0.0);
        assert!((default_kappa(&table(vec![-1.0, 0.0, 0.0, 1.0])) - 0.08).abs() < 1e-15);
    }

    #[test]
    fn split_even_when_gamma_zero() {
        let v = random_table(3, 1);
        let (a, o) = split(&v, &DecompositionParams::initial(&v, 0.0)).unwrap();
        assert_eq!(a[0], v[0]);
        assert_eq!(o[0], 0.0);
        for t in 1..v.len() {
            assert_eq!(a[t], 0.5 * v[t]);
            assert_eq!(o[t], 0.5 * v[t]);
        }
    }

    #[test]
    fn split_pure_and_and_telescoping() {
        let v = random_table(4, 2);
        let mut params = DecompositionParams::initial(&v, 0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for d in params.delta.as_mut_slice() {
            *d = rng.random_range(-0.1..0.1);
        }
        for t in 0..v.len() {
            params.gamma.as_mut_slice()[t] = 0.5 * (v[t] - params.delta[t]);
        }
        let (a, o) = split(&v, &params).unwrap();
        for t in 0..v.len() {
            assert!(o[t].abs() < 1e-15);
            assert!((a[t] - (v[t] - params.delta[t])).abs() < 1e-15);
        }
        for d in params.delta.as_mut_slice() {
            *d = rng.random_range(-0.1..0.1);
        }
        for g in params.gamma.as_mut_slice() {
            *g = rng.random_range(-1.0..1.0);
        }
        let (a, o) = split(&v, &params).unwrap();
        for t in 0..v.len() {
            assert!((a[t] + o[t] - (v[t] - params.delta[t])).abs() < 1e-14);
        }
    }

    #[test]
    fn split_rejects_size_mismatch() {
        let v = random_table(3, 4);
        let params = DecompositionParams::initial(&random_table(4, 4), 0.0);
        assert!(matches!(split(&v, &params), Err(Error::Dimension { .. })));
    }

    #[test]
    fn adjoint_is_transpose_of_forward() {
        let n = 5;
        let len = 1 << n;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut draw = |len: usize| (0..len).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let mut p = draw(len);
        let mut q = draw(len);
        p[0] = 0.0;
        q[0] = 0.0;
        let b = 0.3;
        let delta = draw(len);
        let y = draw(len);
        let mut image = vec![0.0; len];
        let mut scratch = vec![0.0; len];
        forward(&p, &q, b, &delta, &mut image, &mut scratch);
        let lhs: f64 = image.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut gp = vec![0.0; len];
        let mut gq = vec![0.0; len];
        let gb = adjoint(&y, &mut gp, &mut gq, &mut scratch);
        let rhs: f64 = (1..len).map(|s| p[s] * gp[s] + q[s] * gq[s]).sum::<f64>()
            + b * gb
            + delta.iter().zip(&y).map(|(d, y)| d * y).sum::<f64>();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn forward_matches_literal_sums() {
        let n = 4;
        let len = 1 << n;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p: Vec<f64> = (0..len).map(|s| if s == 0 { 0.0 } else { rng.random_range(-1.0..1.0) }).collect();
        let q: Vec<f64> = (0..len).map(|s| if s == 0 { 0.0 } else { rng.random_range(-1.0..1.0) }).collect();
        let delta: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut image = vec![0.0; len];
        let mut scratch = vec![0.0; len];
        forward(&p, &q, 0.7, &delta, &mut image, &mut scratch);
        for t in 0..len {
            let mut expect = 0.7 + delta[t];
            for s in 1..len {
                if s & !t == 0 {
                    expect += p[s];
                }
                if s & t != 0 {
                    expect += q[s];
                }
            }
            assert!((image[t] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn planted_pure_and_reaches_planted_mass() {
        let terms = [
            (0b0000_0011, InteractionKind::And, 1.5),
            (0b0001_1100, InteractionKind::And, -1.2),
            (0b1010_0100, InteractionKind::And, 0.8),
        ];
        let v = planted(8, &terms);
        for method in METHODS {
            let res = optimize(&v, 0.0, &with_method(method)).unwrap();
            let mass = 3.5;
            assert!((res.final_loss() - mass).abs() <= 0.01 * mass, "{method:?} {}", res.final_loss());
            let or_mass: f64 = res.spectrum.or_effects().iter().skip(1).map(|x| x.abs()).sum();
            assert!(or_mass < 0.01 * mass, "{method:?} or mass {or_mass}");
        }
    }

    #[test]
    fn planted_pure_or_reaches_planted_mass() {
        let terms = [
            (0b0000_0110, InteractionKind::Or, 1.1),
            (0b1100_0000, InteractionKind::Or, -1.7),
            (0b0011_1000, InteractionKind::Or, 0.9),
        ];
        let v = planted(8, &terms);
        for method in METHODS {
            let res = optimize(&v, 0.0, &with_method(method)).unwrap();
            let mass = 3.7;
            assert!((res.final_loss() - mass).abs() <= 0.01 * mass, "{method:?} {}", res.final_loss());
            let and_mass: f64 = res.spectrum.and_effects().iter().skip(1).map(|x| x.abs()).sum();
            assert!(and_mass < 0.01 * mass, "{method:?} and mass {and_mass}");
        }
    }

    #[test]
    fn kappa_sweep_keeps_salient_sets_on_disjoint_planted_terms() {
        let terms = [
            (0b0000_0011, InteractionKind::And, 1.4),
            (0b0011_0000, InteractionKind::Or, -1.1),
        ];
        let v = planted(8, &terms);
        let expected: BTreeSet<_> = terms.iter().map(|t| (t.0, t.1)).collect();
        for ratio in [0.03, 0.04, 0.05] {
            let res = optimize(&v, kappa_for_ratio(&v, ratio), &OptimizerConfig::default()).unwrap();
            let merged = merge_first_order(&res.spectrum);
            let tau = 0.05 * merged.max_abs_effect();
            let salient: BTreeSet<_> = merged.entries().filter(|e| e.2.abs() > tau).map(|e| (e.0, e.1)).collect();
            assert_eq!(salient, expected, "ratio {ratio}");
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let v = random_table(3, 7);
        assert!(matches!(optimize(&v, -1.0, &OptimizerConfig::default()), Err(Error::Domain(_))));
        assert!(matches!(optimize(&v, f64::NAN, &OptimizerConfig::default()), Err(Error::Domain(_))));
        let bad = OptimizerConfig {
            max_iters: 0,
            ..OptimizerConfig::default()
        };
        assert!(matches!(optimize(&v, 0.0, &bad), Err(Error::Config(_))));
    }

    #[test]
    fn overflowing_loss_is_an_optimization_error() {
        let v = table(vec![-1e308, 1e308, 1e308, -1e308]);
        for method in METHODS {
            match optimize(&v, 0.0, &with_method(method)) {
                Err(Error::Optimization { iteration, last_stable }) => {
                    assert_eq!(iteration, 0);
                    assert_eq!(last_stable.gamma.n(), 2);
                }
                other => panic!("{method:?}: {other:?}"),
            }
        }
    }

    #[test]
    fn constant_table_needs_no_iterations() {
        let v = LatticeArray::from_fn(4, |_| 2.5).unwrap();
        for method in METHODS {
            let res = optimize(&v, default_kappa(&v), &with_method(method)).unwrap();
            assert_eq!(res.final_loss(), 0.0);
            assert!(res.converged);
            assert_eq!(res.spectrum.and_effects()[0], 2.5);
        }
    }

    #[test]
    fn restarts_are_seeded() {
        let v = random_table(5, 8);
        let config = OptimizerConfig {
            method: Method::FirstOrder,
            restarts: 2,
            seed: 11,
            max_iters: 600,
            ..OptimizerConfig::default()
        };
        let a = optimize(&v, 0.05, &config).unwrap();
        let b = optimize(&v, 0.05, &config).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn first_order_approaches_exact_optimum() {
        for seed in 0..3 {
            let v = random_table(6, 20 + seed);
            let kappa = default_kappa(&v);
            let exact = optimize(&v, kappa, &with_method(Method::Exact)).unwrap();
            let approx = optimize(&v, kappa, &with_method(Method::FirstOrder)).unwrap();
            assert!(approx.final_loss() >= exact.final_loss() - 1e-7);
            assert!(
                approx.final_loss() <= 1.01 * exact.final_loss(),
                "{} vs {}",
                approx.final_loss(),
                exact.final_loss()
            );
        }
    }

    fn check_result(v: &LatticeArray, kappa: f64, res: &DecompositionResult) {
        let p = &res.params;
        assert!(p.max_abs_delta() <= kappa);
        let (a, o) = split(v, p).unwrap();
        assert_eq!(o[0], 0.0);
        assert_eq!(a[0], v[0] - p.delta[0]);
        let recon = res.spectrum.reconstruct_all();
        let range = v.iter().map(|x| x.abs()).fold(1e-300, f64::max);
        for t in 0..v.len() {
            assert!((recon[t] - (v[t] - p.delta[t])).abs() <= 1e-8 * range);
        }
        assert!(res.loss_history.windows(2).all(|w| w[1] <= w[0]));
        assert!(res.final_loss() <= res.loss_history[0]);
        assert!((res.final_loss() - res.spectrum.l1_mass()).abs() <= 1e-9 * res.loss_history[0].max(1.0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn feasible_exact_and_monotone(n in 2usize..=6, seed in 0u64..1000, ratio in 0.0f64..0.2, exact in any::<bool>()) {
            let v = random_table(n, seed);
            let kappa = kappa_for_ratio(&v, ratio);
            let method = if exact { Method::Exact } else { Method::FirstOrder };
            let res = optimize(&v, kappa, &with_method(method)).unwrap();
            check_result(&v, kappa, &res);
        }

        #[test]
        fn scale_equivariance(n in 2usize..=5, seed in 0u64..1000, exact in any::<bool>()) {
            let v = random_table(n, seed);
            let c = 4.0;
            let scaled = v.map(|x| c * x);
            let kappa = default_kappa(&v);
            let method = if exact { Method::Exact } else { Method::FirstOrder };
            let config = with_method(method);
            let a = optimize(&v, kappa, &config).unwrap();
            let b = optimize(&scaled, c * kappa, &config).unwrap();
            prop_assert_eq!(a.iterations, b.iterations);
            let expect = a.spectrum.scaled(c);
            for kind in InteractionKind::BOTH {
                let diff = expect.effects(kind).max_abs_diff(b.spectrum.effects(kind));
                prop_assert!(diff <= 1e-9 * c * (1.0 + a.spectrum.max_abs_effect()), "{:?} {}", kind, diff);
            }
        }
    }
}
