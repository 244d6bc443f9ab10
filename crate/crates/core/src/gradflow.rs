//! Gradient flow on linear least squares, `L(W) = ½ Σ‖yᵢ − Wᵀxᵢ‖²`, for the
//! plain parameterization `W` and the factorized one `W = MᵀW′`.
//!
//! Samples are stacked as rows: `X` is `s×n`, `Y` is `s×m`, so the residual
//! matrix is `R = Y − XW` and `Σ xᵢrᵢᵀ = XᵀR`.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::linalg::{cholesky_solve, nuclear_norm, numerical_rank, spectral_norm};
use crate::rng::seeded;
use crate::tensor::Tensor;

pub const DIVERGENCE_LOSS: f64 = 1e12;
pub const RANK_TOL: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct FlowProblem {
    x: Tensor,
    y: Tensor,
}

impl FlowProblem {
    pub fn new(x: Tensor, y: Tensor) -> Result<Self> {
        match (x.shape(), y.shape()) {
            ([s, _], [s2, _]) if s == s2 && *s > 0 => {}
            _ => return shape_err(format!("samples {:?} and targets {:?} must be s×n and s×m", x.shape(), y.shape())),
        }
        if !x.is_finite() || !y.is_finite() {
            return Err(Error::Argument("flow problem data must be finite".into()));
        }
        Ok(FlowProblem { x, y })
    }

    /// Gaussian samples with targets `y = W_trueᵀx`, so the system is
    /// consistent.
    pub fn random_consistent<R: Rng + ?Sized>(samples: usize, n: usize, m: usize, rng: &mut R) -> Result<Self> {
        let x = Tensor::randn(&[samples, n], 1.0, rng);
        let w = Tensor::randn(&[n, m], 1.0, rng);
        let y = x.matmul(&w)?;
        FlowProblem::new(x, y)
    }

    pub fn x(&self) -> &Tensor {
        &self.x
    }

    pub fn y(&self) -> &Tensor {
        &self.y
    }

    pub fn samples(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn n(&self) -> usize {
        self.x.shape()[1]
    }

    pub fn m(&self) -> usize {
        self.y.shape()[1]
    }

    fn check_w(&self, w: &Tensor) -> Result<()> {
        if w.shape() != [self.n(), self.m()] {
            return shape_err(format!("W {:?} should be {}×{}", w.shape(), self.n(), self.m()));
        }
        Ok(())
    }

    pub fn residual(&self, w: &Tensor) -> Result<Tensor> {
        self.check_w(w)?;
        self.y.sub(&self.x.matmul(w)?)
    }

    pub fn loss(&self, w: &Tensor) -> Result<f64> {
        let r = self.residual(w)?;
        Ok(0.5 * r.data().iter().map(|v| v * v).sum::<f64>())
    }
}

/// `Ẇ = Σ xᵢrᵢᵀ = XᵀR`, the negative gradient.
pub fn standard_flow_derivative(w: &Tensor, p: &FlowProblem) -> Result<Tensor> {
    p.x.t()?.matmul(&p.residual(w)?)
}

fn check_m(m: &Tensor, p: &FlowProblem) -> Result<()> {
    if m.shape() != [p.n(), p.n()] {
        return shape_err(format!("M {:?} should be {}×{}", m.shape(), p.n(), p.n()));
    }
    Ok(())
}

/// `(Ẇ′, Ṁ) = (M XᵀR, W′ RᵀX)` with `R = Y − X MᵀW′`.
pub fn nsl_flow_derivatives(wp: &Tensor, m: &Tensor, p: &FlowProblem) -> Result<(Tensor, Tensor)> {
    check_m(m, p)?;
    let r = p.residual(&m.t()?.matmul(wp)?)?;
    let xtr = p.x.t()?.matmul(&r)?;
    Ok((m.matmul(&xtr)?, wp.matmul(&r.t()?)?.matmul(&p.x)?))
}

/// `d(MᵀW′)/dt = MᵀM·XᵀR + XᵀR·W′ᵀW′`.
pub fn composite_derivative(wp: &Tensor, m: &Tensor, p: &FlowProblem) -> Result<Tensor> {
    check_m(m, p)?;
    let r = p.residual(&m.t()?.matmul(wp)?)?;
    let xtr = p.x.t()?.matmul(&r)?;
    let a = m.t()?.matmul(m)?.matmul(&xtr)?;
    let b = xtr.matmul(&wp.t()?.matmul(wp)?)?;
    a.add(&b)
}

/// Least-norm interpolant `W* = Xᵀ(XXᵀ)⁻¹Y`; requires linearly independent
/// samples.
pub fn min_norm_solution(p: &FlowProblem) -> Result<Tensor> {
    let xt = p.x.t()?;
    let gram = p.x.matmul(&xt)?;
    let c = cholesky_solve(&gram, &p.y, 1e-12).map_err(|e| match e {
        Error::RankDeficient(m) => Error::RankDeficient(format!(
            "the {} samples are not linearly independent in {} dimensions: {m}",
            p.samples(),
            p.n()
        )),
        e => e,
    })?;
    xt.matmul(&c)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowMode {
    #[default]
    Standard,
    Nsl,
}

#[derive(Clone, Debug, PartialEq)]
pub enum FlowState {
    Standard { w: Tensor },
    Nsl { wp: Tensor, m: Tensor },
}

impl FlowState {
    /// Standard: `W₀ = 0`. NSL: `M₀ = I`, `W′₀` Gaussian with std `wp_std`.
    pub fn initial(mode: FlowMode, p: &FlowProblem, wp_std: f64, seed: u64) -> FlowState {
        match mode {
            FlowMode::Standard => FlowState::Standard { w: Tensor::zeros(&[p.n(), p.m()]) },
            FlowMode::Nsl => FlowState::Nsl {
                wp: Tensor::randn(&[p.n(), p.m()], wp_std, &mut seeded(seed)),
                m: Tensor::eye(p.n()),
            },
        }
    }

    pub fn composite(&self) -> Result<Tensor> {
        match self {
            FlowState::Standard { w } => Ok(w.clone()),
            FlowState::Nsl { wp, m } => m.t()?.matmul(wp),
        }
    }

    /// One forward-Euler step of length `dt`.
    pub fn euler_step(&self, p: &FlowProblem, dt: f64) -> Result<FlowState> {
        Ok(match self {
            FlowState::Standard { w } => FlowState::Standard { w: w.axpy(dt, &standard_flow_derivative(w, p)?)? },
            FlowState::Nsl { wp, m } => {
                let (dwp, dm) = nsl_flow_derivatives(wp, m, p)?;
                FlowState::Nsl { wp: wp.axpy(dt, &dwp)?, m: m.axpy(dt, &dm)? }
            }
        })
    }
}

/// Step size below which gradient descent on the current state is
/// guaranteed not to increase the loss: `2/λ_max(XᵀX)` for the standard
/// flow, and `1/(λ(‖M‖² + ‖W′‖²) + ‖XᵀR‖)` (spectral norms) as a local bound
/// for the factorized one.
pub fn stability_threshold(p: &FlowProblem, state: &FlowState) -> Result<f64> {
    let lam = spectral_norm(&p.x)?.powi(2);
    Ok(match state {
        FlowState::Standard { .. } => 2.0 / lam,
        FlowState::Nsl { wp, m } => {
            let r = p.residual(&m.t()?.matmul(wp)?)?;
            let cross = spectral_norm(&p.x.t()?.matmul(&r)?)?;
            1.0 / (lam * (spectral_norm(m)?.powi(2) + spectral_norm(wp)?.powi(2)) + cross)
        }
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowRecord {
    pub t: f64,
    pub loss: f64,
    pub frob_norm: f64,
    pub nuclear_norm: f64,
    pub rank: usize,
    pub distance_to_min_norm: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub records: Vec<FlowRecord>,
    /// Composite `W` at every recorded time.
    pub composites: Vec<Tensor>,
    pub final_state: FlowState,
    pub dt: f64,
}

impl Trajectory {
    pub const CSV_HEADER: &'static str = "t,loss,frob_norm,nuclear_norm,rank,distance_to_min_norm";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for r in &self.records {
            let d = r.distance_to_min_norm.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{},{},{},{},{},{}", r.t, r.loss, r.frob_norm, r.nuclear_norm, r.rank, d);
        }
        s
    }

    pub fn final_loss(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.loss)
    }
}

fn record(p: &FlowProblem, w: &Tensor, t: f64, w_star: Option<&Tensor>) -> Result<FlowRecord> {
    Ok(FlowRecord {
        t,
        loss: p.loss(w)?,
        frob_norm: w.norm(),
        nuclear_norm: nuclear_norm(w)?,
        rank: numerical_rank(w, RANK_TOL)?,
        distance_to_min_norm: w_star.map(|s| w.sub(s).map(|d| d.norm())).transpose()?,
    })
}

/// Forward-Euler trajectory from `state`: up to `steps` steps of `dt`,
/// stopping once the loss falls below `stop_tol`. A loss above
/// [`DIVERGENCE_LOSS`] aborts with the step index.
pub fn integrate(state: FlowState, p: &FlowProblem, dt: f64, steps: usize, stop_tol: f64) -> Result<Trajectory> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::Argument(format!("time step must be positive, got {dt}")));
    }
    let w_star = min_norm_solution(p).ok();
    let mut state = state;
    let w = state.composite()?;
    p.check_w(&w)?;
    let mut records = vec![record(p, &w, 0.0, w_star.as_ref())?];
    let mut composites = vec![w];
    for step in 1..=steps {
        if records.last().expect("initial record").loss < stop_tol {
            break;
        }
        state = state.euler_step(p, dt)?;
        let w = state.composite()?;
        let loss = p.loss(&w)?;
        if !(loss <= DIVERGENCE_LOSS) {
            return Err(Error::Divergence { step, loss });
        }
        records.push(record(p, &w, step as f64 * dt, w_star.as_ref())?);
        composites.push(w);
    }
    Ok(Trajectory { records, composites, final_state: state, dt })
}

/// [`integrate`], halving `dt` (and doubling the step count, so the time
/// horizon is kept) after each divergence, at most `max_halvings` times.
pub fn integrate_with_retry(
    state: FlowState,
    p: &FlowProblem,
    dt: f64,
    steps: usize,
    stop_tol: f64,
    max_halvings: usize,
) -> Result<Trajectory> {
    let (mut dt, mut steps) = (dt, steps);
    for attempt in 0..=max_halvings {
        match integrate(state.clone(), p, dt, steps, stop_tol) {
            Err(Error::Divergence { .. }) if attempt < max_halvings => {
                dt /= 2.0;
                steps = steps.saturating_mul(2);
            }
            other => return other,
        }
    }
    unreachable!("loop returns on the last attempt")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn problem(seed: u64, s: usize, n: usize, m: usize) -> FlowProblem {
        FlowProblem::random_consistent(s, n, m, &mut seeded(seed)).unwrap()
    }

    fn num_grad(f: impl Fn(&Tensor) -> f64, at: &Tensor) -> Tensor {
        let h = 1e-6;
        Tensor::from_fn(at.shape(), |i| {
            let mut a = at.clone();
            a.data_mut()[i] += h;
            let fp = f(&a);
            a.data_mut()[i] -= 2.0 * h;
            (fp - f(&a)) / (2.0 * h)
        })
    }

    #[test]
    fn standard_derivative_examples() {
        let p = FlowProblem::new(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap(), Tensor::new(vec![1, 1], vec![1.0]).unwrap()).unwrap();
        let d = standard_flow_derivative(&Tensor::zeros(&[2, 1]), &p).unwrap();
        assert_eq!(d.data(), &[1.0, 0.0]);

        let p = problem(1, 3, 5, 2);
        let w = Tensor::randn(&[5, 2], 1.0, &mut seeded(2));
        let want = num_grad(|w| -p.loss(w).unwrap(), &w);
        assert!(standard_flow_derivative(&w, &p).unwrap().max_abs_diff(&want) < 1e-6);
        let star = min_norm_solution(&p).unwrap();
        assert!(standard_flow_derivative(&star, &p).unwrap().norm() <= 1e-10);
    }

    #[test]
    fn nsl_derivative_examples() {
        let p = problem(3, 4, 3, 2);
        let m = Tensor::randn(&[3, 3], 1.0, &mut seeded(4));
        let (_, dm) = nsl_flow_derivatives(&Tensor::zeros(&[3, 2]), &m, &p).unwrap();
        assert_eq!(dm.norm(), 0.0);

        let one = FlowProblem::new(Tensor::new(vec![1, 3], vec![1.0, -2.0, 0.5]).unwrap(), Tensor::new(vec![1, 2], vec![3.0, 1.0]).unwrap()).unwrap();
        let (dwp, _) = nsl_flow_derivatives(&Tensor::zeros(&[3, 2]), &Tensor::eye(3), &one).unwrap();
        let xyt = one.x().t().unwrap().matmul(one.y()).unwrap();
        assert!(dwp.max_abs_diff(&xyt) < 1e-15);

        let wp = Tensor::randn(&[3, 2], 1.0, &mut seeded(5));
        let (dwp, dm) = nsl_flow_derivatives(&wp, &m, &p).unwrap();
        let lw = |wp: &Tensor| -p.loss(&m.t().unwrap().matmul(wp).unwrap()).unwrap();
        let lm = |m: &Tensor| -p.loss(&m.t().unwrap().matmul(&wp).unwrap()).unwrap();
        assert!(dwp.max_abs_diff(&num_grad(lw, &wp)) < 1e-6);
        assert!(dm.max_abs_diff(&num_grad(lm, &m)) < 1e-6);
    }

    #[test]
    fn composite_identity_and_reduction() {
        let p = problem(6, 4, 3, 2);
        let std0 = standard_flow_derivative(&Tensor::zeros(&[3, 2]), &p).unwrap();
        let c0 = composite_derivative(&Tensor::zeros(&[3, 2]), &Tensor::eye(3), &p).unwrap();
        assert!(c0.max_abs_diff(&std0) < 1e-15);
        let mut rng = seeded(7);
        for _ in 0..20 {
            let wp = Tensor::randn(&[3, 2], 1.0, &mut rng);
            let m = Tensor::randn(&[3, 3], 1.0, &mut rng);
            let (dwp, dm) = nsl_flow_derivatives(&wp, &m, &p).unwrap();
            let assembled = m.t().unwrap().matmul(&dwp).unwrap().add(&dm.t().unwrap().matmul(&wp).unwrap()).unwrap();
            let c = composite_derivative(&wp, &m, &p).unwrap();
            assert!(c.max_abs_diff(&assembled) <= 1e-12 * c.norm().max(1.0));
        }
    }

    #[test]
    fn euler_chain_converges_at_first_order() {
        let p = problem(8, 3, 3, 2);
        let mut rng = seeded(9);
        let wp = Tensor::randn(&[3, 2], 0.5, &mut rng);
        let m = Tensor::eye(3).add(&Tensor::randn(&[3, 3], 0.2, &mut rng)).unwrap();
        let s = FlowState::Nsl { wp: wp.clone(), m: m.clone() };
        let c = composite_derivative(&wp, &m, &p).unwrap();
        let w0 = s.composite().unwrap();
        let err = |dt: f64| {
            let w1 = s.euler_step(&p, dt).unwrap().composite().unwrap();
            w1.sub(&w0).unwrap().scale(1.0 / dt).max_abs_diff(&c)
        };
        let (e1, e2) = (err(1e-3), err(5e-4));
        assert!((e1 / e2 - 2.0).abs() < 0.05, "{e1} {e2}");
    }

    #[test]
    fn scalar_trajectory_matches_closed_form() {
        let p = FlowProblem::new(Tensor::ones(&[1, 1]), Tensor::ones(&[1, 1])).unwrap();
        let dev = |dt: f64| {
            let steps = (1.0 / dt).round() as usize;
            let tr = integrate(FlowState::initial(FlowMode::Standard, &p, 0.0, 0), &p, dt, steps, 0.0).unwrap();
            let w = tr.composites.last().unwrap().data()[0];
            (w - (1.0 - (-1.0f64).exp())).abs()
        };
        let (a, b) = (dev(1e-2), dev(5e-3));
        assert!(a < 1e-2);
        assert!((a / b - 2.0).abs() < 0.05, "{a} {b}");
    }

    #[test]
    fn optimum_is_a_fixed_point_and_flow_finds_min_norm() {
        let p = problem(10, 2, 5, 1);
        let star = min_norm_solution(&p).unwrap();
        let tr = integrate(FlowState::Standard { w: star.clone() }, &p, 1e-3, 10, -1.0).unwrap();
        assert!(tr.composites.iter().all(|w| w.max_abs_diff(&star) < 1e-12));

        let dt = 0.5 * stability_threshold(&p, &FlowState::Standard { w: star.clone() }).unwrap();
        let tr = integrate(FlowState::initial(FlowMode::Standard, &p, 0.0, 0), &p, dt, 100_000, 1e-12).unwrap();
        assert!(tr.final_loss() < 1e-10);
        assert!(tr.composites.last().unwrap().sub(&star).unwrap().norm() < 1e-4);
        let l: Vec<f64> = tr.records.iter().map(|r| r.loss).collect();
        assert!(l.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    }

    #[test]
    fn nsl_flow_is_monotone_below_threshold() {
        let p = problem(11, 3, 4, 2);
        let s = FlowState::initial(FlowMode::Nsl, &p, 1e-3, 1);
        let dt = 0.5 * stability_threshold(&p, &s).unwrap();
        let tr = integrate(s, &p, dt, 2000, 1e-14).unwrap();
        let l: Vec<f64> = tr.records.iter().map(|r| r.loss).collect();
        assert!(l.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        assert!(tr.final_loss() < l[0]);
        assert!(tr.records.iter().all(|r| r.rank <= 2 && r.nuclear_norm >= 0.0));
    }

    #[test]
    fn min_norm_examples_and_errors() {
        let p = FlowProblem::new(Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap(), Tensor::new(vec![1, 1], vec![2.0]).unwrap()).unwrap();
        assert!(min_norm_solution(&p).unwrap().max_abs_diff(&Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap()) < 1e-15);
        let sq = problem(12, 3, 3, 2);
        let w = min_norm_solution(&sq).unwrap();
        assert!(sq.residual(&w).unwrap().norm() < 1e-10);
        let dup = FlowProblem::new(Tensor::new(vec![2, 2], vec![1.0, 2.0, 2.0, 4.0]).unwrap(), Tensor::ones(&[2, 1])).unwrap();
        assert!(matches!(min_norm_solution(&dup), Err(Error::RankDeficient(_))));
    }

    #[test]
    fn divergence_aborts_and_retry_recovers() {
        let p = problem(13, 3, 3, 1);
        let s = FlowState::initial(FlowMode::Standard, &p, 0.0, 0);
        let big = 50.0 * stability_threshold(&p, &s).unwrap();
        assert!(matches!(integrate(s.clone(), &p, big, 1000, 0.0), Err(Error::Divergence { .. })));
        let tr = integrate_with_retry(s, &p, big, 1000, 1e-10, 10).unwrap();
        assert!(tr.dt < big);
        assert!(matches!(integrate(FlowState::initial(FlowMode::Standard, &p, 0.0, 0), &p, 0.0, 1, 0.0), Err(Error::Argument(_))));
    }

    #[test]
    fn csv_layout() {
        let p = problem(14, 2, 3, 1);
        let tr = integrate(FlowState::initial(FlowMode::Nsl, &p, 1e-3, 2), &p, 1e-3, 3, 0.0).unwrap();
        let csv = tr.to_csv();
        assert!(csv.starts_with(Trajectory::CSV_HEADER));
        assert_eq!(csv.lines().count(), 5);
    }
}
