//! Embedded Dormand-Prince 5(4) integrator with dense output.
//!
//! Classic explicit Runge-Kutta pair: seven stages, fifth-order propagation
//! with an embedded fourth-order error estimate, first-same-as-last reuse of
//! the final stage, and a quartic interpolant on every accepted step. Step
//! size is controlled by the usual PI rule on the scaled error norm.
//!
//! The stepper is driven one accepted step at a time so the caller can pull
//! dense samples from each step interval and restart the integration at
//! discrete events (the inertia-reset policy needs both).

use thiserror::Error;

const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];

const A2: [f64; 1] = [0.2];
const A3: [f64; 2] = [3.0 / 40.0, 9.0 / 40.0];
const A4: [f64; 3] = [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0];
const A5: [f64; 4] = [
    19372.0 / 6561.0,
    -25360.0 / 2187.0,
    64448.0 / 6561.0,
    -212.0 / 729.0,
];
const A6: [f64; 5] = [
    9017.0 / 3168.0,
    -355.0 / 33.0,
    46732.0 / 5247.0,
    49.0 / 176.0,
    -5103.0 / 18656.0,
];
/// Row 7 doubles as the fifth-order solution weights (FSAL).
const A7: [f64; 6] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
];

/// Difference between the fifth- and fourth-order weights.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

/// Weights of the fifth dense-output coefficient.
const D: [f64; 7] = [
    -12715105075.0 / 11282082432.0,
    0.0,
    87487479700.0 / 32700410799.0,
    -10690763975.0 / 1880347072.0,
    701980252875.0 / 199316789632.0,
    -1453857185.0 / 822651844.0,
    69997945.0 / 29380423.0,
];

const SAFETY: f64 = 0.9;
const MAX_GROW: f64 = 10.0;
const MAX_SHRINK: f64 = 0.2;
/// PI controller: exponent 1/5 - PI_BETA * 0.75 on the fresh error,
/// PI_BETA on the previous one.
const PI_BETA: f64 = 0.04;
const EXPO1: f64 = 0.2 - PI_BETA * 0.75;

#[derive(Debug, Error)]
pub enum OdeError {
    #[error("step size underflow at t = {t:.6e} (h = {h:.3e})")]
    StepUnderflow { t: f64, h: f64 },
    #[error("exceeded {max_steps} steps at t = {t:.6e}")]
    MaxSteps { t: f64, max_steps: usize },
    #[error("non-finite initial condition or derivative at index {index}")]
    NonFiniteInitial { index: usize },
}

#[derive(Debug, Clone, Copy)]
pub struct Dopri5Options {
    pub rtol: f64,
    pub atol: f64,
    /// Upper bound on the step size; unbounded by default.
    pub h_max: f64,
    /// Initial step; estimated from the problem when `None`.
    pub h_init: Option<f64>,
    /// Budget of accepted plus rejected steps.
    pub max_steps: usize,
}

impl Default for Dopri5Options {
    fn default() -> Self {
        Dopri5Options {
            rtol: 1e-8,
            atol: 1e-10,
            h_max: f64::INFINITY,
            h_init: None,
            max_steps: 10_000_000,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct StepStats {
    pub accepted: usize,
    pub rejected: usize,
    pub rhs_evals: usize,
}

pub struct Dopri5<F: FnMut(f64, &[f64], &mut [f64])> {
    f: F,
    opts: Dopri5Options,
    t: f64,
    y: Vec<f64>,
    /// Stage derivatives; `k[0]` always holds f(t, y) (FSAL).
    k: [Vec<f64>; 7],
    y_stage: Vec<f64>,
    y_next: Vec<f64>,
    /// Start of the last accepted step, for dense output.
    t_old: f64,
    h_old: f64,
    cont: [Vec<f64>; 5],
    h: f64,
    facold: f64,
    just_rejected: bool,
    pub stats: StepStats,
}

impl<F: FnMut(f64, &[f64], &mut [f64])> Dopri5<F> {
    pub fn new(mut f: F, t0: f64, y0: Vec<f64>, opts: Dopri5Options) -> Result<Self, OdeError> {
        let n = y0.len();
        if let Some(index) = y0.iter().position(|v| !v.is_finite()) {
            return Err(OdeError::NonFiniteInitial { index });
        }
        let mut k0 = vec![0.0; n];
        f(t0, &y0, &mut k0);
        if let Some(index) = k0.iter().position(|v| !v.is_finite()) {
            return Err(OdeError::NonFiniteInitial { index });
        }

        let mut stepper = Dopri5 {
            f,
            opts,
            t: t0,
            y: y0,
            k: std::array::from_fn(|_| vec![0.0; n]),
            y_stage: vec![0.0; n],
            y_next: vec![0.0; n],
            t_old: t0,
            h_old: 0.0,
            cont: std::array::from_fn(|_| vec![0.0; n]),
            h: 0.0,
            facold: 1e-4,
            just_rejected: false,
            stats: StepStats::default(),
        };
        stepper.k[0] = k0;
        stepper.stats.rhs_evals = 1;
        stepper.h = match opts.h_init {
            Some(h) => h.min(opts.h_max),
            None => stepper.estimate_initial_step(),
        };
        Ok(stepper)
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    /// Start of the interval covered by [`Self::dense`].
    pub fn t_old(&self) -> f64 {
        self.t_old
    }

    /// Hairer's starting-step heuristic: balance the size of y, the size of
    /// f and a crude second-derivative estimate from one Euler probe.
    fn estimate_initial_step(&mut self) -> f64 {
        let n = self.y.len();
        let sk = |y: &[f64], i: usize| self.opts.atol + self.opts.rtol * y[i].abs();

        let mut dnf = 0.0;
        let mut dny = 0.0;
        for i in 0..n {
            let s = sk(&self.y, i);
            dnf += (self.k[0][i] / s).powi(2);
            dny += (self.y[i] / s).powi(2);
        }
        let mut h: f64 = if dnf <= 1e-10 || dny <= 1e-10 {
            1e-6
        } else {
            (dny / dnf).sqrt() * 0.01
        };
        h = h.min(self.opts.h_max);

        for i in 0..n {
            self.y_stage[i] = self.y[i] + h * self.k[0][i];
        }
        (self.f)(self.t + h, &self.y_stage, &mut self.y_next);
        self.stats.rhs_evals += 1;
        let mut der2 = 0.0;
        for i in 0..n {
            let s = sk(&self.y, i);
            der2 += ((self.y_next[i] - self.k[0][i]) / s).powi(2);
        }
        let der2 = der2.sqrt() / h;
        let der12 = der2.max(dnf.sqrt());
        let h1 = if der12 <= 1e-15 {
            (h * 1e-3).max(1e-6)
        } else {
            (0.01 / der12).powf(0.2)
        };
        (100.0 * h).min(h1).min(self.opts.h_max)
    }

    /// Advance by one accepted step, never beyond `t_limit`. Returns true
    /// once `t_limit` is reached exactly.
    pub fn step(&mut self, t_limit: f64) -> Result<bool, OdeError> {
        let n = self.y.len();
        debug_assert!(t_limit > self.t);

        loop {
            if self.stats.accepted + self.stats.rejected >= self.opts.max_steps {
                return Err(OdeError::MaxSteps {
                    t: self.t,
                    max_steps: self.opts.max_steps,
                });
            }
            if self.h.abs() <= 1e-16 * self.t.abs().max(1.0) {
                return Err(OdeError::StepUnderflow { t: self.t, h: self.h });
            }

            let mut landing = false;
            let mut h = self.h.min(self.opts.h_max);
            // Land exactly on the limit; stretch by a rounding margin so a
            // sliver step is never left over.
            if self.t + 1.01 * h >= t_limit {
                h = t_limit - self.t;
                landing = true;
            }

            let rows: [&[f64]; 6] = [&A2, &A3, &A4, &A5, &A6, &A7];
            for (stage, row) in rows.iter().enumerate() {
                for i in 0..n {
                    let mut acc = 0.0;
                    for (j, &a) in row.iter().enumerate() {
                        acc += a * self.k[j][i];
                    }
                    self.y_stage[i] = self.y[i] + h * acc;
                }
                let c = C[stage + 1];
                let (k_out, below) = self.k.split_at_mut(stage + 1).1.split_first_mut().unwrap();
                let _ = below;
                (self.f)(self.t + c * h, &self.y_stage, k_out);
            }
            self.stats.rhs_evals += 6;
            // Stage 7 was evaluated at the fifth-order solution itself.
            self.y_next.copy_from_slice(&self.y_stage);

            let mut err = 0.0;
            let mut finite = true;
            for i in 0..n {
                let mut e = 0.0;
                for (ej, kj) in E.iter().zip(&self.k) {
                    e += ej * kj[i];
                }
                e *= h;
                let sk = self.opts.atol
                    + self.opts.rtol * self.y[i].abs().max(self.y_next[i].abs());
                err += (e / sk).powi(2);
                finite &= self.y_next[i].is_finite();
            }
            err = (err / n as f64).sqrt();

            if !finite || !err.is_finite() {
                // Blow-up inside the step: retry much smaller.
                self.h = 0.1 * h;
                self.stats.rejected += 1;
                self.just_rejected = true;
                continue;
            }

            let fac11 = err.powf(EXPO1);
            if err <= 1.0 {
                // Accept: build the interpolant, apply FSAL, grow the step.
                self.prepare_dense(h);
                self.t_old = self.t;
                self.h_old = h;
                self.t = if landing { t_limit } else { self.t + h };
                std::mem::swap(&mut self.y, &mut self.y_next);
                let (k1, rest) = self.k.split_first_mut().unwrap();
                k1.copy_from_slice(&rest[5]);

                self.facold = err.max(1e-4);
                let mut fac = fac11 / self.facold.powf(PI_BETA);
                fac = (fac / SAFETY).clamp(1.0 / MAX_GROW, 1.0 / MAX_SHRINK);
                let mut h_new = h / fac;
                if self.just_rejected {
                    h_new = h_new.min(h);
                }
                self.just_rejected = false;
                self.h = h_new;
                self.stats.accepted += 1;
                return Ok(landing);
            }

            self.h = h / (fac11 / SAFETY).min(1.0 / MAX_SHRINK);
            self.stats.rejected += 1;
            self.just_rejected = true;
        }
    }

    fn prepare_dense(&mut self, h: f64) {
        let n = self.y.len();
        for i in 0..n {
            let ydiff = self.y_next[i] - self.y[i];
            let bspl = h * self.k[0][i] - ydiff;
            let mut dsum = 0.0;
            for (dj, kj) in D.iter().zip(&self.k) {
                dsum += dj * kj[i];
            }
            self.cont[0][i] = self.y[i];
            self.cont[1][i] = ydiff;
            self.cont[2][i] = bspl;
            self.cont[3][i] = ydiff - h * self.k[6][i] - bspl;
            self.cont[4][i] = h * dsum;
        }
    }

    /// Fifth-order interpolation on the last accepted step
    /// `[t_old, t]`; `t_query` outside that window is a caller bug.
    pub fn dense(&self, t_query: f64, out: &mut [f64]) {
        debug_assert!(self.h_old > 0.0, "no accepted step yet");
        let s = (t_query - self.t_old) / self.h_old;
        debug_assert!((-1e-9..=1.0 + 1e-9).contains(&s), "query outside step");
        let s1 = 1.0 - s;
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.cont[0][i]
                + s * (self.cont[1][i]
                    + s1 * (self.cont[2][i]
                        + s * (self.cont[3][i] + s1 * self.cont[4][i])));
        }
    }

    /// Restart at `(t, y)` after a state jump. Keeps the tuned step size
    /// but refreshes the FSAL stage, which is stale across the jump.
    pub fn reinit(&mut self, t: f64, y: Vec<f64>) {
        assert_eq!(y.len(), self.y.len());
        self.t = t;
        self.y = y;
        (self.f)(self.t, &self.y, &mut self.k[0]);
        self.stats.rhs_evals += 1;
        self.just_rejected = false;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn opts(rtol: f64, atol: f64) -> Dopri5Options {
        Dopri5Options {
            rtol,
            atol,
            ..Default::default()
        }
    }

    fn integrate_to<F: FnMut(f64, &[f64], &mut [f64])>(
        stepper: &mut Dopri5<F>,
        t_end: f64,
    ) -> Result<(), OdeError> {
        while !stepper.step(t_end)? {}
        Ok(())
    }

    #[test]
    fn exponential_decay_matches_closed_form() {
        let f = |_t: f64, y: &[f64], dy: &mut [f64]| dy[0] = -y[0];
        let mut s = Dopri5::new(f, 0.0, vec![1.0], opts(1e-10, 1e-12)).unwrap();
        integrate_to(&mut s, 2.0).unwrap();
        assert_eq!(s.t(), 2.0);
        assert_relative_eq!(s.y()[0], (-2.0f64).exp(), max_relative = 1e-9);
        assert!(s.stats.rejected <= 3, "smooth problem: {:?}", s.stats);
    }

    #[test]
    fn quartic_quadrature_is_exact_to_rounding() {
        // y' = 5 t^4 has polynomial order within the scheme: the answer is
        // exact up to rounding no matter the step sequence.
        let f = |t: f64, _y: &[f64], dy: &mut [f64]| dy[0] = 5.0 * t.powi(4);
        let mut s = Dopri5::new(f, 0.0, vec![0.0], opts(1e-6, 1e-8)).unwrap();
        integrate_to(&mut s, 1.0).unwrap();
        assert_relative_eq!(s.y()[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn harmonic_oscillator_conserves_energy() {
        let f = |_t: f64, y: &[f64], dy: &mut [f64]| {
            dy[0] = y[1];
            dy[1] = -y[0];
        };
        let mut s = Dopri5::new(f, 0.0, vec![1.0, 0.0], opts(1e-9, 1e-11)).unwrap();
        let t_end = 20.0 * std::f64::consts::PI;
        integrate_to(&mut s, t_end).unwrap();
        let energy = s.y()[0].powi(2) + s.y()[1].powi(2);
        assert_relative_eq!(energy, 1.0, max_relative = 1e-7);
        assert_relative_eq!(s.y()[0], 1.0, epsilon = 1e-6);
    }

    #[test]
    fn dense_output_tracks_the_solution_between_steps() {
        let worst_at = |rtol: f64| {
            let f = |t: f64, _y: &[f64], dy: &mut [f64]| dy[0] = t.cos();
            let mut s = Dopri5::new(f, 0.0, vec![0.0], opts(rtol, rtol * 1e-2)).unwrap();
            let mut out = [0.0];
            let mut worst = 0.0f64;
            while !s.step(10.0).unwrap() {
                let (a, b) = (s.t_old(), s.t());
                for k in 0..=8 {
                    let t = a + (b - a) * k as f64 / 8.0;
                    s.dense(t, &mut out);
                    worst = worst.max((out[0] - t.sin()).abs());
                }
            }
            worst
        };
        // The interpolant carries a larger constant than the endpoint
        // error but must scale down with the tolerance.
        let coarse = worst_at(1e-8);
        let fine = worst_at(1e-11);
        assert!(coarse < 1e-6, "dense-output error {coarse:e}");
        assert!(fine < 1e-9, "dense-output error {fine:e}");
        assert!(fine < coarse * 1e-1);
    }

    #[test]
    fn tolerance_scaling_shows_fifth_order_control() {
        let run = |rtol: f64| {
            let f = |_t: f64, y: &[f64], dy: &mut [f64]| {
                dy[0] = y[1];
                dy[1] = -y[0];
            };
            let mut s = Dopri5::new(f, 0.0, vec![1.0, 0.0], opts(rtol, rtol * 1e-2)).unwrap();
            integrate_to(&mut s, 30.0).unwrap();
            (
                (s.y()[0] - 30.0f64.cos()).abs(),
                s.stats.accepted + s.stats.rejected,
            )
        };
        let (err_loose, steps_loose) = run(1e-5);
        let (err_tight, steps_tight) = run(1e-10);
        assert!(err_tight < err_loose * 1e-2);
        // Fifth order: 1e5 tighter tolerance costs less than 20x the steps
        // (the asymptotic factor is 10).
        assert!(steps_tight < steps_loose * 20);
    }

    #[test]
    fn lands_exactly_on_the_requested_endpoint() {
        let f = |_t: f64, y: &[f64], dy: &mut [f64]| dy[0] = -0.3 * y[0];
        let mut s = Dopri5::new(f, 0.0, vec![2.0], Dopri5Options::default()).unwrap();
        for target in [0.637, 1.0, 4.5] {
            integrate_to(&mut s, target).unwrap();
            assert_eq!(s.t(), target);
        }
    }

    #[test]
    fn step_budget_is_enforced() {
        let f = |_t: f64, y: &[f64], dy: &mut [f64]| dy[0] = -50.0 * y[0];
        let o = Dopri5Options {
            max_steps: 5,
            ..Default::default()
        };
        let mut s = Dopri5::new(f, 0.0, vec![1.0], o).unwrap();
        let err = integrate_to(&mut s, 100.0).unwrap_err();
        assert!(matches!(err, OdeError::MaxSteps { max_steps: 5, .. }));
    }

    #[test]
    fn derivative_blowup_underflows_the_step() {
        // The derivative turns NaN at t >= 0.5; every crossing step is
        // rejected and h collapses.
        let f = |t: f64, _y: &[f64], dy: &mut [f64]| {
            dy[0] = if t < 0.5 { 1.0 } else { f64::NAN };
        };
        let mut s = Dopri5::new(f, 0.0, vec![0.0], Dopri5Options::default()).unwrap();
        let err = integrate_to(&mut s, 1.0).unwrap_err();
        match err {
            OdeError::StepUnderflow { t, .. } => assert_relative_eq!(t, 0.5, epsilon = 1e-3),
            other => panic!("expected underflow, got {other}"),
        }
    }

    #[test]
    fn non_finite_initial_state_is_rejected_up_front() {
        let f = |_t: f64, _y: &[f64], dy: &mut [f64]| dy[0] = 0.0;
        match Dopri5::new(f, 0.0, vec![f64::NAN], Dopri5Options::default()) {
            Err(OdeError::NonFiniteInitial { index: 0 }) => {}
            Err(other) => panic!("unexpected error {other}"),
            Ok(_) => panic!("NaN initial state must be rejected"),
        }
    }

    #[test]
    fn reinit_restarts_from_a_fresh_state() {
        let f = |_t: f64, y: &[f64], dy: &mut [f64]| dy[0] = -y[0];
        let mut s = Dopri5::new(f, 0.0, vec![1.0], opts(1e-10, 1e-12)).unwrap();
        integrate_to(&mut s, 1.0).unwrap();
        s.reinit(1.0, vec![1.0]);
        integrate_to(&mut s, 2.0).unwrap();
        assert_relative_eq!(s.y()[0], (-1.0f64).exp(), max_relative = 1e-9);
    }

    #[test]
    fn fsal_costs_six_evaluations_per_step() {
        let f = |_t: f64, y: &[f64], dy: &mut [f64]| dy[0] = -y[0];
        let mut s = Dopri5::new(f, 0.0, vec![1.0], Dopri5Options::default()).unwrap();
        integrate_to(&mut s, 5.0).unwrap();
        let attempts = s.stats.accepted + s.stats.rejected;
        // 1 seed + 1 h0 probe + 6 per attempted step + reinit refreshes (0).
        assert_eq!(s.stats.rhs_evals, 2 + 6 * attempts);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(16))]
            #[test]
            fn linear_decay_is_accurate_for_any_rate(lambda in 0.05f64..5.0) {
                let f = |_t: f64, y: &[f64], dy: &mut [f64]| dy[0] = -lambda * y[0];
                let mut s = Dopri5::new(f, 0.0, vec![1.0], opts(1e-9, 1e-12)).unwrap();
                integrate_to(&mut s, 3.0).unwrap();
                let exact = (-lambda * 3.0).exp();
                prop_assert!((s.y()[0] - exact).abs() < 1e-7 * exact.max(1e-3));
            }
        }
    }
}
