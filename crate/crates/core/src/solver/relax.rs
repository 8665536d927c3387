//! Mod-RELAX: fit K rank-one harmonic components to an M x N matrix.
//!
//! Components are added one at a time; after each addition all active
//! components are re-estimated by block coordinate descent. A single component
//! update is a coarse 2D-FFT peak search on the residual followed by
//! gradient ascent on `|a_r^H Z a_t|^2` and the closed-form amplitude.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::SolverConfig;
use crate::channel::{angle_from_frequency, spatial_frequency, ChannelParams};

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };
const MAX_HALVINGS: usize = 20;

/// `c(w_r, w_t) = sum_mn Z_mn e^{j w_r m} e^{-j w_t n}` and its partials.
fn matched_filter(z: &DMatrix<Complex64>, wr: f64, wt: f64) -> (Complex64, Complex64, Complex64) {
    let (m_len, n_len) = z.shape();
    let et: Vec<Complex64> = (0..n_len).map(|n| Complex64::from_polar(1.0, -wt * n as f64)).collect();
    let (mut c, mut dc_r, mut dc_t) = (ZERO, ZERO, ZERO);
    for m in 0..m_len {
        let (mut v, mut dv) = (ZERO, ZERO);
        for n in 0..n_len {
            let t = z[(m, n)] * et[n];
            v += t;
            dv += t * n as f64;
        }
        let er = Complex64::from_polar(1.0, wr * m as f64);
        c += er * v;
        dc_r += er * v * m as f64;
        dc_t += er * dv;
    }
    let j = Complex64::new(0.0, 1.0);
    (c, j * dc_r, -j * dc_t)
}

/// `f = |c|^2` and `(df/dw_r, df/dw_t)`.
fn objective_in_frequency(z: &DMatrix<Complex64>, wr: f64, wt: f64) -> (f64, [f64; 2], Complex64) {
    let (c, dr, dt) = matched_filter(z, wr, wt);
    let g = [2.0 * (c.conj() * dr).re, 2.0 * (c.conj() * dt).re];
    (c.norm_sqr(), g, c)
}

/// `f^HR(theta, phi) = |a_r(theta)^H Z a_t(phi)|^2` with its partials in
/// `(theta, phi)`.
pub fn hr_objective_and_grad(theta: f64, phi: f64, zeta: &DMatrix<Complex64>, spacing_ratio: f64) -> (f64, [f64; 2]) {
    let wr = spatial_frequency(theta, spacing_ratio);
    let wt = spatial_frequency(phi, spacing_ratio);
    let (f, g, _) = objective_in_frequency(zeta, wr, wt);
    let k = 2.0 * PI * spacing_ratio;
    (f, [g[0] * k * theta.cos(), g[1] * k * phi.cos()])
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Component {
    wr: f64,
    wt: f64,
    beta: Complex64,
}

impl Component {
    const ZERO: Component = Component { wr: 0.0, wt: 0.0, beta: ZERO };

    /// Adds `sign * beta a_r a_t^H` into `z`.
    fn accumulate(&self, z: &mut DMatrix<Complex64>, sign: f64) {
        let (m_len, n_len) = z.shape();
        let ar: Vec<Complex64> = (0..m_len).map(|m| Complex64::from_polar(1.0, -self.wr * m as f64)).collect();
        for n in 0..n_len {
            let w = self.beta * Complex64::from_polar(sign, self.wt * n as f64);
            for m in 0..m_len {
                z[(m, n)] += ar[m] * w;
            }
        }
    }
}

/// Reusable FFT plans and buffers for one array geometry.
pub struct RelaxSolver {
    num_rx: usize,
    num_tx: usize,
    spacing_ratio: f64,
    cfg: SolverConfig,
    grid_rx: usize,
    grid_tx: usize,
    fft_tx: Arc<dyn Fft<f64>>,
    ifft_rx: Arc<dyn Fft<f64>>,
    rows: Vec<Complex64>,
    cols: Vec<Complex64>,
    scratch: Vec<Complex64>,
}

impl RelaxSolver {
    pub fn new(num_rx: usize, num_tx: usize, spacing_ratio: f64, cfg: &SolverConfig) -> Self {
        let grid_rx = cfg.fft_oversample.max(1) * num_rx;
        let grid_tx = cfg.fft_oversample.max(1) * num_tx;
        let mut planner = FftPlanner::new();
        let fft_tx = planner.plan_fft_forward(grid_tx);
        let ifft_rx = planner.plan_fft_inverse(grid_rx);
        let scratch_len = fft_tx.get_inplace_scratch_len().max(ifft_rx.get_inplace_scratch_len());
        Self {
            num_rx,
            num_tx,
            spacing_ratio,
            cfg: cfg.clone(),
            grid_rx,
            grid_tx,
            fft_tx,
            ifft_rx,
            rows: vec![ZERO; num_rx * grid_tx],
            cols: vec![ZERO; grid_tx * grid_rx],
            scratch: vec![ZERO; scratch_len],
        }
    }

    fn max_frequency(&self) -> f64 {
        2.0 * PI * self.spacing_ratio
    }

    fn bin_frequency(k: usize, len: usize) -> f64 {
        let w = 2.0 * PI * k as f64 / len as f64;
        if w >= PI {
            w - 2.0 * PI
        } else {
            w
        }
    }

    /// Grid maximizer of `|c(w_r, w_t)|^2` over physically visible
    /// frequencies; ties go to the lowest linear index.
    fn coarse_search(&mut self, z: &DMatrix<Complex64>) -> (f64, f64) {
        let (gr, gt) = (self.grid_rx, self.grid_tx);
        for m in 0..self.num_rx {
            let row = &mut self.rows[m * gt..(m + 1) * gt];
            row.fill(ZERO);
            for n in 0..self.num_tx {
                row[n] = z[(m, n)];
            }
        }
        self.fft_tx.process_with_scratch(&mut self.rows, &mut self.scratch);
        self.cols.fill(ZERO);
        for k2 in 0..gt {
            for m in 0..self.num_rx {
                self.cols[k2 * gr + m] = self.rows[m * gt + k2];
            }
        }
        self.ifft_rx.process_with_scratch(&mut self.cols, &mut self.scratch);

        let limit = self.max_frequency() + 1e-12;
        let visible = |w: f64| w.abs() <= limit;
        let mut best = (f64::NEG_INFINITY, usize::MAX, 0.0, 0.0);
        for k2 in 0..gt {
            let wt = Self::bin_frequency(k2, gt);
            if !visible(wt) {
                continue;
            }
            for k1 in 0..gr {
                let wr = Self::bin_frequency(k1, gr);
                if !visible(wr) {
                    continue;
                }
                let v = self.cols[k2 * gr + k1].norm_sqr();
                let lin = k1 * gt + k2;
                if v > best.0 || (v == best.0 && lin < best.1) {
                    best = (v, lin, wr, wt);
                }
            }
        }
        (best.2, best.3)
    }

    /// Keeps a frequency inside the visible region (or the principal period
    /// when the array aliases).
    fn fold(&self, w: f64) -> f64 {
        let limit = self.max_frequency();
        if limit < PI {
            w.clamp(-limit, limit)
        } else {
            (w + PI).rem_euclid(2.0 * PI) - PI
        }
    }

    /// Diagonally preconditioned ascent from `(wr, wt)`; the curvature proxy
    /// is that of an isolated harmonic at its peak.
    fn refine(&self, z: &DMatrix<Complex64>, mut wr: f64, mut wt: f64) -> (f64, f64, Complex64) {
        let cr = (self.num_rx * self.num_rx - 1) as f64 / 6.0;
        let ct = (self.num_tx * self.num_tx - 1) as f64 / 6.0;
        let (mut f, mut g, mut c) = objective_in_frequency(z, wr, wt);
        for _ in 0..self.cfg.ga_max {
            if f <= 0.0 {
                break;
            }
            let dr = if cr > 0.0 { g[0] / (f * cr) } else { 0.0 };
            let dt = if ct > 0.0 { g[1] / (f * ct) } else { 0.0 };
            if dr.abs().max(dt.abs()) < 1e-12 {
                break;
            }
            let mut alpha = 1.0;
            let mut accepted = false;
            for _ in 0..MAX_HALVINGS {
                let (nr, nt) = (self.fold(wr + alpha * dr), self.fold(wt + alpha * dt));
                let (nf, ng, nc) = objective_in_frequency(z, nr, nt);
                if nf > f {
                    (wr, wt, f, g, c) = (nr, nt, nf, ng, nc);
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        (wr, wt, c)
    }

    fn update_component(&mut self, z: &DMatrix<Complex64>) -> Component {
        let (wr, wt) = self.coarse_search(z);
        let (wr, wt, c) = self.refine(z, wr, wt);
        Component { wr, wt, beta: c / (self.num_rx * self.num_tx) as f64 }
    }

    pub fn solve(&mut self, zeta: &DMatrix<Complex64>, k: usize) -> ChannelParams {
        assert_eq!(zeta.shape(), (self.num_rx, self.num_tx), "mod_relax input shape");
        let mut comps: Vec<Component> = Vec::with_capacity(k);
        // residual = zeta - sum of all components
        let mut residual = zeta.clone();
        for _eta in 0..k {
            comps.push(Component::ZERO);
            for _ in 0..self.cfg.relax_bcd_max {
                let before = comps.clone();
                for i in 0..comps.len() {
                    comps[i].accumulate(&mut residual, 1.0);
                    comps[i] = self.update_component(&residual);
                    comps[i].accumulate(&mut residual, -1.0);
                }
                if relative_change(&before, &comps) < self.cfg.relax_bcd_tol {
                    break;
                }
            }
        }
        let d = self.spacing_ratio;
        ChannelParams {
            aoa: comps.iter().map(|c| angle_from_frequency(c.wr, d)).collect(),
            aod: comps.iter().map(|c| angle_from_frequency(c.wt, d)).collect(),
            gains: comps.iter().map(|c| c.beta).collect(),
        }
    }
}

fn relative_change(before: &[Component], after: &[Component]) -> f64 {
    let flat = |c: &Component| [c.wr, c.wt, c.beta.re, c.beta.im];
    let (mut diff, mut norm) = (0.0, 0.0);
    for (b, a) in before.iter().zip(after) {
        for (x, y) in flat(b).iter().zip(flat(a)) {
            diff += (x - y) * (x - y);
            norm += x * x;
        }
    }
    if norm == 0.0 {
        if diff == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (diff / norm).sqrt()
    }
}

/// Fits `k` paths to `zeta` on an array with the given element spacing.
pub fn mod_relax(zeta: &DMatrix<Complex64>, k: usize, spacing_ratio: f64, cfg: &SolverConfig) -> ChannelParams {
    RelaxSolver::new(zeta.nrows(), zeta.ncols(), spacing_ratio, cfg).solve(zeta, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{sample_channel_params, ArrayConfig, ChannelParams, DEFAULT_AMP_RANGE, DEFAULT_ANGLE_RANGE};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn single(theta: f64, phi: f64, beta: Complex64, m: usize, n: usize) -> DMatrix<Complex64> {
        ChannelParams::new(vec![theta], vec![phi], vec![beta]).unwrap().synthesize(m, n, 0.5).0
    }

    #[test]
    fn matched_filter_partials_match_finite_differences() {
        let z = single(0.2, -0.4, Complex64::new(0.3, 0.8), 6, 9);
        let (wr, wt, h) = (0.7, -1.1, 1e-6);
        let (_, dr, dt) = matched_filter(&z, wr, wt);
        let fd_r = (matched_filter(&z, wr + h, wt).0 - matched_filter(&z, wr - h, wt).0) / (2.0 * h);
        let fd_t = (matched_filter(&z, wr, wt + h).0 - matched_filter(&z, wr, wt - h).0) / (2.0 * h);
        assert!((dr - fd_r).norm() < 1e-6 * dr.norm().max(1.0));
        assert!((dt - fd_t).norm() < 1e-6 * dt.norm().max(1.0));
    }

    #[test]
    fn hr_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = ArrayConfig::new(8, 12, 3);
        let z = sample_channel_params(&mut rng, &cfg, DEFAULT_AMP_RANGE, DEFAULT_ANGLE_RANGE)
            .unwrap()
            .synthesize(8, 12, 0.5)
            .0;
        let h = 1e-6;
        let mut checked = 0;
        while checked < 100 {
            let th = rng.gen_range(-1.4..1.4);
            let ph = rng.gen_range(-1.4..1.4);
            let (_, g) = hr_objective_and_grad(th, ph, &z, 0.5);
            let fd = [
                (hr_objective_and_grad(th + h, ph, &z, 0.5).0 - hr_objective_and_grad(th - h, ph, &z, 0.5).0) / (2.0 * h),
                (hr_objective_and_grad(th, ph + h, &z, 0.5).0 - hr_objective_and_grad(th, ph - h, &z, 0.5).0) / (2.0 * h),
            ];
            let scale = g[0].abs().max(g[1].abs());
            if scale < 1e-3 {
                // near-stationary points make the relative error meaningless
                continue;
            }
            for i in 0..2 {
                assert!((g[i] - fd[i]).abs() <= 1e-5 * scale, "{th} {ph}: {g:?} vs {fd:?}");
            }
            checked += 1;
        }
    }

    #[test]
    fn hr_objective_at_truth_is_matched_filter_peak() {
        let beta = Complex64::new(0.6, -0.3);
        let (m, n) = (8, 16);
        let z = single(0.3, -0.5, beta, m, n);
        let (f, g) = hr_objective_and_grad(0.3, -0.5, &z, 0.5);
        let peak = ((m * n) as f64).powi(2) * beta.norm_sqr();
        assert!((f - peak).abs() < 1e-9 * peak);
        assert!(g[0].abs() < 1e-6 * peak && g[1].abs() < 1e-6 * peak);
    }

    #[test]
    fn hr_objective_ignores_global_phase() {
        let z = single(0.1, 0.9, Complex64::new(1.0, 0.5), 5, 7);
        let zr = z.map(|c| c * Complex64::from_polar(1.0, 1.234));
        let a = hr_objective_and_grad(-0.2, 0.4, &z, 0.5);
        let b = hr_objective_and_grad(-0.2, 0.4, &zr, 0.5);
        assert!((a.0 - b.0).abs() < 1e-10 * a.0);
    }

    #[test]
    fn recovers_single_noiseless_path() {
        let z = single(0.3, -0.5, Complex64::new(1.0, 0.0), 16, 32);
        let p = mod_relax(&z, 1, 0.5, &SolverConfig::default());
        assert!((p.aoa[0] - 0.3).abs() < 1e-3, "{:?}", p.aoa);
        assert!((p.aod[0] + 0.5).abs() < 1e-3, "{:?}", p.aod);
        assert!((p.gains[0] - Complex64::new(1.0, 0.0)).norm() < 1e-3);
    }

    #[test]
    fn zero_input_gives_zero_amplitudes() {
        let p = mod_relax(&DMatrix::zeros(4, 6), 3, 0.5, &SolverConfig::default());
        assert_eq!(p.num_paths(), 3);
        assert!(p.gains.iter().all(|b| b.norm() == 0.0));
    }

    /// Brute-force optimal assignment, fine for K <= 6.
    fn best_matching(k: usize, cost: impl Fn(usize, usize) -> f64) -> Vec<usize> {
        fn rec(i: usize, k: usize, used: &mut Vec<bool>, cur: &mut Vec<usize>, best: &mut (f64, Vec<usize>), acc: f64, cost: &dyn Fn(usize, usize) -> f64) {
            if acc >= best.0 {
                return;
            }
            if i == k {
                *best = (acc, cur.clone());
                return;
            }
            for j in 0..k {
                if !used[j] {
                    used[j] = true;
                    cur.push(j);
                    rec(i + 1, k, used, cur, best, acc + cost(i, j), cost);
                    cur.pop();
                    used[j] = false;
                }
            }
        }
        let mut best = (f64::INFINITY, vec![]);
        rec(0, k, &mut vec![false; k], &mut vec![], &mut best, 0.0, &cost);
        best.1
    }

    fn well_separated(rng: &mut ChaCha8Rng, k: usize, m: usize, n: usize) -> ChannelParams {
        let gap = 4.0 * PI / m.min(n) as f64;
        loop {
            let wr: Vec<f64> = (0..k).map(|_| rng.gen_range(-2.8..2.8)).collect();
            let wt: Vec<f64> = (0..k).map(|_| rng.gen_range(-2.8..2.8)).collect();
            let ok = (0..k).all(|i| (i + 1..k).all(|j| (wr[i] - wr[j]).abs() >= gap && (wt[i] - wt[j]).abs() >= gap));
            if ok {
                let gains = (0..k).map(|_| Complex64::from_polar(rng.gen_range(0.5..1.0), rng.gen_range(-PI..PI))).collect();
                return ChannelParams::new(
                    wr.iter().map(|w| angle_from_frequency(*w, 0.5)).collect(),
                    wt.iter().map(|w| angle_from_frequency(*w, 0.5)).collect(),
                    gains,
                )
                .unwrap();
            }
        }
    }

    #[test]
    fn recovers_separated_paths_at_40_db() {
        let (m, n, k) = (16, 32, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..5 {
            let truth = well_separated(&mut rng, k, m, n);
            let clean = truth.synthesize(m, n, 0.5).0;
            let power = clean.iter().map(|c| c.norm_sqr()).sum::<f64>() / (m * n) as f64;
            let sigma = (power / 1e4).sqrt() * std::f64::consts::FRAC_1_SQRT_2;
            let z = clean.map(|c| c + Complex64::new(sigma * rng.sample::<f64, _>(StandardNormal), sigma * rng.sample::<f64, _>(StandardNormal)));
            let est = mod_relax(&z, k, 0.5, &SolverConfig::default());
            let cost = |i: usize, j: usize| (truth.aoa[i] - est.aoa[j]).powi(2) + (truth.aod[i] - est.aod[j]).powi(2);
            let assign = best_matching(k, cost);
            for (i, &j) in assign.iter().enumerate() {
                assert!((truth.aoa[i] - est.aoa[j]).abs() < 1e-2, "{truth:?} {est:?}");
                assert!((truth.aod[i] - est.aod[j]).abs() < 1e-2, "{truth:?} {est:?}");
            }
        }
    }

    #[test]
    fn coarse_search_respects_visible_region() {
        let cfg = SolverConfig::default();
        // spacing 0.25 restricts |w| <= pi/2
        let z = ChannelParams::new(vec![1.2], vec![-1.3], vec![Complex64::new(1.0, 0.0)]).unwrap().synthesize(6, 6, 0.25).0;
        let mut s = RelaxSolver::new(6, 6, 0.25, &cfg);
        let (wr, wt) = s.coarse_search(&z);
        assert!(wr.abs() <= PI / 2.0 + 1e-12 && wt.abs() <= PI / 2.0 + 1e-12);
        let p = s.solve(&z, 1);
        assert!((p.aoa[0] - 1.2).abs() < 1e-3 && (p.aod[0] + 1.3).abs() < 1e-3, "{p:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn output_is_permutation_consistent_and_reconstructs_rank_one(
            theta in -1.4f64..1.4, phi in -1.4f64..1.4, amp in 0.1f64..2.0, phase in -PI..PI
        ) {
            let beta = Complex64::from_polar(amp, phase);
            let z = single(theta, phi, beta, 8, 8);
            let p = mod_relax(&z, 1, 0.5, &SolverConfig::default());
            let rec = p.synthesize(8, 8, 0.5).0;
            let err: f64 = rec.iter().zip(z.iter()).map(|(a, b)| (a - b).norm_sqr()).sum();
            let tot: f64 = z.iter().map(|c| c.norm_sqr()).sum();
            prop_assert!(err / tot < 1e-6, "nmse {}", err / tot);
        }
    }
}
