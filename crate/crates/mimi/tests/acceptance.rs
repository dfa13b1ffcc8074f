//! End-to-end acceptance checks, one line per criterion.
//!
//! Runs as a plain binary (`cargo test --test acceptance`). A criterion fails
//! when its check fails or it overruns its time budget. Failures are reported
//! and summarized; the process exits non-zero on failure only when
//! `MIMI_ACCEPTANCE_STRICT=1` is set. Pass criterion numbers as arguments to
//! run a subset.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use mimi::experiments::{
    median_where, run_estimation_study, run_imputation_study, run_rate_study, write_study,
    CvSettings, EstimationStudy, ImputationStudy, Method, RateStudy,
};
use mimi::io::{read_csv, write_csv, Schema};
use mimi_core::bcgd::Blocks;
use mimi_core::expfam::{gradient, quasi_loglik_neg};
use mimi_core::linalg::{self, SvdConfig};
use mimi_core::selection::anchors;
use mimi_core::simulate::{simulate, ColumnLayout, SimDesign};
use mimi_core::subsolvers::{
    solve_weighted_lasso, solve_weighted_nuclear, soft_threshold_singular_values,
    WeightedLassoProblem, WeightedNuclearProblem,
};
use mimi_core::{fit, objective, ColumnType, Dictionary, Link, Matrix, MixedDataFrame, SolverConfig, Vector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

const DESCENT_SLACK: f64 = 1e-10;
const REFERENCE_REL_TOL: f64 = 1e-5;
const FD_STEP: f64 = 1e-6;
const FD_REL_TOL: f64 = 1e-5;
const LASSO_KKT_TOL: f64 = 1e-8;
const LASSO_GRID_GAP: f64 = 1e-5;
const EM_SVT_TOL: f64 = 1e-10;
const UNPENALIZED_TOL: f64 = 1e-4;
const ANCHOR_MARGIN: f64 = 1.01;
const ZERO_TOL: f64 = 1e-8;
const L_SLOPE: (f64, f64) = (0.7, 1.3);
const ALPHA_SLOPE: (f64, f64) = (-0.3, 0.3);
const P_RATIO: (f64, f64) = (1.4, 2.8);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

struct Instance {
    data: MixedDataFrame,
    links: Vec<Link>,
    dict: Dictionary,
}

fn column_type(link: &Link) -> ColumnType {
    match link {
        Link::Gaussian { .. } => ColumnType::Numeric,
        Link::Bernoulli => ColumnType::Binary,
        Link::Poisson { .. } => ColumnType::Count,
    }
}

fn random_link(rng: &mut ChaCha8Rng) -> Link {
    match rng.random_range(0..3) {
        0 => Link::gaussian(rng.random_range(0.5..2.0)),
        1 => Link::Bernoulli,
        _ => Link::poisson(if rng.random_bool(0.5) { 0.5 } else { 1.0 }),
    }
}

fn random_dictionary(rng: &mut ChaCha8Rng, m1: usize, m2: usize) -> Dictionary {
    match rng.random_range(0..3) {
        0 => {
            let h = rng.random_range(1..=m1.min(4));
            let mut assignment: Vec<usize> = (0..m1).map(|i| i % h).collect();
            assignment.shuffle(rng);
            Dictionary::group_effects(m2, assignment).unwrap()
        }
        1 => Dictionary::row_column(m1, m2).unwrap(),
        _ => {
            let mut cells: Vec<(usize, usize)> =
                (0..m1).flat_map(|i| (0..m2).map(move |j| (i, j))).collect();
            cells.shuffle(rng);
            cells.truncate(rng.random_range(1..=8.min(cells.len())));
            Dictionary::corruptions(m1, m2, cells).unwrap()
        }
    }
}

fn sample(link: &Link, x: f64, rng: &mut ChaCha8Rng) -> f64 {
    match *link {
        Link::Gaussian { sigma2 } => sigma2 * x + sigma2.sqrt() * Normal::new(0.0, 1.0).unwrap().sample(rng),
        Link::Bernoulli => f64::from(u8::from(rng.random::<f64>() < link.mean(x))),
        Link::Poisson { .. } => Poisson::new(link.mean(x).max(1e-9)).unwrap().sample(rng),
    }
}

/// Frame drawn from the given links at natural parameters `x0`, each cell
/// observed with probability `p_obs` (at least one cell is kept).
fn draw_frame(rng: &mut ChaCha8Rng, links: &[Link], x0: &Matrix, p_obs: f64) -> MixedDataFrame {
    let (m1, m2) = x0.shape();
    let values = Matrix::from_fn(m1, m2, |i, j| sample(&links[j], x0[(i, j)], rng));
    let mut mask: Vec<bool> = (0..m1 * m2).map(|_| rng.random::<f64>() < p_obs).collect();
    if !mask.iter().any(|&m| m) {
        mask[0] = true;
    }
    let names = (0..m2).map(|j| format!("c{j}")).collect();
    MixedDataFrame::new(names, links.iter().map(column_type).collect(), values, mask).unwrap()
}

fn random_instance(rng: &mut ChaCha8Rng, max_m1: usize, max_m2: usize) -> Instance {
    let m1 = rng.random_range(2..=max_m1);
    let m2 = rng.random_range(2..=max_m2);
    let links: Vec<Link> = (0..m2).map(|_| random_link(rng)).collect();
    let dict = random_dictionary(rng, m1, m2);
    let normal = Normal::new(0.0, 0.7).unwrap();
    let x0 = Matrix::from_fn(m1, m2, |_, _| normal.sample(rng));
    let p_obs = rng.random_range(0.3..=1.0);
    let data = draw_frame(rng, &links, &x0, p_obs);
    Instance { data, links, dict }
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    (rng.random_range(lo.ln()..hi.ln())).exp()
}

fn descent() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = f64::NEG_INFINITY;
    let mut failures = Vec::new();
    let mut iterations = 0;
    for k in 0..200 {
        let inst = random_instance(&mut rng, 40, 20);
        let a = anchors(&inst.data, &inst.links, &inst.dict).unwrap();
        let l1 = log_uniform(&mut rng, 0.05, 1.2) * a.lambda1_max;
        let l2 = log_uniform(&mut rng, 0.05, 1.2) * a.lambda2_max;
        match fit(&inst.data, &inst.links, &inst.dict, &SolverConfig::with_lambdas(l1, l2)) {
            Ok(model) => {
                iterations += model.n_iter;
                for w in model.objective_trace.windows(2) {
                    let inc = w[1] - w[0];
                    worst = worst.max(inc);
                    if !(inc <= DESCENT_SLACK) {
                        failures.push(format!("instance {k}: +{inc:.3e}"));
                    }
                }
            }
            Err(e) => failures.push(format!("instance {k}: {e}")),
        }
    }
    let detail = format!(
        "200 fits, {iterations} iterations, largest change {worst:+.3e} (allowed {DESCENT_SLACK:e}){}",
        list(&failures)
    );
    outcome(failures.is_empty(), detail)
}

fn list(items: &[String]) -> String {
    if items.is_empty() {
        String::new()
    } else {
        let shown: Vec<&str> = items.iter().take(5).map(String::as_str).collect();
        format!("; {} violations: {}", items.len(), shown.join(", "))
    }
}

/// Accelerated proximal gradient on the joint `(alpha, L)` problem with
/// adaptive restart.
fn proximal_gradient_reference(inst: &Instance, l1: f64, l2: f64, step: f64, iters: usize) -> f64 {
    let (m1, m2) = inst.data.shape();
    let n = inst.dict.n_atoms();
    let f = |alpha: &Vector, l: &Matrix| {
        objective(alpha, l, &inst.data, &inst.links, &inst.dict, l1, l2).unwrap()
    };
    let (mut alpha, mut l) = (Vector::zeros(n), Matrix::zeros(m1, m2));
    let (mut ya, mut yl) = (alpha.clone(), l.clone());
    let mut t = 1.0f64;
    let mut best = f(&alpha, &l);
    let mut current = best;
    for _ in 0..iters {
        let mut x = yl.clone();
        inst.dict.apply_add(&ya, 1.0, &mut x).unwrap();
        let g = gradient(&x, &inst.data, &inst.links).unwrap();
        let ga = inst.dict.adjoint(&g).unwrap();
        let za = (&ya - ga * step).map(|v| v.signum() * (v.abs() - step * l2).max(0.0));
        let zl = linalg::soft_threshold(&(&yl - g * step), step * l1, &SvdConfig::default())
            .unwrap()
            .matrix;
        let next = f(&za, &zl);
        if next > current {
            // restart momentum from the last iterate
            ya = alpha.clone();
            yl = l.clone();
            t = 1.0;
            continue;
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let w = (t - 1.0) / t_next;
        ya = &za + (&za - &alpha) * w;
        yl = &zl + (&zl - &l) * w;
        alpha = za;
        l = zl;
        t = t_next;
        current = next;
        best = best.min(next);
    }
    best
}

fn reference_agreement() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (m1, m2, h) = (8, 6, 2);
    let mut worst: f64 = 0.0;
    let mut failures = Vec::new();
    for k in 0..25 {
        let sigma2 = rng.random_range(0.5..2.0);
        let links = vec![Link::gaussian(sigma2); m2];
        let dict = Dictionary::equal_groups(m1, m2, h).unwrap();
        let normal = Normal::new(0.0, 1.0).unwrap();
        let u = Vector::from_fn(m1, |_, _| normal.sample(&mut rng));
        let v = Vector::from_fn(m2, |_, _| normal.sample(&mut rng));
        let alpha0 = Vector::from_fn(dict.n_atoms(), |_, _| {
            if rng.random_bool(0.3) { normal.sample(&mut rng) } else { 0.0 }
        });
        let x0 = dict.apply(&alpha0).unwrap() + &u * v.transpose() * 0.5;
        let data = draw_frame(&mut rng, &links, &x0, 0.8);
        let inst = Instance { data, links, dict };
        let a = anchors(&inst.data, &inst.links, &inst.dict).unwrap();
        let l1 = rng.random_range(0.1..0.6) * a.lambda1_max;
        let l2 = rng.random_range(0.1..0.6) * a.lambda2_max;
        let config = SolverConfig {
            eps_f: 1e-13,
            max_iter: 20_000,
            lasso_tol: 1e-12,
            nuclear_tol: 1e-12,
            nuclear_max_iter: 1000,
            ..SolverConfig::with_lambdas(l1, l2)
        };
        let model = fit(&inst.data, &inst.links, &inst.dict, &config).unwrap();
        // ||f_U||_op^2 is the largest group size for disjoint group atoms
        let step = 1.0 / (sigma2 * ((m1 / h) as f64 + 1.0));
        let reference = proximal_gradient_reference(&inst, l1, l2, step, 20_000);
        let rel = (model.objective() - reference).abs() / reference.abs();
        worst = worst.max(rel);
        if !(rel <= REFERENCE_REL_TOL) {
            failures.push(format!("instance {k}: {rel:.2e}"));
        }
    }
    outcome(
        failures.is_empty(),
        format!("25 instances, worst relative gap {worst:.2e} (allowed {REFERENCE_REL_TOL:e}){}", list(&failures)),
    )
}

fn gradient_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst: f64 = 0.0;
    let mut cells = 0usize;
    for _ in 0..50 {
        let inst = random_instance(&mut rng, 12, 8);
        let (m1, m2) = inst.data.shape();
        let x = Matrix::from_fn(m1, m2, |_, _| rng.random_range(-1.5..1.5));
        let g = gradient(&x, &inst.data, &inst.links).unwrap();
        for j in 0..m2 {
            for i in 0..m1 {
                let mut xp = x.clone();
                xp[(i, j)] += FD_STEP;
                let mut xm = x.clone();
                xm[(i, j)] -= FD_STEP;
                let fp = quasi_loglik_neg(&xp, &inst.data, &inst.links).unwrap();
                let fm = quasi_loglik_neg(&xm, &inst.data, &inst.links).unwrap();
                let fd = (fp - fm) / (2.0 * FD_STEP);
                let rel = (g[(i, j)] - fd).abs() / g[(i, j)].abs().max(1.0);
                worst = worst.max(rel);
                cells += 1;
            }
        }
    }
    outcome(
        worst <= FD_REL_TOL,
        format!("{cells} cells on 50 instances, max |g - fd| / max(|g|, 1) = {worst:.2e} (allowed {FD_REL_TOL:e})"),
    )
}

/// Weighted-Lasso objective over two dense atoms, expanded into its
/// quadratic coefficients so a fine grid stays cheap.
struct TwoAtomObjective {
    quad: [f64; 3],
    lin: [f64; 2],
    constant: f64,
    ridge: f64,
    anchor: [f64; 2],
    lambda: f64,
}

impl TwoAtomObjective {
    fn new(u: [&Matrix; 2], w: &Matrix, z: &Matrix, ridge: f64, anchor: &Vector, lambda: f64) -> Self {
        let dot = |a: &Matrix, b: &Matrix| -> f64 { w.iter().zip(a.iter().zip(b.iter())).map(|(w, (a, b))| w * a * b).sum() };
        Self {
            quad: [dot(u[0], u[0]), dot(u[0], u[1]), dot(u[1], u[1])],
            lin: [dot(z, u[0]), dot(z, u[1])],
            constant: dot(z, z),
            ridge,
            anchor: [anchor[0], anchor[1]],
            lambda,
        }
    }

    fn eval(&self, a0: f64, a1: f64) -> f64 {
        let [q00, q01, q11] = self.quad;
        self.constant - 2.0 * (a0 * self.lin[0] + a1 * self.lin[1])
            + a0 * a0 * q00
            + 2.0 * a0 * a1 * q01
            + a1 * a1 * q11
            + self.ridge * ((a0 - self.anchor[0]).powi(2) + (a1 - self.anchor[1]).powi(2))
            + self.lambda * (a0.abs() + a1.abs())
    }

    /// Minimum over `[-3, 3]^2` at spacing `1e-3`.
    fn grid_minimum(&self) -> f64 {
        let mut best = f64::INFINITY;
        for p in 0..=6000 {
            let a0 = -3.0 + p as f64 * 1e-3;
            for q in 0..=6000 {
                best = best.min(self.eval(a0, -3.0 + q as f64 * 1e-3));
            }
        }
        best
    }
}

fn subproblems() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let (m1, m2) = (4, 3);

    let (mut kkt_worst, mut gap_worst): (f64, f64) = (0.0, 0.0);
    let mut solved = 0;
    while solved < 10 {
        let mut atoms: Vec<Vec<(usize, usize, f64)>> = vec![Vec::new(), Vec::new()];
        for atom in &mut atoms {
            for i in 0..m1 {
                for j in 0..m2 {
                    if rng.random_bool(0.6) {
                        atom.push((i, j, rng.random_range(-1.0..1.0)));
                    }
                }
            }
            if atom.is_empty() {
                atom.push((0, 0, 1.0));
            }
        }
        let dict = Dictionary::custom(m1, m2, atoms).unwrap();
        let w = Matrix::from_fn(m1, m2, |_, _| rng.random_range(0.0..1.0));
        let z = Matrix::from_fn(m1, m2, |_, _| normal.sample(&mut rng));
        let anchor = Vector::from_fn(2, |_, _| rng.random_range(-0.5..0.5));
        let (ridge, lambda) = (rng.random_range(0.05..0.5), rng.random_range(0.0..1.0));
        let prob = WeightedLassoProblem::new(&dict, &w, &z, ridge, &anchor, lambda).unwrap();
        let alpha = solve_weighted_lasso(&prob, 1e-12, 100_000).unwrap();
        if alpha.amax() > 2.9 {
            // the grid box would not contain the minimizer
            continue;
        }
        solved += 1;
        kkt_worst = kkt_worst.max(prob.kkt_residual(&alpha).unwrap());
        let (u0, u1) = (dict.dense_atom(0), dict.dense_atom(1));
        let oracle = TwoAtomObjective::new([&u0, &u1], &w, &z, ridge, &anchor, lambda);
        let gap = (oracle.eval(alpha[0], alpha[1]) - oracle.grid_minimum()).abs();
        gap_worst = gap_worst.max(gap);
    }

    let mut em_worst: f64 = 0.0;
    for _ in 0..20 {
        let (r, c) = (rng.random_range(2..9), rng.random_range(2..9));
        let w = Matrix::from_element(r, c, rng.random_range(0.2..3.0));
        let z = Matrix::from_fn(r, c, |_, _| normal.sample(&mut rng));
        let lambda = rng.random_range(0.0..3.0);
        let prob = WeightedNuclearProblem { weights: &w, targets: &z, lambda };
        let em = solve_weighted_nuclear(&prob, 1e-12, 1000).unwrap();
        let svt = soft_threshold_singular_values(&z, lambda / (2.0 * w[(0, 0)])).unwrap();
        em_worst = em_worst.max((em - svt).amax());
    }

    let mut lip_worst: f64 = 0.0;
    for _ in 0..100 {
        let (r, c) = (rng.random_range(1..9), rng.random_range(1..9));
        let a = Matrix::from_fn(r, c, |_, _| normal.sample(&mut rng));
        let b = &a + Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0) * 10f64.powi(rng.random_range(-3..1)));
        let lambda = rng.random_range(0.0..2.0);
        let sa = soft_threshold_singular_values(&a, lambda).unwrap();
        let sb = soft_threshold_singular_values(&b, lambda).unwrap();
        lip_worst = lip_worst.max((sa - sb).norm() / (&a - &b).norm());
    }

    let pass = kkt_worst <= LASSO_KKT_TOL
        && gap_worst <= LASSO_GRID_GAP
        && em_worst <= EM_SVT_TOL
        && lip_worst <= 1.0 + 1e-9;
    outcome(
        pass,
        format!(
            "lasso kkt {kkt_worst:.1e} (<= {LASSO_KKT_TOL:e}), grid gap {gap_worst:.1e} (<= {LASSO_GRID_GAP:e}); \
             em vs svt {em_worst:.1e} (<= {EM_SVT_TOL:e}); svt lipschitz ratio {lip_worst:.6} (<= 1)"
        ),
    )
}

fn unpenalized() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let counts = Poisson::new(3.0).unwrap();
    let (m1, m2) = (10, 6);
    let (mut gauss_worst, mut pois_worst): (f64, f64) = (0.0, 0.0);
    let mut not_converged = 0;
    for _ in 0..5 {
        let sigma2: Vec<f64> = (0..m2).map(|_| rng.random_range(0.5..2.0)).collect();
        let links: Vec<Link> = (0..m2)
            .map(|j| if j % 2 == 0 { Link::gaussian(sigma2[j]) } else { Link::poisson(1.0) })
            .collect();
        let values = Matrix::from_fn(m1, m2, |_, j| {
            if j % 2 == 0 { 2.0 * normal.sample(&mut rng) } else { 1.0 + counts.sample(&mut rng) }
        });
        let data = MixedDataFrame::fully_observed(links.iter().map(column_type).collect(), values.clone()).unwrap();
        let dict = Dictionary::equal_groups(m1, m2, 2).unwrap();
        let config = SolverConfig {
            eps_f: 1e-15,
            max_iter: 5000,
            nuclear_tol: 1e-12,
            nuclear_max_iter: 500,
            ..SolverConfig::with_lambdas(0.0, 0.0)
        };
        let model = fit(&data, &links, &dict, &config).unwrap();
        not_converged += usize::from(!model.converged);
        for j in 0..m2 {
            for i in 0..m1 {
                let got = model.x_hat[(i, j)];
                match links[j] {
                    Link::Gaussian { sigma2 } => {
                        gauss_worst = gauss_worst.max((got - values[(i, j)] / sigma2).abs())
                    }
                    _ => pois_worst = pois_worst.max((got - values[(i, j)].ln()).abs()),
                }
            }
        }
    }
    outcome(
        gauss_worst <= UNPENALIZED_TOL && pois_worst <= UNPENALIZED_TOL,
        format!(
            "5 mixed fits ({not_converged} hit the iteration cap): max |x - y/sigma2| {gauss_worst:.1e}, \
             max |x - log y| {pois_worst:.1e} (allowed {UNPENALIZED_TOL:e})"
        ),
    )
}

fn anchor_zeros() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let (mut l_worst, mut a_worst): (f64, f64) = (0.0, 0.0);
    for _ in 0..20 {
        let inst = random_instance(&mut rng, 20, 10);
        let a = anchors(&inst.data, &inst.links, &inst.dict).unwrap();
        let l_only = SolverConfig {
            blocks: Blocks::LOnly,
            ..SolverConfig::with_lambdas(ANCHOR_MARGIN * a.lambda1_max, 0.0)
        };
        let model = fit(&inst.data, &inst.links, &inst.dict, &l_only).unwrap();
        l_worst = l_worst.max(model.l_hat.amax());
        let alpha_only = SolverConfig {
            blocks: Blocks::AlphaOnly,
            ..SolverConfig::with_lambdas(0.0, ANCHOR_MARGIN * a.lambda2_max)
        };
        let model = fit(&inst.data, &inst.links, &inst.dict, &alpha_only).unwrap();
        a_worst = a_worst.max(model.alpha_hat.amax());
    }
    outcome(
        l_worst == 0.0 && a_worst <= ZERO_TOL,
        format!("20 instances at {ANCHOR_MARGIN} x anchor: max |L| {l_worst:.1e} (must be 0), max |alpha| {a_worst:.1e} (<= {ZERO_TOL:e})"),
    )
}

fn estimation_ordering() -> Outcome {
    let study = EstimationStudy { s_list: vec![2], r_list: vec![2], n_reps: 20, ..EstimationStudy::default() };
    let out = run_estimation_study(&study).unwrap();
    let mimi = median_where(&out.rows, "err_alpha", |r| r.method == Method::Mimi);
    let base = median_where(&out.rows, "err_alpha", |r| r.method == Method::GroupMeanSvt);
    outcome(
        mimi < base,
        format!("300x30, s=2, r=2, 20 seeds: median err_alpha {mimi:.4} (mimi) vs {base:.4} (group-mean+svt)"),
    )
}

fn imputation_ordering() -> Outcome {
    let study = ImputationStudy { n_reps: 20, ..ImputationStudy::default() };
    let out = run_imputation_study(&study).unwrap();
    let median_of = |metric: &str, method: Method, rho: f64, missing: f64| {
        median_where(&out.rows, metric, |r| r.method == method && r.rho == rho && r.missing == missing)
    };
    let med = |method: Method, rho: f64, missing: f64| median_of("mse", method, rho, missing);
    // informational only: the same trend on the masked-cell Frobenius norm
    let methods = [Method::Mimi, Method::ColumnMean, Method::GroupMeanSvt];
    let frobenius_drops = study
        .rhos
        .iter()
        .flat_map(|&rho| methods.iter().map(move |&m| (rho, m)))
        .flat_map(|(rho, m)| study.missing.windows(2).map(move |w| (rho, m, w[0], w[1])))
        .filter(|&(rho, m, lo, hi)| median_of("frobenius", m, rho, hi) < median_of("frobenius", m, rho, lo))
        .count();
    let mut problems = Vec::new();
    for &rho in &study.rhos {
        for &miss in &study.missing {
            let (a, b) = (med(Method::Mimi, rho, miss), med(Method::ColumnMean, rho, miss));
            if !(a < b) {
                problems.push(format!("rho {rho} missing {miss}: mimi {a:.4} >= column-mean {b:.4}"));
            }
        }
        for method in methods {
            for w in study.missing.windows(2) {
                let (lo, hi) = (med(method, rho, w[0]), med(method, rho, w[1]));
                if !(hi >= lo) {
                    problems.push(format!(
                        "{} rho {rho}: {lo:.4} at {} > {hi:.4} at {}",
                        method.as_str(),
                        w[0],
                        w[1]
                    ));
                }
            }
        }
    }
    let cells: Vec<String> = study
        .rhos
        .iter()
        .flat_map(|&rho| study.missing.iter().map(move |&m| (rho, m)))
        .map(|(rho, m)| format!("{:.3}/{:.3}", med(Method::Mimi, rho, m), med(Method::ColumnMean, rho, m)))
        .collect();
    outcome(
        problems.is_empty(),
        format!(
            "median mse mimi/column-mean by (rho, missing): {}{}; frobenius-norm decreases: {frobenius_drops}",
            cells.join(" "),
            list(&problems)
        ),
    )
}

fn rates() -> Outcome {
    let out = run_rate_study(&RateStudy { n_reps: 20, ..RateStudy::default() }).unwrap();
    let rates = out.rates.expect("rate study reports slopes");
    let in_range = |v: f64, (lo, hi): (f64, f64)| v >= lo && v <= hi;
    let ratios_ok = rates.p_ratios.iter().all(|&(_, r)| in_range(r, P_RATIO));
    let ratios: Vec<String> = rates.p_ratios.iter().map(|(m, r)| format!("{m}:{r:.2}")).collect();
    outcome(
        in_range(rates.err_l.slope, L_SLOPE) && in_range(rates.err_alpha.slope, ALPHA_SLOPE) && ratios_ok,
        format!(
            "err_L slope {:.3} in {L_SLOPE:?}, err_alpha slope {:.3} in {ALPHA_SLOPE:?}, \
             err_L ratio at p/2 {} in {P_RATIO:?}",
            rates.err_l.slope,
            rates.err_alpha.slope,
            ratios.join(" ")
        ),
    )
}

fn cli(args: &[&str]) -> i32 {
    mimi::cli::main_with_args(std::iter::once("mimi").chain(args.iter().copied()))
}

fn same_files(a: &Path, b: &Path) -> Result<usize, String> {
    let mut names: Vec<_> = fs::read_dir(a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    for name in &names {
        if fs::read(a.join(name)).unwrap() != fs::read(b.join(name)).map_err(|e| format!("{name:?}: {e}"))? {
            return Err(format!("{name:?} differs"));
        }
    }
    Ok(names.len())
}

fn report_without_time(path: &Path) -> serde_json::Value {
    let mut v: serde_json::Value = serde_json::from_slice(&fs::read(path).unwrap()).unwrap();
    v.as_object_mut().unwrap().remove("wall_time_secs");
    v
}

fn random_frame(rng: &mut ChaCha8Rng) -> MixedDataFrame {
    let (m1, m2) = (rng.random_range(1..30), rng.random_range(1..8));
    let types: Vec<ColumnType> = (0..m2)
        .map(|_| [ColumnType::Numeric, ColumnType::Binary, ColumnType::Count][rng.random_range(0..3)])
        .collect();
    let values = Matrix::from_fn(m1, m2, |_, j| match types[j] {
        ColumnType::Numeric => rng.random_range(-1.0..1.0) * 10f64.powi(rng.random_range(-12..12)),
        ColumnType::Binary => f64::from(rng.random_range(0..2u8)),
        ColumnType::Count => f64::from(rng.random_range(0..100_000u32)),
    });
    let mut mask: Vec<bool> = (0..m1 * m2).map(|_| rng.random_bool(0.8)).collect();
    mask[0] = true;
    let names = (0..m2).map(|j| format!("col {j}")).collect();
    MixedDataFrame::new(names, types, values, mask).unwrap()
}

fn reproducibility() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let dir = |name: &str| tmp.path().join(name).to_string_lossy().into_owned();
    let mut problems = Vec::new();

    let sim = |out: &str| {
        cli(&["simulate", "--m1", "40", "--m2", "8", "--groups", "2", "--layout", "mixed", "--seed", "17", "--out", out])
    };
    let (s1, s2) = (dir("sim1"), dir("sim2"));
    if sim(&s1) != 0 || sim(&s2) != 0 {
        problems.push("simulate failed".to_string());
    }
    let design = SimDesign { m1: 40, m2: 8, n_groups: 2, layout: ColumnLayout::Mixed, seed: 17, ..SimDesign::default() };
    if simulate(&design).unwrap() != simulate(&design).unwrap() {
        problems.push("in-process simulations differ".to_string());
    }
    match same_files(Path::new(&s1), Path::new(&s2)) {
        Ok(n) => problems.extend((n < 7).then(|| format!("simulate wrote {n} files"))),
        Err(e) => problems.push(format!("simulate: {e}")),
    }

    let fit_run = |out: &str| {
        cli(&[
            "fit",
            "--data", &format!("{s1}/data.csv"),
            "--schema", &format!("{s1}/schema.json"),
            "--dict", &format!("{s1}/dict.json"),
            "--lambda1", "3.0",
            "--lambda2", "1.0",
            "--out", out,
        ])
    };
    let (f1, f2) = (dir("fit1"), dir("fit2"));
    let codes = (fit_run(&f1), fit_run(&f2));
    if codes.0 != codes.1 || codes.0 == 1 {
        problems.push(format!("fit exit codes {codes:?}"));
    }
    for name in ["alpha.csv", "l.csv"] {
        if fs::read(Path::new(&f1).join(name)).ok() != fs::read(Path::new(&f2).join(name)).ok() {
            problems.push(format!("fit {name} differs"));
        }
    }
    if report_without_time(&Path::new(&f1).join("report.json"))
        != report_without_time(&Path::new(&f2).join("report.json"))
    {
        problems.push("fit reports differ".to_string());
    }

    let tiny = ImputationStudy {
        base: SimDesign { m1: 40, m2: 8, n_groups: 2, s: 2, r: 1, layout: ColumnLayout::Mixed, ..SimDesign::default() },
        missing: vec![0.2, 0.5],
        rhos: vec![1.0],
        pilot_missing: 0.2,
        n_reps: 2,
        seed: 5,
        cv: CvSettings { n1: 3, n2: 3, n_folds: 3, baseline_grid: 4, ..CvSettings::default() },
        ..ImputationStudy::default()
    };
    let r0 = tmp.path().join("rep0");
    write_study(&run_imputation_study(&tiny).unwrap(), &r0).unwrap();
    let manifest = r0.join("imputation_manifest.json").to_string_lossy().into_owned();
    for out in ["rep1", "rep2"] {
        let code = cli(&["reproduce", "--study", "imputation", "--manifest", &manifest, "--out", &dir(out)]);
        if code != 0 {
            problems.push(format!("reproduce exit code {code}"));
        }
        if let Err(e) = same_files(&r0, &tmp.path().join(out)) {
            problems.push(format!("reproduce {out}: {e}"));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let mut frames_failed = 0;
    for _ in 0..200 {
        let df = random_frame(&mut rng);
        let schema = Schema::from_frame(&df, &df.default_links()).unwrap();
        let mut buf = Vec::new();
        write_csv(&df, &mut buf).unwrap();
        let back = read_csv(buf.as_slice(), Some(&schema)).unwrap();
        let bits_equal = df.observed().zip(back.observed()).all(|(a, b)| a.2.to_bits() == b.2.to_bits());
        frames_failed += usize::from(back != df || !bits_equal);
    }
    if frames_failed > 0 {
        problems.push(format!("{frames_failed} of 200 frames changed in a CSV round trip"));
    }

    outcome(
        problems.is_empty(),
        format!("simulate, fit and reproduce twice with identical outputs; 200 CSV round trips{}", list(&problems)),
    )
}

fn main() {
    type Criterion = (&'static str, fn() -> Outcome, u64);
    let criteria: [Criterion; 10] = [
        ("monotone descent", descent, 120),
        ("proximal-gradient reference", reference_agreement, 60),
        ("gradient vs finite differences", gradient_check, 10),
        ("subproblem oracles", subproblems, 30),
        ("unpenalized closed forms", unpenalized, 10),
        ("penalty anchors", anchor_zeros, 30),
        ("main-effect recovery", estimation_ordering, 300),
        ("imputation", imputation_ordering, 600),
        ("convergence rates", rates, 900),
        ("reproducibility", reproducibility, 30),
    ];
    let filter: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let (mut failed, mut ran) = (0, 0);
    for (k, (name, run, budget)) in criteria.iter().enumerate() {
        let id = k + 1;
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let res = run();
        let elapsed = start.elapsed();
        let in_time = elapsed <= Duration::from_secs(*budget);
        let pass = res.pass && in_time;
        failed += usize::from(!pass);
        println!(
            "criterion {id:>2} {name:<31} {} {} [{:.1} s of {budget} s]",
            if pass { "PASS" } else { "FAIL" },
            res.detail,
            elapsed.as_secs_f64()
        );
    }
    println!("{failed} of {ran} criteria failed");
    if failed > 0 && std::env::var("MIMI_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
