//! Simulation-based minimum-MSE estimation for latent-variable models.
//!
//! A panel of `S` draws `(Y^(s), A^(s))` from `g_beta x pi_gamma` is stored
//! in compressed form: distinct outcomes ("Y-atoms") with counts `c_j` and
//! distinct latent values ("A-atoms") with counts `m_k`. The posterior
//! weights `P_jk = g(y_j | a_k) / sum_k' m_k' g(y_j | a_k')` give the
//! conditional-expectation operators
//!
//! * `(T q)_j = sum_k P_jk m_k q_k` for `E[q(A) | Y]`,
//! * `(T* h)_k = sum_j P_jk c_j h_j` for `E[h(Y) | A]`.
//!
//! Every formula is an exact rewriting of the dense `S x S` matrices, so
//! results coincide with the uncompressed computation while the cost depends
//! only on the number of distinct atoms.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Debug;
use std::hash::Hash;

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;

use crate::error::{check_dim, MmseError, Result};
use crate::exec;
use crate::inference::EstimateReport;
use crate::linalg;
use crate::rng;

/// Mixture model `f(y | x) = int g_beta(y | a, x) pi_gamma(a | x) da` with a
/// scalar latent variable. Covariates take finitely many values ("cells").
///
/// Outcomes must be sufficient: two outcomes that compare equal must have the
/// same `g(. | a)` for every `a`.
pub trait MixtureModel: Sync {
    type Outcome: Clone + Eq + Hash + Ord + Send + Sync + Debug;

    fn n_cells(&self) -> usize;
    /// Number of estimated reference parameters (0 when they are known).
    fn dim_eta(&self) -> usize;

    fn sample_latent(&self, cell: usize, rng: &mut ChaCha8Rng) -> f64;
    fn sample_outcome(&self, cell: usize, a: f64, rng: &mut ChaCha8Rng) -> Self::Outcome;
    fn log_g(&self, cell: usize, y: &Self::Outcome, a: f64) -> f64;

    /// `log g(y_j | a_k)` for all pairs.
    fn log_g_matrix(&self, cell: usize, ys: &[Self::Outcome], a: &[f64]) -> DMatrix<f64> {
        let rows = exec::par_map(ys.len(), |j| a.iter().map(|&ak| self.log_g(cell, &ys[j], ak)).collect::<Vec<_>>());
        DMatrix::from_fn(ys.len(), a.len(), |j, k| rows[j][k])
    }

    /// `grad_eta log g(y | a)`.
    fn outcome_score_eta(&self, _cell: usize, _y: &Self::Outcome, _a: f64) -> DVector<f64> {
        DVector::zeros(self.dim_eta())
    }

    /// `grad_eta log pi(a)`.
    fn latent_score_eta(&self, _cell: usize, _a: f64) -> DVector<f64> {
        DVector::zeros(self.dim_eta())
    }

    /// Target integrand `Delta(a, x, beta)`.
    fn delta_integrand(&self, cell: usize, a: f64) -> f64;

    /// `grad_eta Delta(a, x, beta)`.
    fn grad_eta_delta_integrand(&self, _cell: usize, _a: f64) -> DVector<f64> {
        DVector::zeros(self.dim_eta())
    }

    /// Full outcome distribution given `a`, when it is enumerable.
    fn enumerate_outcomes(&self, _cell: usize, _a: f64) -> Option<Vec<(Self::Outcome, f64)>> {
        None
    }
}

/// The quantity averaged over the latent distribution.
pub trait Target: Sync {
    fn value(&self, cell: usize, a: f64) -> f64;
    fn grad_eta(&self, cell: usize, a: f64) -> DVector<f64>;
}

/// The model's own target `Delta`.
pub struct ModelTarget<'a, M>(pub &'a M);

impl<M: MixtureModel> Target for ModelTarget<'_, M> {
    fn value(&self, cell: usize, a: f64) -> f64 {
        self.0.delta_integrand(cell, a)
    }
    fn grad_eta(&self, cell: usize, a: f64) -> DVector<f64> {
        self.0.grad_eta_delta_integrand(cell, a)
    }
}

/// A component of `eta` itself as the target (`Delta = eta_index`).
pub struct ParameterTarget {
    pub value: f64,
    pub index: usize,
    pub dim_eta: usize,
}

impl Target for ParameterTarget {
    fn value(&self, _cell: usize, _a: f64) -> f64 {
        self.value
    }
    fn grad_eta(&self, _cell: usize, _a: f64) -> DVector<f64> {
        let mut g = DVector::zeros(self.dim_eta);
        g[self.index] = 1.0;
        g
    }
}

/// Compressed simulation panel for one covariate cell.
#[derive(Debug, Clone)]
pub struct CellPanel<O> {
    pub cell: usize,
    pub s: usize,
    pub y_atoms: Vec<O>,
    pub y_counts: DVector<f64>,
    pub a_atoms: Vec<f64>,
    pub a_counts: DVector<f64>,
    /// Atom index of each draw's outcome and latent value.
    pub draw_y: Vec<usize>,
    pub draw_a: Vec<usize>,
    /// `P`, `J x K`.
    pub post: DMatrix<f64>,
    /// Posterior-mean scores `d(y_j)`, `J x dim_eta`.
    pub d: DMatrix<f64>,
    /// `grad_eta log pi(a_k)`, `K x dim_eta`.
    pub latent_score: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct SimulationPanel<O> {
    pub cells: Vec<CellPanel<O>>,
    pub dim_eta: usize,
}

/// Posterior rows and scores for outcomes outside the panel.
#[derive(Debug, Clone)]
pub struct Posterior {
    /// `p_y`, `N x K`; `p_y M` sums to one across `k`.
    pub post: DMatrix<f64>,
    pub d: DMatrix<f64>,
}

impl<O: Clone + Ord> CellPanel<O> {
    /// `E[q(A) | Y = y_j]` for all Y-atoms.
    pub fn t_apply(&self, q: &DVector<f64>) -> DVector<f64> {
        &self.post * q.component_mul(&self.a_counts)
    }

    /// `E[h(Y) | A = a_k]` for all A-atoms.
    pub fn t_star_apply(&self, h: &DVector<f64>) -> DVector<f64> {
        self.post.transpose() * h.component_mul(&self.y_counts)
    }

    /// `C^{1/2} P M^{1/2}`.
    fn b_matrix(&self) -> DMatrix<f64> {
        let mut b = self.post.clone();
        for (j, mut row) in b.row_iter_mut().enumerate() {
            row *= self.y_counts[j].sqrt();
        }
        for (k, mut col) in b.column_iter_mut().enumerate() {
            col *= self.a_counts[k].sqrt();
        }
        b
    }

    /// Symmetrized `H_Y = P M P' C`, i.e. `C^{1/2} P M P' C^{1/2}`.
    pub fn h_y_sym(&self) -> DMatrix<f64> {
        let b = self.b_matrix();
        linalg::symmetrize(&(&b * b.transpose()))
    }

    pub fn mean_over_a(&self, q: &DVector<f64>) -> f64 {
        q.dot(&self.a_counts) / self.s as f64
    }

    /// Variance over the latent draws.
    pub fn var_over_a(&self, q: &DVector<f64>) -> f64 {
        let m = self.mean_over_a(q);
        q.iter().zip(self.a_counts.iter()).map(|(v, c)| c * (v - m) * (v - m)).sum::<f64>() / self.s as f64
    }

    /// Expands the compressed panel to the dense `S x S` matrices.
    pub fn dense(&self, target: &DVector<f64>, data: Option<&Posterior>) -> DensePanel {
        let s = self.s;
        let g = DMatrix::from_fn(s, s, |t, u| self.post[(self.draw_y[t], self.draw_a[u])]);
        let delta = DVector::from_fn(s, |u, _| target[self.draw_a[u]]);
        let k = self.d.ncols();
        let d = DMatrix::from_fn(s, k, |t, c| self.d[(self.draw_y[t], c)]);
        let (g_y, d_y) = match data {
            Some(p) => (
                DMatrix::from_fn(p.post.nrows(), s, |i, u| p.post[(i, self.draw_a[u])]),
                p.d.clone(),
            ),
            None => (DMatrix::zeros(0, s), DMatrix::zeros(0, k)),
        };
        DensePanel { g, g_y, delta, d, d_y }
    }
}

/// Uncompressed panel matrices (for small `S` and tests).
#[derive(Debug, Clone)]
pub struct DensePanel {
    pub g: DMatrix<f64>,
    pub g_y: DMatrix<f64>,
    pub delta: DVector<f64>,
    pub d: DMatrix<f64>,
    pub d_y: DMatrix<f64>,
}

const DRAW_BLOCK: usize = 1024;

fn build_cell<M: MixtureModel>(model: &M, cell: usize, s: usize, seed: u64) -> Result<CellPanel<M::Outcome>> {
    let blocks = s.div_ceil(DRAW_BLOCK);
    let drawn = exec::par_map(blocks, |b| {
        let mut r = rng::stream(seed, &[0x5041_4e45, cell as u64, b as u64]);
        let lo = b * DRAW_BLOCK;
        let hi = (lo + DRAW_BLOCK).min(s);
        (lo..hi)
            .map(|_| {
                let a = model.sample_latent(cell, &mut r);
                let y = model.sample_outcome(cell, a, &mut r);
                (y, a)
            })
            .collect::<Vec<_>>()
    });
    let mut y_index: BTreeMap<M::Outcome, usize> = BTreeMap::new();
    let mut a_index: HashMap<u64, usize> = HashMap::new();
    let mut y_atoms = Vec::new();
    let mut a_atoms = Vec::new();
    let mut y_counts = Vec::new();
    let mut a_counts = Vec::new();
    let mut draw_y = Vec::with_capacity(s);
    let mut draw_a = Vec::with_capacity(s);
    for (y, a) in drawn.into_iter().flatten() {
        let j = *y_index.entry(y.clone()).or_insert_with(|| {
            y_atoms.push(y);
            y_counts.push(0.0);
            y_atoms.len() - 1
        });
        y_counts[j] += 1.0;
        draw_y.push(j);
        let k = *a_index.entry(a.to_bits()).or_insert_with(|| {
            a_atoms.push(a);
            a_counts.push(0.0);
            a_atoms.len() - 1
        });
        a_counts[k] += 1.0;
        draw_a.push(k);
    }
    let a_counts = DVector::from_vec(a_counts);
    let latent_score = {
        let k = model.dim_eta();
        let rows: Vec<DVector<f64>> = a_atoms.iter().map(|&a| model.latent_score_eta(cell, a)).collect();
        DMatrix::from_fn(a_atoms.len(), k, |r, c| rows[r][c])
    };
    let (post, d) = posterior_rows(model, cell, &y_atoms, &a_atoms, &a_counts, &latent_score).map_err(|e| match e {
        MmseError::EmptyPosterior { index } => MmseError::DegenerateLikelihood {
            draw: draw_y.iter().position(|&j| j == index).unwrap_or(index),
        },
        other => other,
    })?;
    Ok(CellPanel {
        cell,
        s,
        y_atoms,
        y_counts: DVector::from_vec(y_counts),
        a_atoms,
        a_counts,
        draw_y,
        draw_a,
        post,
        d,
        latent_score,
    })
}

fn posterior_rows<M: MixtureModel>(
    model: &M,
    cell: usize,
    ys: &[M::Outcome],
    a_atoms: &[f64],
    a_counts: &DVector<f64>,
    latent_score: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let lg = model.log_g_matrix(cell, ys, a_atoms);
    let kdim = model.dim_eta();
    let rows = exec::try_par_map(ys.len(), |j| {
        let mx = lg.row(j).iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !mx.is_finite() {
            return Err(MmseError::EmptyPosterior { index: j });
        }
        let w: Vec<f64> = lg.row(j).iter().map(|&l| (l - mx).exp()).collect();
        let z: f64 = w.iter().zip(a_counts.iter()).map(|(w, m)| w * m).sum();
        let p: Vec<f64> = w.iter().map(|w| w / z).collect();
        let mut d = DVector::zeros(kdim);
        if kdim > 0 {
            for (k, &a) in a_atoms.iter().enumerate() {
                let wk = p[k] * a_counts[k];
                if wk > 0.0 {
                    d += (model.outcome_score_eta(cell, &ys[j], a) + latent_score.row(k).transpose()) * wk;
                }
            }
        }
        Ok((p, d))
    })?;
    let post = DMatrix::from_fn(ys.len(), a_atoms.len(), |j, k| rows[j].0[k]);
    let d = DMatrix::from_fn(ys.len(), kdim, |j, c| rows[j].1[c]);
    Ok((post, d))
}

/// Draws an independent panel of `s` draws for each covariate cell.
pub fn simulate_panel<M: MixtureModel>(model: &M, s: usize, seed: u64) -> Result<SimulationPanel<M::Outcome>> {
    if s < 2 {
        return Err(MmseError::InvalidInput(format!("S must be >= 2, got {s}")));
    }
    let cells = (0..model.n_cells())
        .map(|c| build_cell(model, c, s, seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(SimulationPanel { cells, dim_eta: model.dim_eta() })
}

impl<O: Clone + Ord + Eq + Hash + Send + Sync + Debug> SimulationPanel<O> {
    /// Posterior rows for arbitrary outcomes of a cell.
    pub fn posterior<M: MixtureModel<Outcome = O>>(&self, model: &M, cell: usize, ys: &[O]) -> Result<Posterior> {
        let c = &self.cells[cell];
        let (post, d) = posterior_rows(model, cell, ys, &c.a_atoms, &c.a_counts, &c.latent_score)?;
        Ok(Posterior { post, d })
    }
}

/// Observed outcomes grouped by covariate cell.
#[derive(Debug, Clone)]
pub struct CellData<O> {
    pub cells: Vec<Vec<O>>,
}

impl<O: Clone + Ord> CellData<O> {
    pub fn n(&self) -> usize {
        self.cells.iter().map(Vec::len).sum()
    }

    /// Cell frequencies `N_x / n`.
    pub fn weights(&self) -> Vec<f64> {
        let n = self.n() as f64;
        self.cells.iter().map(|c| c.len() as f64 / n).collect()
    }

    /// Distinct outcomes per cell with counts, and each observation's atom.
    fn atoms(&self) -> Vec<(Vec<O>, Vec<f64>, Vec<usize>)> {
        self.cells
            .iter()
            .map(|obs| {
                let mut idx: BTreeMap<O, usize> = BTreeMap::new();
                let mut atoms = Vec::new();
                let mut counts = Vec::new();
                let mut of = Vec::with_capacity(obs.len());
                for y in obs {
                    let j = *idx.entry(y.clone()).or_insert_with(|| {
                        atoms.push(y.clone());
                        counts.push(0.0);
                        atoms.len() - 1
                    });
                    counts[j] += 1.0;
                    of.push(j);
                }
                (atoms, counts, of)
            })
            .collect()
    }
}

fn check_weights(weights: &[f64], cells: usize) -> Result<()> {
    check_dim("cell weights", cells, weights.len())?;
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-10 || weights.iter().any(|&w| w < 0.0) {
        return Err(MmseError::InvalidInput("cell weights must be nonnegative and sum to 1".into()));
    }
    Ok(())
}

/// Per-cell pieces of the minimum-MSE solution.
#[derive(Debug, Clone)]
pub struct CellPlan {
    /// `E Delta` over the latent draws.
    pub delta_x: f64,
    /// `Delta - delta_x` on A-atoms.
    pub delta_bar: DVector<f64>,
    /// `h` on the panel's Y-atoms.
    pub h_atoms: DVector<f64>,
    /// `E[h | A]` on A-atoms, from the panel.
    pub t_star_h: DVector<f64>,
    /// `dDelta` for the cell.
    pub d_delta: DVector<f64>,
}

/// Minimum-MSE influence function on a simulation panel.
#[derive(Debug, Clone)]
pub struct SemiparamPlan {
    pub eps_n: f64,
    pub nu: DVector<f64>,
    pub cells: Vec<CellPlan>,
    pub weights: Vec<f64>,
}

fn cell_target<O: Clone + Ord>(c: &CellPanel<O>, target: &dyn Target, dim_eta: usize) -> (DVector<f64>, f64, DVector<f64>) {
    let delta = DVector::from_iterator(c.a_atoms.len(), c.a_atoms.iter().map(|&a| target.value(c.cell, a)));
    let delta_x = c.mean_over_a(&delta);
    let mut dd = DVector::zeros(dim_eta);
    for (k, &a) in c.a_atoms.iter().enumerate() {
        let term = if dim_eta > 0 {
            target.grad_eta(c.cell, a) + c.latent_score.row(k).transpose() * delta[k]
        } else {
            DVector::zeros(0)
        };
        dd += term * c.a_counts[k];
    }
    (delta, delta_x, dd / c.s as f64)
}

impl SemiparamPlan {
    /// Solves `(kappa H_Y + I) h = kappa T Delta_bar + D nu` per cell, with
    /// `nu` chosen so that the pooled local-robustness constraint
    /// `sum_x w_x E_x[h d] = sum_x w_x dDelta_x` holds.
    pub fn new<O: Clone + Ord + Send + Sync>(panel: &SimulationPanel<O>, target: &dyn Target, eps_n: f64, weights: &[f64]) -> Result<Self> {
        check_weights(weights, panel.cells.len())?;
        if !(eps_n >= 0.0) || eps_n.is_infinite() {
            return Err(MmseError::InvalidInput(format!("eps*n must be finite and >= 0, got {eps_n}")));
        }
        let k = panel.dim_eta;
        struct Pieces {
            delta: DVector<f64>,
            delta_x: f64,
            dd: DVector<f64>,
            h1: DVector<f64>,
            hd: DMatrix<f64>,
        }
        let pieces = exec::par_map(panel.cells.len(), |x| {
            let c = &panel.cells[x];
            let (delta, delta_x, dd) = cell_target(c, target, k);
            let delta_bar = delta.add_scalar(-delta_x);
            let rhs = c.t_apply(&delta_bar) * eps_n;
            let (h1, hd) = if eps_n == 0.0 {
                (DVector::zeros(c.y_atoms.len()), c.d.clone())
            } else {
                let (lam, v) = linalg::sym_eigen(&c.h_y_sym());
                let sc: Vec<f64> = c.y_counts.iter().map(|v| v.sqrt()).collect();
                let scale = DVector::from_iterator(lam.len(), lam.iter().map(|&l| 1.0 / (eps_n * l.max(0.0) + 1.0)));
                let solve = |f: &DVector<f64>| -> DVector<f64> {
                    let g = DVector::from_fn(f.len(), |j, _| f[j] * sc[j]);
                    let z = &v * (v.transpose() * g).component_mul(&scale);
                    DVector::from_fn(z.len(), |j, _| z[j] / sc[j])
                };
                let h1 = solve(&rhs);
                let mut hd = DMatrix::zeros(c.y_atoms.len(), k);
                for col in 0..k {
                    hd.set_column(col, &solve(&c.d.column(col).into_owned()));
                }
                (h1, hd)
            };
            Pieces { delta, delta_x, dd, h1, hd }
        });
        let mut a = DMatrix::zeros(k, k);
        let mut rhs = DVector::zeros(k);
        for (x, p) in pieces.iter().enumerate() {
            let c = &panel.cells[x];
            let w = weights[x] / c.s as f64;
            let dc = DMatrix::from_fn(c.y_atoms.len(), k, |j, col| c.d[(j, col)] * c.y_counts[j]);
            a += dc.transpose() * &p.hd * w;
            rhs += &p.dd * weights[x] - dc.transpose() * &p.h1 * w;
        }
        let nu = if k == 0 {
            DVector::zeros(0)
        } else {
            linalg::check_condition(&linalg::symmetrize(&a), "score information on the panel")?;
            linalg::lu_solve(&a, &rhs, "local robustness system")?
        };
        let cells = pieces
            .into_iter()
            .enumerate()
            .map(|(x, p)| {
                let c = &panel.cells[x];
                let h_atoms = &p.h1 + &p.hd * &nu;
                let t_star_h = c.t_star_apply(&h_atoms);
                CellPlan {
                    delta_bar: p.delta.add_scalar(-p.delta_x),
                    delta_x: p.delta_x,
                    h_atoms,
                    t_star_h,
                    d_delta: p.dd,
                }
            })
            .collect();
        Ok(Self { eps_n, nu, cells, weights: weights.to_vec() })
    }

    /// `h` at outcomes with the given posterior rows.
    pub fn h_values<O: Clone + Ord>(&self, panel: &SimulationPanel<O>, cell: usize, post: &Posterior) -> Vec<f64> {
        let c = &panel.cells[cell];
        let cp = &self.cells[cell];
        let resid = (&cp.delta_bar - &cp.t_star_h).component_mul(&c.a_counts) * self.eps_n;
        let mut h = &post.post * resid;
        if !self.nu.is_empty() {
            h += &post.d * &self.nu;
        }
        h.iter().copied().collect()
    }

    /// `sum_x w_x delta_x`, the plug-in value at the preliminary estimates.
    pub fn plug_in(&self) -> f64 {
        self.cells.iter().zip(&self.weights).map(|(c, w)| w * c.delta_x).sum()
    }
}

/// Influence functions whose worst-case bias can be evaluated.
#[derive(Debug, Clone, Copy)]
pub enum Influence<'a> {
    /// Random effects: `h = 0` (locally robustified when `eta` is estimated).
    RandomEffects,
    /// Empirical Bayes: `h = E[Delta | y] - delta_x` (locally robustified).
    EmpiricalBayes,
    Plan(&'a SemiparamPlan),
}

/// How `E[h(Y) | A]` is approximated inside bias formulas.
#[derive(Debug, Clone, Copy)]
pub enum CondMean {
    /// Exact expectation over the enumerable outcome distribution.
    Enumerate,
    /// `m` fresh outcome draws per latent atom, with a finite-`m` correction.
    FreshDraws { m: usize, seed: u64 },
}

impl Default for CondMean {
    fn default() -> Self {
        CondMean::FreshDraws { m: 20, seed: 0x0b1a5 }
    }
}

/// Evaluates influence functions on a panel.
pub struct Evaluator<'a, M: MixtureModel> {
    pub model: &'a M,
    pub panel: &'a SimulationPanel<M::Outcome>,
    pub target: &'a dyn Target,
    pub weights: Vec<f64>,
    /// Per-cell `(Delta, delta_x, dDelta)`.
    cells: Vec<(DVector<f64>, f64, DVector<f64>)>,
    /// Correction `H^{-1}(dDelta - E[h0 d])` for RE and EB when `eta` is estimated.
    correction_re: DVector<f64>,
    correction_eb: DVector<f64>,
}

impl<'a, M: MixtureModel> Evaluator<'a, M> {
    pub fn new(model: &'a M, panel: &'a SimulationPanel<M::Outcome>, target: &'a dyn Target, weights: &[f64]) -> Result<Self> {
        check_weights(weights, panel.cells.len())?;
        let k = panel.dim_eta;
        let cells: Vec<_> = panel.cells.iter().map(|c| cell_target(c, target, k)).collect();
        let mut ev = Self {
            model,
            panel,
            target,
            weights: weights.to_vec(),
            cells,
            correction_re: DVector::zeros(k),
            correction_eb: DVector::zeros(k),
        };
        if k > 0 {
            let mut h = DMatrix::zeros(k, k);
            let mut dd = DVector::zeros(k);
            let mut eb_cross = DVector::zeros(k);
            for (x, c) in panel.cells.iter().enumerate() {
                let w = weights[x] / c.s as f64;
                let dc = DMatrix::from_fn(c.y_atoms.len(), k, |j, col| c.d[(j, col)] * c.y_counts[j]);
                h += dc.transpose() * &c.d * w;
                dd += &ev.cells[x].2 * weights[x];
                let (delta, dx, _) = &ev.cells[x];
                let h0 = c.t_apply(&delta.add_scalar(-dx));
                eb_cross += dc.transpose() * h0 * w;
            }
            ev.correction_re = linalg::spd_solve_vec(&h, &dd, "score information on the panel")?;
            ev.correction_eb = linalg::spd_solve_vec(&h, &(&dd - eb_cross), "score information on the panel")?;
        }
        Ok(ev)
    }

    pub fn delta_x(&self, cell: usize) -> f64 {
        self.cells[cell].1
    }

    /// `h` at outcomes of `cell`.
    pub fn h_at(&self, infl: Influence<'_>, cell: usize, ys: &[M::Outcome]) -> Result<Vec<f64>> {
        let post = self.panel.posterior(self.model, cell, ys)?;
        Ok(self.h_from_posterior(infl, cell, &post))
    }

    /// [`Self::h_at`] in blocks of rows, bounding the size of the posterior matrix.
    fn h_chunked(&self, infl: Influence<'_>, cell: usize, ys: &[M::Outcome]) -> Result<Vec<f64>> {
        const ROWS: usize = 4096;
        let mut out = Vec::with_capacity(ys.len());
        for block in ys.chunks(ROWS) {
            out.extend(self.h_at(infl, cell, block)?);
        }
        Ok(out)
    }

    pub fn h_from_posterior(&self, infl: Influence<'_>, cell: usize, post: &Posterior) -> Vec<f64> {
        self.h_raw(infl, cell, post, true)
    }

    /// `robust = false` drops the score correction of RE and EB, giving the
    /// terms that enter their point estimates.
    fn h_raw(&self, infl: Influence<'_>, cell: usize, post: &Posterior, robust: bool) -> Vec<f64> {
        let c = &self.panel.cells[cell];
        let (delta, dx, _) = &self.cells[cell];
        let correct = robust && self.panel.dim_eta > 0;
        match infl {
            Influence::RandomEffects => {
                if correct {
                    (&post.d * &self.correction_re).iter().copied().collect()
                } else {
                    vec![0.0; post.post.nrows()]
                }
            }
            Influence::EmpiricalBayes => {
                let q = delta.add_scalar(-dx).component_mul(&c.a_counts);
                let mut h = &post.post * q;
                if correct {
                    h += &post.d * &self.correction_eb;
                }
                h.iter().copied().collect()
            }
            Influence::Plan(plan) => plan.h_values(self.panel, cell, post),
        }
    }

    /// `E[h | A = a_k]` for each A-atom of `cell`, plus the mean within-atom
    /// variance divided by the number of fresh draws (0 for enumeration).
    pub fn conditional_means(&self, infl: Influence<'_>, cell: usize, method: CondMean) -> Result<(DVector<f64>, f64)> {
        let c = &self.panel.cells[cell];
        let kk = c.a_atoms.len();
        match method {
            CondMean::Enumerate => {
                let dists: Vec<Vec<(M::Outcome, f64)>> = c
                    .a_atoms
                    .iter()
                    .map(|&a| {
                        self.model.enumerate_outcomes(cell, a).ok_or_else(|| {
                            MmseError::InvalidInput("model cannot enumerate its outcomes".into())
                        })
                    })
                    .collect::<Result<_>>()?;
                let mut index: BTreeMap<M::Outcome, usize> = BTreeMap::new();
                let mut ys = Vec::new();
                for dist in &dists {
                    for (y, _) in dist {
                        index.entry(y.clone()).or_insert_with(|| {
                            ys.push(y.clone());
                            ys.len() - 1
                        });
                    }
                }
                let h = self.h_chunked(infl, cell, &ys)?;
                let means = DVector::from_iterator(
                    kk,
                    dists.iter().map(|dist| dist.iter().map(|(y, p)| p * h[index[y]]).sum::<f64>()),
                );
                Ok((means, 0.0))
            }
            CondMean::FreshDraws { m, seed } => {
                if m < 2 {
                    return Err(MmseError::InvalidInput("at least two fresh draws per latent value".into()));
                }
                let draws: Vec<Vec<M::Outcome>> = exec::par_map(kk, |k| {
                    let mut r = rng::stream(seed, &[0x4652_4553, cell as u64, k as u64]);
                    (0..m).map(|_| self.model.sample_outcome(cell, c.a_atoms[k], &mut r)).collect()
                });
                let mut index: BTreeMap<M::Outcome, usize> = BTreeMap::new();
                let mut ys = Vec::new();
                for y in draws.iter().flatten() {
                    index.entry(y.clone()).or_insert_with(|| {
                        ys.push(y.clone());
                        ys.len() - 1
                    });
                }
                let h = self.h_chunked(infl, cell, &ys)?;
                let mut means = DVector::zeros(kk);
                let mut within = 0.0;
                for (k, dk) in draws.iter().enumerate() {
                    let vals: Vec<f64> = dk.iter().map(|y| h[index[y]]).collect();
                    means[k] = linalg::mean(&vals);
                    let sd = linalg::sample_sd(&vals);
                    within += c.a_counts[k] * sd * sd;
                }
                Ok((means, within / (c.s as f64 * m as f64)))
            }
        }
    }

    /// Pooled within-cell variance of `Delta - E[h | A]` over the latent draws.
    pub fn discrepancy_variance(&self, infl: Influence<'_>, method: CondMean) -> Result<f64> {
        let mut total = 0.0;
        for (x, c) in self.panel.cells.iter().enumerate() {
            if self.weights[x] == 0.0 {
                continue;
            }
            let (delta, _, _) = &self.cells[x];
            let v = match infl {
                Influence::RandomEffects if self.panel.dim_eta == 0 => c.var_over_a(delta),
                _ => {
                    let (means, corr) = self.conditional_means(infl, x, method)?;
                    (c.var_over_a(&(delta - means)) - corr).max(0.0)
                }
            };
            total += self.weights[x] * v;
        }
        Ok(total)
    }

    /// Worst-case bias `sqrt(eps) sd(Delta - E[h | A])`.
    pub fn bias(&self, infl: Influence<'_>, epsilon: f64, method: CondMean) -> Result<f64> {
        Ok(epsilon.sqrt() * self.discrepancy_variance(infl, method)?.sqrt())
    }

    /// Variance of `h` under the reference model, from the panel's outcomes.
    pub fn variance(&self, infl: Influence<'_>) -> Result<f64> {
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for (x, c) in self.panel.cells.iter().enumerate() {
            let post = Posterior { post: c.post.clone(), d: c.d.clone() };
            let h = self.h_from_posterior(infl, x, &post);
            let s = c.s as f64;
            for (j, v) in h.iter().enumerate() {
                let w = self.weights[x] * c.y_counts[j] / s;
                m1 += w * v;
                m2 += w * v * v;
            }
        }
        Ok((m2 - m1 * m1).max(0.0))
    }
}

pub fn bias_re<M: MixtureModel>(ev: &Evaluator<'_, M>, epsilon: f64, method: CondMean) -> Result<f64> {
    ev.bias(Influence::RandomEffects, epsilon, method)
}

pub fn bias_eb<M: MixtureModel>(ev: &Evaluator<'_, M>, epsilon: f64, method: CondMean) -> Result<f64> {
    ev.bias(Influence::EmpiricalBayes, epsilon, method)
}

pub fn bias_of_plan<M: MixtureModel>(ev: &Evaluator<'_, M>, plan: &SemiparamPlan, epsilon: f64, method: CondMean) -> Result<f64> {
    ev.bias(Influence::Plan(plan), epsilon, method)
}

/// Largest eigenvalue of `G' Q G` pooled as the maximum over cells.
pub fn lambda_max<O: Clone + Ord>(panel: &SimulationPanel<O>) -> Result<f64> {
    let mut best = 0.0_f64;
    for c in &panel.cells {
        let ksym = c.h_y_sym();
        let m = if c.d.ncols() == 0 {
            ksym
        } else {
            let sc = DMatrix::from_fn(c.y_atoms.len(), c.d.ncols(), |j, col| c.d[(j, col)] * c.y_counts[j].sqrt());
            let proj = &sc * linalg::pinv_sym(&(sc.transpose() * &sc), linalg::PINV_RTOL) * sc.transpose();
            let pi = DMatrix::identity(proj.nrows(), proj.ncols()) - proj;
            &pi * ksym * &pi
        };
        let l = linalg::lambda_max_sym(&m);
        if !l.is_finite() {
            return Err(MmseError::NonConvergence("eigensolver".into()));
        }
        best = best.max(l);
    }
    Ok(best)
}

/// Estimates on observed data.
#[derive(Debug, Clone)]
pub struct SemiparamFit {
    pub point: f64,
    pub h_values: Vec<f64>,
}

fn fit_with<M: MixtureModel>(
    ev: &Evaluator<'_, M>,
    data: &CellData<M::Outcome>,
    infl: Influence<'_>,
    robust: bool,
) -> Result<SemiparamFit> {
    check_dim("data cells", ev.panel.cells.len(), data.cells.len())?;
    let atoms = data.atoms();
    let mut h_values = Vec::with_capacity(data.n());
    let mut base = 0.0;
    for (x, (ys, _, of)) in atoms.iter().enumerate() {
        base += ev.weights[x] * ev.delta_x(x);
        if ys.is_empty() {
            continue;
        }
        let post = ev.panel.posterior(ev.model, x, ys).map_err(|e| match e {
            MmseError::EmptyPosterior { index } => {
                let offset: usize = data.cells[..x].iter().map(Vec::len).sum();
                MmseError::EmptyPosterior { index: offset + of.iter().position(|&j| j == index).unwrap_or(0) }
            }
            other => other,
        })?;
        let h = ev.h_raw(infl, x, &post, robust);
        h_values.extend(of.iter().map(|&j| h[j]));
    }
    let point = base + linalg::pairwise_sum(&h_values) / h_values.len().max(1) as f64;
    Ok(SemiparamFit { point, h_values })
}

/// Random-effects estimate `sum_x w_x E Delta`. The returned `h_values`
/// are the locally robust influence values when `eta` is estimated.
pub fn delta_re<M: MixtureModel>(ev: &Evaluator<'_, M>, data: &CellData<M::Outcome>) -> Result<SemiparamFit> {
    let point = fit_with(ev, data, Influence::RandomEffects, false)?.point;
    let h_values = fit_with(ev, data, Influence::RandomEffects, true)?.h_values;
    Ok(SemiparamFit { point, h_values })
}

/// Empirical-Bayes estimate `(1/n) sum_i E[Delta | Y_i]`.
pub fn delta_eb<M: MixtureModel>(ev: &Evaluator<'_, M>, data: &CellData<M::Outcome>) -> Result<SemiparamFit> {
    let point = fit_with(ev, data, Influence::EmpiricalBayes, false)?.point;
    let h_values = if ev.panel.dim_eta > 0 {
        fit_with(ev, data, Influence::EmpiricalBayes, true)?.h_values
    } else {
        fit_with(ev, data, Influence::EmpiricalBayes, false)?.h_values
    };
    Ok(SemiparamFit { point, h_values })
}

/// Minimum-MSE estimate `sum_x w_x delta_x + (1/n) sum_i h(Y_i)`.
pub fn delta_mmse<M: MixtureModel>(
    ev: &Evaluator<'_, M>,
    data: &CellData<M::Outcome>,
    plan: &SemiparamPlan,
) -> Result<SemiparamFit> {
    fit_with(ev, data, Influence::Plan(plan), true)
}

/// Report with the bias bound and both intervals.
pub fn report(name: &str, fit: &SemiparamFit, bias: f64, epsilon: f64, p: Option<f64>, mu: f64) -> Result<EstimateReport> {
    EstimateReport::new(name, fit.point, bias, linalg::sample_sd(&fit.h_values), fit.h_values.len(), epsilon, p, mu)
}

// ---------------------------------------------------------------------------
// Exact solution for finite discrete models.

/// Discrete mixture with finite outcome support and latent grid.
#[derive(Debug, Clone)]
pub struct DiscreteMixture {
    /// `g[(y, a)] = Pr(Y = y | A = a)`; columns sum to one.
    pub g: DMatrix<f64>,
    pub pi: DVector<f64>,
    pub delta: DVector<f64>,
    /// Optional one-parameter exponential tilt of `pi`, `pi_gamma(a) ~ pi(a) exp(gamma t_a)`,
    /// evaluated at `gamma = 0` and treated as estimated.
    pub tilt: Option<DVector<f64>>,
}

impl DiscreteMixture {
    pub fn new(g: DMatrix<f64>, pi: DVector<f64>, delta: DVector<f64>, tilt: Option<DVector<f64>>) -> Result<Self> {
        check_dim("pi", g.ncols(), pi.len())?;
        check_dim("delta", g.ncols(), delta.len())?;
        if let Some(t) = &tilt {
            check_dim("tilt", g.ncols(), t.len())?;
        }
        if g.len() > 10_000 {
            return Err(MmseError::InvalidInput("discrete model too large to enumerate".into()));
        }
        for col in g.column_iter() {
            if (col.sum() - 1.0).abs() > 1e-10 || col.iter().any(|&v| v < 0.0) {
                return Err(MmseError::InvalidInput("columns of g must be probability vectors".into()));
            }
        }
        if (pi.sum() - 1.0).abs() > 1e-10 || pi.iter().any(|&v| v < 0.0) {
            return Err(MmseError::InvalidInput("pi must be a probability vector".into()));
        }
        Ok(Self { g, pi, delta, tilt })
    }

    pub fn ny(&self) -> usize {
        self.g.nrows()
    }

    pub fn na(&self) -> usize {
        self.g.ncols()
    }

    /// Marginal outcome probabilities.
    pub fn f(&self) -> DVector<f64> {
        &self.g * &self.pi
    }

    pub fn delta0(&self) -> f64 {
        self.delta.dot(&self.pi)
    }

    /// `(E_{A|Y}, E_{Y|A})` as `ny x na` and `na x ny` matrices.
    pub fn operators(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let f = self.f();
        let t = DMatrix::from_fn(self.ny(), self.na(), |y, a| {
            if f[y] > 0.0 { self.g[(y, a)] * self.pi[a] / f[y] } else { 0.0 }
        });
        (t, self.g.transpose())
    }

    /// Scores of `f` in the tilt direction and `dDelta`, when tilted.
    pub fn scores(&self) -> Option<(DVector<f64>, f64)> {
        let t = self.tilt.as_ref()?;
        let et = t.dot(&self.pi);
        let centered = t.add_scalar(-et);
        let (top, _) = self.operators();
        let s = &top * &centered;
        let dd = self.delta.dot(&centered.component_mul(&self.pi));
        Some((s, dd))
    }
}

impl MixtureModel for DiscreteMixture {
    type Outcome = usize;

    fn n_cells(&self) -> usize {
        1
    }
    fn dim_eta(&self) -> usize {
        usize::from(self.tilt.is_some())
    }
    fn sample_latent(&self, _cell: usize, rng: &mut ChaCha8Rng) -> f64 {
        sample_index(&self.pi.iter().copied().collect::<Vec<_>>(), rng) as f64
    }
    fn sample_outcome(&self, _cell: usize, a: f64, rng: &mut ChaCha8Rng) -> usize {
        let col: Vec<f64> = self.g.column(a as usize).iter().copied().collect();
        sample_index(&col, rng)
    }
    fn log_g(&self, _cell: usize, y: &usize, a: f64) -> f64 {
        self.g[(*y, a as usize)].ln()
    }
    fn latent_score_eta(&self, _cell: usize, a: f64) -> DVector<f64> {
        match &self.tilt {
            Some(t) => DVector::from_element(1, t[a as usize] - t.dot(&self.pi)),
            None => DVector::zeros(0),
        }
    }
    fn delta_integrand(&self, _cell: usize, a: f64) -> f64 {
        self.delta[a as usize]
    }
    fn enumerate_outcomes(&self, _cell: usize, a: f64) -> Option<Vec<(usize, f64)>> {
        Some(self.g.column(a as usize).iter().enumerate().filter(|(_, &p)| p > 0.0).map(|(y, &p)| (y, p)).collect())
    }
}

fn sample_index(p: &[f64], rng: &mut ChaCha8Rng) -> usize {
    use rand::Rng;
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    p.iter().rposition(|&v| v > 0.0).unwrap_or(p.len() - 1)
}

#[derive(Debug, Clone)]
pub struct FredholmSolution {
    /// `h(y)` on the outcome support.
    pub h: DVector<f64>,
    /// `delta + sum_y fhat_y h_y`.
    pub delta_hat: f64,
    /// Max-abs residual of the linear system.
    pub residual: f64,
}

/// Solves the regularized Fredholm system exactly.
///
/// Known reference parameters: `(kappa H_Y + I) h = kappa (E_{A|Y} Delta - delta)`.
/// With the tilt estimated: `(kappa Q H_Y + I) h = s H^{-1} dDelta + kappa Q T Delta_bar`,
/// where `Q` projects off the score in `L2(f)`. `kappa = eps n`; at
/// `kappa = inf` the unregularized system is solved and `H_Y` must be
/// invertible. `fhat` defaults to the model's own `f`.
pub fn fredholm_exact(model: &DiscreteMixture, eps_n: f64, fhat: Option<&DVector<f64>>) -> Result<FredholmSolution> {
    if !(eps_n >= 0.0) {
        return Err(MmseError::InvalidInput("eps*n must be >= 0".into()));
    }
    let ny = model.ny();
    let f = model.f();
    let (t, ts) = model.operators();
    let hy = &t * &ts;
    let d0 = model.delta0();
    let tdb = &t * model.delta.add_scalar(-d0);
    let ident = DMatrix::<f64>::identity(ny, ny);
    let (lhs, rhs) = match model.scores() {
        None => {
            if eps_n.is_infinite() {
                (hy.clone(), tdb.clone())
            } else {
                (&hy * eps_n + &ident, &tdb * eps_n)
            }
        }
        Some((s, dd)) => {
            let hs: f64 = s.iter().zip(f.iter()).map(|(s, f)| s * s * f).sum();
            if !(hs > 0.0) {
                return Err(MmseError::NotIdentified("score has zero variance".into()));
            }
            let sf = s.component_mul(&f);
            let q = &ident - &s * sf.transpose() / hs;
            let base = &s * (dd / hs);
            if eps_n.is_infinite() {
                // Q H_Y h = Q T Delta_bar together with (I - Q) h = s H^{-1} dDelta.
                let p = &ident - &q;
                (&q * &hy + &p, &q * &tdb + base)
            } else {
                (&q * &hy * eps_n + &ident, base + &q * &tdb * eps_n)
            }
        }
    };
    if eps_n.is_infinite() {
        let cond = lhs.clone().svd(false, false).singular_values;
        let (lo, hi) = (cond.min(), cond.max());
        if !(lo > hi * 1e-12) {
            return Err(MmseError::Singular("H_Y is singular; a finite eps*n is required".into()));
        }
    }
    let h = linalg::lu_solve(&lhs, &rhs, "Fredholm system")?;
    let residual = (&lhs * &h - &rhs).amax();
    let fh = fhat.cloned().unwrap_or_else(|| f.clone());
    check_dim("fhat", ny, fh.len())?;
    Ok(FredholmSolution { delta_hat: d0 + fh.dot(&h), h, residual })
}
