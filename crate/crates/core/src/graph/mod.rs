//! Sliding-window factor graph smoother.
//!
//! Nodes are keyframe [`NavState`]s; factors are priors, preintegrated IMU
//! terms, lidar-odometry relative poses, GNSS positions and gyro rates. The
//! window is solved by dense Levenberg–Marquardt on the manifold and old
//! nodes are folded into a linear prior by Schur complement.

mod factors;

pub use factors::{
    residual_between, residual_gnss, residual_prior, residual_rate, sqrt_information, Factor,
    FactorData, FactorKind, Linearized,
};

use std::collections::{BTreeMap, BTreeSet, HashMap};

use log::debug;
use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, SMatrix, SymmetricEigen, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{nav_idx, NavState, NavTangent, Timestamp, NAV_DIM};

/// Position fix of the GNSS receiver in the world (UTM) frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GnssFix {
    pub stamp: Timestamp,
    pub position: Vector3<f64>,
    pub cov: Matrix3<f64>,
}

impl GnssFix {
    pub fn new(stamp: Timestamp, position: Vector3<f64>, var: f64) -> Self {
        Self { stamp, position, cov: Matrix3::identity() * var }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("node {0} does not exist")]
    UnknownNode(u64),
    #[error("node {0} already exists")]
    DuplicateNode(u64),
    #[error("node {0} is not connected to the anchored part of the graph")]
    Disconnected(u64),
    #[error("graph has no prior to anchor it")]
    NoAnchor,
    #[error("{0:?} factor has an invalid covariance")]
    InvalidCovariance(FactorKind),
    #[error("factor expects {expected} nodes, got {got}")]
    Arity { expected: usize, got: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizeReport {
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub converged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraphConfig {
    /// Active keyframes kept in the window.
    pub window: usize,
    pub max_iterations: usize,
    pub lambda_init: f64,
    pub between_sigma_rot_deg: f64,
    pub between_sigma_trans: f64,
    pub rate_sigma: f64,
    pub prior_sigma_rot: f64,
    pub prior_sigma_pos: f64,
    pub prior_sigma_vel: f64,
    pub prior_sigma_rate: f64,
    pub prior_sigma_acc_bias: f64,
    pub prior_sigma_gyro_bias: f64,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            window: 20,
            max_iterations: 10,
            lambda_init: 1e-4,
            between_sigma_rot_deg: 0.5,
            between_sigma_trans: 0.05,
            rate_sigma: 0.01,
            prior_sigma_rot: 0.01,
            prior_sigma_pos: 0.5,
            prior_sigma_vel: 0.05,
            prior_sigma_rate: 0.01,
            prior_sigma_acc_bias: 0.1,
            prior_sigma_gyro_bias: 0.01,
        }
    }
}

impl GraphConfig {
    pub fn between_cov(&self) -> Matrix6<f64> {
        let r = self.between_sigma_rot_deg.to_radians().powi(2);
        let t = self.between_sigma_trans.powi(2);
        Matrix6::from_diagonal(&Vector6::new(r, r, r, t, t, t))
    }

    pub fn prior_cov(&self) -> SMatrix<f64, NAV_DIM, NAV_DIM> {
        use nav_idx::*;
        let mut d = NavTangent::zeros();
        for (off, s) in [
            (ROT, self.prior_sigma_rot),
            (POS, self.prior_sigma_pos),
            (VEL, self.prior_sigma_vel),
            (RATE, self.prior_sigma_rate),
            (BA, self.prior_sigma_acc_bias),
            (BG, self.prior_sigma_gyro_bias),
        ] {
            d.fixed_rows_mut::<3>(off).fill(s * s);
        }
        SMatrix::from_diagonal(&d)
    }

    pub fn rate_cov(&self) -> Matrix3<f64> {
        Matrix3::identity() * self.rate_sigma.powi(2)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Node {
    pub stamp: Timestamp,
    pub state: NavState,
}

/// Keyframe states and the factors between them.
#[derive(Clone, Debug, Default)]
pub struct FactorGraph {
    nodes: BTreeMap<u64, Node>,
    factors: Vec<Factor>,
}

struct System {
    index: HashMap<u64, usize>,
    h: DMatrix<f64>,
    g: DVector<f64>,
}

impl FactorGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_node(&mut self, id: u64, stamp: Timestamp, state: NavState) -> Result<(), GraphError> {
        if self.nodes.contains_key(&id) {
            return Err(GraphError::DuplicateNode(id));
        }
        self.nodes.insert(id, Node { stamp, state });
        Ok(())
    }

    pub fn add_factor(&mut self, factor: Factor) -> Result<(), GraphError> {
        if let Some(&id) = factor.nodes.iter().find(|id| !self.nodes.contains_key(id)) {
            return Err(GraphError::UnknownNode(id));
        }
        let expected = match factor.kind() {
            FactorKind::Imu | FactorKind::Between => 2,
            FactorKind::Linear => factor.nodes.len().max(1),
            _ => 1,
        };
        if factor.nodes.len() != expected {
            return Err(GraphError::Arity { expected, got: factor.nodes.len() });
        }
        self.factors.push(factor);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node_ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.nodes.keys().copied()
    }

    pub fn nodes(&self) -> impl Iterator<Item = (u64, &Node)> {
        self.nodes.iter().map(|(k, v)| (*k, v))
    }

    pub fn node(&self, id: u64) -> Option<&Node> {
        self.nodes.get(&id)
    }

    pub fn state(&self, id: u64) -> Option<&NavState> {
        self.nodes.get(&id).map(|n| &n.state)
    }

    pub fn set_state(&mut self, id: u64, state: NavState) -> Result<(), GraphError> {
        self.nodes.get_mut(&id).ok_or(GraphError::UnknownNode(id))?.state = state;
        Ok(())
    }

    pub fn oldest(&self) -> Option<u64> {
        self.nodes.keys().next().copied()
    }

    pub fn latest(&self) -> Option<u64> {
        self.nodes.keys().next_back().copied()
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    pub fn factor_count(&self, kind: FactorKind) -> usize {
        self.factors.iter().filter(|f| f.kind() == kind).count()
    }

    fn states_of(&self, f: &Factor) -> Vec<&NavState> {
        f.nodes.iter().map(|id| &self.nodes[id].state).collect()
    }

    /// `½ Σ ‖r‖²` over whitened residuals.
    pub fn cost(&self) -> f64 {
        0.5 * self.factors.iter().map(|f| f.error(&self.states_of(f)).norm_squared()).sum::<f64>()
    }

    /// Every node must share a connected component with a prior (or a
    /// marginalization prior).
    pub fn check_connected(&self) -> Result<(), GraphError> {
        let ids: Vec<u64> = self.nodes.keys().copied().collect();
        let pos: HashMap<u64, usize> = ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
        let mut parent: Vec<usize> = (0..ids.len()).collect();
        fn find(p: &mut [usize], mut i: usize) -> usize {
            while p[i] != i {
                p[i] = p[p[i]];
                i = p[i];
            }
            i
        }
        let mut anchors = Vec::new();
        for f in &self.factors {
            let first = pos[&f.nodes[0]];
            for id in &f.nodes[1..] {
                let (a, b) = (find(&mut parent, first), find(&mut parent, pos[id]));
                parent[a] = b;
            }
            if matches!(f.kind(), FactorKind::Prior | FactorKind::Linear) {
                anchors.push(first);
            }
        }
        if anchors.is_empty() {
            return Err(GraphError::NoAnchor);
        }
        let roots: BTreeSet<usize> = anchors.iter().map(|&a| find(&mut parent, a)).collect();
        for (i, id) in ids.iter().enumerate() {
            if !roots.contains(&find(&mut parent, i)) {
                return Err(GraphError::Disconnected(*id));
            }
        }
        Ok(())
    }

    fn build(&self, nodes: &[u64]) -> System {
        let index: HashMap<u64, usize> = nodes.iter().enumerate().map(|(i, id)| (*id, i * NAV_DIM)).collect();
        let n = nodes.len() * NAV_DIM;
        let mut h = DMatrix::zeros(n, n);
        let mut g = DVector::zeros(n);
        for f in &self.factors {
            if !f.nodes.iter().all(|id| index.contains_key(id)) {
                continue;
            }
            let lin = f.linearize(&self.states_of(f));
            for (a, ja) in f.nodes.iter().zip(&lin.jacobians) {
                let oa = index[a];
                let jta = ja.transpose();
                let mut gv = g.rows_mut(oa, NAV_DIM);
                gv += &jta * &lin.residual;
                for (b, jb) in f.nodes.iter().zip(&lin.jacobians) {
                    let ob = index[b];
                    let mut hv = h.view_mut((oa, ob), (NAV_DIM, NAV_DIM));
                    hv += &jta * jb;
                }
            }
        }
        System { index, h, g }
    }

    fn retracted(&self, sys: &System, step: &DVector<f64>) -> BTreeMap<u64, Node> {
        self.nodes
            .iter()
            .map(|(id, n)| {
                let o = sys.index[id];
                let d = NavTangent::from_column_slice(step.rows(o, NAV_DIM).as_slice());
                (*id, Node { stamp: n.stamp, state: n.state.retract(&d) })
            })
            .collect()
    }

    /// Levenberg–Marquardt over all nodes.
    pub fn optimize(&mut self, max_iter: usize, lambda_init: f64) -> Result<OptimizeReport, GraphError> {
        self.check_connected()?;
        let ids: Vec<u64> = self.nodes.keys().copied().collect();
        let mut cost = self.cost();
        let mut report = OptimizeReport { iterations: 0, initial_cost: cost, final_cost: cost, converged: false };
        let mut lambda = lambda_init;
        'outer: for it in 0..max_iter {
            report.iterations = it + 1;
            if cost < 1e-30 {
                report.converged = true;
                break;
            }
            let sys = self.build(&ids);
            let n = sys.h.nrows();
            loop {
                let mut a = sys.h.clone();
                for i in 0..n {
                    a[(i, i)] += lambda * sys.h[(i, i)].max(1e-9);
                }
                let Some(chol) = a.cholesky() else {
                    lambda *= 10.0;
                    if lambda > 1e12 {
                        break 'outer;
                    }
                    continue;
                };
                let step = -chol.solve(&sys.g);
                let step_norm = step.norm();
                let trial = self.retracted(&sys, &step);
                let old = std::mem::replace(&mut self.nodes, trial);
                let new_cost = self.cost();
                if new_cost.is_finite() && new_cost < cost {
                    let rel = (cost - new_cost) / cost;
                    cost = new_cost;
                    lambda = (lambda / 10.0).max(1e-12);
                    if rel < 1e-9 || step_norm < 1e-10 {
                        report.converged = true;
                        break 'outer;
                    }
                    break;
                }
                self.nodes = old;
                if step_norm < 1e-10 {
                    report.converged = true;
                    break 'outer;
                }
                lambda *= 10.0;
                if lambda > 1e12 {
                    break 'outer;
                }
            }
        }
        report.final_cost = cost;
        debug!(
            "optimize: {} iterations, cost {:.6e} -> {:.6e}, converged {}",
            report.iterations, report.initial_cost, report.final_cost, report.converged
        );
        Ok(report)
    }

    /// Marginal covariance of a node's tangent, from the inverse of the
    /// Gauss-Newton Hessian at the current estimate.
    pub fn covariance(&self, id: u64) -> Option<SMatrix<f64, NAV_DIM, NAV_DIM>> {
        let ids: Vec<u64> = self.nodes.keys().copied().collect();
        let sys = self.build(&ids);
        let o = *sys.index.get(&id)?;
        let inv = match sys.h.clone().cholesky() {
            Some(c) => c.inverse(),
            None => pseudo_inverse(&sys.h),
        };
        Some(SMatrix::from_iterator(inv.view((o, o), (NAV_DIM, NAV_DIM)).iter().copied()))
    }

    /// World-frame position covariance of a node.
    pub fn position_covariance(&self, id: u64) -> Option<Matrix3<f64>> {
        let cov = self.covariance(id)?;
        let r = self.nodes[&id].state.pose.rotation_matrix();
        let local: Matrix3<f64> = cov.fixed_view::<3, 3>(nav_idx::POS, nav_idx::POS).into_owned();
        Some(r * local * r.transpose())
    }

    /// Removes the oldest node, replacing its factors by a linear prior on
    /// the nodes they connected it to.
    pub fn marginalize_oldest(&mut self) -> Option<u64> {
        let m = self.oldest()?;
        let (involved, kept): (Vec<Factor>, Vec<Factor>) = std::mem::take(&mut self.factors)
            .into_iter()
            .partition(|f| f.nodes.contains(&m));
        self.factors = kept;
        let neighbors: Vec<u64> = involved
            .iter()
            .flat_map(|f| f.nodes.iter().copied())
            .filter(|id| *id != m)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let mut order = vec![m];
        order.extend(&neighbors);

        let sub = FactorGraph { nodes: order.iter().map(|id| (*id, self.nodes[id])).collect(), factors: involved };
        self.nodes.remove(&m);
        if neighbors.is_empty() {
            return Some(m);
        }
        let sys = sub.build(&order);
        let d = NAV_DIM;
        let n = sys.h.nrows() - d;
        let hmm = sys.h.view((0, 0), (d, d)).into_owned();
        let hmn = sys.h.view((0, d), (d, n)).into_owned();
        let hnn = sys.h.view((d, d), (n, n)).into_owned();
        let gm = sys.g.rows(0, d).into_owned();
        let gn = sys.g.rows(d, n).into_owned();
        let hmm_inv = pseudo_inverse(&hmm);
        let s = &hnn - hmn.transpose() * &hmm_inv * &hmn;
        let b = &gn - hmn.transpose() * &hmm_inv * &gm;

        // ½δᵀSδ + bᵀδ = ½‖Jδ + r0‖² + const with J = √Λ Uᵀ, r0 = √Λ⁻¹ Uᵀ b.
        let eig = SymmetricEigen::new(0.5 * (&s + s.transpose()));
        let l_max = eig.eigenvalues.max();
        let keep: Vec<usize> = (0..n).filter(|&i| eig.eigenvalues[i] > l_max * 1e-12 && eig.eigenvalues[i] > 0.0).collect();
        if keep.is_empty() {
            return Some(m);
        }
        let mut jac = DMatrix::zeros(keep.len(), n);
        let mut r0 = DVector::zeros(keep.len());
        for (row, &i) in keep.iter().enumerate() {
            let sl = eig.eigenvalues[i].sqrt();
            let u = eig.eigenvectors.column(i);
            jac.row_mut(row).copy_from(&(u.transpose() * sl));
            r0[row] = u.dot(&b) / sl;
        }
        let lin: Vec<NavState> = neighbors.iter().map(|id| self.nodes[id].state).collect();
        let dim = keep.len();
        self.factors.push(Factor {
            nodes: neighbors,
            data: FactorData::Linear { lin, jacobian: jac, r0 },
            sqrt_info: DMatrix::identity(dim, dim),
        });
        Some(m)
    }

    /// Marginalizes until at most `window` nodes remain.
    pub fn enforce_window(&mut self, window: usize) -> Vec<u64> {
        let mut out = Vec::new();
        while self.nodes.len() > window.max(1) {
            if let Some(m) = self.marginalize_oldest() {
                out.push(m);
            }
        }
        out
    }
}

fn pseudo_inverse(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(0.5 * (m + m.transpose()));
    let l_max = eig.eigenvalues.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    let mut out = DMatrix::zeros(m.nrows(), m.ncols());
    for i in 0..eig.eigenvalues.len() {
        let l = eig.eigenvalues[i];
        if l > l_max * 1e-12 && l > 0.0 {
            let u = eig.eigenvectors.column(i);
            out += &u * u.transpose() / l;
        }
    }
    out
}

/// Adds a GNSS factor on `node` when the estimated position covariance
/// exceeds the fix covariance (by trace).
pub fn maybe_add_gnss(
    graph: &mut FactorGraph,
    node: u64,
    est_cov: &Matrix3<f64>,
    fix: &GnssFix,
    lever: &Vector3<f64>,
) -> Result<bool, GraphError> {
    if est_cov.trace() <= fix.cov.trace() {
        return Ok(false);
    }
    let f = Factor::gnss(node, *fix, *lever).ok_or(GraphError::InvalidCovariance(FactorKind::Gnss))?;
    graph.add_factor(f)?;
    Ok(true)
}
