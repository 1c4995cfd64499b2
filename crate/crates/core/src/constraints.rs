//! Mini-cluster consistency and spatial smoothing targets and losses.

use std::sync::Arc;

use crate::autodiff::{Tape, Var, WindowIndex};
use crate::error::{Error, Result};
use crate::finch::MiniClusterPartition;
use crate::linalg::{Matrix, Real};

/// Window edges accepted by [`window_index`].
pub const WINDOW_EDGES: [usize; 3] = [3, 5, 7];

/// Differentiable per-mini-cluster mean of the rows of `s`.
pub fn mini_cluster_mean_on<T: Real>(
    tape: &mut Tape<T>,
    s: Var,
    index: Arc<[usize]>,
    groups: usize,
) -> Result<Var> {
    tape.scatter_mean(s, index, groups)
}

pub fn mini_cluster_mean<T: Real>(s: &Matrix<T>, partition: &MiniClusterPartition) -> Result<Matrix<T>> {
    let mut tape = Tape::new();
    let sv = tape.constant(s.clone());
    let m = mini_cluster_mean_on(&mut tape, sv, partition.index().into(), partition.len())?;
    Ok(tape.value(m).clone())
}

/// Sharpened target: `m̃_pj ∝ m_pj² / f_j` with `f_j = Σ_p m_pj`, rows
/// renormalized.
pub fn refine<T: Real>(m: &Matrix<T>) -> Result<Matrix<T>> {
    let (l, k) = m.shape();
    let mut freq = vec![0.0f64; k];
    for p in 0..l {
        for (f, &x) in freq.iter_mut().zip(m.row(p)) {
            *f += x.as_f64();
        }
    }
    if let Some(j) = freq.iter().position(|&f| !(f > 0.0)) {
        return Err(Error::contract(format!("column {j} of the assignment has no mass")));
    }
    let mut out = Matrix::zeros(l, k);
    for p in 0..l {
        let row: Vec<f64> = m
            .row(p)
            .iter()
            .zip(&freq)
            .map(|(&x, f)| x.as_f64() * x.as_f64() / f)
            .collect();
        let total: f64 = row.iter().sum();
        for (o, v) in out.row_mut(p).iter_mut().zip(row) {
            *o = T::of(v / total);
        }
    }
    Ok(out)
}

/// `KL(target ‖ q) = Σ t log t − Σ t log q`, differentiable in `q` only.
/// Zero target entries contribute nothing.
pub fn kl_divergence_on<T: Real>(tape: &mut Tape<T>, target: &Matrix<T>, q: Var) -> Result<Var> {
    if target.shape() != q.shape() {
        return Err(Error::Dimension {
            op: "kl_divergence",
            lhs: target.shape(),
            rhs: q.shape(),
        });
    }
    let entropy = target
        .data()
        .iter()
        .filter(|&&t| t > T::zero())
        .fold(T::zero(), |acc, &t| acc + t * t.ln());
    let t = tape.constant(target.clone());
    let log_q = tape.log(q);
    let cross = tape.hadamard(t, log_q)?;
    let cross = tape.sum(cross);
    let neg = tape.scale(cross, -T::one());
    Ok(tape.add_scalar(neg, entropy))
}

pub fn kl_divergence<T: Real>(target: &Matrix<T>, q: &Matrix<T>) -> Result<f64> {
    let mut tape = Tape::new();
    let qv = tape.constant(q.clone());
    let l = kl_divergence_on(&mut tape, target, qv)?;
    Ok(tape.scalar(l).as_f64())
}

/// Non-local loss `KL(M̃ ‖ M)` with `M` on the tape.
pub fn nonlocal_loss_on<T: Real>(tape: &mut Tape<T>, m: Var, refined: &Matrix<T>) -> Result<Var> {
    kl_divergence_on(tape, refined, m)
}

/// Local loss `KL(F ‖ S)` with `S` on the tape.
pub fn local_loss_on<T: Real>(tape: &mut Tape<T>, s: Var, smoothed: &Matrix<T>) -> Result<Var> {
    kl_divergence_on(tape, smoothed, s)
}

/// Neighbor lists of the `edge × edge` window around each masked pixel,
/// restricted to masked pixels. `coords[i]` is the `(row, col)` of sample `i`.
pub fn window_index(
    coords: &[(usize, usize)],
    width: usize,
    height: usize,
    edge: usize,
) -> Result<WindowIndex> {
    if !WINDOW_EDGES.contains(&edge) {
        return Err(Error::Config(format!("window edge must be 3, 5 or 7, got {edge}")));
    }
    let mut slot = vec![usize::MAX; width * height];
    for (i, &(r, c)) in coords.iter().enumerate() {
        if r >= height || c >= width {
            return Err(Error::contract(format!("pixel ({r}, {c}) outside {height}x{width}")));
        }
        slot[r * width + c] = i;
    }
    let half = edge / 2;
    let mut offsets = Vec::with_capacity(coords.len() + 1);
    let mut neighbors = Vec::new();
    offsets.push(0);
    for &(r, c) in coords {
        for rr in r.saturating_sub(half)..=(r + half).min(height - 1) {
            for cc in c.saturating_sub(half)..=(c + half).min(width - 1) {
                let j = slot[rr * width + cc];
                if j != usize::MAX {
                    neighbors.push(j);
                }
            }
        }
        offsets.push(neighbors.len());
    }
    WindowIndex::new(offsets, neighbors)
}

pub fn spatial_smooth<T: Real>(s: &Matrix<T>, window: &Arc<WindowIndex>) -> Result<Matrix<T>> {
    let mut tape = Tape::new();
    let sv = tape.constant(s.clone());
    let f = tape.masked_mean_filter(sv, window.clone())?;
    Ok(tape.value(f).clone())
}

/// Mini-cluster means `M` of an assignment and their refined targets `M̃`.
#[derive(Clone, Debug, PartialEq)]
pub struct MiniClusterAssignment<T = f32> {
    mean: Matrix<T>,
    refined: Matrix<T>,
}

impl<T: Real> MiniClusterAssignment<T> {
    pub fn from_assignment(s: &Matrix<T>, partition: &MiniClusterPartition) -> Result<Self> {
        let mean = mini_cluster_mean(s, partition)?;
        let refined = refine(&mean)?;
        Ok(MiniClusterAssignment { mean, refined })
    }

    pub fn mean(&self) -> &Matrix<T> {
        &self.mean
    }

    pub fn refined(&self) -> &Matrix<T> {
        &self.refined
    }
}

/// Window-averaged assignment `F`, used as a fixed target.
#[derive(Clone, Debug, PartialEq)]
pub struct SmoothedAssignment<T = f32> {
    smoothed: Matrix<T>,
}

impl<T: Real> SmoothedAssignment<T> {
    pub fn from_assignment(s: &Matrix<T>, window: &Arc<WindowIndex>) -> Result<Self> {
        Ok(SmoothedAssignment {
            smoothed: spatial_smooth(s, window)?,
        })
    }

    pub fn matrix(&self) -> &Matrix<T> {
        &self.smoothed
    }
}
