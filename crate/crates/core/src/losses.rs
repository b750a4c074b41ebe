//! Translation losses, the hardest-negative triplet matching loss and their
//! aggregation over algorithm pairs. Every loss returns its value together
//! with the gradient w.r.t. the network outputs it was evaluated on.

use crate::error::{Error, Result};
use crate::scalar::Real;
use ndarray::{Array2, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

/// Probabilities are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` inside BCE.
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    /// All |A|^2 translation and matching terms.
    Quadratic,
    /// Only pairs `(i, sigma(i))` for a fresh random permutation per step.
    Linear,
    /// Translation restricted to `i -> i`; matching over all pairs.
    AutoEncoder,
}

impl std::str::FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quadratic" => Ok(LossVariant::Quadratic),
            "linear" => Ok(LossVariant::Linear),
            "auto-encoder" | "auto_encoder" | "autoencoder" => Ok(LossVariant::AutoEncoder),
            other => Err(Error::Config(format!("unknown loss variant '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the matching loss.
    pub alpha: f64,
    /// Triplet margin.
    pub margin: f64,
    pub variant: LossVariant,
    /// Keep the `i = j` matching terms.
    pub include_self_matching: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.1,
            margin: 1.0,
            variant: LossVariant::Quadratic,
            include_self_matching: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::Config(format!("margin must be > 0, got {}", self.margin)));
        }
        Ok(())
    }
}

fn same_shape<T>(a: &ArrayView2<'_, T>, b: &ArrayView2<'_, T>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("shapes differ: {:?} vs {:?}", a.dim(), b.dim())));
    }
    if a.nrows() == 0 {
        return Err(Error::Shape("loss needs at least one row".into()));
    }
    Ok(())
}

/// Mean over rows of the (unsquared) Euclidean prediction error.
///
/// Rows with exactly zero residual get a zero subgradient.
pub fn translation_loss_l2<T: Real>(pred: ArrayView2<'_, T>, target: ArrayView2<'_, T>) -> Result<(T, Array2<T>)> {
    same_shape(&pred, &target)?;
    let b = T::lit(pred.nrows() as f64);
    let mut grad = &pred - &target;
    let mut total = T::zero();
    for mut row in grad.outer_iter_mut() {
        let norm = row.iter().map(|v| *v * *v).sum::<T>().sqrt();
        total += norm;
        if norm > T::zero() {
            let s = T::one() / (norm * b);
            row.mapv_inplace(|v| v * s);
        } else {
            row.fill(T::zero());
        }
    }
    Ok((total / b, grad))
}

/// Binary cross-entropy averaged over rows and coordinates.
pub fn translation_loss_bce<T: Real>(pred: ArrayView2<'_, T>, target: ArrayView2<'_, T>) -> Result<(T, Array2<T>)> {
    same_shape(&pred, &target)?;
    if let Some(t) = target.iter().find(|t| **t != T::zero() && **t != T::one()) {
        return Err(Error::Domain(format!("BCE targets must be 0 or 1, found {t}")));
    }
    let count = T::lit((pred.nrows() * pred.ncols()) as f64);
    let lo = T::lit(BCE_CLAMP);
    let hi = T::one() - lo;
    let mut total = T::zero();
    let mut grad = Array2::zeros(pred.dim());
    Zip::from(&mut grad).and(&pred).and(&target).for_each(|g, &p, &y| {
        let pc = p.max(lo).min(hi);
        total += if y == T::one() { -pc.ln() } else { -(T::one() - pc).ln() };
        *g = if p > lo && p < hi {
            if y == T::one() {
                -T::one() / (pc * count)
            } else {
                T::one() / ((T::one() - pc) * count)
            }
        } else {
            T::zero()
        };
    });
    Ok((total / count, grad))
}

/// Output of [`triplet_loss_hardest`].
#[derive(Clone, Debug)]
pub struct TripletOutput<T> {
    pub value: T,
    pub grad_i: Array2<T>,
    pub grad_j: Array2<T>,
    /// Index in `emb_j` of the hardest negative for each anchor.
    pub hardest: Vec<usize>,
    pub pos: Vec<T>,
    pub neg: Vec<T>,
}

/// For each anchor row of `emb_j`, the closest row `q != p` of `emb_j` to
/// `emb_i[p]`; ties go to the lowest index.
pub fn hardest_negatives<T: Real>(emb_i: ArrayView2<'_, T>, emb_j: ArrayView2<'_, T>) -> Vec<usize> {
    // Squared distances via |a|^2 + |b|^2 - 2 a.b; only the ranking is used.
    let sq_i = emb_i.map_axis(Axis(1), |r| r.dot(&r));
    let sq_j = emb_j.map_axis(Axis(1), |r| r.dot(&r));
    let cross = emb_i.dot(&emb_j.t());
    let two = T::lit(2.0);
    cross
        .outer_iter()
        .enumerate()
        .map(|(p, row)| {
            let mut best = usize::MAX;
            let mut best_d = T::infinity();
            for (q, &c) in row.iter().enumerate() {
                if q == p {
                    continue;
                }
                let d = sq_i[p] + sq_j[q] - two * c;
                if d < best_d {
                    best_d = d;
                    best = q;
                }
            }
            best
        })
        .collect()
}

fn row_dist<T: Real>(a: ndarray::ArrayView1<'_, T>, b: ndarray::ArrayView1<'_, T>) -> T {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (*x - *y) * (*x - *y))
        .sum::<T>()
        .sqrt()
}

/// Triplet margin loss with in-batch hardest negatives.
///
/// Rows `p` of `emb_i` and `emb_j` are corresponding patches. The anchor is
/// `emb_i[p]`, the positive `emb_j[p]`, and the negative the closest
/// `emb_j[q]`, `q != p`. Value is the batch mean of
/// `max(margin + pos - neg, 0)`.
pub fn triplet_loss_hardest<T: Real>(
    emb_i: ArrayView2<'_, T>,
    emb_j: ArrayView2<'_, T>,
    margin: T,
) -> Result<TripletOutput<T>> {
    same_shape(&emb_i, &emb_j)?;
    let b = emb_i.nrows();
    if b < 2 {
        return Err(Error::BatchTooSmall(format!("triplet loss needs >= 2 rows, got {b}")));
    }
    let hardest = hardest_negatives(emb_i, emb_j);
    let bt = T::lit(b as f64);
    let mut grad_i = Array2::zeros(emb_i.dim());
    let mut grad_j = Array2::zeros(emb_j.dim());
    let mut pos = Vec::with_capacity(b);
    let mut neg = Vec::with_capacity(b);
    let mut total = T::zero();
    for p in 0..b {
        let n = hardest[p];
        let anchor = emb_i.row(p);
        let dp = row_dist(anchor, emb_j.row(p));
        let dn = row_dist(anchor, emb_j.row(n));
        pos.push(dp);
        neg.push(dn);
        let term = margin + dp - dn;
        if term <= T::zero() {
            continue;
        }
        total += term;
        if dp > T::zero() {
            let s = T::one() / (dp * bt);
            for k in 0..anchor.len() {
                let d = (anchor[k] - emb_j[[p, k]]) * s;
                grad_i[[p, k]] += d;
                grad_j[[p, k]] -= d;
            }
        }
        if dn > T::zero() {
            let s = T::one() / (dn * bt);
            for k in 0..anchor.len() {
                let d = (anchor[k] - emb_j[[n, k]]) * s;
                grad_i[[p, k]] -= d;
                grad_j[[n, k]] += d;
            }
        }
    }
    Ok(TripletOutput {
        value: total / bt,
        grad_i,
        grad_j,
        hardest,
        pos,
        neg,
    })
}

/// Weight of one `(i, j)` pair in the aggregated objective; the matching
/// weight is applied before `alpha`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairWeight {
    pub src: usize,
    pub dst: usize,
    pub translation: f64,
    pub matching: f64,
}

/// Per-pair weights in lexicographic `(i, j)` order. `sigma` is the
/// permutation used by the linear variant (identity when absent).
pub fn pair_weights(n: usize, cfg: &LossConfig, sigma: Option<&[usize]>) -> Result<Vec<PairWeight>> {
    if n == 0 {
        return Err(Error::Config("need at least one algorithm".into()));
    }
    let identity: Vec<usize> = (0..n).collect();
    let sigma = sigma.unwrap_or(&identity);
    if cfg.variant == LossVariant::Linear {
        let mut seen = vec![false; n];
        if sigma.len() != n || sigma.iter().any(|&s| s >= n || std::mem::replace(&mut seen[s], true)) {
            return Err(Error::Config(format!("{sigma:?} is not a permutation of 0..{n}")));
        }
    }
    let nf = n as f64;
    let in_linear = |i: usize, j: usize| sigma[i] == j;
    let t_weight = |i: usize, j: usize| match cfg.variant {
        LossVariant::Quadratic => 1.0 / (nf * nf),
        LossVariant::AutoEncoder => {
            if i == j {
                1.0 / nf
            } else {
                0.0
            }
        }
        LossVariant::Linear => {
            if in_linear(i, j) {
                1.0 / nf
            } else {
                0.0
            }
        }
    };
    let m_member = |i: usize, j: usize| {
        let base = match cfg.variant {
            LossVariant::Quadratic | LossVariant::AutoEncoder => true,
            LossVariant::Linear => in_linear(i, j),
        };
        base && (cfg.include_self_matching || i != j)
    };
    let m_count = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .filter(|&(i, j)| m_member(i, j))
        .count();
    // Linear normalizes by |A|, the others by |A|^2, over the retained pairs.
    let m_norm = if cfg.include_self_matching {
        match cfg.variant {
            LossVariant::Linear => nf,
            _ => nf * nf,
        }
    } else {
        m_count as f64
    };
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let matching = if m_member(i, j) && m_norm > 0.0 {
                1.0 / m_norm
            } else {
                0.0
            };
            out.push(PairWeight {
                src: i,
                dst: j,
                translation: t_weight(i, j),
                matching,
            });
        }
    }
    Ok(out)
}

/// `L = L^T + alpha * L^M` for per-pair loss matrices indexed `[i][j]`.
pub fn aggregate_losses(
    per_pair_t: &Array2<f64>,
    per_pair_m: &Array2<f64>,
    cfg: &LossConfig,
    sigma: Option<&[usize]>,
) -> Result<f64> {
    let n = per_pair_t.nrows();
    if per_pair_t.dim() != (n, n) || per_pair_m.dim() != (n, n) {
        return Err(Error::Shape("per-pair loss matrices must be |A| x |A|".into()));
    }
    let weights = pair_weights(n, cfg, sigma)?;
    let (mut lt, mut lm) = (0.0, 0.0);
    for w in weights {
        lt += w.translation * per_pair_t[[w.src, w.dst]];
        lm += w.matching * per_pair_m[[w.src, w.dst]];
    }
    Ok(lt + cfg.alpha * lm)
}
