//! Memory banks, contrastive contexts, top-K knowledge mining and the
//! single-view and cross-view contrastive losses.
//!
//! Every loss here has the same shape: with logits `l_0 = z.z_hat / tau` for
//! the augmented positive and `l_i` for the bank entries, and a numerator set
//! `P` that always contains the augmented positive,
//!
//! ```text
//! L = -log( sum_{i in P} exp(l_i) / sum_{all i} exp(l_i) )
//! ```
//!
//! Plain InfoNCE has `P = {0}`. Knowledge mining adds the top-K bank entries.
//! The cross-view term reweights bank logits by the other view's similarities
//! and takes `P` from the other view's top-K.
//!
//! Scalar functions operate on one sample and serve as references; the
//! `batch_*` functions build the same losses on a [`Graph`], averaged over
//! the batch.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::numcore::{logsumexp_slice, Graph, Tensor, TensorError, Var};

const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum ContrastiveError {
    #[error("invalid contrastive config: {0}")]
    Config(String),
    #[error("memory bank is empty")]
    EmptyBank,
    #[error("embedding norm {norm} is not 1 (tolerance {UNIT_TOLERANCE})")]
    NotUnit { norm: f64 },
    #[error("embedding dimension {got} does not match {expected}")]
    Dim { expected: usize, got: usize },
    #[error("top-{k} requested from {n} similarities")]
    TopK { k: usize, n: usize },
    #[error("contexts are misaligned: {0}")]
    Misaligned(String),
    #[error("cross-view loss needs at least 2 views, got {0}")]
    TooFewViews(usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Whether the guiding view's similarities pass gradient in the cross-view term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GuideMode {
    #[default]
    Stopped,
    Flowing,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    pub top_k: usize,
    pub bank_capacity: usize,
    /// Key encoder momentum `alpha`.
    pub momentum: f64,
    pub guide: GuideMode,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            temperature: 0.07,
            top_k: 1,
            bank_capacity: 2048,
            momentum: 0.999,
            guide: GuideMode::Stopped,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<(), ContrastiveError> {
        check_temperature(self.temperature)?;
        if self.bank_capacity == 0 {
            return Err(ContrastiveError::Config("bank capacity must be positive".into()));
        }
        if self.top_k > self.bank_capacity {
            return Err(ContrastiveError::TopK {
                k: self.top_k,
                n: self.bank_capacity,
            });
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(ContrastiveError::Config(format!(
                "momentum must lie in [0, 1], got {}",
                self.momentum
            )));
        }
        Ok(())
    }
}

fn check_temperature(tau: f64) -> Result<(), ContrastiveError> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(ContrastiveError::Config(format!("temperature must be > 0, got {tau}")))
    }
}

fn check_unit(v: &[f64]) -> Result<(), ContrastiveError> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > UNIT_TOLERANCE {
        return Err(ContrastiveError::NotUnit { norm });
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Fixed-capacity FIFO queue of unit embeddings.
///
/// Entries live in ring-buffer slots; a slot index is the bank index used by
/// contexts and top-K. Banks fed the same enqueue schedule have the same
/// sample in the same slot.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    capacity: usize,
    dim: usize,
    storage: Vec<f64>,
    ids: Vec<Option<usize>>,
    len: usize,
    cursor: usize,
}

impl MemoryBank {
    pub fn new(capacity: usize, dim: usize) -> Result<Self, ContrastiveError> {
        if capacity == 0 || dim == 0 {
            return Err(ContrastiveError::Config(format!(
                "bank needs positive capacity and dim, got {capacity} x {dim}"
            )));
        }
        Ok(Self {
            capacity,
            dim,
            storage: Vec::with_capacity(capacity * dim),
            ids: Vec::with_capacity(capacity),
            len: 0,
            cursor: 0,
        })
    }

    /// A full bank of random unit vectors without sample ids.
    pub fn with_random_fill(capacity: usize, dim: usize, rng: &mut impl Rng) -> Result<Self, ContrastiveError> {
        let mut bank = Self::new(capacity, dim)?;
        for _ in 0..capacity {
            let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n == 0.0 {
                v[0] = 1.0;
            } else {
                v.iter_mut().for_each(|x| *x /= n);
            }
            bank.push(&v, None);
        }
        Ok(bank)
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn is_full(&self) -> bool {
        self.len == self.capacity
    }

    /// Embedding in slot `i`.
    pub fn slot(&self, i: usize) -> &[f64] {
        &self.storage[i * self.dim..(i + 1) * self.dim]
    }

    /// Sample ids by slot; `None` for random fill.
    pub fn ids(&self) -> &[Option<usize>] {
        &self.ids
    }

    /// Embeddings oldest first.
    pub fn contents(&self) -> Vec<&[f64]> {
        let start = if self.is_full() { self.cursor } else { 0 };
        (0..self.len).map(|k| self.slot((start + k) % self.capacity)).collect()
    }

    /// Slot-ordered `[len, dim]` matrix.
    pub fn matrix(&self) -> Tensor {
        Tensor::new(vec![self.len, self.dim], self.storage.clone()).expect("sized")
    }

    /// Slot-ordered `[dim, len]` matrix, ready to right-multiply queries.
    pub fn transposed(&self) -> Tensor {
        let mut out = vec![0.0; self.len * self.dim];
        for i in 0..self.len {
            for (d, &v) in self.slot(i).iter().enumerate() {
                out[d * self.len + i] = v;
            }
        }
        Tensor::new(vec![self.dim, self.len], out).expect("sized")
    }

    fn push(&mut self, v: &[f64], id: Option<usize>) {
        if self.len < self.capacity {
            self.storage.extend_from_slice(v);
            self.ids.push(id);
            self.len += 1;
        } else {
            let at = self.cursor * self.dim;
            self.storage[at..at + self.dim].copy_from_slice(v);
            self.ids[self.cursor] = id;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
    }

    /// Enqueues rows of `batch: [B, dim]` in order, evicting the oldest
    /// entries once full. The whole batch is validated before any write.
    pub fn enqueue(&mut self, batch: &Tensor, ids: Option<&[usize]>) -> Result<(), ContrastiveError> {
        if batch.rank() != 2 || batch.shape()[1] != self.dim {
            return Err(ContrastiveError::Dim {
                expected: self.dim,
                got: batch.shape().last().copied().unwrap_or(0),
            });
        }
        let rows = batch.shape()[0];
        if let Some(ids) = ids {
            if ids.len() != rows {
                return Err(ContrastiveError::Misaligned(format!(
                    "{} ids for {rows} embeddings",
                    ids.len()
                )));
            }
        }
        for r in 0..rows {
            check_unit(batch.row(r))?;
        }
        let skip = rows.saturating_sub(self.capacity);
        for r in skip..rows {
            self.push(batch.row(r), ids.map(|ids| ids[r]));
        }
        Ok(())
    }
}

/// Similarities `s_i = z . m_i` against every bank slot.
pub fn compute_context(z: &[f64], bank: &MemoryBank) -> Result<Vec<f64>, ContrastiveError> {
    if bank.is_empty() {
        return Err(ContrastiveError::EmptyBank);
    }
    if z.len() != bank.dim() {
        return Err(ContrastiveError::Dim {
            expected: bank.dim(),
            got: z.len(),
        });
    }
    check_unit(z)?;
    Ok((0..bank.len()).map(|i| dot(z, bank.slot(i))).collect())
}

/// The `k` largest similarities and their indices, largest first; ties go
/// to the lowest index.
pub fn topk_mine(s: &[f64], k: usize) -> Result<(Vec<f64>, Vec<usize>), ContrastiveError> {
    if k > s.len() {
        return Err(ContrastiveError::TopK { k, n: s.len() });
    }
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
    order.truncate(k);
    Ok((order.iter().map(|&i| s[i]).collect(), order))
}

/// `-log(sum_{P} exp / sum_{all} exp)` for the augmented positive logit,
/// bank similarities `sims` and bank positives `positives`, all scaled by
/// `1 / tau`. Evaluated as `log(1 + sum_{i not in P} exp(l_i - lse_P))`,
/// which is never negative.
pub fn context_loss(pos: f64, sims: &[f64], positives: &[usize], tau: f64) -> Result<f64, ContrastiveError> {
    check_temperature(tau)?;
    let mut in_p = vec![false; sims.len()];
    for &i in positives {
        *in_p.get_mut(i).ok_or_else(|| {
            ContrastiveError::Misaligned(format!("positive index {i} outside {} entries", sims.len()))
        })? = true;
    }
    let mut num = Vec::with_capacity(positives.len() + 1);
    num.push(pos / tau);
    num.extend(sims.iter().zip(&in_p).filter(|(_, &p)| p).map(|(s, _)| s / tau));
    let lse_num = logsumexp_slice(&num);
    let rest: f64 = sims
        .iter()
        .zip(&in_p)
        .filter(|(_, &p)| !p)
        .map(|(s, _)| (s / tau - lse_num).exp())
        .sum();
    Ok(rest.ln_1p())
}

fn pair_logit(z: &[f64], z_hat: &[f64]) -> Result<f64, ContrastiveError> {
    if z.len() != z_hat.len() {
        return Err(ContrastiveError::Dim {
            expected: z.len(),
            got: z_hat.len(),
        });
    }
    check_unit(z_hat)?;
    Ok(dot(z, z_hat))
}

/// Instance discrimination against the bank.
pub fn loss_infonce(z: &[f64], z_hat: &[f64], bank: &MemoryBank, tau: f64) -> Result<f64, ContrastiveError> {
    check_temperature(tau)?;
    let s = compute_context(z, bank)?;
    context_loss(pair_logit(z, z_hat)?, &s, &[], tau)
}

/// Single-view loss with the `k` most similar bank entries promoted to
/// positives.
pub fn loss_km(z: &[f64], z_hat: &[f64], bank: &MemoryBank, tau: f64, k: usize) -> Result<f64, ContrastiveError> {
    check_temperature(tau)?;
    let s = compute_context(z, bank)?;
    let (_, positives) = topk_mine(&s, k)?;
    context_loss(pair_logit(z, z_hat)?, &s, &positives, tau)
}

/// Target view `u` learns from source view `v`: bank logits become
/// `s^u_i * s^v_i / tau` and the positives are `v`'s mined set.
pub fn loss_cross_directed(
    z_u: &[f64],
    z_hat_u: &[f64],
    bank_u: &MemoryBank,
    s_v: &[f64],
    positives_v: &[usize],
    tau: f64,
) -> Result<f64, ContrastiveError> {
    check_temperature(tau)?;
    let s_u = compute_context(z_u, bank_u)?;
    if s_v.len() != s_u.len() {
        return Err(ContrastiveError::Misaligned(format!(
            "guide context has {} entries, bank has {}",
            s_v.len(),
            s_u.len()
        )));
    }
    let weighted: Vec<f64> = s_u.iter().zip(s_v).map(|(a, b)| a * b).collect();
    context_loss(pair_logit(z_u, z_hat_u)?, &weighted, positives_v, tau)
}

/// One view's query, key and bank for the scalar cross-view loss.
#[derive(Clone, Copy, Debug)]
pub struct ViewState<'a> {
    pub z: &'a [f64],
    pub z_hat: &'a [f64],
    pub bank: &'a MemoryBank,
}

fn check_aligned(a: &MemoryBank, b: &MemoryBank) -> Result<(), ContrastiveError> {
    if a.len() != b.len() {
        return Err(ContrastiveError::Misaligned(format!(
            "banks hold {} and {} entries",
            a.len(),
            b.len()
        )));
    }
    if let Some(i) = (0..a.len()).find(|&i| a.ids()[i] != b.ids()[i]) {
        return Err(ContrastiveError::Misaligned(format!(
            "slot {i} holds sample {:?} in one bank and {:?} in another",
            a.ids()[i],
            b.ids()[i]
        )));
    }
    Ok(())
}

/// Sum of the directed cross-view loss over all ordered view pairs.
pub fn loss_cross_total(views: &[ViewState<'_>], tau: f64, k: usize) -> Result<f64, ContrastiveError> {
    if views.len() < 2 {
        return Err(ContrastiveError::TooFewViews(views.len()));
    }
    for w in views.windows(2) {
        check_aligned(w[0].bank, w[1].bank)?;
    }
    let contexts = views
        .iter()
        .map(|v| compute_context(v.z, v.bank))
        .collect::<Result<Vec<_>, _>>()?;
    let mut total = 0.0;
    for (u, target) in views.iter().enumerate() {
        for (v, s_v) in contexts.iter().enumerate() {
            if u == v {
                continue;
            }
            let (_, positives) = topk_mine(s_v, k)?;
            total += loss_cross_directed(target.z, target.z_hat, target.bank, s_v, &positives, tau)?;
        }
    }
    Ok(total)
}

/// Places the bank on `g` as a `[dim, len]` constant.
pub fn bind_bank(g: &mut Graph, bank: &MemoryBank) -> Result<Var, ContrastiveError> {
    if bank.is_empty() {
        return Err(ContrastiveError::EmptyBank);
    }
    Ok(g.constant(bank.transposed()))
}

/// `[B, len]` similarities of `z: [B, dim]` against a bound bank.
pub fn batch_similarities(g: &mut Graph, z: Var, bank_t: Var) -> Result<Var, ContrastiveError> {
    Ok(g.matmul(z, bank_t)?)
}

fn row_dots(g: &mut Graph, z: Var, z_hat: Var) -> Result<Var, ContrastiveError> {
    let prod = g.mul(z, z_hat)?;
    let b = g.value(prod).shape()[0];
    let summed = g.sum_axes(prod, &[1])?;
    Ok(g.reshape(summed, &[b, 1])?)
}

/// Mean over rows of the loss with logits `[pos | bank]` and per-row
/// bank positives (sorted ascending, all rows the same length).
fn batch_context_loss(
    g: &mut Graph,
    pos: Var,
    bank_logits: Var,
    positives: &[Vec<usize>],
    tau: f64,
) -> Result<Var, ContrastiveError> {
    check_temperature(tau)?;
    let all = g.concat(&[pos, bank_logits])?;
    let all = g.scale(all, 1.0 / tau);
    let lse_all = g.logsumexp(all)?;
    let index: Vec<Vec<usize>> = positives
        .iter()
        .map(|p| std::iter::once(0).chain(p.iter().map(|i| i + 1)).collect())
        .collect();
    let num = g.gather(all, &index)?;
    let lse_num = g.logsumexp(num)?;
    let per_row = g.sub(lse_all, lse_num)?;
    Ok(g.mean(per_row)?)
}

fn mine_rows(s: &Tensor, k: usize) -> Result<Vec<Vec<usize>>, ContrastiveError> {
    let n = s.shape()[1];
    (0..s.shape()[0])
        .map(|r| {
            let (_, mut idx) = topk_mine(&s.data()[r * n..(r + 1) * n], k)?;
            idx.sort_unstable();
            Ok(idx)
        })
        .collect()
}

/// Batch-mean InfoNCE (`k = 0`) or knowledge-mining loss (`k > 0`).
pub fn batch_km(
    g: &mut Graph,
    z: Var,
    z_hat: Var,
    bank_t: Var,
    tau: f64,
    k: usize,
) -> Result<Var, ContrastiveError> {
    let pos = row_dots(g, z, z_hat)?;
    let sims = batch_similarities(g, z, bank_t)?;
    let positives = mine_rows(g.value(sims), k)?;
    batch_context_loss(g, pos, sims, &positives, tau)
}

pub fn batch_infonce(g: &mut Graph, z: Var, z_hat: Var, bank_t: Var, tau: f64) -> Result<Var, ContrastiveError> {
    batch_km(g, z, z_hat, bank_t, tau, 0)
}

/// Batch-mean directed cross-view loss. `s_v` holds the source view's
/// `[B, len]` similarities; pass a constant to stop its gradient.
pub fn batch_cross_directed(
    g: &mut Graph,
    z_u: Var,
    z_hat_u: Var,
    bank_t_u: Var,
    s_v: Var,
    tau: f64,
    k: usize,
) -> Result<Var, ContrastiveError> {
    let pos = row_dots(g, z_u, z_hat_u)?;
    let s_u = batch_similarities(g, z_u, bank_t_u)?;
    if g.value(s_u).shape() != g.value(s_v).shape() {
        return Err(ContrastiveError::Misaligned(format!(
            "guide similarities {:?} vs target {:?}",
            g.value(s_v).shape(),
            g.value(s_u).shape()
        )));
    }
    let positives = mine_rows(g.value(s_v), k)?;
    let weighted = g.mul(s_u, s_v)?;
    batch_context_loss(g, pos, weighted, &positives, tau)
}

/// Graph handles for one view in the batch cross-view loss.
#[derive(Clone, Copy, Debug)]
pub struct BatchView {
    pub z: Var,
    pub z_hat: Var,
    pub bank_t: Var,
}

/// Per-target cross-view losses: entry `u` sums the directed terms that
/// train view `u`, one for each other view acting as guide.
pub fn batch_cross_terms(
    g: &mut Graph,
    views: &[BatchView],
    tau: f64,
    k: usize,
    guide: GuideMode,
) -> Result<Vec<Var>, ContrastiveError> {
    if views.len() < 2 {
        return Err(ContrastiveError::TooFewViews(views.len()));
    }
    let mut guides = Vec::with_capacity(views.len());
    for v in views {
        let s = batch_similarities(g, v.z, v.bank_t)?;
        guides.push(match guide {
            GuideMode::Flowing => s,
            GuideMode::Stopped => {
                let frozen = g.value(s).clone();
                g.constant(frozen)
            }
        });
    }
    let mut per_target = Vec::with_capacity(views.len());
    for (u, target) in views.iter().enumerate() {
        let mut acc: Option<Var> = None;
        for (v, &s_v) in guides.iter().enumerate() {
            if u == v {
                continue;
            }
            let term = batch_cross_directed(g, target.z, target.z_hat, target.bank_t, s_v, tau, k)?;
            acc = Some(match acc {
                Some(t) => g.add(t, term)?,
                None => term,
            });
        }
        per_target.push(acc.expect("at least one other view"));
    }
    Ok(per_target)
}

/// Sum of [`batch_cross_directed`] over all ordered view pairs.
pub fn batch_cross_total(
    g: &mut Graph,
    views: &[BatchView],
    tau: f64,
    k: usize,
    guide: GuideMode,
) -> Result<Var, ContrastiveError> {
    let terms = batch_cross_terms(g, views, tau, k, guide)?;
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok(total)
}
