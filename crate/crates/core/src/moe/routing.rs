//! Top-k gating and the load-balancing penalty.

use crate::autodiff::{Backward, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Default weight of the load-balancing term.
pub const DEFAULT_LAMBDA_BALANCE: f64 = 0.01;

/// Per-expert routing census of one forward pass.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RoutingStats {
    /// Tokens that selected each expert among their top-k.
    pub counts: Vec<usize>,
    /// Full-softmax gate probability summed over tokens, per expert.
    pub soft_mass: Vec<f64>,
    pub total_tokens: usize,
}

impl RoutingStats {
    pub fn n_experts(&self) -> usize {
        self.counts.len()
    }

    /// Hard routing fractions `n_i / N_total` (each token counted once per
    /// selected expert, so the fractions sum to `k`).
    pub fn hard_fractions(&self) -> Vec<f64> {
        let n = self.total_tokens.max(1) as f64;
        self.counts.iter().map(|&c| c as f64 / n).collect()
    }
}

/// Top-k selection for a batch of tokens.
#[derive(Debug, Clone)]
pub struct Routing<T> {
    pub k: usize,
    pub n_experts: usize,
    /// `[tokens × k]` expert ids, best first.
    pub indices: Vec<usize>,
    /// `[tokens × k]` softmax over the selected logits.
    pub weights: Vec<T>,
    pub stats: RoutingStats,
}

impl<T: Real> Routing<T> {
    pub fn tokens(&self) -> usize {
        self.indices.len() / self.k.max(1)
    }

    pub fn token_experts(&self, t: usize) -> &[usize] {
        &self.indices[t * self.k..(t + 1) * self.k]
    }

    pub fn token_weights(&self, t: usize) -> &[T] {
        &self.weights[t * self.k..(t + 1) * self.k]
    }

    /// Tokens routed to `expert`, with the slot (rank) it occupies for each.
    pub fn assignments(&self, expert: usize) -> Vec<(usize, usize)> {
        (0..self.tokens())
            .filter_map(|t| self.token_experts(t).iter().position(|&e| e == expert).map(|slot| (t, slot)))
            .collect()
    }

    /// Routing weights scattered into a dense `[tokens × n_experts]` tensor.
    pub fn dense_weights(&self) -> Tensor<T> {
        let mut dense = Tensor::zeros([self.tokens(), self.n_experts]);
        for t in 0..self.tokens() {
            for (&e, &w) in self.token_experts(t).iter().zip(self.token_weights(t)) {
                dense.row_mut(t)[e] = w;
            }
        }
        dense
    }
}

/// Selects the `k` largest logits per row (ties go to the lower index) and
/// normalises them with a softmax over exactly those `k`.
pub fn route_logits<T: Real>(logits: &Tensor<T>, k: usize) -> Result<Routing<T>> {
    let n_experts = logits.last_dim();
    if k == 0 || k > n_experts {
        return Err(Error::config(format!("top-k {k} must be in 1..={n_experts}")));
    }
    let tokens = logits.rows();
    let mut indices = Vec::with_capacity(tokens * k);
    let mut weights = Vec::with_capacity(tokens * k);
    let mut stats = RoutingStats {
        counts: vec![0; n_experts],
        soft_mass: vec![0.0; n_experts],
        total_tokens: tokens,
    };
    let mut order: Vec<usize> = (0..n_experts).collect();
    let mut probs = vec![T::zero(); n_experts];
    for t in 0..tokens {
        let row = logits.row(t);
        order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
        let chosen = &order[..k];
        let max = row[chosen[0]];
        let exps: Vec<T> = chosen.iter().map(|&e| (row[e] - max).exp()).collect();
        let total: T = exps.iter().copied().sum();
        for (&e, &x) in chosen.iter().zip(&exps) {
            indices.push(e);
            weights.push(x / total);
            stats.counts[e] += 1;
        }
        probs.copy_from_slice(row);
        crate::autodiff::softmax_row(&mut probs);
        for (m, p) in stats.soft_mass.iter_mut().zip(&probs) {
            *m += p.to_f64();
        }
    }
    Ok(Routing {
        k,
        n_experts,
        indices,
        weights,
        stats,
    })
}

/// `λ · Σ_i (f_i − 1/N_E)²` with `f_i` the normalised soft gate mass.
pub fn load_balance_loss(stats: &RoutingStats, n_experts: usize, lambda: f64) -> f64 {
    let total: f64 = stats.soft_mass.iter().sum();
    if stats.total_tokens == 0 || total <= 0.0 || n_experts == 0 {
        return 0.0;
    }
    let uniform = 1.0 / n_experts as f64;
    lambda * stats.soft_mass.iter().map(|m| (m / total - uniform).powi(2)).sum::<f64>()
}

/// Differentiable load-balancing term from full gate probabilities
/// `[tokens × N_E]`. Rows of `probs` sum to one, so their column means are
/// already the normalised soft masses.
pub fn load_balance_graph<T: Real>(g: &mut Graph<T>, probs: Var, lambda: f64) -> Var {
    let n = g.value(probs).last_dim();
    let frac = g.mean_rows(probs);
    let dev = g.add_scalar(frac, -1.0 / n as f64);
    let sq = g.mul(dev, dev).expect("same shape");
    let total = g.sum(sq);
    g.scale(total, lambda)
}

/// Backward of the renormalised top-k softmax with respect to the logits.
struct TopKSoftmax<T> {
    k: usize,
    indices: Vec<usize>,
    weights: Vec<T>,
}

impl<T: Real> Backward<T> for TopKSoftmax<T> {
    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, g: &Tensor<T>, _needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let mut gl = Tensor::zeros(inputs[0].shape().to_vec());
        for t in 0..inputs[0].rows() {
            let sel = &self.indices[t * self.k..(t + 1) * self.k];
            let w = &self.weights[t * self.k..(t + 1) * self.k];
            let grow = g.row(t);
            let dot: T = sel.iter().zip(w).map(|(&e, &p)| p * grow[e]).sum();
            let out = gl.row_mut(t);
            for (&e, &p) in sel.iter().zip(w) {
                out[e] = p * (grow[e] - dot);
            }
        }
        vec![Some(gl)]
    }
}

/// Records top-k routing on the graph: returns the dense `[tokens × N_E]`
/// routing-weight node (zero for unselected experts) and the routing itself.
pub fn route_graph<T: Real>(g: &mut Graph<T>, logits: Var, k: usize) -> Result<(Var, Routing<T>)> {
    let routing = route_logits(g.value(logits), k)?;
    let dense = routing.dense_weights();
    let op = TopKSoftmax {
        k,
        indices: routing.indices.clone(),
        weights: routing.weights.clone(),
    };
    Ok((g.record(&[logits], dense, op), routing))
}
