//! Mixture-of-Experts layers.
//!
//! [`MoELayer`] holds one latent substrate `W_base` (`d_ff × d_model`), a
//! bias-free gate and, per expert, an input rotation `θ_i` (size `d_model`)
//! and an output rotation `φ_i` (size `d_ff`). Expert `i` computes
//! `B(φ_i) · Q(W_base) · B(θ_i)ᵀ x` without ever forming that matrix.
//! [`StandardMoELayer`] is the baseline with independent dense experts.

mod experts;
pub mod routing;
mod standard;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{matmul_plain, Graph, Tensor, Var};
use crate::butterfly::{self, ButterflyParams};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::ternary::{self, TernaryMatrix};

use experts::Geometry;
pub use routing::{load_balance_loss, route_logits, Routing, RoutingStats, DEFAULT_LAMBDA_BALANCE};

/// Shape and routing hyperparameters of one MoE layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MoEConfig {
    pub d_model: usize,
    pub d_ff: usize,
    pub n_experts: usize,
    pub k: usize,
    /// Depth of the input rotations (`1..=log₂ d_model`).
    pub layers_in: usize,
    /// Depth of the output rotations (`1..=log₂ d_ff`).
    pub layers_out: usize,
    pub lambda_balance: f64,
}

impl MoEConfig {
    /// Full-depth rotations and the default balance weight.
    pub fn new(d_model: usize, d_ff: usize, n_experts: usize, k: usize) -> Self {
        MoEConfig {
            d_model,
            d_ff,
            n_experts,
            k,
            layers_in: butterfly::log2_exact(d_model).unwrap_or(1),
            layers_out: butterfly::log2_exact(d_ff).unwrap_or(1),
            lambda_balance: DEFAULT_LAMBDA_BALANCE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, d, l) in [("d_model", self.d_model, self.layers_in), ("d_ff", self.d_ff, self.layers_out)] {
            let Some(m) = butterfly::log2_exact(d) else {
                return Err(Error::config(format!("{name} = {d} is not a power of two")));
            };
            if l == 0 || l > m {
                return Err(Error::config(format!("rotation depth {l} for {name} = {d} must be in 1..={m}")));
            }
        }
        if self.n_experts == 0 || self.k == 0 || self.k > self.n_experts {
            return Err(Error::config(format!(
                "need n_experts >= k >= 1, got n_experts = {} and k = {}",
                self.n_experts, self.k
            )));
        }
        if !(self.lambda_balance >= 0.0) {
            return Err(Error::config("lambda_balance must be nonnegative"));
        }
        Ok(())
    }

    fn geometry(&self) -> Geometry {
        Geometry {
            d_model: self.d_model,
            d_ff: self.d_ff,
            layers_in: self.layers_in,
            layers_out: self.layers_out,
        }
    }

    /// Rotation angles per expert (input plus output transform).
    pub fn angles_per_expert(&self) -> usize {
        butterfly::expert_param_count(self.d_model, self.layers_in, self.d_ff, self.layers_out)
    }
}

fn normal_tensor<T: Real>(rng: &mut ChaCha8Rng, shape: [usize; 2], std: f64) -> Tensor<T> {
    let normal = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| T::from_f64(normal.sample(rng)))
}

pub(crate) fn leaf<T: Real>(g: &mut Graph<T>, t: &Tensor<T>, trainable: bool) -> Var {
    if trainable {
        g.param(t.clone())
    } else {
        g.constant(t.clone())
    }
}

/// Graph handles of a layer's trainable tensors.
#[derive(Debug, Clone, Copy)]
pub struct MoEVars {
    pub gate: Var,
    pub substrate: Var,
    pub theta: Var,
    pub phi: Var,
}

/// Result of a recorded MoE forward pass.
#[derive(Debug, Clone)]
pub struct MoEOutput {
    /// `[tokens × d_ff]`.
    pub y: Var,
    /// Weighted load-balancing term (scalar).
    pub balance: Var,
    pub stats: RoutingStats,
}

/// Mean pairwise cosine similarity of expert outputs on a probe batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Similarity {
    /// `[N_E × N_E]`, unit diagonal.
    pub matrix: Tensor<f64>,
    /// Probe tokens dropped because some expert mapped them to zero.
    pub excluded: usize,
}

/// MoE layer whose experts are rotations of one ternary substrate.
#[derive(Debug, Clone, PartialEq)]
pub struct MoELayer<T> {
    config: MoEConfig,
    /// `[d_model × N_E]`.
    gate: Tensor<T>,
    /// Latent full-precision `W_base`, `[d_ff × d_model]`.
    latent: Tensor<T>,
    /// `[N_E × L_in·d_model/2]`, one stage-major angle row per expert.
    theta: Tensor<T>,
    /// `[N_E × L_out·d_ff/2]`.
    phi: Tensor<T>,
    frozen: Option<TernaryMatrix>,
}

impl<T: Real> MoELayer<T> {
    /// Seeded initialisation: gate and substrate from `N(0, 1/d_model)`,
    /// every expert's angles from an independent seed.
    pub fn new(config: MoEConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 1.0 / (config.d_model as f64).sqrt();
        let gate = normal_tensor(&mut rng, [config.d_model, config.n_experts], std);
        let latent = normal_tensor(&mut rng, [config.d_ff, config.d_model], std);
        let geo = config.geometry();
        let mut theta = Vec::with_capacity(config.n_experts * geo.in_params());
        let mut phi = Vec::with_capacity(config.n_experts * geo.out_params());
        for _ in 0..config.n_experts {
            let (si, so): (u64, u64) = (rng.random(), rng.random());
            theta.extend_from_slice(ButterflyParams::<T>::init(config.d_model, config.layers_in, si)?.angles());
            phi.extend_from_slice(ButterflyParams::<T>::init(config.d_ff, config.layers_out, so)?.angles());
        }
        Ok(MoELayer {
            config,
            gate,
            latent,
            theta: Tensor::new([config.n_experts, geo.in_params()], theta)?,
            phi: Tensor::new([config.n_experts, geo.out_params()], phi)?,
            frozen: None,
        })
    }

    /// Assembles a layer from explicit tensors (checkpoint loading).
    pub fn from_parts(config: MoEConfig, gate: Tensor<T>, latent: Tensor<T>, theta: Tensor<T>, phi: Tensor<T>) -> Result<Self> {
        config.validate()?;
        let geo = config.geometry();
        let expect: [(&Tensor<T>, [usize; 2]); 4] = [
            (&gate, [config.d_model, config.n_experts]),
            (&latent, [config.d_ff, config.d_model]),
            (&theta, [config.n_experts, geo.in_params()]),
            (&phi, [config.n_experts, geo.out_params()]),
        ];
        for (t, shape) in expect {
            if t.shape() != shape {
                return Err(Error::shape("moe layer", t.shape(), &shape));
            }
        }
        Ok(MoELayer {
            config,
            gate,
            latent,
            theta,
            phi,
            frozen: None,
        })
    }

    pub fn config(&self) -> &MoEConfig {
        &self.config
    }

    pub fn gate(&self) -> &Tensor<T> {
        &self.gate
    }

    pub fn latent(&self) -> &Tensor<T> {
        &self.latent
    }

    pub fn theta(&self) -> &Tensor<T> {
        &self.theta
    }

    pub fn phi(&self) -> &Tensor<T> {
        &self.phi
    }

    /// Trainable tensors in the order gate, substrate, θ stack, φ stack.
    pub fn tensors_mut(&mut self) -> [&mut Tensor<T>; 4] {
        self.frozen = None;
        [&mut self.gate, &mut self.latent, &mut self.theta, &mut self.phi]
    }

    /// Freezes the current quantization of the substrate for inference.
    pub fn freeze(&mut self) -> Result<()> {
        self.frozen = Some(ternary::quantize(&self.latent)?);
        Ok(())
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen.is_some()
    }

    /// The frozen substrate, or a fresh quantization of the latent weights.
    pub fn substrate(&self) -> Result<TernaryMatrix> {
        match &self.frozen {
            Some(q) => Ok(q.clone()),
            None => ternary::quantize(&self.latent),
        }
    }

    /// Input and output transforms of expert `i`.
    pub fn expert(&self, i: usize) -> Result<(ButterflyParams<T>, ButterflyParams<T>)> {
        self.check_expert(i)?;
        let c = &self.config;
        Ok((
            ButterflyParams::new(c.d_model, c.layers_in, self.theta.row(i).to_vec())?,
            ButterflyParams::new(c.d_ff, c.layers_out, self.phi.row(i).to_vec())?,
        ))
    }

    pub fn set_expert(&mut self, i: usize, theta: &ButterflyParams<T>, phi: &ButterflyParams<T>) -> Result<()> {
        self.check_expert(i)?;
        if theta.angles().len() != self.theta.last_dim() || phi.angles().len() != self.phi.last_dim() {
            return Err(Error::shape(
                "set_expert",
                &[theta.angles().len(), phi.angles().len()],
                &[self.theta.last_dim(), self.phi.last_dim()],
            ));
        }
        self.theta.row_mut(i).copy_from_slice(theta.angles());
        self.phi.row_mut(i).copy_from_slice(phi.angles());
        Ok(())
    }

    fn check_expert(&self, i: usize) -> Result<()> {
        if i >= self.config.n_experts {
            return Err(Error::Index {
                op: "expert",
                index: i,
                size: self.config.n_experts,
            });
        }
        Ok(())
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.last_dim() != self.config.d_model || x.shape().is_empty() {
            return Err(Error::shape("moe_forward", x.shape(), &[self.config.d_model]));
        }
        Ok(())
    }

    /// Top-k routing of every row of `x[..., d_model]`.
    pub fn route(&self, x: &Tensor<T>) -> Result<Routing<T>> {
        self.check_input(x)?;
        let rows = x.clone().reshape([x.rows(), self.config.d_model])?;
        route_logits(&matmul_plain(&rows, &self.gate)?, self.config.k)
    }

    /// Inference forward pass over `x[..., d_model]`, returning
    /// `y[..., d_ff]` and the routing census.
    pub fn moe_forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, RoutingStats)> {
        let routing = self.route(x)?;
        let substrate = self.substrate()?;
        let (y, _) = experts::forward(self.config.geometry(), x, &routing, &substrate, self.theta.data(), self.phi.data(), false)?;
        let mut shape = x.shape().to_vec();
        *shape.last_mut().expect("checked nonempty") = self.config.d_ff;
        Ok((y.reshape(shape)?, routing.stats))
    }

    /// Adds the layer's tensors to `g`, as gradient-receiving leaves when
    /// `trainable`.
    pub fn register(&self, g: &mut Graph<T>, trainable: bool) -> MoEVars {
        MoEVars {
            gate: leaf(g, &self.gate, trainable),
            substrate: leaf(g, &self.latent, trainable),
            theta: leaf(g, &self.theta, trainable),
            phi: leaf(g, &self.phi, trainable),
        }
    }

    /// Differentiable forward pass on `x[tokens × d_model]`. The substrate is
    /// re-quantized from the latent leaf and trained through the
    /// straight-through estimator.
    pub fn forward_graph(&self, g: &mut Graph<T>, vars: &MoEVars, x: Var) -> Result<MoEOutput> {
        let logits = g.matmul(x, vars.gate)?;
        let (weights, routing) = routing::route_graph(g, logits, self.config.k)?;
        let substrate = ternary::quantize(g.value(vars.substrate))?;
        let geo = self.config.geometry();
        let (y, blocks) = experts::forward(
            geo,
            g.value(x),
            &routing,
            &substrate,
            g.value(vars.theta).data(),
            g.value(vars.phi).data(),
            true,
        )?;
        let op = experts::ButterflyExperts { geo, substrate, blocks };
        let y = g.record(&[x, weights, vars.substrate, vars.theta, vars.phi], y, op);
        let probs = g.softmax(logits, 1)?;
        let balance = routing::load_balance_graph(g, probs, self.config.lambda_balance);
        Ok(MoEOutput {
            y,
            balance,
            stats: routing.stats,
        })
    }

    /// Dense `W_i = B(φ_i) · Q(W_base) · B(θ_i)ᵀ`. Diagnostic only; the
    /// forward pass never builds this.
    pub fn materialize_expert(&self, i: usize) -> Result<Tensor<T>> {
        let (theta, phi) = self.expert(i)?;
        let q = self.substrate()?.values::<T>();
        let left = matmul_plain(&phi.as_dense(), &q)?;
        matmul_plain(&left, &theta.as_dense().transpose()?)
    }

    /// Output of expert `i` on every row of `probe[tokens × d_model]`.
    pub fn expert_output(&self, i: usize, probe: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_expert(i)?;
        self.check_input(probe)?;
        let substrate = self.substrate()?;
        experts::single_expert(self.config.geometry(), probe, &substrate, self.theta.data(), self.phi.data(), i)
    }

    /// Pairwise cosine similarity of expert outputs averaged over probe
    /// tokens, with routing bypassed.
    pub fn expert_similarity(&self, probe: &Tensor<T>) -> Result<Similarity> {
        if probe.is_empty() {
            return Err(Error::config("similarity probe batch is empty"));
        }
        let n_e = self.config.n_experts;
        let outputs = (0..n_e).map(|i| Ok(self.expert_output(i, probe)?.to_f64())).collect::<Result<Vec<_>>>()?;
        cosine_matrix(&outputs)
    }
}

/// Token-averaged cosine similarity between per-expert output batches.
/// Tokens where any expert's output has zero norm are excluded.
pub fn cosine_matrix(outputs: &[Tensor<f64>]) -> Result<Similarity> {
    let n_e = outputs.len();
    let tokens = outputs.first().map_or(0, |o| o.rows());
    let mut sum = vec![0.0; n_e * n_e];
    let mut used = 0usize;
    let mut norms = vec![0.0; n_e];
    for t in 0..tokens {
        for (n, o) in norms.iter_mut().zip(outputs) {
            *n = o.row(t).iter().map(|v| v * v).sum::<f64>().sqrt();
        }
        if norms.contains(&0.0) {
            continue;
        }
        used += 1;
        for i in 0..n_e {
            for j in 0..n_e {
                let dot: f64 = outputs[i].row(t).iter().zip(outputs[j].row(t)).map(|(a, b)| a * b).sum();
                sum[i * n_e + j] += if i == j { 1.0 } else { dot / (norms[i] * norms[j]) };
            }
        }
    }
    if used == 0 {
        return Err(Error::Numeric("every probe token produced a zero expert output".into()));
    }
    let matrix = Tensor::new([n_e, n_e], sum.into_iter().map(|s| s / used as f64).collect())?;
    Ok(Similarity {
        matrix,
        excluded: tokens - used,
    })
}

/// `1 −` mean of the off-diagonal entries of a square similarity matrix.
pub fn diversity_score(similarity: &Tensor<f64>) -> Result<f64> {
    let &[n, m] = similarity.shape() else {
        return Err(Error::shape("diversity_score", similarity.shape(), &[0, 0]));
    };
    if n != m {
        return Err(Error::shape("diversity_score", similarity.shape(), &[n, n]));
    }
    if n < 2 {
        return Err(Error::config("diversity needs at least two experts"));
    }
    Ok(1.0 - mean_off_diagonal(similarity))
}

pub fn mean_off_diagonal(similarity: &Tensor<f64>) -> f64 {
    let n = similarity.last_dim();
    let total: f64 = (0..n * n).filter(|e| e / n != e % n).map(|e| similarity.data()[e]).sum();
    total / (n * (n - 1)).max(1) as f64
}

/// Baseline MoE layer: independent full-precision `d_ff × d_model` experts
/// behind the same gate and routing rule.
#[derive(Debug, Clone, PartialEq)]
pub struct StandardMoELayer<T> {
    config: MoEConfig,
    gate: Tensor<T>,
    /// `[N_E·d_ff × d_model]`, expert `i` at rows `i·d_ff..(i+1)·d_ff`.
    experts: Tensor<T>,
}

/// Graph handles of a baseline layer.
#[derive(Debug, Clone, Copy)]
pub struct StandardMoEVars {
    pub gate: Var,
    pub experts: Var,
}

impl<T: Real> StandardMoELayer<T> {
    pub fn new(config: MoEConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 1.0 / (config.d_model as f64).sqrt();
        let gate = normal_tensor(&mut rng, [config.d_model, config.n_experts], std);
        let experts = normal_tensor(&mut rng, [config.n_experts * config.d_ff, config.d_model], std);
        Ok(StandardMoELayer { config, gate, experts })
    }

    pub fn from_parts(config: MoEConfig, gate: Tensor<T>, experts: Tensor<T>) -> Result<Self> {
        config.validate()?;
        if gate.shape() != [config.d_model, config.n_experts] {
            return Err(Error::shape("standard moe", gate.shape(), &[config.d_model, config.n_experts]));
        }
        if experts.shape() != [config.n_experts * config.d_ff, config.d_model] {
            return Err(Error::shape("standard moe", experts.shape(), &[config.n_experts * config.d_ff, config.d_model]));
        }
        Ok(StandardMoELayer { config, gate, experts })
    }

    pub fn config(&self) -> &MoEConfig {
        &self.config
    }

    pub fn gate(&self) -> &Tensor<T> {
        &self.gate
    }

    pub fn experts(&self) -> &Tensor<T> {
        &self.experts
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<T>; 2] {
        [&mut self.gate, &mut self.experts]
    }

    pub fn register(&self, g: &mut Graph<T>, trainable: bool) -> StandardMoEVars {
        StandardMoEVars {
            gate: leaf(g, &self.gate, trainable),
            experts: leaf(g, &self.experts, trainable),
        }
    }

    pub fn forward_graph(&self, g: &mut Graph<T>, vars: &StandardMoEVars, x: Var) -> Result<MoEOutput> {
        if g.value(x).last_dim() != self.config.d_model {
            return Err(Error::shape("moe_forward", g.value(x).shape(), &[self.config.d_model]));
        }
        let logits = g.matmul(x, vars.gate)?;
        let (weights, routing) = routing::route_graph(g, logits, self.config.k)?;
        let (y, op) = standard::forward(g.value(x), &routing, g.value(vars.experts), self.config.d_ff);
        let y = g.record(&[x, weights, vars.experts], y, op);
        let probs = g.softmax(logits, 1)?;
        let balance = routing::load_balance_graph(g, probs, self.config.lambda_balance);
        Ok(MoEOutput {
            y,
            balance,
            stats: routing.stats,
        })
    }
}
