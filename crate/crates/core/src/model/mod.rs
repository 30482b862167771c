//! Small pre-norm transformer whose feed-forward sublayer is a dense MLP, a
//! standard MoE or a butterfly MoE, plus its optimiser and training loop.

mod config;
mod optim;
mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::moe::{leaf, MoELayer, MoEVars, RoutingStats, StandardMoELayer, StandardMoEVars};
use crate::scalar::Real;
use crate::tasks::TaskSample;

pub use config::{ModelConfig, Variant};
pub use optim::AdamW;
pub use optim::clip_global_norm;
pub use train::{datasets, evaluate, expert_similarities, peak_memory_bytes, timed, train, EpochRecord, Evaluation, TrainReport};

const LN_EPS: f64 = 1e-5;

/// Whether a tensor is a weight matrix (decayed) or a set of rotation angles.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Angles,
}

/// Feed-forward sublayer of one block.
#[derive(Debug, Clone, PartialEq)]
pub enum Ffn<T> {
    Dense {
        /// `[d_model × h]`.
        w1: Tensor<T>,
        /// `[h × d_model]`.
        w2: Tensor<T>,
    },
    Standard {
        moe: StandardMoELayer<T>,
        /// Shared `[d_ff × d_model]` down-projection.
        down: Tensor<T>,
    },
    Butterfly {
        moe: MoELayer<T>,
        /// Shared `[d_ff × d_model]` down-projection.
        down: Tensor<T>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub ffn: Ffn<T>,
}

/// Token and positional embeddings, `n_blocks` pre-norm blocks, a final
/// norm and the vocabulary projection.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    pub tok_emb: Tensor<T>,
    pub pos_emb: Tensor<T>,
    pub blocks: Vec<Block<T>>,
    pub out: Tensor<T>,
}

enum BoundFfn {
    Dense { w1: Var, w2: Var },
    Standard { moe: StandardMoEVars, down: Var },
    Butterfly { moe: MoEVars, down: Var },
}

struct BoundBlock {
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    ffn: BoundFfn,
}

/// A model's tensors placed on one graph, in [`Model::visit_params`] order.
pub struct Bound {
    tok: Var,
    pos: Var,
    blocks: Vec<BoundBlock>,
    out: Var,
}

impl Bound {
    pub fn vars(&self) -> Vec<Var> {
        let mut v = vec![self.tok, self.pos];
        for b in &self.blocks {
            v.extend([b.wq, b.wk, b.wv, b.wo]);
            match &b.ffn {
                BoundFfn::Dense { w1, w2 } => v.extend([*w1, *w2]),
                BoundFfn::Standard { moe, down } => v.extend([moe.gate, moe.experts, *down]),
                BoundFfn::Butterfly { moe, down } => v.extend([moe.gate, moe.substrate, moe.theta, moe.phi, *down]),
            }
        }
        v.push(self.out);
        v
    }
}

/// Recorded forward pass over a batch.
pub struct Forward {
    /// `[batch·seq_len × vocab]`.
    pub logits: Var,
    /// Sum of the blocks' weighted balance terms, if any block routes.
    pub balance: Option<Var>,
    pub stats: Vec<RoutingStats>,
    /// Normalised inputs of each block's feed-forward sublayer.
    pub ffn_inputs: Vec<Var>,
}

/// Loss of a batch of task samples.
pub struct BatchLoss {
    /// Cross-entropy plus balance terms.
    pub total: Var,
    pub ce: Var,
    /// Target-position logits `[batch·task_len × vocab]`.
    pub target_logits: Var,
    pub targets: Vec<usize>,
    pub forward: Forward,
}

fn normal<T: Real>(rng: &mut ChaCha8Rng, shape: [usize; 2], std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| T::from_f64(dist.sample(rng)))
}

impl<T: Real> Model<T> {
    /// Seeded initialisation; the same config always yields the same
    /// parameters.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_model;
        let sd = 1.0 / (d as f64).sqrt();
        let tok_emb = normal(&mut rng, [config.vocab, d], 1.0);
        let pos_emb = normal(&mut rng, [config.seq_len, d], 1.0);
        let mut blocks = Vec::with_capacity(config.n_blocks);
        for _ in 0..config.n_blocks {
            let [wq, wk, wv, wo] = [0; 4].map(|_| normal(&mut rng, [d, d], sd));
            let down_sd = 1.0 / (config.d_ff as f64).sqrt();
            let ffn = match config.variant {
                Variant::Dense => {
                    let h = config.resolved_dense_hidden();
                    Ffn::Dense {
                        w1: normal(&mut rng, [d, h], sd),
                        w2: normal(&mut rng, [h, d], 1.0 / (h as f64).sqrt()),
                    }
                }
                Variant::StandardMoe => Ffn::Standard {
                    moe: StandardMoELayer::new(config.moe(), rng.random())?,
                    down: normal(&mut rng, [config.d_ff, d], down_sd),
                },
                Variant::ButterflyMoe => Ffn::Butterfly {
                    moe: MoELayer::new(config.moe(), rng.random())?,
                    down: normal(&mut rng, [config.d_ff, d], down_sd),
                },
            };
            blocks.push(Block { wq, wk, wv, wo, ffn });
        }
        let out = normal(&mut rng, [d, config.vocab], sd);
        Ok(Model {
            config,
            tok_emb,
            pos_emb,
            blocks,
            out,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Visits every parameter tensor with a stable dotted name.
    pub fn visit_params(&self, mut f: impl FnMut(&str, ParamKind, &Tensor<T>)) {
        use ParamKind::*;
        f("tok_emb", Weight, &self.tok_emb);
        f("pos_emb", Weight, &self.pos_emb);
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, t) in [("wq", &b.wq), ("wk", &b.wk), ("wv", &b.wv), ("wo", &b.wo)] {
                f(&format!("blocks.{i}.attn.{name}"), Weight, t);
            }
            let p = format!("blocks.{i}.ffn");
            match &b.ffn {
                Ffn::Dense { w1, w2 } => {
                    f(&format!("{p}.w1"), Weight, w1);
                    f(&format!("{p}.w2"), Weight, w2);
                }
                Ffn::Standard { moe, down } => {
                    f(&format!("{p}.gate"), Weight, moe.gate());
                    f(&format!("{p}.experts"), Weight, moe.experts());
                    f(&format!("{p}.down"), Weight, down);
                }
                Ffn::Butterfly { moe, down } => {
                    f(&format!("{p}.gate"), Weight, moe.gate());
                    f(&format!("{p}.substrate"), Weight, moe.latent());
                    f(&format!("{p}.theta"), Angles, moe.theta());
                    f(&format!("{p}.phi"), Angles, moe.phi());
                    f(&format!("{p}.down"), Weight, down);
                }
            }
        }
        f("out", Weight, &self.out);
    }

    /// Mutable counterpart of [`visit_params`](Self::visit_params), same order.
    pub fn visit_params_mut(&mut self, mut f: impl FnMut(&str, ParamKind, &mut Tensor<T>)) {
        use ParamKind::*;
        f("tok_emb", Weight, &mut self.tok_emb);
        f("pos_emb", Weight, &mut self.pos_emb);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (name, t) in [("wq", &mut b.wq), ("wk", &mut b.wk), ("wv", &mut b.wv), ("wo", &mut b.wo)] {
                f(&format!("blocks.{i}.attn.{name}"), Weight, t);
            }
            let p = format!("blocks.{i}.ffn");
            match &mut b.ffn {
                Ffn::Dense { w1, w2 } => {
                    f(&format!("{p}.w1"), Weight, w1);
                    f(&format!("{p}.w2"), Weight, w2);
                }
                Ffn::Standard { moe, down } => {
                    let [gate, experts] = moe.tensors_mut();
                    f(&format!("{p}.gate"), Weight, gate);
                    f(&format!("{p}.experts"), Weight, experts);
                    f(&format!("{p}.down"), Weight, down);
                }
                Ffn::Butterfly { moe, down } => {
                    let [gate, substrate, theta, phi] = moe.tensors_mut();
                    f(&format!("{p}.gate"), Weight, gate);
                    f(&format!("{p}.substrate"), Weight, substrate);
                    f(&format!("{p}.theta"), Angles, theta);
                    f(&format!("{p}.phi"), Angles, phi);
                    f(&format!("{p}.down"), Weight, down);
                }
            }
        }
        f("out", Weight, &mut self.out);
    }

    /// `(name, element count)` for every parameter tensor.
    pub fn param_census(&self) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        self.visit_params(|name, _, t| out.push((name.to_string(), t.len())));
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_census().iter().map(|(_, n)| n).sum()
    }

    /// Butterfly MoE layers, in block order.
    pub fn butterfly_layers(&self) -> impl Iterator<Item = &MoELayer<T>> {
        self.blocks.iter().filter_map(|b| match &b.ffn {
            Ffn::Butterfly { moe, .. } => Some(moe),
            _ => None,
        })
    }

    /// Places every parameter on `g`.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let tok = leaf(g, &self.tok_emb, trainable);
        let pos = leaf(g, &self.pos_emb, trainable);
        let blocks = self
            .blocks
            .iter()
            .map(|b| {
                let [wq, wk, wv, wo] = [&b.wq, &b.wk, &b.wv, &b.wo].map(|t| leaf(g, t, trainable));
                let ffn = match &b.ffn {
                    Ffn::Dense { w1, w2 } => BoundFfn::Dense {
                        w1: leaf(g, w1, trainable),
                        w2: leaf(g, w2, trainable),
                    },
                    Ffn::Standard { moe, down } => BoundFfn::Standard {
                        moe: moe.register(g, trainable),
                        down: leaf(g, down, trainable),
                    },
                    Ffn::Butterfly { moe, down } => BoundFfn::Butterfly {
                        moe: moe.register(g, trainable),
                        down: leaf(g, down, trainable),
                    },
                };
                BoundBlock { wq, wk, wv, wo, ffn }
            })
            .collect();
        let out = leaf(g, &self.out, trainable);
        Bound { tok, pos, blocks, out }
    }

    /// Forward pass over `batch` contexts of exactly `seq_len` tokens each,
    /// concatenated in `ids`.
    pub fn forward(&self, g: &mut Graph<T>, bound: &Bound, ids: &[usize]) -> Result<Forward> {
        let s = self.config.seq_len;
        if ids.is_empty() || !ids.len().is_multiple_of(s) {
            return Err(Error::shape("model forward", &[ids.len()], &[s]));
        }
        let batch = ids.len() / s;
        let positions: Vec<usize> = (0..ids.len()).map(|i| i % s).collect();
        let tok = g.embedding(ids, bound.tok)?;
        let pos = g.embedding(&positions, bound.pos)?;
        let mut x = g.add(tok, pos)?;
        let mut balance: Option<Var> = None;
        let mut stats = Vec::new();
        let mut ffn_inputs = Vec::new();
        for (block, b) in self.blocks.iter().zip(&bound.blocks) {
            let h = g.layernorm(x, LN_EPS);
            let q = g.matmul(h, b.wq)?;
            let k = g.matmul(h, b.wk)?;
            let v = g.matmul(h, b.wv)?;
            let a = g.causal_attention(q, k, v, batch, s, self.config.n_heads)?;
            let a = g.matmul(a, b.wo)?;
            x = g.add(x, a)?;

            let h = g.layernorm(x, LN_EPS);
            ffn_inputs.push(h);
            let f = match (&block.ffn, &b.ffn) {
                (Ffn::Dense { .. }, BoundFfn::Dense { w1, w2 }) => {
                    let u = g.matmul(h, *w1)?;
                    let u = g.relu(u);
                    g.matmul(u, *w2)?
                }
                (Ffn::Standard { moe, .. }, BoundFfn::Standard { moe: vars, down }) => {
                    let o = moe.forward_graph(g, vars, h)?;
                    stats.push(o.stats);
                    balance = Some(match balance {
                        Some(acc) => g.add(acc, o.balance)?,
                        None => o.balance,
                    });
                    let u = g.relu(o.y);
                    g.matmul(u, *down)?
                }
                (Ffn::Butterfly { moe, .. }, BoundFfn::Butterfly { moe: vars, down }) => {
                    let o = moe.forward_graph(g, vars, h)?;
                    stats.push(o.stats);
                    balance = Some(match balance {
                        Some(acc) => g.add(acc, o.balance)?,
                        None => o.balance,
                    });
                    let u = g.relu(o.y);
                    g.matmul(u, *down)?
                }
                _ => return Err(Error::config("bound graph does not belong to this model")),
            };
            x = g.add(x, f)?;
        }
        let h = g.layernorm(x, LN_EPS);
        let logits = g.matmul(h, bound.out)?;
        Ok(Forward {
            logits,
            balance,
            stats,
            ffn_inputs,
        })
    }

    /// Teacher-forced loss on the target positions of `samples`.
    pub fn batch_loss(&self, g: &mut Graph<T>, bound: &Bound, samples: &[&TaskSample]) -> Result<BatchLoss> {
        let s = self.config.seq_len;
        let n = self.config.task_len();
        let mut ids = Vec::with_capacity(samples.len() * s);
        let mut rows = Vec::with_capacity(samples.len() * n);
        let mut targets = Vec::with_capacity(samples.len() * n);
        for (b, sample) in samples.iter().enumerate() {
            let packed = sample.packed();
            if packed.len() != s + 1 || sample.input.len() != n {
                return Err(Error::config(format!(
                    "sample of input length {} does not fit context {s} (expected input length {n})",
                    sample.input.len()
                )));
            }
            ids.extend_from_slice(&packed[..s]);
            // position p predicts packed[p + 1]; targets start after the separator
            for p in n..2 * n {
                rows.push(b * s + p);
                targets.push(packed[p + 1]);
            }
        }
        let forward = self.forward(g, bound, &ids)?;
        let target_logits = g.gather_rows(forward.logits, &rows)?;
        let ce = g.cross_entropy(target_logits, &targets)?;
        let total = match forward.balance {
            Some(b) => g.add(ce, b)?,
            None => ce,
        };
        Ok(BatchLoss {
            total,
            ce,
            target_logits,
            targets,
            forward,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::check;
    use crate::tasks::{generate, Task};

    fn tiny(variant: Variant) -> ModelConfig {
        ModelConfig {
            vocab: 12,
            seq_len: 8,
            d_model: 8,
            d_ff: 16,
            n_blocks: 2,
            n_heads: 2,
            n_experts: 4,
            k: 2,
            layers_in: 3,
            layers_out: 4,
            variant,
            batch: 4,
            ..Default::default()
        }
    }

    #[test]
    fn census_matches_memory_accounting() {
        let c = ModelConfig {
            n_experts: 4,
            ..Default::default()
        };
        let m = Model::<f32>::new(c.clone()).unwrap();
        let census = m.param_census();
        let get = |name: &str| census.iter().find(|(n, _)| n == name).unwrap().1;
        // substrate weights plus d/2·log₂d angles per transform per expert
        let moe = get("blocks.0.ffn.substrate") + get("blocks.0.ffn.theta") + get("blocks.0.ffn.phi");
        assert_eq!(moe, 128 * 64 + 4 * (32 * 6 + 64 * 7));
        assert_eq!(get("blocks.0.ffn.gate"), 64 * 4);
        let total: usize = census.iter().map(|(_, n)| n).sum();
        let attn = 4 * 64 * 64;
        let ffn = c.butterfly_ffn_params();
        assert_eq!(total, 32 * 64 + 16 * 64 + 2 * (attn + ffn) + 64 * 32);
    }

    #[test]
    fn dense_variant_has_no_routing_and_matched_size() {
        let m = Model::<f32>::new(ModelConfig {
            variant: Variant::Dense,
            ..Default::default()
        })
        .unwrap();
        assert!(m.param_census().iter().all(|(n, _)| !n.contains("gate") && !n.contains("theta")));
        let ffn: usize = m.param_census().iter().filter(|(n, _)| n.starts_with("blocks.0.ffn")).map(|(_, c)| c).sum();
        let target = m.config().butterfly_ffn_params() as f64;
        assert!((ffn as f64 - target).abs() / target < 0.01);
    }

    #[test]
    fn same_seed_same_parameters() {
        for v in [Variant::Dense, Variant::StandardMoe, Variant::ButterflyMoe] {
            assert_eq!(Model::<f64>::new(tiny(v)).unwrap(), Model::<f64>::new(tiny(v)).unwrap());
        }
        let other = ModelConfig { seed: 1, ..tiny(Variant::ButterflyMoe) };
        assert_ne!(Model::<f64>::new(tiny(Variant::ButterflyMoe)).unwrap(), Model::<f64>::new(other).unwrap());
    }

    #[test]
    fn bound_vars_follow_visit_order() {
        let m = Model::<f64>::new(tiny(Variant::ButterflyMoe)).unwrap();
        let mut g = Graph::new();
        let bound = m.bind(&mut g, true);
        let mut shapes = Vec::new();
        m.visit_params(|_, _, t| shapes.push(t.shape().to_vec()));
        let bound_shapes: Vec<_> = bound.vars().iter().map(|&v| g.value(v).shape().to_vec()).collect();
        assert_eq!(shapes, bound_shapes);
    }

    #[test]
    fn rejects_mismatched_samples() {
        let m = Model::<f64>::new(tiny(Variant::Dense)).unwrap();
        let data = generate(Task::Copy, 2, 5, 12, 0).unwrap();
        let mut g = Graph::new();
        let bound = m.bind(&mut g, false);
        let refs: Vec<_> = data.iter().collect();
        assert!(matches!(m.batch_loss(&mut g, &bound, &refs), Err(Error::Config(_))));
    }

    /// Whole-model gradient of the dense and standard variants against
    /// finite differences on the tensors that feed the output.
    #[test]
    fn model_gradients_match_finite_differences() {
        for v in [Variant::Dense, Variant::StandardMoe] {
            let m = Model::<f64>::new(tiny(v)).unwrap();
            let data = generate(Task::Reverse, 2, 4, 12, 1).unwrap();
            let mut params = Vec::new();
            m.visit_params(|_, _, t| params.push(t.clone()));
            let (first, last) = (params[0].clone(), params[params.len() - 1].clone());
            let wq = params[2].clone();
            check(
                &[first, wq, last],
                |g, vars| {
                    let mut model = m.clone();
                    model.tok_emb = g.value(vars[0]).clone();
                    model.blocks[0].wq = g.value(vars[1]).clone();
                    model.out = g.value(vars[2]).clone();
                    let mut bound = model.bind(g, false);
                    bound.tok = vars[0];
                    bound.blocks[0].wq = vars[1];
                    bound.out = vars[2];
                    let refs: Vec<_> = data.iter().collect();
                    model.batch_loss(g, &bound, &refs).unwrap().ce
                },
                1e-6,
                1e-4,
            );
        }
    }
}
