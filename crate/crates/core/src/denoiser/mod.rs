//! Transformer noise predictor over plan tokens.
//!
//! Tokens are the `H` states of a plan. Each token receives an input projection plus a
//! temporal embedding looked up by its *environment-time offset* (or by token index in
//! the ablation mode), so the network sees how far apart mixed-density tokens are.
//! The diffusion step conditions every block through adaptive layer-norm modulation:
//!
//! ```text
//! c      = MLP(sinusoid(t));  s = silu(c)
//! block: shift₁ scale₁ gate₁ shift₂ scale₂ gate₂ = Linear(s)
//!        h += gate₁ · Attn(LN(h)·(1+scale₁)+shift₁)
//!        h += gate₂ · MLP (LN(h)·(1+scale₂)+shift₂)
//! out    = Linear(LN(h)·(1+scale_f)+shift_f)
//! ```

mod adam;
mod gradcheck;

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::dataset::PlanBatch;
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::nn::{
    gelu, gelu_grad, layer_norm_bwd_acc, layer_norm_fwd, linear_bwd, linear_fwd, silu, silu_grad,
    sinusoid, split_two, Init, Mlp, MlpCache, ParamBuilder, ParamSet, Slot,
};
use crate::scalar::{to_scalar_vec, Scalar};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{grad_check, grad_check_with_hook, GradCheckReport, TensorCheck};

pub const CHECKPOINT_KIND: &str = "denoiser";
const STEP_EMBED_BASE: f64 = 10_000.0;
const MLP_RATIO: usize = 4;
const INIT_STD: f64 = 0.02;

/// What the temporal embedding table is keyed by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedMode {
    /// Absolute environment-time offset of the token.
    #[default]
    Offset,
    /// Token position in the plan, ignoring the schedule.
    Index,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub model_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// State dimension `D` of every token.
    pub token_dim: usize,
    pub max_offset: usize,
    /// Diffusion steps accepted by `forward` are `0..max_diffusion_step`.
    pub max_diffusion_step: usize,
    #[serde(default)]
    pub embed: EmbedMode,
}

impl DenoiserConfig {
    /// model_dim 128, 4 layers, 4 heads.
    pub fn desk_default(token_dim: usize, max_offset: usize, diffusion_steps: usize) -> Self {
        Self {
            model_dim: 128,
            n_layers: 4,
            n_heads: 4,
            token_dim,
            max_offset,
            max_diffusion_step: diffusion_steps + 1,
            embed: EmbedMode::Offset,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model_dim", self.model_dim),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("token_dim", self.token_dim),
            ("max_offset", self.max_offset),
            ("max_diffusion_step", self.max_diffusion_step),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::validation(format!("denoiser {name} must be positive")));
        }
        if self.model_dim % self.n_heads != 0 {
            return Err(Error::validation(format!(
                "model_dim {} is not divisible by n_heads {}",
                self.model_dim, self.n_heads
            )));
        }
        if self.model_dim % 2 != 0 {
            return Err(Error::validation("model_dim must be even"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.n_heads
    }

    /// Number of scalar parameters; depends only on the configuration.
    pub fn param_count(&self) -> usize {
        let (d, dd) = (self.model_dim, self.token_dim);
        let hidden = MLP_RATIO * d;
        let input = dd * d + d;
        let table = (self.max_offset + 1) * d;
        let step = 2 * (d * d + d);
        let block = (d * 6 * d + 6 * d)
            + (d * 3 * d + 3 * d)
            + (d * d + d)
            + (d * hidden + hidden)
            + (hidden * d + d);
        let fin = (d * 2 * d + 2 * d) + (d * dd + dd);
        input + table + step + self.n_layers * block + fin
    }
}

#[derive(Debug, Clone)]
struct BlockSlots {
    ada_w: Slot,
    ada_b: Slot,
    qkv_w: Slot,
    qkv_b: Slot,
    proj_w: Slot,
    proj_b: Slot,
    fc1_w: Slot,
    fc1_b: Slot,
    fc2_w: Slot,
    fc2_b: Slot,
}

#[derive(Debug, Clone)]
struct Slots {
    in_w: Slot,
    in_b: Slot,
    table: Slot,
    step: Mlp,
    blocks: Vec<BlockSlots>,
    fin_ada_w: Slot,
    fin_ada_b: Slot,
    out_w: Slot,
    out_b: Slot,
}

#[derive(Debug, Clone)]
pub struct DenoiserModel<T> {
    config: DenoiserConfig,
    params: ParamSet<T>,
    slots: Slots,
}

struct BlockCache<T> {
    modv: Vec<T>,
    n1: Vec<T>,
    rstd1: Vec<T>,
    u1: Vec<T>,
    qkv: Vec<T>,
    probs: Vec<T>,
    attn: Vec<T>,
    y: Vec<T>,
    n2: Vec<T>,
    rstd2: Vec<T>,
    u2: Vec<T>,
    f1: Vec<T>,
    g: Vec<T>,
    f2: Vec<T>,
}

struct Cache<T> {
    batch: usize,
    horizon: usize,
    keys: Vec<usize>,
    x: Vec<T>,
    step_cache: MlpCache<T>,
    sc: Vec<T>,
    blocks: Vec<BlockCache<T>>,
    fmod: Vec<T>,
    nf: Vec<T>,
    rstdf: Vec<T>,
    uf: Vec<T>,
}

/// Temporal embedding table initialisation: sinusoid with base `4 · max_offset`.
pub fn offset_sinusoid(key: usize, dim: usize, max_offset: usize) -> Vec<f64> {
    sinusoid(key as f64, dim, (4 * max_offset).max(2) as f64)
}

fn modulation<T: Scalar>(modv: &[T], b: usize, chunk: usize, chunks: usize, d: usize) -> &[T] {
    let start = b * chunks * d + chunk * d;
    &modv[start..start + d]
}

/// `u = n·(1+scale_b) + shift_b` for every token row of batch row `b`.
fn modulate<T: Scalar>(n: &[T], modv: &[T], shift: usize, scale: usize, chunks: usize, batch: usize, horizon: usize, d: usize) -> Vec<T> {
    let mut u = vec![T::zero(); n.len()];
    for b in 0..batch {
        let sh = modulation(modv, b, shift, chunks, d);
        let sc = modulation(modv, b, scale, chunks, d);
        for i in 0..horizon {
            let r = (b * horizon + i) * d;
            for j in 0..d {
                u[r + j] = n[r + j] * (T::one() + sc[j]) + sh[j];
            }
        }
    }
    u
}

/// Backward of [`modulate`]: writes d(shift), d(scale) into `dmod` and returns dn.
#[allow(clippy::too_many_arguments)]
fn modulate_bwd<T: Scalar>(du: &[T], n: &[T], modv: &[T], dmod: &mut [T], shift: usize, scale: usize, chunks: usize, batch: usize, horizon: usize, d: usize) -> Vec<T> {
    let mut dn = vec![T::zero(); du.len()];
    for b in 0..batch {
        let sc = modulation(modv, b, scale, chunks, d).to_vec();
        let base = b * chunks * d;
        for i in 0..horizon {
            let r = (b * horizon + i) * d;
            for j in 0..d {
                let g = du[r + j];
                dmod[base + shift * d + j] += g;
                dmod[base + scale * d + j] += g * n[r + j];
                dn[r + j] = g * (T::one() + sc[j]);
            }
        }
    }
    dn
}

impl<T: Scalar> DenoiserModel<T> {
    /// Truncated-normal (σ = 0.02) weights, zero biases, zero modulation and output
    /// layers, temporal table initialised to the offset sinusoid.
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self::build(config, &mut rng))
    }

    /// Every parameter zero, including the temporal table.
    pub fn zeros(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = Self::build(config, &mut rng);
        m.params.values.iter_mut().for_each(|v| *v = T::zero());
        Ok(m)
    }

    /// Every parameter drawn from N(0, std²); used by gradient checks so that no gate is
    /// zero and every path carries gradient.
    pub fn random_dense(config: DenoiserConfig, seed: u64, std: f64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Self::build(config, &mut rng);
        for v in m.params.values.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = T::from_f64_lossy(std * z);
        }
        Ok(m)
    }

    fn build<R: Rng + ?Sized>(config: DenoiserConfig, rng: &mut R) -> Self {
        let d = config.model_dim;
        let dd = config.token_dim;
        let hidden = MLP_RATIO * d;
        let w = || Init::TruncNormal(INIT_STD);
        let mut b = ParamBuilder::<T, R>::new(rng);
        let in_w = b.add("input.weight", &[dd, d], w());
        let in_b = b.add("input.bias", &[d], Init::Zeros);
        let rows = config.max_offset + 1;
        let table_init: Vec<f64> = (0..rows)
            .flat_map(|k| offset_sinusoid(k, d, config.max_offset))
            .collect();
        let table = b.add("temporal_embedding", &[rows, d], Init::Values(table_init));
        let step = Mlp::build(&mut b, "step_embedding", &[d, d, d], Some(INIT_STD), w());
        let blocks = (0..config.n_layers)
            .map(|l| BlockSlots {
                ada_w: b.add(format!("blocks.{l}.modulation.weight"), &[d, 6 * d], Init::Zeros),
                ada_b: b.add(format!("blocks.{l}.modulation.bias"), &[6 * d], Init::Zeros),
                qkv_w: b.add(format!("blocks.{l}.attn.qkv.weight"), &[d, 3 * d], w()),
                qkv_b: b.add(format!("blocks.{l}.attn.qkv.bias"), &[3 * d], Init::Zeros),
                proj_w: b.add(format!("blocks.{l}.attn.proj.weight"), &[d, d], w()),
                proj_b: b.add(format!("blocks.{l}.attn.proj.bias"), &[d], Init::Zeros),
                fc1_w: b.add(format!("blocks.{l}.mlp.fc1.weight"), &[d, hidden], w()),
                fc1_b: b.add(format!("blocks.{l}.mlp.fc1.bias"), &[hidden], Init::Zeros),
                fc2_w: b.add(format!("blocks.{l}.mlp.fc2.weight"), &[hidden, d], w()),
                fc2_b: b.add(format!("blocks.{l}.mlp.fc2.bias"), &[d], Init::Zeros),
            })
            .collect();
        let fin_ada_w = b.add("final.modulation.weight", &[d, 2 * d], Init::Zeros);
        let fin_ada_b = b.add("final.modulation.bias", &[2 * d], Init::Zeros);
        let out_w = b.add("final.output.weight", &[d, dd], Init::Zeros);
        let out_b = b.add("final.output.bias", &[dd], Init::Zeros);
        let params = b.finish();
        debug_assert_eq!(params.len(), config.param_count());
        Self {
            config,
            params,
            slots: Slots {
                in_w,
                in_b,
                table,
                step,
                blocks,
                fin_ada_w,
                fin_ada_b,
                out_w,
                out_b,
            },
        }
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn cast<U: Scalar>(&self) -> DenoiserModel<U> {
        DenoiserModel {
            config: self.config.clone(),
            params: self.params.cast(),
            slots: self.slots.clone(),
        }
    }

    /// Row of the temporal embedding table for an offset (or index) key.
    pub fn embedding_row(&self, key: usize) -> &[T] {
        let d = self.config.model_dim;
        let start = self.slots.table.start + key * d;
        &self.params.values[start..start + d]
    }

    fn keys(&self, offsets: &[usize]) -> Result<Vec<usize>> {
        let keys: Vec<usize> = match self.config.embed {
            EmbedMode::Offset => offsets.to_vec(),
            EmbedMode::Index => (0..offsets.len()).collect(),
        };
        if let Some(&k) = keys.iter().find(|&&k| k > self.config.max_offset) {
            return Err(Error::validation(format!(
                "temporal key {k} exceeds max_offset {}",
                self.config.max_offset
            )));
        }
        Ok(keys)
    }

    fn check_inputs(&self, noisy: &[T], batch: usize, offsets: &[usize], steps: &[usize]) -> Result<()> {
        let h = offsets.len();
        let dd = self.config.token_dim;
        if h == 0 || noisy.len() != batch * h * dd {
            return Err(Error::shape(format!(
                "input has {} values, expected batch {batch} × horizon {h} × dim {dd}",
                noisy.len()
            )));
        }
        if steps.len() != batch {
            return Err(Error::shape(format!(
                "{} diffusion steps for batch of {batch}",
                steps.len()
            )));
        }
        if let Some(&t) = steps.iter().find(|&&t| t >= self.config.max_diffusion_step) {
            return Err(Error::validation(format!(
                "diffusion step {t} >= max_diffusion_step {}",
                self.config.max_diffusion_step
            )));
        }
        Ok(())
    }

    /// Predicted noise, `batch × H × D`.
    pub fn forward(&self, noisy: &[T], batch: usize, offsets: &[usize], steps: &[usize]) -> Result<Vec<T>> {
        self.check_inputs(noisy, batch, offsets, steps)?;
        let keys = self.keys(offsets)?;
        Ok(self.forward_cached(noisy, batch, keys, steps).0)
    }

    fn forward_cached(&self, x: &[T], batch: usize, keys: Vec<usize>, steps: &[usize]) -> (Vec<T>, Cache<T>) {
        let p = &self.params.values;
        let s = &self.slots;
        let cfg = &self.config;
        let (d, dd, horizon) = (cfg.model_dim, cfg.token_dim, keys.len());
        let nh = cfg.n_heads;
        let dh = cfg.head_dim();
        let n = batch * horizon;
        let hidden = MLP_RATIO * d;

        let mut h = linear_fwd(x, n, dd, &p[s.in_w.clone()], &p[s.in_b.clone()], d);
        for b in 0..batch {
            for (i, &k) in keys.iter().enumerate() {
                let row = &mut h[(b * horizon + i) * d..(b * horizon + i + 1) * d];
                let emb = &p[s.table.start + k * d..s.table.start + (k + 1) * d];
                for (o, &e) in row.iter_mut().zip(emb) {
                    *o += e;
                }
            }
        }

        let temb: Vec<f64> = steps
            .iter()
            .flat_map(|&t| sinusoid(t as f64, d, STEP_EMBED_BASE))
            .collect();
        let step_cache = s.step.forward(p, &to_scalar_vec::<T>(&temb), batch);
        let sc: Vec<T> = step_cache.output.iter().map(|&v| silu(v)).collect();

        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for bs in &s.blocks {
            let modv = linear_fwd(&sc, batch, d, &p[bs.ada_w.clone()], &p[bs.ada_b.clone()], 6 * d);
            let (n1, rstd1) = layer_norm_fwd(&h, d);
            let u1 = modulate(&n1, &modv, 0, 1, 6, batch, horizon, d);
            let qkv = linear_fwd(&u1, n, d, &p[bs.qkv_w.clone()], &p[bs.qkv_b.clone()], 3 * d);

            let mut probs = vec![T::zero(); batch * nh * horizon * horizon];
            let mut attn = vec![T::zero(); n * d];
            for b in 0..batch {
                for hd in 0..nh {
                    let pbase = (b * nh + hd) * horizon * horizon;
                    for i in 0..horizon {
                        let qi = &qkv[(b * horizon + i) * 3 * d + hd * dh..][..dh];
                        let prow = &mut probs[pbase + i * horizon..pbase + (i + 1) * horizon];
                        let mut mx = T::neg_infinity();
                        for (j, pv) in prow.iter_mut().enumerate() {
                            let kj = &qkv[(b * horizon + j) * 3 * d + d + hd * dh..][..dh];
                            let dot = qi.iter().zip(kj).fold(T::zero(), |a, (&u, &v)| a + u * v);
                            *pv = dot * scale;
                            mx = mx.max(*pv);
                        }
                        let mut sum = T::zero();
                        for pv in prow.iter_mut() {
                            *pv = (*pv - mx).exp();
                            sum += *pv;
                        }
                        let out = &mut attn[(b * horizon + i) * d + hd * dh..][..dh];
                        for (j, pv) in prow.iter_mut().enumerate() {
                            *pv /= sum;
                            let vj = &qkv[(b * horizon + j) * 3 * d + 2 * d + hd * dh..][..dh];
                            for (o, &v) in out.iter_mut().zip(vj) {
                                *o += *pv * v;
                            }
                        }
                    }
                }
            }
            let y = linear_fwd(&attn, n, d, &p[bs.proj_w.clone()], &p[bs.proj_b.clone()], d);
            for b in 0..batch {
                let gate = modulation(&modv, b, 2, 6, d);
                for i in 0..horizon {
                    let r = (b * horizon + i) * d;
                    for j in 0..d {
                        h[r + j] += gate[j] * y[r + j];
                    }
                }
            }

            let (n2, rstd2) = layer_norm_fwd(&h, d);
            let u2 = modulate(&n2, &modv, 3, 4, 6, batch, horizon, d);
            let f1 = linear_fwd(&u2, n, d, &p[bs.fc1_w.clone()], &p[bs.fc1_b.clone()], hidden);
            let g: Vec<T> = f1.iter().map(|&v| gelu(v)).collect();
            let f2 = linear_fwd(&g, n, hidden, &p[bs.fc2_w.clone()], &p[bs.fc2_b.clone()], d);
            for b in 0..batch {
                let gate = modulation(&modv, b, 5, 6, d);
                for i in 0..horizon {
                    let r = (b * horizon + i) * d;
                    for j in 0..d {
                        h[r + j] += gate[j] * f2[r + j];
                    }
                }
            }
            blocks.push(BlockCache {
                modv,
                n1,
                rstd1,
                u1,
                qkv,
                probs,
                attn,
                y,
                n2,
                rstd2,
                u2,
                f1,
                g,
                f2,
            });
        }

        let fmod = linear_fwd(&sc, batch, d, &p[s.fin_ada_w.clone()], &p[s.fin_ada_b.clone()], 2 * d);
        let (nf, rstdf) = layer_norm_fwd(&h, d);
        let uf = modulate(&nf, &fmod, 0, 1, 2, batch, horizon, d);
        let out = linear_fwd(&uf, n, d, &p[s.out_w.clone()], &p[s.out_b.clone()], dd);
        let cache = Cache {
            batch,
            horizon,
            keys,
            x: x.to_vec(),
            step_cache,
            sc,
            blocks,
            fmod,
            nf,
            rstdf,
            uf,
        };
        (out, cache)
    }

    fn backward(&self, cache: &Cache<T>, dout: &[T]) -> Vec<T> {
        let p = &self.params.values;
        let s = &self.slots;
        let cfg = &self.config;
        let (d, dd) = (cfg.model_dim, cfg.token_dim);
        let (batch, horizon) = (cache.batch, cache.horizon);
        let n = batch * horizon;
        let nh = cfg.n_heads;
        let hdim = cfg.head_dim();
        let hidden = MLP_RATIO * d;
        let mut g = self.params.zeros_like();

        // Final layer.
        let duf = {
            let (gw, gb) = split_two(&mut g, s.out_w.clone(), s.out_b.clone());
            linear_bwd(&cache.uf, dout, n, d, dd, &p[s.out_w.clone()], gw, gb, true).unwrap()
        };
        let mut dfmod = vec![T::zero(); batch * 2 * d];
        let dnf = modulate_bwd(&duf, &cache.nf, &cache.fmod, &mut dfmod, 0, 1, 2, batch, horizon, d);
        let mut dh = vec![T::zero(); n * d];
        layer_norm_bwd_acc(&dnf, &cache.nf, &cache.rstdf, d, &mut dh);
        let mut dsc = {
            let (gw, gb) = split_two(&mut g, s.fin_ada_w.clone(), s.fin_ada_b.clone());
            linear_bwd(&cache.sc, &dfmod, batch, d, 2 * d, &p[s.fin_ada_w.clone()], gw, gb, true)
                .unwrap()
        };

        let scale = T::one() / T::from_usize(hdim).unwrap().sqrt();
        for (bs, bc) in s.blocks.iter().zip(&cache.blocks).rev() {
            let mut dmod = vec![T::zero(); batch * 6 * d];

            // MLP branch: h2 = h1 + gate2 · f2.
            let mut df2 = vec![T::zero(); n * d];
            for b in 0..batch {
                let gate = modulation(&bc.modv, b, 5, 6, d);
                for i in 0..horizon {
                    let r = (b * horizon + i) * d;
                    for j in 0..d {
                        dmod[b * 6 * d + 5 * d + j] += dh[r + j] * bc.f2[r + j];
                        df2[r + j] = dh[r + j] * gate[j];
                    }
                }
            }
            let dgelu = {
                let (gw, gb) = split_two(&mut g, bs.fc2_w.clone(), bs.fc2_b.clone());
                linear_bwd(&bc.g, &df2, n, hidden, d, &p[bs.fc2_w.clone()], gw, gb, true).unwrap()
            };
            let df1: Vec<T> = dgelu
                .iter()
                .zip(&bc.f1)
                .map(|(&gv, &z)| gv * gelu_grad(z))
                .collect();
            let du2 = {
                let (gw, gb) = split_two(&mut g, bs.fc1_w.clone(), bs.fc1_b.clone());
                linear_bwd(&bc.u2, &df1, n, d, hidden, &p[bs.fc1_w.clone()], gw, gb, true).unwrap()
            };
            let dn2 = modulate_bwd(&du2, &bc.n2, &bc.modv, &mut dmod, 3, 4, 6, batch, horizon, d);
            layer_norm_bwd_acc(&dn2, &bc.n2, &bc.rstd2, d, &mut dh);

            // Attention branch: h1 = h0 + gate1 · y.
            let mut dy = vec![T::zero(); n * d];
            for b in 0..batch {
                let gate = modulation(&bc.modv, b, 2, 6, d);
                for i in 0..horizon {
                    let r = (b * horizon + i) * d;
                    for j in 0..d {
                        dmod[b * 6 * d + 2 * d + j] += dh[r + j] * bc.y[r + j];
                        dy[r + j] = dh[r + j] * gate[j];
                    }
                }
            }
            let dattn = {
                let (gw, gb) = split_two(&mut g, bs.proj_w.clone(), bs.proj_b.clone());
                linear_bwd(&bc.attn, &dy, n, d, d, &p[bs.proj_w.clone()], gw, gb, true).unwrap()
            };
            let mut dqkv = vec![T::zero(); n * 3 * d];
            let mut dp = vec![T::zero(); horizon];
            for b in 0..batch {
                for hd in 0..nh {
                    let pbase = (b * nh + hd) * horizon * horizon;
                    for i in 0..horizon {
                        let prow = &bc.probs[pbase + i * horizon..pbase + (i + 1) * horizon];
                        let d_o = &dattn[(b * horizon + i) * d + hd * hdim..][..hdim];
                        let mut dot_pdp = T::zero();
                        for j in 0..horizon {
                            let vj = &bc.qkv[(b * horizon + j) * 3 * d + 2 * d + hd * hdim..][..hdim];
                            dp[j] = d_o.iter().zip(vj).fold(T::zero(), |a, (&u, &v)| a + u * v);
                            dot_pdp += prow[j] * dp[j];
                            let dvj = &mut dqkv[(b * horizon + j) * 3 * d + 2 * d + hd * hdim..][..hdim];
                            for (o, &u) in dvj.iter_mut().zip(d_o) {
                                *o += prow[j] * u;
                            }
                        }
                        let qoff = (b * horizon + i) * 3 * d + hd * hdim;
                        for j in 0..horizon {
                            let ds = prow[j] * (dp[j] - dot_pdp) * scale;
                            if ds == T::zero() {
                                continue;
                            }
                            let koff = (b * horizon + j) * 3 * d + d + hd * hdim;
                            for c in 0..hdim {
                                let kv = bc.qkv[koff + c];
                                let qv = bc.qkv[qoff + c];
                                dqkv[qoff + c] += ds * kv;
                                dqkv[koff + c] += ds * qv;
                            }
                        }
                    }
                }
            }
            let du1 = {
                let (gw, gb) = split_two(&mut g, bs.qkv_w.clone(), bs.qkv_b.clone());
                linear_bwd(&bc.u1, &dqkv, n, d, 3 * d, &p[bs.qkv_w.clone()], gw, gb, true).unwrap()
            };
            let dn1 = modulate_bwd(&du1, &bc.n1, &bc.modv, &mut dmod, 0, 1, 6, batch, horizon, d);
            layer_norm_bwd_acc(&dn1, &bc.n1, &bc.rstd1, d, &mut dh);

            let dsc_block = {
                let (gw, gb) = split_two(&mut g, bs.ada_w.clone(), bs.ada_b.clone());
                linear_bwd(&cache.sc, &dmod, batch, d, 6 * d, &p[bs.ada_w.clone()], gw, gb, true)
                    .unwrap()
            };
            for (a, &v) in dsc.iter_mut().zip(&dsc_block) {
                *a += v;
            }
        }

        // Step embedding: sc = silu(c), c = MLP(sinusoid(t)).
        let dc: Vec<T> = dsc
            .iter()
            .zip(&cache.step_cache.output)
            .map(|(&gv, &z)| gv * silu_grad(z))
            .collect();
        s.step.backward(p, &cache.step_cache, &dc, &mut g);

        for b in 0..batch {
            for (i, &k) in cache.keys.iter().enumerate() {
                let src = &dh[(b * horizon + i) * d..(b * horizon + i + 1) * d];
                let dst = &mut g[s.table.start + k * d..s.table.start + (k + 1) * d];
                for (o, &v) in dst.iter_mut().zip(src) {
                    *o += v;
                }
            }
        }
        let (gw, gb) = split_two(&mut g, s.in_w.clone(), s.in_b.clone());
        linear_bwd(&cache.x, &dh, n, dd, d, &p[s.in_w.clone()], gw, gb, false);
        g
    }

    pub fn save(&self, path: &Path, meta: serde_json::Value) -> Result<()> {
        checkpoint::save(path, CHECKPOINT_KIND, &self.config, meta, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = checkpoint::load(path)?;
        ck.expect_kind(CHECKPOINT_KIND)?;
        let config: DenoiserConfig = ck.config()?;
        let mut model = Self::zeros(config)?;
        model.params.load_values(&ck.specs, &ck.values)?;
        Ok(model)
    }
}

/// Mixes clean plans with noise: `x_t = √ᾱ_t x₀ + √(1−ᾱ_t) ε`, anchor tokens kept clean.
fn noised_input<T: Scalar>(batch: &PlanBatch, ns: &NoiseSchedule, steps: &[usize], eps: &[f64]) -> Result<Vec<T>> {
    let row = batch.horizon * batch.dim;
    let mut x = Vec::with_capacity(batch.trajectories.len());
    for b in 0..batch.batch {
        let t = steps[b];
        let ab = ns.alpha_bar(t)?;
        let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
        for i in 0..batch.horizon {
            for j in 0..batch.dim {
                let k = b * row + i * batch.dim + j;
                let v = if batch.anchor_mask[i] {
                    batch.trajectories[k]
                } else {
                    a * batch.trajectories[k] + s * eps[k]
                };
                x.push(T::from_f64_lossy(v));
            }
        }
    }
    Ok(x)
}

fn check_batch(batch: &PlanBatch, eps: &[f64], steps: &[usize]) -> Result<()> {
    if eps.len() != batch.trajectories.len() || steps.len() != batch.batch {
        return Err(Error::shape("noise or step count does not match the batch"));
    }
    if batch.anchor_mask.len() != batch.horizon || batch.anchor_mask.iter().all(|m| *m) {
        return Err(Error::shape("anchor mask must cover the horizon and leave a token free"));
    }
    Ok(())
}

/// Masked ε-prediction loss for explicit steps and noise; returns loss and `dL/dprediction`.
fn masked_mse<T: Scalar>(pred: &[T], batch: &PlanBatch, eps: &[f64]) -> (f64, Vec<T>) {
    let free = batch.anchor_mask.iter().filter(|m| !**m).count();
    let count = (batch.batch * free * batch.dim) as f64;
    let mut loss = 0.0;
    let mut dpred = vec![T::zero(); pred.len()];
    for (k, (&pv, &e)) in pred.iter().zip(eps).enumerate() {
        let i = (k / batch.dim) % batch.horizon;
        if batch.anchor_mask[i] {
            continue;
        }
        let diff = pv.to_f64().unwrap() - e;
        loss += diff * diff;
        dpred[k] = T::from_f64_lossy(2.0 * diff / count);
    }
    (loss / count, dpred)
}

fn non_finite_error<T: Scalar>(loss: f64, pred: &[T], steps: &[usize]) -> Error {
    let max_abs = pred
        .iter()
        .map(|v| v.to_f64().unwrap_or(f64::NAN).abs())
        .fold(0.0_f64, f64::max);
    let nan = pred.iter().filter(|v| !v.is_finite()).count();
    Error::NonFinite(format!(
        "denoising loss {loss}: {nan} non-finite predictions, max |prediction| {max_abs:.3e}, steps {:?}",
        &steps[..steps.len().min(8)]
    ))
}

/// Loss only, for explicit steps and noise.
pub fn loss_with<T: Scalar>(model: &DenoiserModel<T>, batch: &PlanBatch, ns: &NoiseSchedule, steps: &[usize], eps: &[f64]) -> Result<f64> {
    check_batch(batch, eps, steps)?;
    let x = noised_input::<T>(batch, ns, steps, eps)?;
    let pred = model.forward(&x, batch.batch, &batch.offsets, steps)?;
    Ok(masked_mse(&pred, batch, eps).0)
}

/// Loss and exact parameter gradients for explicit steps and noise.
pub fn loss_and_grads_with<T: Scalar>(model: &DenoiserModel<T>, batch: &PlanBatch, ns: &NoiseSchedule, steps: &[usize], eps: &[f64]) -> Result<(f64, Vec<T>)> {
    check_batch(batch, eps, steps)?;
    let x = noised_input::<T>(batch, ns, steps, eps)?;
    model.check_inputs(&x, batch.batch, &batch.offsets, steps)?;
    let keys = model.keys(&batch.offsets)?;
    let (pred, cache) = model.forward_cached(&x, batch.batch, keys, steps);
    let (loss, dpred) = masked_mse(&pred, batch, eps);
    if !loss.is_finite() {
        return Err(non_finite_error(loss, &pred, steps));
    }
    Ok((loss, model.backward(&cache, &dpred)))
}

/// Samples `t ~ U{1..T}` and `ε ~ N(0, I)` per row, then computes the masked ε-MSE and
/// its gradients.
pub fn loss_and_grads<T: Scalar, R: Rng + ?Sized>(model: &DenoiserModel<T>, batch: &PlanBatch, ns: &NoiseSchedule, rng: &mut R) -> Result<(f64, Vec<T>)> {
    let steps: Vec<usize> = (0..batch.batch)
        .map(|_| rng.random_range(1..=ns.steps()))
        .collect();
    let eps: Vec<f64> = (0..batch.trajectories.len())
        .map(|_| StandardNormal.sample(rng))
        .collect();
    loss_and_grads_with(model, batch, ns, &steps, &eps)
}
