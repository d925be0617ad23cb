use moe_tensor::nn::{uniform, AttnMask, Linear, Mlp};
use moe_tensor::{Graph, ParamId, ParamKind, ParamStore, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::encoder::EncoderLayer;
use super::head::WaypointHead;
use crate::config::{ModelConfig, SampleMode, HORIZON};
use crate::error::{PlannerError, Result};
use crate::moe::{Expert, MoeBlock, MoeConfig, Routing, RoutingPolicy};
use crate::scene::Command;

/// Divisors bringing the raw ego features (command one-hot, velocity,
/// acceleration) to unit scale.
const EGO_SCALE: [f64; 8] = [1.0, 1.0, 1.0, 1.0, 10.0, 10.0, 4.0, 4.0];

/// How context tokens are mixed with the BEV features at each step.
#[derive(Debug)]
pub enum Mixer {
    Moe(MoeBlock),
    /// One expert applied to every sample, plus the residual.
    Dense(Expert),
}

/// Planning queries of one batch during a rollout.
#[derive(Clone, Debug, Default)]
pub struct PlanningSequence {
    /// `[B, H, d]`; `None` until initialized.
    pub queries: Option<Var>,
    pub filled: usize,
    /// How often the positional embedding was added.
    pub pe_applications: usize,
}

/// Per-batch inputs shared by every step.
#[derive(Clone, Debug)]
pub struct StepContext {
    /// Projected BEV tokens `[B, C, d]`.
    pub bev: Var,
    /// Encoded ego state `[B, d]`.
    pub ego: Var,
    pub commands: Vec<Command>,
    pub batch: usize,
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    /// `[B, 3]` each.
    pub mu: Var,
    pub sigma: Var,
    pub routing: Option<Routing>,
}

#[derive(Clone, Debug)]
pub struct Rollout {
    /// `[B, H, 3]` each. `trajectory` has wrapped headings and, in sample
    /// mode, the drawn noise.
    pub mu: Var,
    pub sigma: Var,
    pub trajectory: Var,
    /// Final planning queries `[B, H, d]`.
    pub queries: Var,
    pub routings: Vec<Routing>,
    pub pe_applications: usize,
}

#[derive(Debug)]
pub struct ArPlanner {
    pub d_model: usize,
    pub bev_proj: Linear,
    pub ego: Mlp,
    pub time_embedding: ParamId,
    pub pos_embedding: ParamId,
    pub start_tokens: ParamId,
    pub encoder: Vec<EncoderLayer>,
    pub mixer: Mixer,
    pub head: WaypointHead,
    pub policy: Box<dyn RoutingPolicy>,
    /// Decode all waypoints in one pass instead of step by step.
    pub one_shot: bool,
}

impl ArPlanner {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cfg: &ModelConfig,
        d_feat: usize,
        policy: Box<dyn RoutingPolicy>,
        dense: bool,
        one_shot: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let d = cfg.d_model;
        let table = |store: &mut ParamStore, rng: &mut R, what: &str| {
            store.add(format!("{name}.{what}"), ParamKind::Embedding, uniform(rng, &[HORIZON, d], 0.1))
        };
        let time_embedding = table(store, rng, "time_embedding");
        let pos_embedding = table(store, rng, "pos_embedding");
        let start_tokens = table(store, rng, "start_tokens");
        let mixer = if dense {
            Mixer::Dense(Expert::new(store, &format!("{name}.dense"), d, cfg.heads, rng))
        } else {
            Mixer::Moe(MoeBlock::new(store, &format!("{name}.moe"), &MoeConfig::from_model(cfg), &cfg.dispatch, rng)?)
        };
        Ok(Self {
            d_model: d,
            bev_proj: Linear::new(store, &format!("{name}.bev_proj"), d_feat, d, rng),
            ego: Mlp::new(store, &format!("{name}.ego"), &[8, d, d], rng),
            time_embedding,
            pos_embedding,
            start_tokens,
            encoder: (0..cfg.encoder_layers)
                .map(|i| EncoderLayer::new(store, &format!("{name}.encoder.{i}"), d, cfg.heads, rng))
                .collect(),
            mixer,
            head: WaypointHead::new(store, &format!("{name}.head"), d, cfg.sigma_floor, rng),
            policy,
            one_shot,
        })
    }

    /// `[B, 8]` raw ego features → `[B, d]`.
    pub fn encode_ego(&self, g: &mut Graph, ego: Var) -> Result<Var> {
        let inv = g.constant(Tensor::new(vec![8], EGO_SCALE.iter().map(|s| 1.0 / s).collect())?);
        let x = g.mul(ego, inv)?;
        Ok(self.ego.forward(g, x)?)
    }

    pub fn context(&self, g: &mut Graph, bev_tokens: Var, ego: Var, commands: &[Command]) -> Result<StepContext> {
        let batch = g.shape(bev_tokens)[0];
        Ok(StepContext {
            bev: self.bev_proj.forward(g, bev_tokens)?,
            ego: self.encode_ego(g, ego)?,
            commands: commands.to_vec(),
            batch,
        })
    }

    /// Start tokens plus positional embedding, the only place the latter
    /// enters the sequence.
    pub fn init_sequence(&self, g: &mut Graph, batch: usize) -> Result<PlanningSequence> {
        let start = g.param(self.start_tokens);
        let pe = g.param(self.pos_embedding);
        let q = g.add(start, pe)?;
        Ok(PlanningSequence {
            queries: Some(g.expand(q, batch)?),
            filled: 0,
            pe_applications: 1,
        })
    }

    /// Runs the encoder with every query restricted to the first
    /// `max(filled, 1)` positions; later positions are passed through.
    pub fn encoder_update(&self, g: &mut Graph, seq: &PlanningSequence) -> Result<Var> {
        let queries = seq
            .queries
            .ok_or_else(|| PlannerError::Sequence("sequence used before initialization".into()))?;
        let active = seq.filled.max(1);
        let mask = AttnMask::key_prefix(HORIZON, HORIZON, &[active])?;
        let mut x = queries;
        for layer in &self.encoder {
            x = layer.forward(g, x, Some(&mask))?;
        }
        if active == HORIZON {
            return Ok(x);
        }
        let head = g.slice(x, 1, 0, active)?;
        let tail = g.slice(queries, 1, active, HORIZON - active)?;
        Ok(g.concat(&[head, tail], 1)?)
    }

    fn time_token(&self, g: &mut Graph, t: usize, batch: usize) -> Result<Var> {
        let te = g.param(self.time_embedding);
        let row = g.slice(te, 0, t, 1)?;
        Ok(g.expand(row, batch)?)
    }

    /// `[TE_t, Q_s, Q_1 … Q_a]` zero-padded to `H + 2` tokens, and the
    /// routing query `TE_t ⊕ Q_s ⊕ Q_a`.
    pub fn build_concat_query(
        &self,
        g: &mut Graph,
        ctx: &StepContext,
        encoded: Var,
        t: usize,
        active: usize,
    ) -> Result<(Var, Var)> {
        let b = ctx.batch;
        let d = self.d_model;
        let te = self.time_token(g, t, b)?;
        let qs = g.reshape(ctx.ego, &[b, 1, d])?;
        let hist = g.slice(encoded, 1, 0, active)?;
        let tokens = g.concat(&[te, qs, hist], 1)?;
        let tokens = if active < HORIZON {
            g.pad(tokens, 1, 0, HORIZON - active)?
        } else {
            tokens
        };
        let last = g.slice(encoded, 1, active - 1, 1)?;
        let route = g.concat(&[te, qs, last], 2)?;
        let route = g.reshape(route, &[b, 3 * d])?;
        Ok((tokens, route))
    }

    fn mix(&self, g: &mut Graph, ctx: &StepContext, tokens: Var, route: Var) -> Result<(Var, Option<Routing>)> {
        match &self.mixer {
            Mixer::Moe(block) => {
                let out = block.forward(g, ctx.bev, tokens, route, self.policy.as_ref(), &ctx.commands)?;
                Ok((out.out, Some(out.routing)))
            }
            Mixer::Dense(expert) => {
                let e = expert.forward(g, ctx.bev, tokens)?;
                Ok((g.add(e, tokens)?, None))
            }
        }
    }

    /// One decoding step: encode the history, mix with the BEV, predict the
    /// next waypoint and commit its query.
    pub fn ar_step(&self, g: &mut Graph, ctx: &StepContext, seq: &mut PlanningSequence) -> Result<StepOutput> {
        let t = seq.filled;
        if t >= HORIZON {
            return Err(PlannerError::Sequence(format!("all {HORIZON} steps already decoded")));
        }
        let encoded = self.encoder_update(g, seq)?;
        let active = t.max(1);
        let (tokens, route) = self.build_concat_query(g, ctx, encoded, t, active)?;
        let (mixed, routing) = self.mix(g, ctx, tokens, route)?;
        let next = g.slice(mixed, 1, active + 1, 1)?;
        let queries = seq.queries.expect("checked by encoder_update");
        let mut parts = Vec::with_capacity(3);
        if t > 0 {
            parts.push(g.slice(queries, 1, 0, t)?);
        }
        parts.push(next);
        if t + 1 < HORIZON {
            parts.push(g.slice(queries, 1, t + 1, HORIZON - t - 1)?);
        }
        seq.queries = Some(g.concat(&parts, 1)?);
        seq.filled = t + 1;
        let q = g.reshape(next, &[ctx.batch, self.d_model])?;
        let (mu, sigma) = self.head.forward(g, q)?;
        Ok(StepOutput { mu, sigma, routing })
    }

    /// All waypoints from the initialized queries in a single pass.
    fn one_shot(&self, g: &mut Graph, ctx: &StepContext) -> Result<(Var, Var, Var, Vec<Routing>, usize)> {
        let seq = self.init_sequence(g, ctx.batch)?;
        let full = PlanningSequence {
            filled: HORIZON,
            ..seq.clone()
        };
        let encoded = self.encoder_update(g, &full)?;
        let b = ctx.batch;
        let d = self.d_model;
        let te = self.time_token(g, 0, b)?;
        let qs = g.reshape(ctx.ego, &[b, 1, d])?;
        let tokens = g.concat(&[te, qs, encoded], 1)?;
        let pooled = g.mean_axis(encoded, 1)?;
        let route = g.concat(&[te, qs, pooled], 2)?;
        let route = g.reshape(route, &[b, 3 * d])?;
        let (mixed, routing) = self.mix(g, ctx, tokens, route)?;
        let queries = g.slice(mixed, 1, 2, HORIZON)?;
        let (mu, sigma) = self.head.forward(g, queries)?;
        Ok((mu, sigma, queries, routing.into_iter().collect(), seq.pe_applications))
    }

    /// Decodes `H` waypoints. Sample mode draws one standard normal triple
    /// per sample and step, in step order.
    pub fn rollout<R: Rng + ?Sized>(&self, g: &mut Graph, ctx: &StepContext, mode: SampleMode, rng: &mut R) -> Result<Rollout> {
        let noise = match mode {
            SampleMode::Mean => None,
            SampleMode::Sample => Some(standard_noise(ctx.batch, rng)?),
        };
        self.rollout_with_noise(g, ctx, noise.as_ref())
    }

    /// Rollout with explicit standard normal draws `[B, H, 3]` (`None` for
    /// the mean).
    pub fn rollout_with_noise(&self, g: &mut Graph, ctx: &StepContext, noise: Option<&Tensor>) -> Result<Rollout> {
        let b = ctx.batch;
        let (mu, sigma, queries, routings, pe_applications) = if self.one_shot {
            self.one_shot(g, ctx)?
        } else {
            let mut seq = self.init_sequence(g, b)?;
            let mut mus = Vec::with_capacity(HORIZON);
            let mut sigmas = Vec::with_capacity(HORIZON);
            let mut routings = Vec::new();
            for _ in 0..HORIZON {
                let out = self.ar_step(g, ctx, &mut seq)?;
                mus.push(out.mu);
                sigmas.push(out.sigma);
                routings.extend(out.routing);
            }
            let mu = g.stack(&mus, 1)?;
            let sigma = g.stack(&sigmas, 1)?;
            (mu, sigma, seq.queries.unwrap(), routings, seq.pe_applications)
        };
        let raw = match noise {
            None => mu,
            Some(z) => {
                if z.shape() != [b, HORIZON, 3] {
                    return Err(PlannerError::Invalid(format!("noise shape {:?}", z.shape())));
                }
                let z = g.constant(z.clone());
                let scaled = g.mul(sigma, z)?;
                g.add(mu, scaled)?
            }
        };
        let trajectory = wrap_headings(g, raw)?;
        Ok(Rollout {
            mu,
            sigma,
            trajectory,
            queries,
            routings,
            pe_applications,
        })
    }
}

/// `[B, H, 3]` standard normal draws, generated step by step so that a
/// step's draws never depend on how many later steps exist.
pub fn standard_noise<R: Rng + ?Sized>(batch: usize, rng: &mut R) -> Result<Tensor> {
    let mut z = vec![0.0; batch * HORIZON * 3];
    for t in 0..HORIZON {
        for i in 0..batch {
            for c in 0..3 {
                z[(i * HORIZON + t) * 3 + c] = StandardNormal.sample(rng);
            }
        }
    }
    Ok(Tensor::new(vec![batch, HORIZON, 3], z)?)
}

/// Wraps channel 2 of `[.., 3]` poses into `(−π, π]`.
pub fn wrap_headings(g: &mut Graph, poses: Var) -> Result<Var> {
    let axis = g.shape(poses).len() - 1;
    let xy = g.slice(poses, axis, 0, 2)?;
    let h = g.slice(poses, axis, 2, 1)?;
    let h = g.wrap_angle(h);
    Ok(g.concat(&[xy, h], axis)?)
}
