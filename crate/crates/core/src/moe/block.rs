use moe_tensor::{Graph, ParamStore, Var};
use rand::Rng;

use super::dispatch::{dispatcher_by_name, Dispatcher};
use super::expert::Expert;
use super::router::{Router, Routing};
use super::routing::RoutingPolicy;
use crate::config::ModelConfig;
use crate::error::Result;
use crate::scene::Command;

#[derive(Clone, Debug, PartialEq)]
pub struct MoeConfig {
    pub d_model: usize,
    pub n_private: usize,
    pub n_shared: usize,
    pub k: usize,
    pub heads: usize,
    pub router_hidden: usize,
}

impl MoeConfig {
    pub fn from_model(m: &ModelConfig) -> Self {
        Self {
            d_model: m.d_model,
            n_private: m.n_private,
            n_shared: m.n_shared,
            k: m.k,
            heads: m.heads,
            router_hidden: (m.d_model / 2).max(1),
        }
    }
}

#[derive(Debug)]
pub struct MoeBlock {
    pub router: Router,
    pub private: Vec<Expert>,
    pub shared: Vec<Expert>,
    pub dispatcher: Box<dyn Dispatcher>,
}

pub struct MoeOutput {
    /// `[B, L, d]`.
    pub out: Var,
    pub routing: Routing,
}

impl MoeBlock {
    /// The router reads a `3·d_model` routing query.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cfg: &MoeConfig,
        dispatch: &str,
        rng: &mut R,
    ) -> Result<Self> {
        let router = Router::new(
            store,
            &format!("{name}.router"),
            3 * cfg.d_model,
            cfg.router_hidden,
            cfg.n_private,
            cfg.k,
            rng,
        )?;
        let private = (0..cfg.n_private)
            .map(|j| Expert::new(store, &format!("{name}.private.{j}"), cfg.d_model, cfg.heads, rng))
            .collect();
        let shared = (0..cfg.n_shared)
            .map(|j| Expert::new(store, &format!("{name}.shared.{j}"), cfg.d_model, cfg.heads, rng))
            .collect();
        Ok(Self {
            router,
            private,
            shared,
            dispatcher: dispatcher_by_name(dispatch)?,
        })
    }

    /// `Σ_slots gate ⊙ private + Σ shared + context`. Gates scale only the
    /// private experts; shared experts and the residual enter once.
    pub fn forward(
        &self,
        g: &mut Graph,
        bev: Var,
        context: Var,
        q_r: Var,
        policy: &dyn RoutingPolicy,
        commands: &[Command],
    ) -> Result<MoeOutput> {
        let routing = policy.route(g, &self.router, q_r, commands)?;
        let b = g.shape(context)[0];
        let mut out = context;
        for e in &self.shared {
            let s = e.forward(g, bev, context)?;
            out = g.add(out, s)?;
        }
        for j in 0..routing.k {
            let ids = routing.slot(j);
            let p = self.dispatcher.dispatch(g, &self.private, &ids, bev, context)?;
            let gate = g.slice(routing.weights, 1, j, 1)?;
            let gate = g.reshape(gate, &[b, 1, 1])?;
            let p = g.mul(p, gate)?;
            out = g.add(out, p)?;
        }
        Ok(MoeOutput { out, routing })
    }

    /// Reference path: every sample is routed and fused on its own.
    pub fn forward_per_sample(
        &self,
        g: &mut Graph,
        bev: Var,
        context: Var,
        q_r: Var,
        policy: &dyn RoutingPolicy,
        commands: &[Command],
    ) -> Result<Var> {
        let b = g.shape(context)[0];
        let mut outs = Vec::with_capacity(b);
        for i in 0..b {
            let xb = g.slice(bev, 0, i, 1)?;
            let xc = g.slice(context, 0, i, 1)?;
            let xq = g.slice(q_r, 0, i, 1)?;
            let cmd = commands.get(i..i + 1).unwrap_or(&[]);
            outs.push(self.forward(g, xb, xc, xq, policy, cmd)?.out);
        }
        Ok(g.concat(&outs, 0)?)
    }
}
