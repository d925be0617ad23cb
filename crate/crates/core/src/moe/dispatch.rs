//! Strategies for running each sample's selected private expert.

use moe_tensor::{Graph, Var};

use super::expert::Expert;
use super::plan::build_dispatch_plan;
use crate::error::{PlannerError, Result};

pub trait Dispatcher: Send + Sync + std::fmt::Debug {
    fn name(&self) -> &'static str;

    /// Row `i` of the result is `experts[ids[i]]` applied to row `i` of
    /// `bev: [B, C, d]` and `context: [B, L, d]`.
    fn dispatch(&self, g: &mut Graph, experts: &[Expert], ids: &[usize], bev: Var, context: Var) -> Result<Var>;
}

/// Sorts the batch by expert, runs every expert once on its contiguous
/// block and restores the original order.
#[derive(Clone, Copy, Debug, Default)]
pub struct Grouped;

impl Dispatcher for Grouped {
    fn name(&self) -> &'static str {
        "grouped"
    }

    fn dispatch(&self, g: &mut Graph, experts: &[Expert], ids: &[usize], bev: Var, context: Var) -> Result<Var> {
        let plan = build_dispatch_plan(ids);
        let (bev, context) = if plan.is_identity() {
            (bev, context)
        } else {
            (g.index_select(bev, 0, &plan.perm)?, g.index_select(context, 0, &plan.perm)?)
        };
        let mut outs = Vec::with_capacity(plan.blocks.len());
        for b in &plan.blocks {
            let expert = experts.get(b.expert).ok_or_else(|| unknown_expert(b.expert, experts.len()))?;
            let (xb, xc) = if plan.blocks.len() == 1 {
                (bev, context)
            } else {
                (g.slice(bev, 0, b.start, b.len)?, g.slice(context, 0, b.start, b.len)?)
            };
            outs.push(expert.forward(g, xb, xc)?);
        }
        let sorted = if outs.len() == 1 { outs[0] } else { g.concat(&outs, 0)? };
        if plan.is_identity() {
            Ok(sorted)
        } else {
            Ok(g.index_select(sorted, 0, &plan.inverse())?)
        }
    }
}

/// One expert call per sample.
#[derive(Clone, Copy, Debug, Default)]
pub struct Naive;

impl Dispatcher for Naive {
    fn name(&self) -> &'static str {
        "naive"
    }

    fn dispatch(&self, g: &mut Graph, experts: &[Expert], ids: &[usize], bev: Var, context: Var) -> Result<Var> {
        let mut outs = Vec::with_capacity(ids.len());
        for (i, &e) in ids.iter().enumerate() {
            let expert = experts.get(e).ok_or_else(|| unknown_expert(e, experts.len()))?;
            let xb = g.slice(bev, 0, i, 1)?;
            let xc = g.slice(context, 0, i, 1)?;
            outs.push(expert.forward(g, xb, xc)?);
        }
        Ok(g.concat(&outs, 0)?)
    }
}

fn unknown_expert(e: usize, n: usize) -> PlannerError {
    PlannerError::Invalid(format!("expert {e} selected but only {n} exist"))
}

pub const DISPATCHERS: &[&str] = &["grouped", "naive"];

pub fn dispatcher_by_name(name: &str) -> Result<Box<dyn Dispatcher>> {
    match name {
        "grouped" => Ok(Box::new(Grouped)),
        "naive" => Ok(Box::new(Naive)),
        _ => Err(PlannerError::UnknownStrategy {
            kind: "dispatcher",
            name: name.into(),
            available: DISPATCHERS.join(", "),
        }),
    }
}
