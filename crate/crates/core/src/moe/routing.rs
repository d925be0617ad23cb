//! Policies deciding which private experts a sample uses.

use moe_tensor::{Graph, Var};

use super::router::{Router, Routing};
use crate::error::{PlannerError, Result};
use crate::scene::Command;

pub trait RoutingPolicy: Send + Sync + std::fmt::Debug {
    fn name(&self) -> String;

    fn route(&self, g: &mut Graph, router: &Router, q_r: Var, commands: &[Command]) -> Result<Routing>;
}

/// Learned top-k routing from the routing query.
#[derive(Clone, Copy, Debug, Default)]
pub struct Intrinsic;

impl RoutingPolicy for Intrinsic {
    fn name(&self) -> String {
        "intrinsic".into()
    }

    fn route(&self, g: &mut Graph, router: &Router, q_r: Var, _: &[Command]) -> Result<Routing> {
        router.route(g, q_r)
    }
}

/// Each driving command owns one expert; the router is bypassed.
#[derive(Clone, Copy, Debug, Default)]
pub struct ByCommand;

impl RoutingPolicy for ByCommand {
    fn name(&self) -> String {
        "command".into()
    }

    fn route(&self, g: &mut Graph, router: &Router, _: Var, commands: &[Command]) -> Result<Routing> {
        let experts = commands.iter().map(|c| c.index() % router.n_experts).collect();
        Routing::hard(g, experts)
    }
}

/// Every sample uses the same expert.
#[derive(Clone, Copy, Debug)]
pub struct FixedExpert(pub usize);

impl RoutingPolicy for FixedExpert {
    fn name(&self) -> String {
        format!("fixed-expert-{}", self.0)
    }

    fn route(&self, g: &mut Graph, router: &Router, q_r: Var, _: &[Command]) -> Result<Routing> {
        if self.0 >= router.n_experts {
            return Err(PlannerError::Config(format!(
                "fixed expert {} out of range for {} experts",
                self.0, router.n_experts
            )));
        }
        Routing::hard(g, vec![self.0; g.shape(q_r)[0]])
    }
}

pub const ROUTING_POLICIES: &[&str] = &["intrinsic", "command", "fixed-expert-<e>"];

pub fn routing_by_name(name: &str) -> Result<Box<dyn RoutingPolicy>> {
    match name {
        "intrinsic" => Ok(Box::new(Intrinsic)),
        "command" => Ok(Box::new(ByCommand)),
        _ => match name.strip_prefix("fixed-expert-").map(str::parse::<usize>) {
            Some(Ok(e)) => Ok(Box::new(FixedExpert(e))),
            _ => Err(PlannerError::UnknownStrategy {
                kind: "routing policy",
                name: name.into(),
                available: ROUTING_POLICIES.join(", "),
            }),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_parses_names() {
        assert_eq!(routing_by_name("intrinsic").unwrap().name(), "intrinsic");
        assert_eq!(routing_by_name("command").unwrap().name(), "command");
        assert_eq!(routing_by_name("fixed-expert-3").unwrap().name(), "fixed-expert-3");
        for bad in ["fixed-expert-", "fixed-expert-x", "learned"] {
            assert!(matches!(routing_by_name(bad), Err(PlannerError::UnknownStrategy { .. })));
        }
    }
}
