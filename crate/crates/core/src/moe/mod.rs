//! Routed mixture of experts with batch-regrouping dispatch.

mod bench;
mod block;
mod dispatch;
mod expert;
mod plan;
mod router;
mod routing;

pub use bench::{bench_dispatch, write_bench_csv, BenchConfig, BenchRow, REFERENCE_SPEEDUPS};
pub use block::{MoeBlock, MoeConfig, MoeOutput};
pub use dispatch::{dispatcher_by_name, Dispatcher, Grouped, Naive, DISPATCHERS};
pub use expert::Expert;
pub use plan::{apply_perm, build_dispatch_plan, invert_perm, Block, DispatchPlan};
pub use router::{top_k, Router, Routing};
pub use routing::{routing_by_name, ByCommand, FixedExpert, Intrinsic, RoutingPolicy, ROUTING_POLICIES};
