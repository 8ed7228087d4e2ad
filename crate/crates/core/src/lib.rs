//! Rate-distortion tolerant private read-update-write over `N` replicated
//! databases holding `M` submodels.
//!
//! A user reads only a budgeted fraction of the positions of one submodel
//! and writes back a sparse update, while no single database learns which
//! submodel was touched or what the update was.

pub mod codec;
pub mod field;
pub mod harness;
pub mod planner;
pub mod roles;
pub mod transport;

pub use codec::{CodecError, EvalPoints, SelectionPattern, StorageShard};
pub use field::{FieldElement, FieldError, PrimeField};
pub use harness::{HarnessError, ReferenceModel, TrafficCounts};
pub use planner::{build_plan, Budgets, Layout, Plan, PlanError, Rational, RegionPlan};
pub use roles::{RoleError, RoundOutcome, UserClient};
pub use transport::{Message, NodeLink, Tag, TransportError, WireError};
