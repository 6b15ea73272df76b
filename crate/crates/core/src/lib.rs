//! Executable model of the Algorand agreement protocol.
//!
//! The protocol is a global-state transition system: honest users run the
//! state machine in [`usersm`], the network and adversary act through the
//! rules of [`transition`], [`adversary`] policies schedule those rules, and
//! [`checker`] / [`explorer`] verify safety over simulated and exhaustively
//! enumerated traces.

pub mod adversary;
pub mod checker;
pub mod config;
pub mod explorer;
pub mod serde_util;
pub mod sortition;
pub mod time;
pub mod trace_io;
pub mod transition;
pub mod types;
pub mod usersm;

pub use sortition::{check_committee_honesty, committee, credential, Credential, Horizon};
pub use time::Time;
pub use transition::{GState, Label, Latencies, Model, Trace};
pub use types::{
    mk_vote, validate_params, Msg, MsgKind, ParamError, Payload, ProtocolParams, UserId, Value,
    Vote,
};
pub use usersm::{TimeoutKind, UState, UserOutput};
