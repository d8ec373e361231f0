//! The RPC layer.
//!
//! An [`RpcClass`] owns a NAL endpoint and the table of registered RPCs. A
//! class is role-neutral: it may register handlers (target role) and issue
//! calls (origin role) at the same time.
//!
//! A [`Context`] owns a completion queue. [`Context::progress`] drives the
//! network and turns finished operations and inbound requests into
//! [`CompletionEvent`]s; [`Context::trigger`] is the only place user code
//! runs. Target handlers are completion events too, so both roles share the
//! guarantee that callbacks execute only inside `trigger`, on the calling
//! thread.

use std::fmt;

use thiserror::Error;

use crate::nal::{NalError, NalStatus};
use crate::wire::{RpcId, WireError};

mod class;
mod context;
mod handle;
mod request;

pub use class::RpcClass;
pub use context::{in_trigger, CompletionEvent, Context, ContextStats};
pub(crate) use context::NalOp;
pub use handle::{Handle, Phase, Role};
pub use request::Request;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Status {
    Ok = 0,
    Canceled = 1,
    Timeout = 2,
    NoSuchRpc = 3,
    DecodeError = 4,
    TransportError = 5,
    RemoteError = 6,
}

impl Status {
    pub fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            0 => Status::Ok,
            1 => Status::Canceled,
            2 => Status::Timeout,
            3 => Status::NoSuchRpc,
            4 => Status::DecodeError,
            5 => Status::TransportError,
            6 => Status::RemoteError,
            _ => return None,
        })
    }

    pub fn is_ok(self) -> bool {
        self == Status::Ok
    }

    pub fn name(self) -> &'static str {
        match self {
            Status::Ok => "OK",
            Status::Canceled => "CANCELED",
            Status::Timeout => "TIMEOUT",
            Status::NoSuchRpc => "NO_SUCH_RPC",
            Status::DecodeError => "DECODE_ERROR",
            Status::TransportError => "TRANSPORT_ERROR",
            Status::RemoteError => "REMOTE_ERROR",
        }
    }
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl From<NalStatus> for Status {
    fn from(s: NalStatus) -> Self {
        match s {
            NalStatus::Ok => Status::Ok,
            NalStatus::Canceled => Status::Canceled,
            NalStatus::Timeout => Status::Timeout,
            NalStatus::TransportError => Status::TransportError,
            NalStatus::RemoteError => Status::RemoteError,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RpcError {
    #[error(transparent)]
    Nal(#[from] NalError),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("rpc id {id} of {name:?} collides with registered {existing:?}")]
    IdCollision {
        id: RpcId,
        name: String,
        existing: String,
    },
    #[error("payload of {len} bytes exceeds the eager limit of {limit} bytes; use a bulk handle")]
    Oversize { len: usize, limit: usize },
    #[error("invalid handle state: {0}")]
    InvalidState(&'static str),
    #[error("context closed")]
    ContextClosed,
    #[error("timed out")]
    Timeout,
    #[error("class has no listen address")]
    NotAddressable,
}

pub type Result<T, E = RpcError> = std::result::Result<T, E>;

/// What a [`CallbackInfo`] reports on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CallbackOp {
    /// Origin call finished (response, error, send completion, or cancel).
    Forward,
    /// Response send finished on the target.
    Respond,
    /// Inbound request; the registered handler runs.
    Handler,
    /// Bulk transfer finished.
    Bulk,
}

#[derive(Debug, Clone)]
pub struct CallbackInfo {
    pub op: CallbackOp,
    pub status: Status,
    pub handle: Option<Handle>,
}

/// A user callback, run once from [`Context::trigger`].
pub type Callback = Box<dyn FnOnce(&CallbackInfo) + Send>;
