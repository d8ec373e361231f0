//! Nonblocking RPC for HPC-style services.
//!
//! Small RPC metadata travels as unexpected point-to-point messages, while
//! large arguments move over a separate one-sided bulk channel. The stack:
//!
//! - [`wire`]: frame header, proc serialization, RPC ids, checksums
//! - [`nal`]: network abstraction layer and its `loop`, `tcp` and `mock` plugins
//! - [`rpc`]: classes, contexts, origin/target handles, completion queue, request shim
//! - [`bulk`]: bulk descriptors and segmented pull/push transfers

pub mod bulk;
pub mod nal;
pub mod rpc;
pub mod wire;
