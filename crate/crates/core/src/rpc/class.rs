use std::collections::HashMap;
use std::sync::atomic::{AtomicU16, Ordering};
use std::sync::{Arc, Weak};

use parking_lot::RwLock;

use super::context::{Context, ContextInner};
use super::{Handle, Result, RpcError};
use crate::nal::{self, Endpoint, NalConfig, NetAddress};
use crate::wire::{rpc_id_from_name, RpcId};

pub(crate) type Handler = Arc<dyn Fn(Handle) + Send + Sync>;

#[derive(Clone)]
pub(crate) struct Registration {
    pub name: String,
    pub handler: Option<Handler>,
    pub response_expected: bool,
}

pub(crate) struct ClassInner {
    pub endpoint: Endpoint,
    registrations: RwLock<HashMap<RpcId, Registration>>,
    contexts: RwLock<HashMap<u16, Weak<ContextInner>>>,
    next_context: AtomicU16,
}

/// Registration table plus the endpoint it serves on.
#[derive(Clone)]
pub struct RpcClass {
    pub(crate) inner: Arc<ClassInner>,
}

impl std::fmt::Debug for RpcClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RpcClass")
            .field("address", &self.self_address())
            .finish()
    }
}

impl RpcClass {
    /// Listens on `uri` (`plugin://locator`). Without a URI the class uses an
    /// origin-only TCP endpoint: it can issue calls but cannot be addressed.
    pub fn init(listen_uri: Option<&str>) -> Result<Self> {
        Self::init_with(listen_uri, NalConfig::default())
    }

    pub fn init_with(listen_uri: Option<&str>, config: NalConfig) -> Result<Self> {
        let endpoint = nal::open_endpoint(nal::tcp::PLUGIN, listen_uri, &config)?;
        Ok(Self::from_endpoint(endpoint))
    }

    pub fn from_endpoint(endpoint: Endpoint) -> Self {
        Self {
            inner: Arc::new(ClassInner {
                endpoint,
                registrations: RwLock::new(HashMap::new()),
                contexts: RwLock::new(HashMap::new()),
                next_context: AtomicU16::new(1),
            }),
        }
    }

    pub fn self_address(&self) -> Option<&NetAddress> {
        self.inner.endpoint.address()
    }

    pub fn endpoint(&self) -> &Endpoint {
        &self.inner.endpoint
    }

    pub fn eager_limit(&self) -> usize {
        self.inner.endpoint.eager_limit()
    }

    /// Registers `handler` for `name`. Registering the same name again
    /// replaces the handler; a different name with the same id is rejected.
    pub fn register<F>(&self, name: &str, handler: F, response_expected: bool) -> Result<RpcId>
    where
        F: Fn(Handle) + Send + Sync + 'static,
    {
        self.insert(name, Some(Arc::new(handler)), response_expected)
    }

    /// Registers `name` for the origin role only; inbound calls to it are
    /// answered with NO_SUCH_RPC.
    pub fn register_origin(&self, name: &str, response_expected: bool) -> Result<RpcId> {
        self.insert(name, None, response_expected)
    }

    fn insert(&self, name: &str, handler: Option<Handler>, response_expected: bool) -> Result<RpcId> {
        let id = rpc_id_from_name(name)?;
        let mut regs = self.inner.registrations.write();
        if let Some(existing) = regs.get(&id) {
            if existing.name != name {
                return Err(RpcError::IdCollision {
                    id,
                    name: name.to_string(),
                    existing: existing.name.clone(),
                });
            }
        }
        regs.insert(
            id,
            Registration {
                name: name.to_string(),
                handler,
                response_expected,
            },
        );
        Ok(id)
    }

    pub fn registered(&self, name: &str) -> bool {
        match rpc_id_from_name(name) {
            Ok(id) => self
                .inner
                .registrations
                .read()
                .get(&id)
                .is_some_and(|r| r.name == name),
            Err(_) => false,
        }
    }

    pub(crate) fn registration(&self, id: RpcId) -> Option<Registration> {
        self.inner.registrations.read().get(&id).cloned()
    }

    /// New context with its own completion queue.
    pub fn create_context(&self) -> Context {
        let id = self.inner.next_context.fetch_add(1, Ordering::SeqCst);
        let ctx = Context::new(self.clone(), id);
        let mut map = self.inner.contexts.write();
        map.retain(|_, w| w.strong_count() > 0);
        map.insert(id, Arc::downgrade(&ctx.inner));
        ctx
    }

    pub(crate) fn context(&self, id: u16) -> Option<Context> {
        self.inner
            .contexts
            .read()
            .get(&id)
            .and_then(Weak::upgrade)
            .map(|inner| Context { inner })
    }

    /// Closes the endpoint; pending operations complete as CANCELED.
    pub fn close(&self) {
        let done = self.inner.endpoint.close();
        for c in done {
            if let Some(ctx) = self.context(super::context::context_of(c.tag)) {
                ctx.inner.on_nal_completion(&ctx, c);
            }
        }
    }
}
