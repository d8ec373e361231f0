//! Plugin registry keyed by plugin name.

use std::collections::HashMap;
use std::sync::{Arc, LazyLock};

use parking_lot::RwLock;

use super::{loopback, tcp, Endpoint, NalConfig, NalError, NetAddress, Result};

/// Opens an endpoint for a plugin. `None` requests an origin-only endpoint.
pub type PluginFactory = Arc<dyn Fn(Option<&str>, &NalConfig) -> Result<Endpoint> + Send + Sync>;

static PLUGINS: LazyLock<RwLock<HashMap<String, PluginFactory>>> = LazyLock::new(|| {
    let mut m: HashMap<String, PluginFactory> = HashMap::new();
    m.insert(
        loopback::PLUGIN.to_string(),
        Arc::new(|locator: Option<&str>, cfg: &NalConfig| loopback::listen(locator, cfg)),
    );
    m.insert(
        tcp::PLUGIN.to_string(),
        Arc::new(|locator: Option<&str>, cfg: &NalConfig| tcp::listen(locator, cfg)),
    );
    RwLock::new(m)
});

/// Registers (or replaces) the factory for `name`.
pub fn register_plugin(name: &str, factory: PluginFactory) -> Result<()> {
    // validate the name with the address grammar
    NetAddress::parse_syntax(&format!("{name}://x"))?;
    PLUGINS.write().insert(name.to_string(), factory);
    Ok(())
}

pub fn is_registered(name: &str) -> bool {
    PLUGINS.read().contains_key(name)
}

/// Parses `plugin://locator`, requiring the plugin to be registered.
pub fn parse_address(uri: &str) -> Result<NetAddress> {
    let addr = NetAddress::parse_syntax(uri)?;
    if !is_registered(addr.plugin()) {
        return Err(NalError::UnknownPlugin(addr.plugin().to_string()));
    }
    Ok(addr)
}

/// Opens an endpoint listening on `uri`, or an origin-only endpoint of
/// `plugin` when `uri` is `None`.
pub fn open_endpoint(plugin: &str, uri: Option<&str>, config: &NalConfig) -> Result<Endpoint> {
    let (plugin, locator) = match uri {
        Some(uri) => {
            let addr = parse_address(uri)?;
            (addr.plugin().to_string(), Some(addr.locator().to_string()))
        }
        None => (plugin.to_string(), None),
    };
    let factory = PLUGINS
        .read()
        .get(&plugin)
        .cloned()
        .ok_or_else(|| NalError::UnknownPlugin(plugin.clone()))?;
    factory(locator.as_deref(), config)
}
