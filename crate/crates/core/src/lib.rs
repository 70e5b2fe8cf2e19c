pub mod host;
pub mod names;
pub mod plugin;
pub mod refs;
pub mod registry;
pub mod rpc;
pub mod script;
pub mod server;
pub mod shim;
pub mod store;
pub mod supervisor;
pub mod workflow;
