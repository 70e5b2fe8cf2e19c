//! Name rules shared by plugins, workspaces and workflow steps.
//!
//! Names are embedded in install links and in `owner/repo:Name@pin`
//! references, so the reference separators are reserved.

pub const MAX_NAME_LEN: usize = 64;

const RESERVED: &[char] = &[':', '@', '/', '?', '&'];

/// Returns true when `name` may be used as a plugin, workspace or step name.
pub fn is_valid_name(name: &str) -> bool {
    let len = name.chars().count();
    (1..=MAX_NAME_LEN).contains(&len)
        && !name.chars().any(|c| RESERVED.contains(&c) || c.is_control())
}

/// Names beginning with `__` address system interfaces on the hub.
pub fn is_system_name(name: &str) -> bool {
    name.starts_with("__")
}
