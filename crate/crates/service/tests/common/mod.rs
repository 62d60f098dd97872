#![allow(dead_code)]

use std::path::Path;

use wordsmith::Config;

/// Small networks, few environments and a one-second clip: a run takes a
/// few seconds.
pub const TINY_TOML: &str = r#"
[train]
envs = 4
horizon = 32
total_steps = 256
epochs = 1
minibatch = 64
hidden = [16]
disc_hidden = [16]
disc_updates = 1
disc_batch = 32
gp_samples = 8

[motion]
duration = 1.0
dt = 0.05

[server]
reward_event_interval = 0.2
"#;

pub fn tiny(data_dir: &Path) -> Config {
    let mut cfg = Config::from_toml(TINY_TOML, Path::new("tiny.toml")).unwrap();
    cfg.server.data_dir = data_dir.to_path_buf();
    cfg
}
