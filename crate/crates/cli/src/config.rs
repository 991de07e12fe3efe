//! Flat `key = value` run-configuration files.
//!
//! Lines are `key = value`; `#` starts a comment; `[section]` headers
//! prefix the keys that follow as `section.key`. Values read from a config
//! file that name paths are resolved relative to the file itself, so a run
//! directory can be moved as a unit. Command-line flags override file
//! values, and every command echoes the effective configuration next to
//! its primary output so a run can be reproduced from the echo alone.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

/// Parsed configuration: key → value plus the directory of the source
/// file for resolving relative paths.
pub struct FileConfig {
    values: BTreeMap<String, String>,
    base_dir: PathBuf,
}

impl FileConfig {
    /// Empty configuration (no file given); paths resolve against CWD.
    pub fn empty() -> Self {
        FileConfig {
            values: BTreeMap::new(),
            base_dir: PathBuf::from("."),
        }
    }

    /// Read and parse `path`.
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        let mut values = BTreeMap::new();
        let mut section = String::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                format!("{}:{}: expected `key = value`", path.display(), ln + 1)
            })?;
            let full = if section.is_empty() {
                key.trim().to_string()
            } else {
                format!("{section}.{}", key.trim())
            };
            values.insert(full, value.trim().to_string());
        }
        let base_dir = path.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf);
        Ok(FileConfig { values, base_dir })
    }

    /// Typed lookup; `Err` carries a message naming the offending key.
    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, String> {
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse::<T>()
                .map(Some)
                .map_err(|_| format!("config key `{key}`: cannot parse `{v}`")),
        }
    }

    /// Path lookup, resolved relative to the config file's directory.
    pub fn get_path(&self, key: &str) -> Option<PathBuf> {
        self.values.get(key).map(|v| {
            let p = PathBuf::from(v);
            if p.is_absolute() {
                p
            } else {
                self.base_dir.join(p)
            }
        })
    }
}

/// Write the effective settings as a reloadable config file.
pub fn echo(path: &Path, entries: &[(&str, String)]) -> Result<(), String> {
    let mut out = String::from("# effective configuration\n");
    for (k, v) in entries {
        out.push_str(&format!("{k} = {v}\n"));
    }
    std::fs::write(path, out).map_err(|e| format!("cannot write config echo {}: {e}", path.display()))
}
