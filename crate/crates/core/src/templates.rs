//! Prompt templates with `{name}` placeholders.
//!
//! Built-in templates ship with the crate; a directory of `<name>.txt` files
//! can override any of them.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

const BUILTIN: &[(&str, &str)] = &[
    ("discriminate", include_str!("../templates/discriminate.txt")),
    ("nli", include_str!("../templates/nli.txt")),
    ("hypothesize", include_str!("../templates/hypothesize.txt")),
    ("rp_generate", include_str!("../templates/rp_generate.txt")),
    ("wiki_outline", include_str!("../templates/wiki_outline.txt")),
    ("wiki_chapter", include_str!("../templates/wiki_chapter.txt")),
    ("eta_extract", include_str!("../templates/eta_extract.txt")),
    ("eta_aggregate", include_str!("../templates/eta_aggregate.txt")),
    ("extract_actions", include_str!("../templates/extract_actions.txt")),
];

#[derive(Debug, Clone)]
pub struct Templates {
    by_name: BTreeMap<String, String>,
}

impl Default for Templates {
    fn default() -> Self {
        Self {
            by_name: BUILTIN
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }
}

impl Templates {
    /// Built-ins overlaid with every `*.txt` file found in `dir`.
    pub fn with_overrides(dir: impl AsRef<Path>) -> std::io::Result<Self> {
        let mut templates = Self::default();
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("txt") {
                continue;
            }
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                templates.by_name.insert(stem.to_string(), fs::read_to_string(&path)?);
            }
        }
        Ok(templates)
    }

    pub fn get(&self, name: &str) -> &str {
        self.by_name
            .get(name)
            .unwrap_or_else(|| panic!("no template named {name}"))
    }

    /// Substitutes each `{key}`. Placeholders without a value are left as is.
    pub fn render(&self, name: &str, vars: &[(&str, &str)]) -> String {
        let mut out = self.get(name).to_string();
        for (key, value) in vars {
            out = out.replace(&format!("{{{key}}}"), value);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_fills_named_placeholders() {
        let t = Templates::default();
        let out = t.render("discriminate", &[("scene", "A: hi"), ("question", "Is it raining?")]);
        assert!(out.contains("A: hi"));
        assert!(out.contains("Question: Is it raining?"));
        assert!(!out.contains("{scene}"));
    }

    #[test]
    fn directory_overrides_builtin() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("nli.txt"), "P={premise} H={hypothesis}").unwrap();
        let t = Templates::with_overrides(dir.path()).unwrap();
        assert_eq!(t.render("nli", &[("premise", "a"), ("hypothesis", "b")]), "P=a H=b");
        assert!(t.get("discriminate").contains("{question}"));
    }
}
