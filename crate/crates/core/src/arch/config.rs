//! Macro-architecture description and its TOML form.
//!
//! ```toml
//! name = "tiny"
//! stem = "cifar"
//! classes = 10
//! input = 8
//! blocks = [{ modules = 2, growth = 8 }, { modules = 2, growth = 16 }]
//!
//! [transition]
//! theta = 0.5
//! ```

use std::fmt;
use std::path::Path;

use serde::Serialize;
use toml::{Table, Value};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Stem {
    /// One 3x3 conv, stride 1, `2*k1` channels.
    Cifar,
    /// Three 3x3 Conv-BN-ReLU (strides 2,1,1) and a 3x3/2 max pool.
    Imagenet,
}

impl fmt::Display for Stem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stem::Cifar => "cifar",
            Stem::Imagenet => "imagenet",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct BlockSpec {
    pub modules: usize,
    pub growth: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct HybridHparams {
    pub g: usize,
    pub alpha: f64,
    pub ru: usize,
    pub rf: usize,
}

impl Default for HybridHparams {
    fn default() -> Self {
        HybridHparams {
            g: 4,
            alpha: 4.0,
            ru: 2,
            rf: 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TransitionHparams {
    pub g: usize,
    pub alpha: f64,
    pub ru: usize,
    pub rf: usize,
    pub theta: f64,
}

impl Default for TransitionHparams {
    fn default() -> Self {
        TransitionHparams {
            g: 1,
            alpha: 1.5,
            ru: 4,
            rf: 4,
            theta: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MacroConfig {
    pub name: String,
    pub stem: Stem,
    pub classes: usize,
    /// Square input resolution.
    pub input: usize,
    pub blocks: Vec<BlockSpec>,
    pub hybrid: HybridHparams,
    pub transition: TransitionHparams,
}

/// Dropout rate before the classifier; inactive at inference.
pub const HEAD_DROPOUT: f64 = 0.1;

impl MacroConfig {
    pub fn new(name: impl Into<String>, stem: Stem, blocks: &[(usize, usize)], classes: usize, input: usize) -> Self {
        MacroConfig {
            name: name.into(),
            stem,
            classes,
            input,
            blocks: blocks
                .iter()
                .map(|&(modules, growth)| BlockSpec { modules, growth })
                .collect(),
            hybrid: HybridHparams::default(),
            transition: TransitionHparams::default(),
        }
    }

    /// Checks value ranges. Channel divisibility is checked when building.
    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::config("blocks", "at least one hybrid block is required"));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.modules < 2 {
                return Err(Error::config(
                    format!("blocks[{i}].modules"),
                    format!("a hybrid block needs at least 2 modules, got {}", b.modules),
                ));
            }
            if b.growth == 0 {
                return Err(Error::config(format!("blocks[{i}].growth"), "must be positive"));
            }
        }
        positive("classes", self.classes)?;
        positive("input", self.input)?;
        positive("hybrid.g", self.hybrid.g)?;
        positive("hybrid.ru", self.hybrid.ru)?;
        positive("hybrid.rf", self.hybrid.rf)?;
        positive_real("hybrid.alpha", self.hybrid.alpha)?;
        positive("transition.g", self.transition.g)?;
        positive("transition.ru", self.transition.ru)?;
        positive("transition.rf", self.transition.rf)?;
        positive_real("transition.alpha", self.transition.alpha)?;
        let t = self.transition.theta;
        if !(t > 0.0 && t <= 1.0) {
            return Err(Error::config("transition.theta", format!("must lie in (0, 1], got {t}")));
        }
        Ok(())
    }

    pub fn stem_channels(&self) -> usize {
        match self.stem {
            Stem::Cifar => 2 * self.blocks[0].growth,
            Stem::Imagenet => 64,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config("<document>", e.message().to_string()))?;
        let cfg = parse_table(&table)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("<file>", format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }
}

fn positive(path: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(Error::config(path, "must be positive"));
    }
    Ok(())
}

fn positive_real(path: &str, v: f64) -> Result<()> {
    if !(v.is_finite() && v > 0.0) {
        return Err(Error::config(path, format!("must be a positive number, got {v}")));
    }
    Ok(())
}

fn reject_unknown(table: &Table, prefix: &str, known: &[&str]) -> Result<()> {
    for key in table.keys() {
        if !known.contains(&key.as_str()) {
            let path = if prefix.is_empty() {
                key.clone()
            } else {
                format!("{prefix}.{key}")
            };
            return Err(Error::config(path, "unknown key"));
        }
    }
    Ok(())
}

fn get_count(table: &Table, key: &str, path: &str) -> Result<Option<usize>> {
    match table.get(key) {
        None => Ok(None),
        Some(Value::Integer(i)) if *i >= 0 => Ok(Some(*i as usize)),
        Some(v) => Err(Error::config(path, format!("expected a non-negative integer, got {v}"))),
    }
}

fn get_real(table: &Table, key: &str, path: &str) -> Result<Option<f64>> {
    match table.get(key) {
        None => Ok(None),
        Some(Value::Float(f)) => Ok(Some(*f)),
        Some(Value::Integer(i)) => Ok(Some(*i as f64)),
        Some(v) => Err(Error::config(path, format!("expected a number, got {v}"))),
    }
}

fn require<T>(v: Option<T>, path: &str) -> Result<T> {
    v.ok_or_else(|| Error::config(path, "missing required key"))
}

fn sub_table<'a>(table: &'a Table, key: &str) -> Result<Option<&'a Table>> {
    match table.get(key) {
        None => Ok(None),
        Some(Value::Table(t)) => Ok(Some(t)),
        Some(v) => Err(Error::config(key, format!("expected a table, got {v}"))),
    }
}

fn parse_table(t: &Table) -> Result<MacroConfig> {
    reject_unknown(
        t,
        "",
        &["name", "stem", "classes", "input", "blocks", "hybrid", "transition"],
    )?;
    let name = match t.get("name") {
        None => "custom".to_string(),
        Some(Value::String(s)) => s.clone(),
        Some(v) => return Err(Error::config("name", format!("expected a string, got {v}"))),
    };
    let stem = match t.get("stem") {
        Some(Value::String(s)) if s == "cifar" => Stem::Cifar,
        Some(Value::String(s)) if s == "imagenet" => Stem::Imagenet,
        Some(v) => {
            return Err(Error::config(
                "stem",
                format!("expected \"cifar\" or \"imagenet\", got {v}"),
            ))
        }
        None => return Err(Error::config("stem", "missing required key")),
    };
    let classes = require(get_count(t, "classes", "classes")?, "classes")?;
    let input = require(get_count(t, "input", "input")?, "input")?;

    let list = match t.get("blocks") {
        Some(Value::Array(a)) => a,
        Some(v) => return Err(Error::config("blocks", format!("expected an array, got {v}"))),
        None => return Err(Error::config("blocks", "missing required key")),
    };
    let mut blocks = Vec::with_capacity(list.len());
    for (i, item) in list.iter().enumerate() {
        let path = format!("blocks[{i}]");
        let Value::Table(b) = item else {
            return Err(Error::config(path, format!("expected a table, got {item}")));
        };
        reject_unknown(b, &path, &["modules", "growth"])?;
        let mp = format!("{path}.modules");
        let gp = format!("{path}.growth");
        blocks.push(BlockSpec {
            modules: require(get_count(b, "modules", &mp)?, &mp)?,
            growth: require(get_count(b, "growth", &gp)?, &gp)?,
        });
    }

    let mut hybrid = HybridHparams::default();
    if let Some(h) = sub_table(t, "hybrid")? {
        reject_unknown(h, "hybrid", &["g", "alpha", "ru", "rf"])?;
        hybrid.g = get_count(h, "g", "hybrid.g")?.unwrap_or(hybrid.g);
        hybrid.alpha = get_real(h, "alpha", "hybrid.alpha")?.unwrap_or(hybrid.alpha);
        hybrid.ru = get_count(h, "ru", "hybrid.ru")?.unwrap_or(hybrid.ru);
        hybrid.rf = get_count(h, "rf", "hybrid.rf")?.unwrap_or(hybrid.rf);
    }
    let mut transition = TransitionHparams::default();
    if let Some(h) = sub_table(t, "transition")? {
        reject_unknown(h, "transition", &["g", "alpha", "ru", "rf", "theta"])?;
        transition.g = get_count(h, "g", "transition.g")?.unwrap_or(transition.g);
        transition.alpha = get_real(h, "alpha", "transition.alpha")?.unwrap_or(transition.alpha);
        transition.ru = get_count(h, "ru", "transition.ru")?.unwrap_or(transition.ru);
        transition.rf = get_count(h, "rf", "transition.rf")?.unwrap_or(transition.rf);
        transition.theta = get_real(h, "theta", "transition.theta")?.unwrap_or(transition.theta);
    }

    Ok(MacroConfig {
        name,
        stem,
        classes,
        input,
        blocks,
        hybrid,
        transition,
    })
}
