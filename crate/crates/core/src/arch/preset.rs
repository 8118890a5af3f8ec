use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use super::config::{MacroConfig, Stem};
use crate::error::Error;

/// Classes for the CIFAR-style presets.
pub const CIFAR_CLASSES: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum Preset {
    A1,
    A2,
    A3,
    B,
    C,
}

/// Published model size and cost.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PaperTarget {
    /// Learnable parameters, in millions.
    pub params_m: f64,
    /// Multiply-accumulates, in billions.
    pub macs_g: f64,
    pub input: usize,
}

impl Preset {
    pub const ALL: [Preset; 5] = [Preset::A1, Preset::A2, Preset::A3, Preset::B, Preset::C];

    pub fn name(self) -> &'static str {
        match self {
            Preset::A1 => "a1",
            Preset::A2 => "a2",
            Preset::A3 => "a3",
            Preset::B => "b",
            Preset::C => "c",
        }
    }

    pub fn config(self) -> MacroConfig {
        let (stem, blocks, classes, input): (Stem, &[(usize, usize)], usize, usize) = match self {
            Preset::A1 => (Stem::Cifar, &[(8, 12), (8, 24), (8, 36)], CIFAR_CLASSES, 32),
            Preset::A2 => (Stem::Cifar, &[(8, 24), (8, 36), (8, 64)], CIFAR_CLASSES, 32),
            Preset::A3 => (Stem::Cifar, &[(12, 36), (12, 48), (12, 80)], CIFAR_CLASSES, 32),
            Preset::B => (Stem::Imagenet, &[(3, 32), (6, 48), (12, 64), (8, 96)], 1000, 224),
            Preset::C => (Stem::Imagenet, &[(6, 48), (12, 56), (18, 72), (14, 112)], 1000, 224),
        };
        MacroConfig::new(format!("hcgnet-{}", self.name()), stem, blocks, classes, input)
    }

    pub fn target(self) -> PaperTarget {
        let (params_m, macs_g, input) = match self {
            Preset::A1 => (1.1, 0.2, 32),
            Preset::A2 => (3.1, 0.5, 32),
            Preset::A3 => (11.4, 2.0, 32),
            Preset::B => (12.9, 2.0, 224),
            Preset::C => (42.2, 7.1, 224),
        };
        PaperTarget {
            params_m,
            macs_g,
            input,
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::UnknownPreset(s.to_string()))
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}
