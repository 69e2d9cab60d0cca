use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hyperparameters of one network variant.
///
/// Per-level vectors are indexed from the outermost (full resolution) level
/// inwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub growth_rate_k: usize,
    pub num_repeat_blocks: usize,
    pub stem_channels: usize,
    pub num_classes: usize,
    #[serde(default = "default_input_channels")]
    pub input_channels: usize,
    #[serde(default = "default_dropout")]
    pub dropout_p: f64,
    /// Output/input channel ratio of each Downsample 1×1 convolution.
    #[serde(default = "default_compression")]
    pub downsample_compression: f64,
    pub blocks: BlockCounts,
    #[serde(default)]
    pub aspp: AsppConfig,
}

/// Basic-Layer counts of every dense block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockCounts {
    pub down: Vec<usize>,
    pub up: Vec<usize>,
    pub bottom: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AsppConfig {
    #[serde(default = "default_partial")]
    pub partial_channels: usize,
    /// One triple per ASPP level (levels 2..num_repeat_blocks-1). Left empty,
    /// defaults are derived from the depth.
    #[serde(default)]
    pub dilations: Vec<[usize; 3]>,
}

impl Default for AsppConfig {
    fn default() -> Self {
        AsppConfig { partial_channels: default_partial(), dilations: Vec::new() }
    }
}

fn default_name() -> String {
    "custom".into()
}
fn default_input_channels() -> usize {
    3
}
fn default_dropout() -> f64 {
    0.05
}
fn default_compression() -> f64 {
    1.0
}
fn default_partial() -> usize {
    32
}

const PRESETS: &[(&str, &str)] = &[
    ("combinet-s", include_str!("../../presets/combinet-s.toml")),
    ("combinet-m", include_str!("../../presets/combinet-m.toml")),
    ("combinet-l", include_str!("../../presets/combinet-l.toml")),
    ("combinet-mini", include_str!("../../presets/combinet-mini.toml")),
];

/// Default dilation triples: (2,4,8) at the shallowest ASPP level, each rate
/// halved per level deeper, falling back to (1,2,3) once rates collide.
pub fn default_dilations(levels: usize) -> Vec<[usize; 3]> {
    (0..levels)
        .map(|i| {
            let r = [2usize, 4, 8].map(|d| d >> i.min(63));
            if r[0] == 0 || r[0] == r[1] || r[1] == r[2] {
                [1, 2, 3]
            } else {
                r
            }
        })
        .collect()
}

impl ArchConfig {
    pub fn preset_names() -> impl Iterator<Item = &'static str> {
        PRESETS.iter().map(|(n, _)| *n)
    }

    pub fn preset(name: &str) -> Result<Self> {
        let (_, text) = PRESETS
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::Config(vec![format!("unknown preset `{name}`")]))?;
        Self::from_toml(text, name)
    }

    /// Preset name or path to a TOML file.
    pub fn load(spec: &str) -> Result<Self> {
        if PRESETS.iter().any(|(n, _)| *n == spec) {
            return Self::preset(spec);
        }
        let path = Path::new(spec);
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, &path.display().to_string())
    }

    pub fn from_toml(text: &str, origin: &str) -> Result<Self> {
        let mut cfg: ArchConfig =
            toml::from_str(text).map_err(|e| Error::Config(vec![format!("{origin}: {e}")]))?;
        let levels = cfg.aspp_levels().count();
        if cfg.aspp.dilations.is_empty() && levels > 0 {
            cfg.aspp.dilations = default_dilations(levels);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Levels (1-based) that route their skip through ASPP.
    pub fn aspp_levels(&self) -> impl Iterator<Item = usize> {
        2..self.num_repeat_blocks.max(2)
    }

    pub fn dilations_at(&self, level: usize) -> Option<[usize; 3]> {
        if level < 2 || level >= self.num_repeat_blocks {
            return None;
        }
        self.aspp.dilations.get(level - 2).copied()
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let positive = [
            ("growth_rate_k", self.growth_rate_k),
            ("num_repeat_blocks", self.num_repeat_blocks),
            ("stem_channels", self.stem_channels),
            ("num_classes", self.num_classes),
            ("input_channels", self.input_channels),
            ("blocks.bottom", self.blocks.bottom),
            ("aspp.partial_channels", self.aspp.partial_channels),
        ];
        for (field, v) in positive {
            if v == 0 {
                errs.push(format!("{field} must be positive"));
            }
        }
        let n = self.num_repeat_blocks;
        for (field, counts) in [("blocks.down", &self.blocks.down), ("blocks.up", &self.blocks.up)] {
            if counts.len() != n {
                errs.push(format!("{field} has {} entries, expected num_repeat_blocks = {n}", counts.len()));
            }
            if let Some(i) = counts.iter().position(|&c| c == 0) {
                errs.push(format!("{field}[{i}] must be at least 1"));
            }
        }
        if let Some(i) = self.blocks.down.windows(2).position(|w| w[1] < w[0]) {
            errs.push(format!(
                "blocks.down must not decrease towards smaller resolution (entry {} < entry {i})",
                i + 1
            ));
        }
        let want = n.saturating_sub(2);
        if self.aspp.dilations.len() != want {
            errs.push(format!(
                "aspp.dilations has {} triples, expected {want} (levels 2..{})",
                self.aspp.dilations.len(),
                n.saturating_sub(1)
            ));
        }
        for (i, d) in self.aspp.dilations.iter().enumerate() {
            if d.contains(&0) || d[0] == d[1] || d[1] == d[2] || d[0] == d[2] {
                errs.push(format!("aspp.dilations[{i}] = {d:?} must be distinct positive rates"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            errs.push(format!("dropout_p = {} outside [0, 1)", self.dropout_p));
        }
        if !(self.downsample_compression > 0.0 && self.downsample_compression.is_finite()) {
            errs.push(format!("downsample_compression = {} must be positive", self.downsample_compression));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Inputs must have H and W divisible by this for the output to match
    /// the input resolution.
    pub fn spatial_multiple(&self) -> usize {
        1 << self.num_repeat_blocks
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_parse_and_validate() {
        for name in ArchConfig::preset_names() {
            let cfg = ArchConfig::preset(name).unwrap();
            assert_eq!(cfg.name, name);
            assert_eq!(cfg.aspp.dilations.len(), cfg.num_repeat_blocks - 2);
        }
    }

    #[test]
    fn toml_round_trip() {
        let cfg = ArchConfig::preset("combinet-m").unwrap();
        let back = ArchConfig::from_toml(&cfg.to_toml(), "echo").unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn default_dilation_schedule() {
        assert_eq!(default_dilations(3), vec![[2, 4, 8], [1, 2, 4], [1, 2, 3]]);
        assert!(default_dilations(0).is_empty());
    }

    #[test]
    fn violations_are_listed() {
        let text = r#"
            growth_rate_k = 0
            num_repeat_blocks = 3
            stem_channels = 8
            num_classes = 2
            dropout_p = 1.5
            [blocks]
            down = [3, 2]
            up = [1, 1, 1]
            bottom = 1
            [aspp]
            dilations = [[1, 1, 2]]
        "#;
        let Err(Error::Config(errs)) = ArchConfig::from_toml(text, "bad") else {
            panic!("expected config error")
        };
        let joined = errs.join("\n");
        for needle in ["growth_rate_k", "blocks.down has 2", "must not decrease", "distinct", "dropout_p"] {
            assert!(joined.contains(needle), "missing {needle}: {joined}");
        }
    }

    #[test]
    fn unknown_field_reports_location() {
        let err = ArchConfig::from_toml("growth_rate = 3\n", "x.toml").unwrap_err().to_string();
        assert!(err.contains("x.toml"), "{err}");
        assert!(err.contains("line 1") || err.contains("growth_rate"), "{err}");
    }
}
