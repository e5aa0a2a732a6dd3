use std::fmt;
use std::str::FromStr;

use crate::attention::{LocalityPattern, PatternKind};
use crate::error::{Error, Result};

/// Which layers of the stack are global (SSM + local attention) layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Placement {
    /// The lowest `k` layers.
    Bottom(usize),
    All,
    /// Only the final layer.
    Top1,
    /// No global layer: a purely local model.
    None,
}

impl Placement {
    /// Indices of global layers in a stack of `depth`.
    pub fn global_layers(self, depth: usize) -> Result<Vec<usize>> {
        match self {
            Placement::Bottom(k) if k > depth => Err(Error::InvalidArgument(format!(
                "bottom_{k} placement needs at least {k} layers, model has {depth}"
            ))),
            Placement::Bottom(k) => Ok((0..k).collect()),
            Placement::All => Ok((0..depth).collect()),
            Placement::Top1 if depth == 0 => Err(Error::InvalidArgument("top_1 placement on an empty stack".into())),
            Placement::Top1 => Ok(vec![depth - 1]),
            Placement::None => Ok(Vec::new()),
        }
    }
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Placement::Bottom(k) => write!(f, "bottom_{k}"),
            Placement::All => f.write_str("all"),
            Placement::Top1 => f.write_str("top_1"),
            Placement::None => f.write_str("none"),
        }
    }
}

impl FromStr for Placement {
    type Err = Error;

    /// Accepts `bottom_k`, `b-k`, `all`, `top_1`, `top-1` and `none`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("unknown placement `{s}`"));
        match s {
            "all" => Ok(Placement::All),
            "top_1" | "top-1" => Ok(Placement::Top1),
            "none" => Ok(Placement::None),
            _ => {
                let k = s
                    .strip_prefix("bottom_")
                    .or_else(|| s.strip_prefix("b-"))
                    .ok_or_else(bad)?;
                k.parse().map(Placement::Bottom).map_err(|_| bad())
            }
        }
    }
}

/// Overall layer family of a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Architecture {
    /// Local layers with global layers at the configured placement.
    Hybrid,
    /// Every layer is an SSM block without attention.
    SsmOnly,
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::Hybrid => "hybrid",
            Architecture::SsmOnly => "ssm_only",
        })
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hybrid" => Ok(Architecture::Hybrid),
            "ssm_only" => Ok(Architecture::SsmOnly),
            other => Err(Error::InvalidArgument(format!("unknown architecture `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab: usize,
    pub d: usize,
    pub depth: usize,
    pub heads: usize,
    pub pattern: LocalityPattern,
    pub placement: Placement,
    pub architecture: Architecture,
    pub d_state: usize,
    pub ffn_mult: usize,
    /// Explicit FFN hidden width; 0 means `ffn_mult * d`.
    pub ffn_hidden: usize,
    /// Train the SSM readout `C` and step sizes; `A`, `B`, `P` stay fixed.
    pub ssm_trainable: bool,
    pub tie_embeddings: bool,
    /// Output classes for the pooled classifier head; 0 disables it.
    pub classes: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab: 256,
            d: 128,
            depth: 4,
            heads: 4,
            pattern: LocalityPattern::window(64, true),
            placement: Placement::Bottom(1),
            architecture: Architecture::Hybrid,
            d_state: 64,
            ffn_mult: 4,
            ffn_hidden: 0,
            ssm_trainable: false,
            tie_embeddings: true,
            classes: 0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::config(format!("model.{key}"), msg));
        if self.vocab == 0 {
            return bad("vocab", "must be at least 1".into());
        }
        if self.d == 0 {
            return bad("d", "must be at least 1".into());
        }
        if self.depth == 0 {
            return bad("depth", "must be at least 1".into());
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return bad("heads", format!("{} heads do not divide d = {}", self.heads, self.d));
        }
        if self.d_state == 0 {
            return bad("d_state", "must be at least 1".into());
        }
        if self.ffn_mult == 0 {
            return bad("ffn_mult", "must be at least 1".into());
        }
        if let Err(e) = self.pattern.validate() {
            let key = match self.pattern.kind {
                PatternKind::Chunk => "chunk",
                _ => "window",
            };
            return bad(key, e.to_string());
        }
        if let Err(e) = self.placement.global_layers(self.depth) {
            return bad("placement", e.to_string());
        }
        Ok(())
    }

    /// Hidden width of every feed-forward block.
    pub fn ffn_width(&self) -> usize {
        if self.ffn_hidden > 0 {
            self.ffn_hidden
        } else {
            self.ffn_mult * self.d
        }
    }

    /// Per-layer kinds implied by architecture and placement.
    pub fn layer_kinds(&self) -> Result<Vec<LayerKind>> {
        if self.architecture == Architecture::SsmOnly {
            return Ok(vec![LayerKind::Ssm; self.depth]);
        }
        let globals = self.placement.global_layers(self.depth)?;
        Ok((0..self.depth)
            .map(|i| if globals.contains(&i) { LayerKind::Global } else { LayerKind::Local })
            .collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Global,
    Local,
    Ssm,
}

impl LayerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Global => "global",
            LayerKind::Local => "local",
            LayerKind::Ssm => "ssm",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn placement_indices() {
        assert_eq!(Placement::Bottom(1).global_layers(4).unwrap(), vec![0]);
        assert_eq!(Placement::Bottom(3).global_layers(4).unwrap(), vec![0, 1, 2]);
        assert_eq!(Placement::All.global_layers(3).unwrap(), vec![0, 1, 2]);
        assert_eq!(Placement::Top1.global_layers(5).unwrap(), vec![4]);
        assert!(Placement::None.global_layers(2).unwrap().is_empty());
        assert!(Placement::Bottom(5).global_layers(4).is_err());
    }

    #[test]
    fn placement_names_round_trip() {
        for p in [Placement::Bottom(4), Placement::All, Placement::Top1, Placement::None] {
            assert_eq!(p.to_string().parse::<Placement>().unwrap(), p);
        }
        assert_eq!("b-8".parse::<Placement>().unwrap(), Placement::Bottom(8));
        assert_eq!("top-1".parse::<Placement>().unwrap(), Placement::Top1);
        assert!("middle".parse::<Placement>().is_err());
        assert!("bottom_x".parse::<Placement>().is_err());
    }

    #[test]
    fn default_is_one_bottom_global_layer() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        let kinds = cfg.layer_kinds().unwrap();
        assert_eq!(kinds[0], LayerKind::Global);
        assert!(kinds[1..].iter().all(|&k| k == LayerKind::Local));
    }

    #[test]
    fn invalid_configs_name_their_key() {
        let cfg = ModelConfig {
            heads: 3,
            ..ModelConfig::default()
        };
        match cfg.validate() {
            Err(Error::Config { key, .. }) => assert_eq!(key, "model.heads"),
            other => panic!("{other:?}"),
        }
    }
}
