use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tabular::TaskKind;

/// Where layer norm sits relative to each residual branch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormPosition {
    /// `x + f(LN(x))`, with a final norm before pooling.
    Pre,
    /// `LN(x + f(x))`.
    #[default]
    Post,
}

/// `(additive, multiplicative, prompts)` toggles of the six ablation rows.
pub const ABLATION_GRID: [(bool, bool, bool); 6] = [
    (true, false, false),
    (true, false, true),
    (false, true, false),
    (false, true, true),
    (true, true, false),
    (true, true, true),
];

/// Ablation row name, e.g. `add1_mul0_prompt1`.
pub fn toggle_name(additive: bool, multiplicative: bool, prompts: bool) -> String {
    format!("add{}_mul{}_prompt{}", additive as u8, multiplicative as u8, prompts as u8)
}

/// Feature count above which the automatic prompt schedule starts shrinking.
pub const AUTO_PROMPT_LIMIT: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AmformerConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    /// Scores kept per query row; values at or above the key count mean dense attention.
    pub k: usize,
    pub use_additive: bool,
    pub use_multiplicative: bool,
    pub use_prompts: bool,
    /// Prompt rows per layer. Empty with prompts on selects the automatic rule:
    /// `N_p = N` up to [`AUTO_PROMPT_LIMIT`] features, otherwise 256 halving per layer.
    pub prompt_schedule: Vec<usize>,
    /// One prompt matrix per layer serving both streams.
    pub share_prompts: bool,
    pub ff_dropout: f64,
    pub attn_dropout: f64,
    pub ff_mult: usize,
    pub eps: f64,
    pub exp_clamp: (f64, f64),
    pub norm: NormPosition,
    pub task: TaskKind,
}

impl Default for AmformerConfig {
    fn default() -> Self {
        Self {
            d: 192,
            layers: 3,
            heads: 8,
            k: 8,
            use_additive: true,
            use_multiplicative: true,
            use_prompts: true,
            prompt_schedule: Vec::new(),
            share_prompts: false,
            ff_dropout: 0.1,
            attn_dropout: 0.2,
            ff_mult: 4,
            eps: 1.0,
            exp_clamp: (-30.0, 30.0),
            norm: NormPosition::Post,
            task: TaskKind::Multiclass { classes: 2 },
        }
    }
}

impl AmformerConfig {
    /// Published defaults: 3 layers, 8 heads, k = 8, width 192.
    pub fn paper(task: TaskKind) -> Self {
        Self {
            task,
            ..Self::default()
        }
    }

    /// Laptop-sized model: width 32, 2 layers, 4 heads, k = 8.
    pub fn desk(task: TaskKind) -> Self {
        Self {
            d: 32,
            layers: 2,
            heads: 4,
            task,
            ..Self::default()
        }
    }

    pub fn preset(name: &str, task: TaskKind) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper(task)),
            "desk" => Ok(Self::desk(task)),
            other => Err(Error::Config(format!("unknown preset `{other}` (expected `paper` or `desk`)"))),
        }
    }

    /// Classic encoder with the same width, depth and heads: additive stream only,
    /// dense attention over `n` tokens, data-dependent queries.
    pub fn plain_transformer(&self, n: usize) -> Self {
        Self {
            k: n.max(1),
            use_additive: true,
            use_multiplicative: false,
            use_prompts: false,
            prompt_schedule: Vec::new(),
            share_prompts: false,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d == 0 || self.layers == 0 || self.heads == 0 || self.ff_mult == 0 {
            return bad("d, layers, heads and ff_mult must be >= 1".into());
        }
        if self.d % self.heads != 0 {
            return bad(format!("d = {} is not divisible by heads = {}", self.d, self.heads));
        }
        if self.k == 0 {
            return bad("k must be >= 1".into());
        }
        if !self.use_additive && !self.use_multiplicative {
            return bad("at least one of use_additive / use_multiplicative must be on".into());
        }
        if !self.prompt_schedule.is_empty() {
            if self.prompt_schedule.len() != self.layers {
                return bad(format!(
                    "prompt_schedule has {} entries for {} layers",
                    self.prompt_schedule.len(),
                    self.layers
                ));
            }
            if self.prompt_schedule.contains(&0) {
                return bad("prompt_schedule entries must be >= 1".into());
            }
        }
        for (name, p) in [("ff_dropout", self.ff_dropout), ("attn_dropout", self.attn_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1), got {p}"));
            }
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps must be > 0, got {}", self.eps));
        }
        if !(self.exp_clamp.0 < self.exp_clamp.1) {
            return bad(format!("exp_clamp needs lo < hi, got {:?}", self.exp_clamp));
        }
        if let TaskKind::Multiclass { classes } = self.task {
            if classes < 2 {
                return bad(format!("multiclass head needs >= 2 classes, got {classes}"));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    /// Query rows of every layer for `n` input tokens; empty when prompts are off.
    pub fn resolved_prompts(&self, n: usize) -> Vec<usize> {
        if !self.use_prompts {
            return Vec::new();
        }
        if !self.prompt_schedule.is_empty() {
            return self.prompt_schedule.clone();
        }
        if n <= AUTO_PROMPT_LIMIT {
            vec![n; self.layers]
        } else {
            (0..self.layers)
                .map(|l| (AUTO_PROMPT_LIMIT >> l.min(usize::BITS as usize - 1)).max(1))
                .collect()
        }
    }

    /// `(rows_in, rows_out)` of every layer for `n` input tokens.
    pub fn layer_rows(&self, n: usize) -> Vec<(usize, usize)> {
        let prompts = self.resolved_prompts(n);
        let mut rows = n;
        (0..self.layers)
            .map(|l| {
                let out = prompts.get(l).copied().unwrap_or(rows);
                let r = (rows, out);
                rows = out;
                r
            })
            .collect()
    }
}

/// Multiplies in the attention-score products `Q·Kᵀ` of one stream, per layer:
/// `heads · rows_out · rows_in · d_head`.
pub fn score_ops_per_layer(cfg: &AmformerConfig, n: usize) -> Vec<u64> {
    cfg.layer_rows(n)
        .into_iter()
        .map(|(rin, rout)| (cfg.heads * rout * rin * cfg.head_dim()) as u64)
        .collect()
}

/// Score multiplies of the first layer; see [`score_ops_per_layer`].
pub fn count_score_ops(cfg: &AmformerConfig, n: usize) -> u64 {
    score_ops_per_layer(cfg, n)[0]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with_prompts(np: usize) -> AmformerConfig {
        AmformerConfig {
            layers: 1,
            prompt_schedule: vec![np],
            ..AmformerConfig::desk(TaskKind::Binary)
        }
    }

    #[test]
    fn score_op_ratios() {
        let cfg = with_prompts(64);
        let plain = AmformerConfig {
            use_prompts: false,
            ..cfg.clone()
        };
        assert_eq!(count_score_ops(&cfg, 512) * 8, count_score_ops(&plain, 512));
        assert_eq!(count_score_ops(&cfg, 1024), 2 * count_score_ops(&cfg, 512));
        assert_eq!(count_score_ops(&with_prompts(16), 16), count_score_ops(&plain, 16));
        assert_eq!(count_score_ops(&plain, 16), (4 * 16 * 16 * 8) as u64);
    }

    #[test]
    fn automatic_schedule() {
        let cfg = AmformerConfig::paper(TaskKind::Binary);
        assert_eq!(cfg.resolved_prompts(8), vec![8, 8, 8]);
        assert_eq!(cfg.resolved_prompts(2000), vec![256, 128, 64]);
        assert_eq!(cfg.layer_rows(2000), vec![(2000, 256), (256, 128), (128, 64)]);
        assert!(cfg.plain_transformer(8).resolved_prompts(8).is_empty());
    }

    #[test]
    fn validation() {
        let ok = AmformerConfig::desk(TaskKind::Regression);
        ok.validate().unwrap();
        for bad in [
            AmformerConfig { d: 30, ..ok.clone() },
            AmformerConfig { k: 0, ..ok.clone() },
            AmformerConfig {
                use_additive: false,
                use_multiplicative: false,
                ..ok.clone()
            },
            AmformerConfig {
                prompt_schedule: vec![4],
                ..ok.clone()
            },
            AmformerConfig { eps: 0.0, ..ok.clone() },
            AmformerConfig {
                attn_dropout: 1.0,
                ..ok.clone()
            },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
        assert!(AmformerConfig::preset("huge", TaskKind::Binary).is_err());
    }
}
