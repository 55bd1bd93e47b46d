use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::RerandError;
use crate::backbone::BackboneConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distribution {
    Uniform,
    Normal,
    Orthogonal,
    Sparse,
    /// Restore the initial state instead of drawing.
    Lottery,
}

impl Distribution {
    pub const ALL: [Distribution; 5] = [
        Distribution::Uniform,
        Distribution::Normal,
        Distribution::Orthogonal,
        Distribution::Sparse,
        Distribution::Lottery,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Distribution::Uniform => "uniform",
            Distribution::Normal => "normal",
            Distribution::Orthogonal => "orthogonal",
            Distribution::Sparse => "sparse",
            Distribution::Lottery => "lottery",
        }
    }
}

impl fmt::Display for Distribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Distribution {
    type Err = RerandError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|d| d.name() == s.trim())
            .ok_or_else(|| RerandError::Parse(format!("unknown distribution `{s}`")))
    }
}

/// A layer inside a residual block of the last stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayerPart {
    Conv1,
    Bn1,
    Conv2,
    Bn2,
    ShortcutConv,
    ShortcutBn,
}

impl LayerPart {
    pub const ALL: [LayerPart; 6] = [
        LayerPart::Conv1,
        LayerPart::Bn1,
        LayerPart::Conv2,
        LayerPart::Bn2,
        LayerPart::ShortcutConv,
        LayerPart::ShortcutBn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LayerPart::Conv1 => "conv1",
            LayerPart::Bn1 => "bn1",
            LayerPart::Conv2 => "conv2",
            LayerPart::Bn2 => "bn2",
            LayerPart::ShortcutConv => "shortcut_conv",
            LayerPart::ShortcutBn => "shortcut_bn",
        }
    }

    fn is_shortcut(self) -> bool {
        matches!(self, LayerPart::ShortcutConv | LayerPart::ShortcutBn)
    }

    /// Residual layers address the last block, shortcut layers the first
    /// (the only block of a stage that has a shortcut).
    fn path(self, last_block: usize) -> String {
        match self {
            LayerPart::ShortcutConv => "stage4.block1.shortcut.conv".into(),
            LayerPart::ShortcutBn => "stage4.block1.shortcut.bn".into(),
            p => format!("stage4.block{last_block}.{}", p.name()),
        }
    }
}

/// Named ways of choosing what to re-randomize.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PolicyPreset {
    /// Nothing; fine-tuning starts from the pre-trained weights.
    None,
    /// Every layer of stage 4, shortcut included.
    LastStage,
    /// `conv2` and `bn2` of the last block of stage 4.
    Topmost,
    /// Every layer of the listed stages (1-based), shortcuts included.
    Stages(Vec<usize>),
    /// A subset of the last stage's layers.
    Layers(Vec<LayerPart>),
    Custom(Vec<String>),
}

impl PolicyPreset {
    /// The eleven layer subsets of the last stage compared in the
    /// where-to-re-randomize ablation.
    pub fn last_stage_layer_columns() -> Vec<PolicyPreset> {
        use LayerPart::*;
        [
            vec![Conv1, Bn1],
            vec![Conv2, Bn2],
            vec![Conv1, Conv2],
            vec![Bn1, Bn2],
            vec![Conv1, Bn1, Conv2, Bn2],
            vec![ShortcutConv],
            vec![ShortcutBn],
            vec![ShortcutConv, ShortcutBn],
            vec![Conv1, Bn1, ShortcutConv, ShortcutBn],
            vec![Conv2, Bn2, ShortcutConv, ShortcutBn],
            vec![Conv1, Bn1, Conv2, Bn2, ShortcutConv, ShortcutBn],
        ]
        .into_iter()
        .map(PolicyPreset::Layers)
        .collect()
    }

    /// Every non-empty set of stages: singles, pairs, triples and all four.
    pub fn stage_subsets() -> Vec<PolicyPreset> {
        let mut out: Vec<Vec<usize>> = (1u32..16)
            .map(|mask| (1..=4).filter(|s| mask & (1 << (s - 1)) != 0).collect())
            .collect();
        out.sort_by_key(|s: &Vec<usize>| (std::cmp::Reverse(s.len()), s.clone()));
        out.into_iter().map(PolicyPreset::Stages).collect()
    }

    pub fn to_policy(&self, config: &BackboneConfig, distribution: Distribution, seed: u64) -> RerandPolicy {
        let last = config.blocks_per_stage[3];
        let (selectors, include_shortcut) = match self {
            PolicyPreset::None => (Vec::new(), false),
            PolicyPreset::LastStage => (vec!["stage4.*".to_string()], true),
            PolicyPreset::Topmost => (
                vec![format!("stage4.block{last}.conv2"), format!("stage4.block{last}.bn2")],
                false,
            ),
            PolicyPreset::Stages(s) => (s.iter().map(|s| format!("stage{s}.*")).collect(), true),
            PolicyPreset::Layers(parts) => (
                parts.iter().map(|p| p.path(last)).collect(),
                parts.iter().any(|p| p.is_shortcut()),
            ),
            PolicyPreset::Custom(sel) => (sel.clone(), true),
        };
        RerandPolicy { selectors, distribution, include_shortcut, reset_running_stats: true, seed }
    }
}

impl fmt::Display for PolicyPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |items: Vec<String>, sep: &str| items.join(sep);
        match self {
            PolicyPreset::None => f.write_str("none"),
            PolicyPreset::LastStage => f.write_str("last_stage"),
            PolicyPreset::Topmost => f.write_str("topmost"),
            PolicyPreset::Stages(s) => write!(f, "stages:{}", join(s.iter().map(|v| v.to_string()).collect(), ",")),
            PolicyPreset::Layers(p) => write!(f, "layers:{}", join(p.iter().map(|v| v.name().to_string()).collect(), "+")),
            PolicyPreset::Custom(s) => write!(f, "custom:{}", s.join(";")),
        }
    }
}

impl FromStr for PolicyPreset {
    type Err = RerandError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let bad = || RerandError::Parse(format!("unknown preset `{s}`"));
        Ok(match s {
            "none" => PolicyPreset::None,
            "last_stage" => PolicyPreset::LastStage,
            "topmost" => PolicyPreset::Topmost,
            _ => {
                let (kind, rest) = s.split_once(':').ok_or_else(bad)?;
                match kind {
                    "stages" => {
                        let stages = rest
                            .split(',')
                            .map(|v| v.trim().parse::<usize>().ok().filter(|s| (1..=4).contains(s)))
                            .collect::<Option<Vec<_>>>()
                            .ok_or_else(bad)?;
                        PolicyPreset::Stages(stages)
                    }
                    "layers" => {
                        let parts = rest
                            .split('+')
                            .map(|v| LayerPart::ALL.into_iter().find(|p| p.name() == v.trim()))
                            .collect::<Option<Vec<_>>>()
                            .ok_or_else(bad)?;
                        PolicyPreset::Layers(parts)
                    }
                    "custom" => PolicyPreset::Custom(rest.split(';').map(|v| v.trim().to_string()).collect()),
                    _ => return Err(bad()),
                }
            }
        })
    }
}

/// Where and how to re-randomize.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RerandPolicy {
    pub selectors: Vec<String>,
    pub distribution: Distribution,
    /// Allow matches inside `*.shortcut.*`.
    pub include_shortcut: bool,
    /// Also reset batch-norm running statistics to mean 0, variance 1.
    pub reset_running_stats: bool,
    pub seed: u64,
}

impl RerandPolicy {
    pub fn new(selectors: Vec<String>, distribution: Distribution, seed: u64) -> Self {
        Self { selectors, distribution, include_shortcut: false, reset_running_stats: true, seed }
    }

    pub fn is_empty(&self) -> bool {
        self.selectors.is_empty()
    }
}

/// `rerand { distribution=…, selectors=[…], include_shortcut=…, reset_running_stats=…, seed=… }`
impl fmt::Display for RerandPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "rerand {{ distribution={}, selectors=[{}], include_shortcut={}, reset_running_stats={}, seed={} }}",
            self.distribution,
            self.selectors.join(", "),
            self.include_shortcut,
            self.reset_running_stats,
            self.seed
        )
    }
}

impl FromStr for RerandPolicy {
    type Err = RerandError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = |m: &str| RerandError::Parse(m.to_string());
        let body = s
            .trim()
            .strip_prefix("rerand")
            .map(str::trim_start)
            .and_then(|b| b.strip_prefix('{'))
            .and_then(|b| b.trim_end().strip_suffix('}'))
            .ok_or_else(|| err("expected `rerand { ... }`"))?;

        // split on commas outside brackets
        let mut fields = Vec::new();
        let (mut depth, mut start) = (0i32, 0);
        for (i, ch) in body.char_indices() {
            match ch {
                '[' => depth += 1,
                ']' => depth -= 1,
                ',' if depth == 0 => {
                    fields.push(&body[start..i]);
                    start = i + 1;
                }
                _ => {}
            }
            if depth < 0 {
                return Err(err("unbalanced brackets"));
            }
        }
        if depth != 0 {
            return Err(err("unbalanced brackets"));
        }
        fields.push(&body[start..]);

        let mut policy = RerandPolicy::new(Vec::new(), Distribution::Uniform, 0);
        let mut seen_selectors = false;
        for field in fields.into_iter().map(str::trim).filter(|f| !f.is_empty()) {
            let (key, value) = field.split_once('=').ok_or_else(|| err(&format!("field `{field}` lacks `=`")))?;
            let value = value.trim();
            let boolean = |v: &str| v.parse::<bool>().map_err(|_| err(&format!("`{v}` is not a boolean")));
            match key.trim() {
                "distribution" => policy.distribution = value.parse()?,
                "selectors" => {
                    let inner = value
                        .strip_prefix('[')
                        .and_then(|v| v.strip_suffix(']'))
                        .ok_or_else(|| err("selectors must be a [list]"))?;
                    policy.selectors =
                        inner.split(',').map(str::trim).filter(|v| !v.is_empty()).map(str::to_string).collect();
                    for sel in &policy.selectors {
                        validate_glob(sel)?;
                    }
                    seen_selectors = true;
                }
                "include_shortcut" => policy.include_shortcut = boolean(value)?,
                "reset_running_stats" => policy.reset_running_stats = boolean(value)?,
                "seed" => policy.seed = value.parse().map_err(|_| err(&format!("bad seed `{value}`")))?,
                other => return Err(err(&format!("unknown field `{other}`"))),
            }
        }
        if !seen_selectors {
            return Err(err("missing selectors"));
        }
        Ok(policy)
    }
}

/// Selectors are dotted layer paths with `*` (any run of characters) and
/// `?` (one character) wildcards.
pub fn validate_glob(glob: &str) -> Result<(), RerandError> {
    let ok = !glob.is_empty()
        && glob.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '*' | '?'))
        && !glob.starts_with('.')
        && !glob.ends_with('.')
        && !glob.contains("..");
    if ok {
        Ok(())
    } else {
        Err(RerandError::BadGlob(glob.to_string()))
    }
}

pub fn glob_match(glob: &str, text: &str) -> bool {
    let (g, t) = (glob.as_bytes(), text.as_bytes());
    let (mut gi, mut ti) = (0, 0);
    let mut star: Option<(usize, usize)> = None;
    while ti < t.len() {
        if gi < g.len() && (g[gi] == b'?' || g[gi] == t[ti]) {
            gi += 1;
            ti += 1;
        } else if gi < g.len() && g[gi] == b'*' {
            star = Some((gi, ti));
            gi += 1;
        } else if let Some((sg, st)) = star {
            gi = sg + 1;
            ti = st + 1;
            star = Some((sg, st + 1));
        } else {
            return false;
        }
    }
    g[gi..].iter().all(|&c| c == b'*')
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn glob_semantics() {
        assert!(glob_match("stage4.*", "stage4.block1.shortcut.conv"));
        assert!(!glob_match("stage4.*", "stage3.block1.conv1"));
        assert!(glob_match("stage?.block1.bn2", "stage2.block1.bn2"));
        assert!(glob_match("*", "stem.conv"));
        assert!(glob_match("stage4.block1.conv2", "stage4.block1.conv2"));
        assert!(!glob_match("stage4.block1.conv2", "stage4.block1.conv21"));
        assert!(glob_match("*.bn?", "stage1.block1.bn1"));
    }

    #[test]
    fn presets_parse_and_print() {
        for text in ["none", "last_stage", "topmost", "stages:1,4", "layers:conv2+bn2+shortcut_bn", "custom:stem.*;stage1.*"] {
            let p: PolicyPreset = text.parse().unwrap();
            assert_eq!(p.to_string(), text);
        }
        assert!("stages:5".parse::<PolicyPreset>().is_err());
        assert!("layers:conv3".parse::<PolicyPreset>().is_err());
    }

    #[test]
    fn eleven_layer_columns_and_fifteen_stage_subsets() {
        assert_eq!(PolicyPreset::last_stage_layer_columns().len(), 11);
        let subsets = PolicyPreset::stage_subsets();
        assert_eq!(subsets.len(), 15);
        assert_eq!(subsets[0], PolicyPreset::Stages(vec![1, 2, 3, 4]));
        assert_eq!(subsets[14], PolicyPreset::Stages(vec![4]));
    }

    #[test]
    fn policy_text_block() {
        let text = "rerand { distribution=orthogonal, selectors=[stage4.block1.conv2, stage4.block1.bn2], include_shortcut=false, reset_running_stats=true, seed=7 }";
        let p: RerandPolicy = text.parse().unwrap();
        assert_eq!(p.distribution, Distribution::Orthogonal);
        assert_eq!(p.selectors.len(), 2);
        assert_eq!(p.to_string(), text);
        assert!("rerand { distribution=uniform }".parse::<RerandPolicy>().is_err());
        assert!("rerand { selectors=[a b] }".parse::<RerandPolicy>().is_err());
        assert!("policy { selectors=[x] }".parse::<RerandPolicy>().is_err());
    }

    proptest! {
        #[test]
        fn policy_text_round_trips(
            sel in proptest::collection::vec("[a-z][a-z0-9_]{0,6}(\\.[a-z0-9_*?]{1,6}){0,3}", 0..5),
            dist in 0usize..5,
            sc in any::<bool>(),
            rs in any::<bool>(),
            seed in any::<u64>(),
        ) {
            let p = RerandPolicy {
                selectors: sel,
                distribution: Distribution::ALL[dist],
                include_shortcut: sc,
                reset_running_stats: rs,
                seed,
            };
            let back: RerandPolicy = p.to_string().parse().unwrap();
            prop_assert_eq!(back, p);
        }
    }
}
