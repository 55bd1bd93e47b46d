use serde::{Deserialize, Serialize};

/// What sits on top of the backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadKind {
    /// `d → out` classifier on the pooled embedding.
    LinearClassifier,
    /// `linear(d→d) → ReLU → linear(d→out)` projection for contrastive training.
    ProjectionMlp,
    /// Average-pool the output of `stage` (1-based), then `C_stage → out`.
    AuxProbe { stage: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Head {
    pub kind: HeadKind,
    pub out_dim: usize,
}

impl Head {
    /// Linear layers making up the head, input to output.
    pub fn layer_paths(&self) -> Vec<String> {
        match self.kind {
            HeadKind::LinearClassifier => vec!["head.fc".into()],
            HeadKind::ProjectionMlp => vec!["head.proj1".into(), "head.proj2".into()],
            HeadKind::AuxProbe { stage } => vec![format!("head.probe{stage}")],
        }
    }

    /// Recovers the head from the `head.*` layer paths of a registry.
    pub fn infer<'a>(paths: impl IntoIterator<Item = &'a str>, out_dim_of: impl Fn(&str) -> usize) -> Option<Head> {
        let paths: Vec<&str> = paths.into_iter().filter(|p| p.starts_with("head.")).collect();
        let first = *paths.first()?;
        let kind = match first {
            "head.fc" => HeadKind::LinearClassifier,
            "head.proj1" | "head.proj2" => HeadKind::ProjectionMlp,
            p => HeadKind::AuxProbe { stage: p.strip_prefix("head.probe")?.parse().ok()? },
        };
        let last = Head { kind, out_dim: 0 }.layer_paths().pop()?;
        Some(Head { kind, out_dim: out_dim_of(&last) })
    }
}
