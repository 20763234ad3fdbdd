use serde::{Deserialize, Serialize};

use crate::layout::PackedLayout;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Annotation {
    None,
    Parallel,
    Vectorize,
    Unroll,
}

/// One transformation in a program's history. Histories are the unit of
/// record: programs are always rebuilt by replaying them.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "step", rename_all = "snake_case")]
pub enum RewriteStep {
    /// Inner factors, outermost first; the outermost part is inferred.
    /// `None` is an unresolved sketch placeholder and acts as 1.
    Split {
        stage: String,
        #[serde(rename = "loop")]
        loop_name: String,
        factors: Vec<Option<u64>>,
    },
    /// Splits a loop into `n_parts` copying the part extents of another
    /// stage's split; the last part absorbs the remaining inner parts.
    FollowSplit {
        stage: String,
        #[serde(rename = "loop")]
        loop_name: String,
        src_stage: String,
        src_loop: String,
        n_parts: usize,
    },
    FuseLoops {
        stage: String,
        outer: String,
        inner: String,
    },
    Reorder {
        stage: String,
        order: Vec<String>,
    },
    ComputeAt {
        stage: String,
        target: String,
        #[serde(rename = "loop")]
        loop_name: String,
    },
    ComputeRoot {
        stage: String,
    },
    ComputeInline {
        stage: String,
    },
    CacheWrite {
        stage: String,
    },
    Rfactor {
        stage: String,
        #[serde(rename = "loop")]
        loop_name: String,
        factor: Option<u64>,
    },
    Annotate {
        stage: String,
        #[serde(rename = "loop")]
        loop_name: String,
        annotation: Annotation,
    },
    SetPragma {
        stage: String,
        auto_unroll_max_step: u64,
    },
    LayoutRewrite {
        buffer: String,
        layout: PackedLayout,
    },
    /// Marks loops whose extent is currently 1 as removed from the nest.
    Simplify,
}

impl RewriteStep {
    /// The stage the step edits, if any.
    pub fn stage(&self) -> Option<&str> {
        match self {
            RewriteStep::Split { stage, .. }
            | RewriteStep::FollowSplit { stage, .. }
            | RewriteStep::FuseLoops { stage, .. }
            | RewriteStep::Reorder { stage, .. }
            | RewriteStep::ComputeAt { stage, .. }
            | RewriteStep::ComputeRoot { stage }
            | RewriteStep::ComputeInline { stage }
            | RewriteStep::CacheWrite { stage }
            | RewriteStep::Rfactor { stage, .. }
            | RewriteStep::Annotate { stage, .. }
            | RewriteStep::SetPragma { stage, .. } => Some(stage),
            RewriteStep::LayoutRewrite { .. } | RewriteStep::Simplify => None,
        }
    }

    pub fn is_split(&self) -> bool {
        matches!(self, RewriteStep::Split { .. } | RewriteStep::FollowSplit { .. })
    }
}
