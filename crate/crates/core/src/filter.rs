//! Glob-based tensor name selection.

use glob::{MatchOptions, Pattern, PatternError};

const OPTIONS: MatchOptions =
    MatchOptions { case_sensitive: true, require_literal_separator: false, require_literal_leading_dot: false };

/// Include/exclude glob lists over tensor names. An empty include list
/// selects everything; exclusion wins over inclusion.
#[derive(Debug, Clone, Default)]
pub struct NameFilter {
    include: Vec<Pattern>,
    exclude: Vec<Pattern>,
}

impl NameFilter {
    pub fn new<S: AsRef<str>>(include: &[S], exclude: &[S]) -> Result<Self, PatternError> {
        let compile = |ps: &[S]| ps.iter().map(|p| Pattern::new(p.as_ref())).collect::<Result<Vec<_>, _>>();
        Ok(Self { include: compile(include)?, exclude: compile(exclude)? })
    }

    pub fn all() -> Self {
        Self::default()
    }

    pub fn is_included(&self, name: &str) -> bool {
        self.include.is_empty() || self.include.iter().any(|p| p.matches_with(name, OPTIONS))
    }

    pub fn is_excluded(&self, name: &str) -> bool {
        self.exclude.iter().any(|p| p.matches_with(name, OPTIONS))
    }

    pub fn matches(&self, name: &str) -> bool {
        self.is_included(name) && !self.is_excluded(name)
    }
}
