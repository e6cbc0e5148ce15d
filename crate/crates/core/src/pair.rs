use serde::{Deserialize, Serialize};

/// A typically-small object and a typically-large object to be drawn with
/// their sizes swapped.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ObjectPair {
    pub small: String,
    pub big: String,
}

impl ObjectPair {
    pub fn new(small: impl Into<String>, big: impl Into<String>) -> Self {
        Self {
            small: small.into(),
            big: big.into(),
        }
    }

    /// The templated two-object prompt for this pair.
    pub fn base_prompt(&self) -> String {
        format!(
            "Big {small} and small {big}. The {big} is much smaller than the {small}.",
            small = self.small,
            big = self.big
        )
    }

    /// Recover the pair from a prompt produced by [`ObjectPair::base_prompt`].
    pub fn parse_base_prompt(prompt: &str) -> Option<Self> {
        let rest = prompt.strip_prefix("Big ")?;
        let (small, rest) = rest.split_once(" and small ")?;
        let (big, _) = rest.split_once(". The ")?;
        let pair = Self::new(small, big);
        (pair.base_prompt() == prompt).then_some(pair)
    }

    /// Detector text queries, small object first.
    pub fn query_labels(&self) -> Vec<String> {
        vec![self.small.clone(), self.big.clone()]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn walrus_button_prompt() {
        let pair = ObjectPair::new("button", "walrus");
        assert_eq!(
            pair.base_prompt(),
            "Big button and small walrus. The walrus is much smaller than the button."
        );
        assert_eq!(ObjectPair::parse_base_prompt(&pair.base_prompt()), Some(pair));
        assert_eq!(ObjectPair::parse_base_prompt("A giant button."), None);
    }

    #[test]
    fn multi_word_names_round_trip() {
        let pair = ObjectPair::new("tea cup", "hot air balloon");
        assert_eq!(ObjectPair::parse_base_prompt(&pair.base_prompt()), Some(pair));
    }
}
