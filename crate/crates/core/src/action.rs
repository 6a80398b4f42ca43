use serde::{Deserialize, Serialize};

/// A verb-noun pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Action {
    pub verb: usize,
    pub noun: usize,
}

impl Action {
    pub const fn new(verb: usize, noun: usize) -> Self {
        Self { verb, noun }
    }
}

impl From<(usize, usize)> for Action {
    fn from((verb, noun): (usize, usize)) -> Self {
        Self { verb, noun }
    }
}

/// Ordered future actions; serialized as `[[verb, noun], ...]`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "Vec<(usize, usize)>", into = "Vec<(usize, usize)>")]
pub struct ActionSequence(pub Vec<Action>);

impl ActionSequence {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn verbs(&self) -> Vec<usize> {
        self.0.iter().map(|a| a.verb).collect()
    }

    pub fn nouns(&self) -> Vec<usize> {
        self.0.iter().map(|a| a.noun).collect()
    }
}

impl From<Vec<(usize, usize)>> for ActionSequence {
    fn from(v: Vec<(usize, usize)>) -> Self {
        Self(v.into_iter().map(Action::from).collect())
    }
}

impl From<ActionSequence> for Vec<(usize, usize)> {
    fn from(s: ActionSequence) -> Self {
        s.0.into_iter().map(|a| (a.verb, a.noun)).collect()
    }
}

impl FromIterator<Action> for ActionSequence {
    fn from_iter<I: IntoIterator<Item = Action>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}
