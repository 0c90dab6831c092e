use std::collections::BTreeSet;

/// Rows eligible for selection this round, iterated in ascending order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CandidatePool {
    members: BTreeSet<usize>,
}

impl CandidatePool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn contains(&self, row: usize) -> bool {
        self.members.contains(&row)
    }

    pub fn insert(&mut self, row: usize) -> bool {
        self.members.insert(row)
    }

    pub fn remove(&mut self, row: usize) -> bool {
        self.members.remove(&row)
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.members.iter().copied()
    }
}

impl FromIterator<usize> for CandidatePool {
    fn from_iter<I: IntoIterator<Item = usize>>(iter: I) -> Self {
        Self {
            members: iter.into_iter().collect(),
        }
    }
}
