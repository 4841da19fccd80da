//! The teacher talk move taxonomy and its facet binning.
//!
//! Index order is canonical and shared by confusion matrices, reports,
//! checkpoints and the wire format.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TalkMove {
    None = 0,
    Wait = 1,
    PressForAccuracy = 2,
    KeepingEveryoneTogether = 3,
    Revoicing = 4,
    GettingStudentsToRelate = 5,
    Restating = 6,
    PressForReasoning = 7,
}

impl TalkMove {
    pub const COUNT: usize = 8;

    /// Row of the padding entry in talk-move embedding tables. Never a
    /// prediction target.
    pub const PAD_INDEX: usize = 8;

    pub const ALL: [TalkMove; 8] = [
        TalkMove::None,
        TalkMove::Wait,
        TalkMove::PressForAccuracy,
        TalkMove::KeepingEveryoneTogether,
        TalkMove::Revoicing,
        TalkMove::GettingStudentsToRelate,
        TalkMove::Restating,
        TalkMove::PressForReasoning,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<TalkMove> {
        TalkMove::ALL.get(index).copied()
    }

    /// Canonical identifier used in files and on the wire.
    pub fn name(self) -> &'static str {
        match self {
            TalkMove::None => "None",
            TalkMove::Wait => "Wait",
            TalkMove::PressForAccuracy => "PressForAccuracy",
            TalkMove::KeepingEveryoneTogether => "KeepingEveryoneTogether",
            TalkMove::Revoicing => "Revoicing",
            TalkMove::GettingStudentsToRelate => "GettingStudentsToRelate",
            TalkMove::Restating => "Restating",
            TalkMove::PressForReasoning => "PressForReasoning",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            TalkMove::None => "None",
            TalkMove::Wait => "Wait",
            TalkMove::PressForAccuracy => "Press for Accuracy",
            TalkMove::KeepingEveryoneTogether => "Keeping Everyone Together",
            TalkMove::Revoicing => "Revoicing",
            TalkMove::GettingStudentsToRelate => "Getting Students to Relate",
            TalkMove::Restating => "Restating",
            TalkMove::PressForReasoning => "Press for Reasoning",
        }
    }

    pub fn facet(self) -> Facet {
        match self {
            TalkMove::None => Facet::NoneBin,
            TalkMove::Wait => Facet::WaitBin,
            TalkMove::KeepingEveryoneTogether
            | TalkMove::GettingStudentsToRelate
            | TalkMove::Restating => Facet::LearningCommunity,
            TalkMove::Revoicing | TalkMove::PressForReasoning => Facet::RigorousThinking,
            TalkMove::PressForAccuracy => Facet::ContentKnowledge,
        }
    }

    /// Embedding row for an optional move; `None` is the padding row.
    pub fn slot_index(mv: Option<TalkMove>) -> usize {
        mv.map_or(TalkMove::PAD_INDEX, TalkMove::index)
    }
}

impl fmt::Display for TalkMove {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TalkMove {
    type Err = Error;

    /// Accepts the canonical identifier or the display name.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TalkMove::ALL
            .iter()
            .copied()
            .find(|m| m.name() == s || m.display_name() == s)
            .ok_or_else(|| Error::UnknownLabel(s.to_string()))
    }
}

impl Serialize for TalkMove {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for TalkMove {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Accountability facets, with None and Wait kept as their own bins.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Facet {
    NoneBin = 0,
    WaitBin = 1,
    LearningCommunity = 2,
    ContentKnowledge = 3,
    RigorousThinking = 4,
}

impl Facet {
    pub const COUNT: usize = 5;

    pub const ALL: [Facet; 5] = [
        Facet::NoneBin,
        Facet::WaitBin,
        Facet::LearningCommunity,
        Facet::ContentKnowledge,
        Facet::RigorousThinking,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Facet::NoneBin => "None",
            Facet::WaitBin => "Wait",
            Facet::LearningCommunity => "Learning Community",
            Facet::ContentKnowledge => "Content Knowledge",
            Facet::RigorousThinking => "Rigorous Thinking",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_order_is_stable() {
        for (i, m) in TalkMove::ALL.iter().enumerate() {
            assert_eq!(m.index(), i);
            assert_eq!(TalkMove::from_index(i), Some(*m));
        }
        assert_eq!(TalkMove::from_index(8), None);
        assert_eq!(TalkMove::slot_index(None), 8);
    }

    #[test]
    fn facet_bins() {
        assert_eq!(TalkMove::Restating.facet(), Facet::LearningCommunity);
        assert_eq!(TalkMove::PressForAccuracy.facet(), Facet::ContentKnowledge);
        assert_eq!(TalkMove::None.facet(), Facet::NoneBin);
        assert_eq!(TalkMove::Wait.facet(), Facet::WaitBin);
        assert_eq!(TalkMove::Revoicing.facet(), Facet::RigorousThinking);
        assert_eq!(TalkMove::PressForReasoning.facet(), Facet::RigorousThinking);
        assert_eq!(TalkMove::KeepingEveryoneTogether.facet(), Facet::LearningCommunity);
        assert_eq!(TalkMove::GettingStudentsToRelate.facet(), Facet::LearningCommunity);
    }

    #[test]
    fn parse_both_spellings() {
        assert_eq!("Press for Accuracy".parse::<TalkMove>().unwrap(), TalkMove::PressForAccuracy);
        assert_eq!("PressForAccuracy".parse::<TalkMove>().unwrap(), TalkMove::PressForAccuracy);
        assert!("Marking".parse::<TalkMove>().is_err());
        let json = serde_json::to_string(&TalkMove::GettingStudentsToRelate).unwrap();
        assert_eq!(json, "\"GettingStudentsToRelate\"");
        let back: TalkMove = serde_json::from_str(&json).unwrap();
        assert_eq!(back, TalkMove::GettingStudentsToRelate);
    }
}
