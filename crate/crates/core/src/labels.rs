//! Class labels and task kinds.
//!
//! Multiclass codes follow the confusion-matrix ordering used throughout the
//! reports: Acne=0, Chickenpox=1, Mpox=2, Healthy=3. The binary task puts
//! Mpox at code 0 and everything else at code 1.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ClassLabel {
    Acne,
    Chickenpox,
    Mpox,
    Healthy,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 4] = [
        ClassLabel::Acne,
        ClassLabel::Chickenpox,
        ClassLabel::Mpox,
        ClassLabel::Healthy,
    ];

    pub fn code(self) -> usize {
        match self {
            ClassLabel::Acne => 0,
            ClassLabel::Chickenpox => 1,
            ClassLabel::Mpox => 2,
            ClassLabel::Healthy => 3,
        }
    }

    pub fn from_code(code: usize) -> Option<Self> {
        Self::ALL.get(code).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassLabel::Acne => "Acne",
            ClassLabel::Chickenpox => "Chickenpox",
            ClassLabel::Mpox => "Mpox",
            ClassLabel::Healthy => "Healthy",
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ClassLabel {
    type Err = Error;

    /// Case-insensitive; also accepts the source-dataset folder names
    /// `monkeypox` and `normal`.
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "acne" => Ok(ClassLabel::Acne),
            "chickenpox" => Ok(ClassLabel::Chickenpox),
            "mpox" | "monkeypox" => Ok(ClassLabel::Mpox),
            "healthy" | "normal" => Ok(ClassLabel::Healthy),
            other => Err(Error::invalid(format!("unknown class label {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BinaryLabel {
    Mpox,
    Others,
}

impl BinaryLabel {
    pub const ALL: [BinaryLabel; 2] = [BinaryLabel::Mpox, BinaryLabel::Others];

    pub fn code(self) -> usize {
        match self {
            BinaryLabel::Mpox => 0,
            BinaryLabel::Others => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BinaryLabel::Mpox => "Mpox",
            BinaryLabel::Others => "Others",
        }
    }
}

impl From<ClassLabel> for BinaryLabel {
    fn from(label: ClassLabel) -> Self {
        if label == ClassLabel::Mpox {
            BinaryLabel::Mpox
        } else {
            BinaryLabel::Others
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Binary,
    Multiclass,
}

impl TaskKind {
    pub fn n_classes(self) -> usize {
        match self {
            TaskKind::Binary => 2,
            TaskKind::Multiclass => 4,
        }
    }

    /// Target code of a source label under this task.
    pub fn code_of(self, label: ClassLabel) -> usize {
        match self {
            TaskKind::Binary => BinaryLabel::from(label).code(),
            TaskKind::Multiclass => label.code(),
        }
    }

    /// Class names in code order.
    pub fn class_names(self) -> Vec<&'static str> {
        match self {
            TaskKind::Binary => BinaryLabel::ALL.iter().map(|l| l.name()).collect(),
            TaskKind::Multiclass => ClassLabel::ALL.iter().map(|l| l.name()).collect(),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Binary => "binary",
            TaskKind::Multiclass => "multiclass",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "binary" => Ok(TaskKind::Binary),
            "multiclass" => Ok(TaskKind::Multiclass),
            other => Err(Error::invalid(format!("unknown task {other:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes_follow_confusion_matrix_order() {
        assert_eq!(ClassLabel::Acne.code(), 0);
        assert_eq!(ClassLabel::Chickenpox.code(), 1);
        assert_eq!(ClassLabel::Mpox.code(), 2);
        assert_eq!(ClassLabel::Healthy.code(), 3);
        assert_eq!(BinaryLabel::Mpox.code(), 0);
        assert_eq!(BinaryLabel::Others.code(), 1);
        for l in ClassLabel::ALL {
            assert_eq!(ClassLabel::from_code(l.code()), Some(l));
        }
    }

    #[test]
    fn parse_is_case_insensitive() {
        assert_eq!("MPOX".parse::<ClassLabel>().unwrap(), ClassLabel::Mpox);
        assert_eq!("monkeypox".parse::<ClassLabel>().unwrap(), ClassLabel::Mpox);
        assert_eq!("healthy".parse::<ClassLabel>().unwrap(), ClassLabel::Healthy);
        assert!("measles".parse::<ClassLabel>().is_err());
    }

    #[test]
    fn binary_task_codes() {
        assert_eq!(TaskKind::Binary.code_of(ClassLabel::Mpox), 0);
        for l in [ClassLabel::Acne, ClassLabel::Chickenpox, ClassLabel::Healthy] {
            assert_eq!(TaskKind::Binary.code_of(l), 1);
        }
        assert_eq!(TaskKind::Multiclass.class_names(), ["Acne", "Chickenpox", "Mpox", "Healthy"]);
    }
}
