//! Emotion vocabularies and the 3/4/7-class task schemes.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{MednError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskScheme {
    #[serde(rename = "3-class")]
    ThreeClass,
    #[serde(rename = "4-class")]
    FourClass,
    #[serde(rename = "7-class")]
    SevenClass,
}

const NEGATIVE: [&str; 6] = [
    "repression",
    "anger",
    "contempt",
    "disgust",
    "fear",
    "sadness",
];
const SEVEN: [&str; 7] = [
    "happiness",
    "disgust",
    "surprise",
    "fear",
    "anger",
    "sadness",
    "others",
];

impl TaskScheme {
    pub fn num_classes(self) -> usize {
        match self {
            TaskScheme::ThreeClass => 3,
            TaskScheme::FourClass => 4,
            TaskScheme::SevenClass => 7,
        }
    }

    pub fn from_num_classes(n: usize) -> Option<Self> {
        match n {
            3 => Some(TaskScheme::ThreeClass),
            4 => Some(TaskScheme::FourClass),
            7 => Some(TaskScheme::SevenClass),
            _ => None,
        }
    }

    pub fn class_names(self) -> &'static [&'static str] {
        match self {
            TaskScheme::ThreeClass => &["Negative", "Positive", "Surprise"],
            TaskScheme::FourClass => &["Negative", "Positive", "Surprise", "Other"],
            TaskScheme::SevenClass => &[
                "Happiness",
                "Disgust",
                "Surprise",
                "Fear",
                "Anger",
                "Sadness",
                "Others",
            ],
        }
    }

    /// Raw dataset labels that map onto `class_id`, in listing order.
    pub fn raw_names(self, class_id: usize) -> &'static [&'static str] {
        match (self, class_id) {
            (TaskScheme::SevenClass, c) if c < 7 => &SEVEN[c..c + 1],
            (_, 0) => &[
                "Repression",
                "Anger",
                "Contempt",
                "Disgust",
                "Fear",
                "Sadness",
            ],
            (_, 1) => &["Happiness"],
            (_, 2) => &["Surprise"],
            (TaskScheme::FourClass, 3) => &["Others"],
            _ => &[],
        }
    }
}

impl fmt::Display for TaskScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TaskScheme::ThreeClass => "3-class",
            TaskScheme::FourClass => "4-class",
            TaskScheme::SevenClass => "7-class",
        };
        f.write_str(s)
    }
}

/// Maps a raw dataset emotion name to its class id under `scheme`.
///
/// Matching ignores ASCII case and surrounding whitespace; anything outside
/// the scheme's vocabulary is an error.
pub fn map_emotion(raw_name: &str, scheme: TaskScheme) -> Result<usize> {
    let name = raw_name.trim().to_ascii_lowercase();
    let id = match scheme {
        TaskScheme::SevenClass => SEVEN.iter().position(|&n| n == name),
        TaskScheme::ThreeClass | TaskScheme::FourClass => {
            if NEGATIVE.contains(&name.as_str()) {
                Some(0)
            } else if name == "happiness" {
                Some(1)
            } else if name == "surprise" {
                Some(2)
            } else if scheme == TaskScheme::FourClass && (name == "others" || name == "other") {
                Some(3)
            } else {
                None
            }
        }
    };
    id.ok_or_else(|| MednError::UnknownLabel {
        label: raw_name.to_string(),
        scheme: scheme.to_string(),
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EmotionLabel {
    pub raw_name: String,
    pub class_id: usize,
}

impl EmotionLabel {
    pub fn new(raw_name: &str, scheme: TaskScheme) -> Result<Self> {
        Ok(Self {
            raw_name: raw_name.to_string(),
            class_id: map_emotion(raw_name, scheme)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cde_grouping() {
        let s = TaskScheme::ThreeClass;
        assert_eq!(map_emotion("Repression", s).unwrap(), 0);
        for n in ["Anger", "Contempt", "Disgust", "Fear", "Sadness"] {
            assert_eq!(map_emotion(n, s).unwrap(), 0, "{n}");
        }
        assert_eq!(map_emotion("Happiness", s).unwrap(), 1);
        assert_eq!(map_emotion("Surprise", s).unwrap(), 2);
    }

    #[test]
    fn unknown_labels_are_rejected() {
        let err = map_emotion("Joyful", TaskScheme::ThreeClass).unwrap_err();
        assert_eq!(err.kind(), "UnknownLabel");
        // "others" only exists once an Other class does
        assert!(map_emotion("Others", TaskScheme::ThreeClass).is_err());
        assert!(map_emotion("Repression", TaskScheme::SevenClass).is_err());
    }

    #[test]
    fn four_and_seven_class_orders() {
        assert_eq!(map_emotion("others", TaskScheme::FourClass).unwrap(), 3);
        assert_eq!(map_emotion("Fear", TaskScheme::FourClass).unwrap(), 0);
        let seven: Vec<usize> = [
            "happiness",
            "disgust",
            "surprise",
            "fear",
            "anger",
            "sadness",
            "others",
        ]
        .iter()
        .map(|n| map_emotion(n, TaskScheme::SevenClass).unwrap())
        .collect();
        assert_eq!(seven, (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn raw_names_round_trip() {
        for scheme in [
            TaskScheme::ThreeClass,
            TaskScheme::FourClass,
            TaskScheme::SevenClass,
        ] {
            for c in 0..scheme.num_classes() {
                let names = scheme.raw_names(c);
                assert!(!names.is_empty());
                for n in names {
                    assert_eq!(map_emotion(n, scheme).unwrap(), c);
                }
            }
        }
    }
}
