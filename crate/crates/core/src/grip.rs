//! Grip selection from detections.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::detect::Detection;
use crate::imaging::PaletteClass;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Grip {
    Palmar,
    Lateral,
    None,
}

impl Grip {
    pub fn as_str(self) -> &'static str {
        match self {
            Grip::Palmar => "palmar",
            Grip::Lateral => "lateral",
            Grip::None => "none",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("grip policy has no entry for class `{0}`")]
    Missing(PaletteClass),
    #[error("min_confidence {0} outside [0, 1]")]
    Threshold(f64),
    #[error("class `{0}` cannot map to grip `none`")]
    NoneGrip(PaletteClass),
    #[error("grip policy JSON: {0}")]
    Json(#[from] serde_json::Error),
}

/// Class-to-grip table plus the confidence floor for acting on a detection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GripPolicy {
    pub map: BTreeMap<PaletteClass, Grip>,
    #[serde(default = "default_min_confidence")]
    pub min_confidence: f64,
}

fn default_min_confidence() -> f64 {
    0.5
}

impl Default for GripPolicy {
    /// Round graspables get a palmar grip, thin or flat ones a lateral pinch.
    fn default() -> Self {
        use PaletteClass::*;
        let map = [
            (Cup, Grip::Palmar),
            (Bottle, Grip::Palmar),
            (Ball, Grip::Palmar),
            (Apple, Grip::Palmar),
            (Key, Grip::Lateral),
            (Card, Grip::Lateral),
            (Pen, Grip::Lateral),
            (Knife, Grip::Lateral),
        ]
        .into_iter()
        .collect();
        Self {
            map,
            min_confidence: default_min_confidence(),
        }
    }
}

impl GripPolicy {
    pub fn from_json(text: &str) -> Result<Self, PolicyError> {
        let policy: GripPolicy = serde_json::from_str(text)?;
        policy.validate()?;
        Ok(policy)
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if !(0.0..=1.0).contains(&self.min_confidence) {
            return Err(PolicyError::Threshold(self.min_confidence));
        }
        for class in PaletteClass::ALL {
            match self.map.get(&class) {
                None => return Err(PolicyError::Missing(class)),
                Some(Grip::None) => return Err(PolicyError::NoneGrip(class)),
                Some(_) => {}
            }
        }
        Ok(())
    }
}

/// The actuation decision for one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GripCommand {
    pub grip: Grip,
    pub confidence: f64,
    pub target: Option<Detection>,
}

/// Preference order among qualifying detections: larger area first, then
/// higher confidence, then the lexicographically smaller class name.
fn preference(a: &Detection, b: &Detection) -> Ordering {
    b.bbox
        .area()
        .cmp(&a.bbox.area())
        .then(b.confidence.total_cmp(&a.confidence))
        .then(a.class.name().cmp(b.class.name()))
}

pub fn select_grip(detections: &[Detection], policy: &GripPolicy) -> GripCommand {
    let chosen = detections
        .iter()
        .filter(|d| d.confidence >= policy.min_confidence)
        .min_by(|a, b| preference(a, b));
    match chosen {
        Some(d) => GripCommand {
            grip: policy.map.get(&d.class).copied().unwrap_or(Grip::None),
            confidence: d.confidence,
            target: Some(*d),
        },
        None => GripCommand {
            grip: Grip::None,
            confidence: 0.0,
            target: None,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::BBox;

    fn det(class: PaletteClass, conf: f64, w: u32, h: u32) -> Detection {
        Detection {
            class,
            confidence: conf,
            bbox: BBox::new(0, 0, w, h),
        }
    }

    #[test]
    fn nothing_detected() {
        assert_eq!(select_grip(&[], &GripPolicy::default()).grip, Grip::None);
    }

    #[test]
    fn cup_is_palmar() {
        let cmd = select_grip(&[det(PaletteClass::Cup, 0.9, 80, 80)], &GripPolicy::default());
        assert_eq!(cmd.grip, Grip::Palmar);
        assert_eq!(cmd.confidence, 0.9);
    }

    #[test]
    fn largest_area_wins_over_confidence() {
        let dets = [
            det(PaletteClass::Key, 0.8, 100, 100),
            det(PaletteClass::Cup, 0.95, 80, 80),
        ];
        assert_eq!(select_grip(&dets, &GripPolicy::default()).grip, Grip::Lateral);
    }

    #[test]
    fn ties_break_on_confidence_then_name() {
        let p = GripPolicy::default();
        let dets = [det(PaletteClass::Cup, 0.7, 50, 50), det(PaletteClass::Pen, 0.9, 50, 50)];
        assert_eq!(select_grip(&dets, &p).target.unwrap().class, PaletteClass::Pen);
        let dets = [det(PaletteClass::Pen, 0.9, 50, 50), det(PaletteClass::Cup, 0.9, 50, 50)];
        assert_eq!(select_grip(&dets, &p).target.unwrap().class, PaletteClass::Cup);
    }

    #[test]
    fn below_threshold_ignored() {
        let dets = [det(PaletteClass::Key, 0.3, 200, 200), det(PaletteClass::Ball, 0.6, 40, 40)];
        assert_eq!(select_grip(&dets, &GripPolicy::default()).grip, Grip::Palmar);
        let dets = [det(PaletteClass::Key, 0.49, 200, 200)];
        assert_eq!(select_grip(&dets, &GripPolicy::default()).grip, Grip::None);
    }

    #[test]
    fn policy_json() {
        let text = serde_json::to_string(&GripPolicy::default()).unwrap();
        assert_eq!(GripPolicy::from_json(&text).unwrap(), GripPolicy::default());
        let partial = r#"{"map":{"cup":"palmar"},"min_confidence":0.5}"#;
        assert!(matches!(GripPolicy::from_json(partial), Err(PolicyError::Missing(_))));
        let p = GripPolicy {
            min_confidence: 1.5,
            ..GripPolicy::default()
        };
        assert!(p.validate().is_err());
        let custom = text.replace(r#""cup":"palmar""#, r#""cup":"lateral""#);
        let p = GripPolicy::from_json(&custom).unwrap();
        assert_eq!(p.map[&PaletteClass::Cup], Grip::Lateral);
    }
}
