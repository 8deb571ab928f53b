//! The eight object classes and their drawing colors.

use serde::{Deserialize, Serialize};

/// Maximum RGB distance at which a pixel is attributed to a palette class.
pub const MATCH_DISTANCE: f64 = 60.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PaletteClass {
    Cup,
    Bottle,
    Ball,
    Apple,
    Key,
    Card,
    Pen,
    Knife,
}

impl PaletteClass {
    pub const ALL: [PaletteClass; 8] = [
        PaletteClass::Cup,
        PaletteClass::Bottle,
        PaletteClass::Ball,
        PaletteClass::Apple,
        PaletteClass::Key,
        PaletteClass::Card,
        PaletteClass::Pen,
        PaletteClass::Knife,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PaletteClass::Cup => "cup",
            PaletteClass::Bottle => "bottle",
            PaletteClass::Ball => "ball",
            PaletteClass::Apple => "apple",
            PaletteClass::Key => "key",
            PaletteClass::Card => "card",
            PaletteClass::Pen => "pen",
            PaletteClass::Knife => "knife",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == name)
    }

    pub fn color(self) -> [u8; 3] {
        match self {
            PaletteClass::Cup => [220, 40, 40],
            PaletteClass::Bottle => [40, 180, 60],
            PaletteClass::Ball => [40, 80, 220],
            PaletteClass::Apple => [230, 210, 40],
            PaletteClass::Key => [40, 210, 210],
            PaletteClass::Card => [210, 40, 210],
            PaletteClass::Pen => [240, 140, 30],
            PaletteClass::Knife => [140, 40, 200],
        }
    }
}

impl std::fmt::Display for PaletteClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for PaletteClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::from_name(s).ok_or_else(|| format!("unknown class `{s}`"))
    }
}

/// Nearest-color lookup over the fixed palette.
pub struct Palette;

impl Palette {
    pub fn distance(a: [u8; 3], b: [u8; 3]) -> f64 {
        (Self::distance_sq(a, b) as f64).sqrt()
    }

    #[inline]
    pub fn distance_sq(a: [u8; 3], b: [u8; 3]) -> u32 {
        let dr = a[0] as i32 - b[0] as i32;
        let dg = a[1] as i32 - b[1] as i32;
        let db = a[2] as i32 - b[2] as i32;
        (dr * dr + dg * dg + db * db) as u32
    }

    /// Nearest class and its squared distance.
    #[inline]
    pub fn nearest(rgb: [u8; 3]) -> (PaletteClass, u32) {
        let mut best = (PaletteClass::Cup, u32::MAX);
        for class in PaletteClass::ALL {
            let d = Self::distance_sq(rgb, class.color());
            if d < best.1 {
                best = (class, d);
            }
        }
        best
    }

    /// Nearest class if it lies within [`MATCH_DISTANCE`].
    #[inline]
    pub fn classify(rgb: [u8; 3]) -> Option<(PaletteClass, f64)> {
        let (class, d2) = Self::nearest(rgb);
        if (d2 as f64) <= MATCH_DISTANCE * MATCH_DISTANCE {
            Some((class, (d2 as f64).sqrt()))
        } else {
            None
        }
    }
}
