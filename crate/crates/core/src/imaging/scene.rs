use super::palette::PaletteClass;
use super::{pixel_index, ImagingError, RawFrame, HEIGHT, RAW_LEN, WIDTH};
use crate::detect::BBox;

pub const MAX_OBJECTS: usize = 4;
pub const MIN_OBJECT_SIDE: u32 = 32;
pub const DEFAULT_BACKGROUND: u8 = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SceneObject {
    pub class: PaletteClass,
    pub bbox: BBox,
}

/// Ground-truth description of what the synthetic camera sees.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticScene {
    pub scene_id: u32,
    pub objects: Vec<SceneObject>,
    pub background_gray: u8,
}

impl SyntheticScene {
    pub fn new(scene_id: u32, objects: Vec<SceneObject>) -> Self {
        Self {
            scene_id,
            objects,
            background_gray: DEFAULT_BACKGROUND,
        }
    }

    pub fn validate(&self) -> Result<(), ImagingError> {
        if self.objects.len() > MAX_OBJECTS {
            return Err(ImagingError::InvalidScene(format!(
                "scene {} has {} objects (max {MAX_OBJECTS})",
                self.scene_id,
                self.objects.len()
            )));
        }
        for (i, obj) in self.objects.iter().enumerate() {
            let b = obj.bbox;
            if b.w < MIN_OBJECT_SIDE || b.h < MIN_OBJECT_SIDE {
                return Err(ImagingError::InvalidScene(format!(
                    "{} at {b} is smaller than {MIN_OBJECT_SIDE}px",
                    obj.class
                )));
            }
            if b.right() > WIDTH || b.bottom() > HEIGHT {
                return Err(ImagingError::InvalidScene(format!(
                    "{} at {b} leaves the {WIDTH}x{HEIGHT} frame",
                    obj.class
                )));
            }
            for other in &self.objects[i + 1..] {
                if b.intersection_area(&other.bbox) > 0 {
                    return Err(ImagingError::InvalidScene(format!(
                        "{} at {b} overlaps {} at {}",
                        obj.class, other.class, other.bbox
                    )));
                }
            }
        }
        Ok(())
    }

    /// Ground-truth class of pixel `(x, y)`, if it belongs to an object.
    pub fn class_at(&self, x: u32, y: u32) -> Option<PaletteClass> {
        self.objects
            .iter()
            .find(|o| o.bbox.contains(x, y))
            .map(|o| o.class)
    }
}

/// Render a scene: background gray with each object as a filled rectangle in
/// its palette color.
pub fn generate_frame(
    scene: &SyntheticScene,
    frame_id: u64,
    capture_ts: u64,
) -> Result<RawFrame, ImagingError> {
    scene.validate()?;
    let mut pixels = vec![scene.background_gray; RAW_LEN];
    for obj in &scene.objects {
        let color = obj.class.color();
        let b = obj.bbox;
        for y in b.y..b.bottom() {
            let start = pixel_index(b.x, y);
            let end = pixel_index(b.right(), y);
            for px in pixels[start..end].chunks_exact_mut(3) {
                px.copy_from_slice(&color);
            }
        }
    }
    RawFrame::new(frame_id, capture_ts, pixels)
}

/// Parse one `scene_id;class:x,y,w,h;...` line. A `gray=N` segment sets the
/// background level (default 128).
pub fn parse_scene_line(line: &str) -> Result<SyntheticScene, String> {
    let mut parts = line.split(';').map(str::trim);
    let id = parts.next().unwrap_or_default();
    let scene_id: u32 = id
        .parse()
        .map_err(|_| format!("bad scene id `{id}`"))?;
    let mut scene = SyntheticScene::new(scene_id, Vec::new());
    for part in parts.filter(|p| !p.is_empty()) {
        if let Some(level) = part.strip_prefix("gray=") {
            scene.background_gray = level
                .parse()
                .map_err(|_| format!("bad gray level `{level}`"))?;
            continue;
        }
        let (class, coords) = part
            .split_once(':')
            .ok_or_else(|| format!("expected class:x,y,w,h, got `{part}`"))?;
        let class: PaletteClass = class.trim().parse()?;
        let nums = coords
            .split(',')
            .map(|n| n.trim().parse::<u32>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| format!("bad coordinates `{coords}`"))?;
        let [x, y, w, h] = nums[..] else {
            return Err(format!("expected 4 coordinates, got `{coords}`"));
        };
        scene.objects.push(SceneObject {
            class,
            bbox: BBox::new(x, y, w, h),
        });
    }
    Ok(scene)
}

/// Parse a scene file; blank lines and `#` comments are skipped. Every scene
/// is validated.
pub fn parse_scene_file(text: &str) -> Result<Vec<SyntheticScene>, ImagingError> {
    let mut scenes = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let scene = parse_scene_line(line).map_err(|msg| ImagingError::SceneParse {
            line: i + 1,
            msg,
        })?;
        scene.validate().map_err(|e| ImagingError::SceneParse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        scenes.push(scene);
    }
    Ok(scenes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::DEFAULT_SCENES;

    fn cup_scene() -> SyntheticScene {
        parse_scene_line("1;cup:100,100,80,80").unwrap()
    }

    #[test]
    fn empty_scene_is_uniform_gray() {
        let frame = generate_frame(&SyntheticScene::new(0, vec![]), 0, 0).unwrap();
        assert!(frame.pixels().iter().all(|&b| b == 128));
    }

    #[test]
    fn cup_pixels_inside_and_background_outside() {
        let scene = cup_scene();
        let frame = generate_frame(&scene, 1, 0).unwrap();
        for y in 0..HEIGHT {
            for x in 0..WIDTH {
                let i = pixel_index(x, y);
                let px = &frame.pixels()[i..i + 3];
                let inside = (100..180).contains(&x) && (100..180).contains(&y);
                if inside {
                    assert_eq!(px, [220, 40, 40]);
                } else {
                    assert_eq!(px, [128, 128, 128]);
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let scene = parse_scene_line("7;key:10,10,40,200;apple:300,300,100,60").unwrap();
        let a = generate_frame(&scene, 3, 99).unwrap();
        let b = generate_frame(&scene, 3, 99).unwrap();
        assert_eq!(a.pixels(), b.pixels());
    }

    #[test]
    fn rejects_invalid_scenes() {
        for line in [
            "1;cup:600,100,80,80",
            "1;cup:10,10,20,80",
            "1;cup:10,10,80,80;pen:50,50,80,80",
            "1;cup:0,0,40,40;pen:50,0,40,40;key:100,0,40,40;ball:150,0,40,40;card:200,0,40,40",
        ] {
            let scene = parse_scene_line(line).unwrap();
            assert!(generate_frame(&scene, 0, 0).is_err(), "{line}");
        }
    }

    #[test]
    fn parse_errors() {
        assert!(parse_scene_line("x;cup:1,2,3,4").is_err());
        assert!(parse_scene_line("1;spoon:1,2,3,4").is_err());
        assert!(parse_scene_line("1;cup:1,2,3").is_err());
        assert!(parse_scene_line("1;cup").is_err());
        let s = parse_scene_line("4;gray=90;pen:0,0,32,32").unwrap();
        assert_eq!(s.background_gray, 90);
        assert_eq!(s.objects.len(), 1);
    }

    #[test]
    fn default_corpus_has_twenty_valid_scenes() {
        let scenes = parse_scene_file(DEFAULT_SCENES).unwrap();
        assert_eq!(scenes.len(), 20);
        let mut seen = std::collections::BTreeSet::new();
        for s in &scenes {
            for o in &s.objects {
                seen.insert(o.class);
            }
        }
        assert_eq!(seen.len(), 8, "every class appears in the corpus");
    }
}
