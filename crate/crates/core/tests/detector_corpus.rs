//! Generate → Q90 encode → decode → detect over the built-in corpus, compared
//! with the scene ground truth.

use std::collections::BTreeSet;

use edgeloop::detect::{Detector, StubDetector};
use edgeloop::imaging::{
    decode_image, encode_image, generate_frame, parse_scene_file, parse_scene_line, Palette,
    SyntheticScene, DEFAULT_SCENES, HEIGHT, WIDTH,
};

fn round_trip(scene: &SyntheticScene) -> Vec<u8> {
    let frame = generate_frame(scene, 0, 0).unwrap();
    decode_image(&encode_image(&frame, 90).unwrap().bytes).unwrap()
}

fn check_scene(scene: &SyntheticScene) -> f64 {
    let dets = StubDetector.detect(&round_trip(scene)).unwrap();
    let truth: BTreeSet<_> = scene.objects.iter().map(|o| o.class).collect();
    let found: BTreeSet<_> = dets.iter().map(|d| d.class).collect();
    assert_eq!(found, truth, "scene {}: {dets:?}", scene.scene_id);
    assert_eq!(dets.len(), scene.objects.len(), "scene {}", scene.scene_id);
    let mut worst = 1.0f64;
    for obj in &scene.objects {
        let det = dets.iter().find(|d| d.class == obj.class).unwrap();
        let iou = det.bbox.iou(&obj.bbox);
        assert!(iou >= 0.9, "scene {} {}: {} vs {} iou {iou}", scene.scene_id, obj.class, det.bbox, obj.bbox);
        worst = worst.min(iou);
    }
    worst
}

#[test]
fn corpus_classes_and_boxes_recovered() {
    let scenes = parse_scene_file(DEFAULT_SCENES).unwrap();
    let worst = scenes.iter().map(check_scene).fold(1.0, f64::min);
    println!("worst IoU over corpus: {worst:.4}");
}

#[test]
fn smallest_allowed_objects_survive() {
    for line in [
        "100;cup:3,5,32,32",
        "101;knife:301,217,32,32;card:401,217,32,32",
        "102;pen:603,443,32,32;apple:13,443,32,32",
        "103;gray=0;key:100,100,32,32",
        "104;gray=255;ball:100,100,33,35",
    ] {
        check_scene(&parse_scene_line(line).unwrap());
    }
}

#[test]
fn q90_round_trip_error_and_interior_classification() {
    let scenes = parse_scene_file(DEFAULT_SCENES).unwrap();
    let mut worst_err = 0i32;
    for scene in &scenes {
        let raw = generate_frame(scene, 0, 0).unwrap();
        let dec = round_trip(scene);
        for (a, b) in raw.pixels().iter().zip(&dec) {
            worst_err = worst_err.max((*a as i32 - *b as i32).abs());
        }
        for obj in &scene.objects {
            let b = obj.bbox;
            for y in b.y + 8..b.bottom() - 8 {
                for x in b.x + 8..b.right() - 8 {
                    let i = ((y * WIDTH + x) * 3) as usize;
                    let (class, _) = Palette::nearest([dec[i], dec[i + 1], dec[i + 2]]);
                    assert_eq!(class, obj.class, "scene {} ({x},{y})", scene.scene_id);
                }
            }
        }
    }
    // measured 36 over the corpus
    assert!(worst_err <= 40, "worst per-channel error {worst_err}");
}

#[test]
fn q90_sizes_bounded() {
    let mut largest = 0;
    for scene in parse_scene_file(DEFAULT_SCENES).unwrap() {
        let frame = generate_frame(&scene, 0, 0).unwrap();
        let n = encode_image(&frame, 90).unwrap().bytes.len();
        assert!(n < (WIDTH * HEIGHT * 3) as usize);
        largest = largest.max(n);
    }
    println!("largest Q90 frame in corpus: {largest} bytes");
    assert!(largest <= 140_000);
}
