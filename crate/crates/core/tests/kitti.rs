//! Projection and KITTI-layout loading on synthetic scans.

use std::path::Path;

use lidarflow::formats::rimg;
use lidarflow::kitti::{
    build_triplets, discover, list_frames, load_velodyne_bin, network_input, parse_velodyne,
    DatasetSplit, FrameSource, SequenceId,
};
use lidarflow::projection::project_cloud;
use lidarflow::synthetic::{encode_velodyne, street_scan};
use lidarflow::{Error, Point, ProjectionConfig, RangeImage};
use proptest::prelude::*;

fn write_sequence(root: &Path, seq: u8, frames: usize) {
    let dir = root.join(format!("sequences/{seq:02}/velodyne"));
    std::fs::create_dir_all(&dir).unwrap();
    for i in 0..frames {
        let scan = street_scan(0.8 * i as f32, 7);
        std::fs::write(dir.join(format!("{i:06}.bin")), encode_velodyne(&scan)).unwrap();
    }
}

#[test]
fn street_scan_fills_most_of_the_image() {
    let img = project_cloud(&street_scan(0.0, 1), &ProjectionConfig::default()).unwrap();
    assert!(
        img.occupancy_fraction() > 0.8,
        "{}",
        img.occupancy_fraction()
    );
    let moved = project_cloud(&street_scan(1.0, 1), &ProjectionConfig::default()).unwrap();
    assert_ne!(img, moved);
}

#[test]
fn scan_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut scan = street_scan(0.0, 2);
    scan.truncate(500);
    let path = dir.path().join("000000.bin");
    let mut bytes = encode_velodyne(&scan);
    bytes.extend_from_slice(&[f32::NAN.to_le_bytes(), [0; 4], [0; 4], [0; 4]].concat());
    std::fs::write(&path, &bytes).unwrap();
    assert_eq!(load_velodyne_bin(&path).unwrap(), scan);
    assert_eq!(parse_velodyne(&bytes, "x").unwrap().1, 1);
    let e = parse_velodyne(&bytes[..bytes.len() - 2], "scan.bin").unwrap_err();
    assert!(matches!(e, Error::Format { .. }));
}

#[test]
fn discovery_and_triplets() {
    let dir = tempfile::tempdir().unwrap();
    write_sequence(dir.path(), 3, 7);
    write_sequence(dir.path(), 5, 3);
    std::fs::write(dir.path().join("sequences/03/velodyne/notes.txt"), "x").unwrap();
    let frames = list_frames(dir.path(), SequenceId(3)).unwrap();
    assert_eq!(frames.len(), 7);
    assert!(frames.windows(2).all(|w| w[0] < w[1]));
    let split: DatasetSplit = "3:4:5".parse().unwrap();
    let sets = discover(dir.path(), &split).unwrap();
    assert_eq!(sets.train.len(), 2);
    assert!(sets.val.is_empty());
    assert_eq!(sets.test.len(), 1);
    assert_eq!(sets.train[1].frames(), [3, 4, 5]);
    assert_eq!(sets.train[1].pair(), (3, 4));
}

#[test]
fn frames_are_cached_by_projection() {
    let dir = tempfile::tempdir().unwrap();
    write_sequence(dir.path(), 0, 3);
    let proj = ProjectionConfig {
        width: 1000,
        ..ProjectionConfig::default()
    };
    let source = FrameSource::new(dir.path(), proj).unwrap();
    let cache = source.cache_dir().unwrap().to_path_buf();
    assert!(cache.starts_with(dir.path().join("rimg-cache")));
    let fresh = source.frame(SequenceId(0), 1).unwrap();
    let cached = cache.join("00/000001.rimg");
    assert_eq!(rimg::read(&cached).unwrap(), fresh);

    // A planted cache entry is served as is; bypassing the cache re-projects.
    let marker = RangeImage::from_ranges(64, 1000, vec![3.0; 64_000]).unwrap();
    rimg::write(&cached, &marker).unwrap();
    assert_eq!(source.frame(SequenceId(0), 1).unwrap(), marker);
    assert_eq!(
        source
            .clone()
            .without_cache()
            .frame(SequenceId(0), 1)
            .unwrap(),
        fresh
    );

    let other = FrameSource::new(dir.path(), ProjectionConfig::default()).unwrap();
    assert_ne!(other.cache_dir(), source.cache_dir());

    let triplets = build_triplets(&[(SequenceId(0), 3)]);
    let data = source.without_cache().dataset(&triplets, 64).unwrap();
    let (a, b) = data.get(0).unwrap();
    assert_eq!(a.shape(), lidarflow::Shape::new(1, 1, 64, 1024));
    assert_eq!(b.shape(), a.shape());
    for y in 0..64 {
        for x in 1000..1024 {
            assert_eq!(a.at(0, 0, y, x), 0.0);
        }
    }
}

#[test]
fn padding_keeps_normalized_values() {
    let proj = ProjectionConfig::default();
    let img = RangeImage::from_ranges(2, 3, vec![0.0, 8.5, 85.0, 17.0, 0.0, 42.5]).unwrap();
    let t = network_input(&img, &proj, 4).unwrap();
    assert_eq!(t.shape(), lidarflow::Shape::new(1, 1, 4, 4));
    assert!((t.at(0, 0, 0, 1) - 0.1).abs() < 1e-7);
    assert_eq!(t.at(0, 0, 0, 2), 1.0);
    assert_eq!(t.at(0, 0, 3, 3), 0.0);
}

fn point() -> impl Strategy<Value = Point> {
    (-90.0f32..90.0, -90.0f32..90.0, -30.0f32..10.0).prop_map(|(x, y, z)| Point::new(x, y, z))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pixels_stay_inside_the_image(p in point(), width in 2usize..2100, height in 2usize..130) {
        let cfg = ProjectionConfig { width, height, ..ProjectionConfig::default() };
        if let Some((u, v)) = cfg.pixel_of(&p) {
            prop_assert!(u < width && v < height);
        }
    }

    #[test]
    fn projection_ignores_point_order(mut pts in prop::collection::vec(point(), 0..300), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let cfg = ProjectionConfig { width: 64, height: 16, ..ProjectionConfig::default() };
        let a = project_cloud(&pts, &cfg).unwrap();
        pts.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let b = project_cloud(&pts, &cfg).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn every_range_is_the_nearest_in_its_pixel(pts in prop::collection::vec(point(), 1..200)) {
        let cfg = ProjectionConfig { width: 32, height: 8, ..ProjectionConfig::default() };
        let img = project_cloud(&pts, &cfg).unwrap();
        for p in &pts {
            if let Some((u, v)) = cfg.pixel_of(p) {
                prop_assert!(img.at(v, u) > 0.0 && img.at(v, u) as f64 <= p.range() as f32 as f64);
            }
        }
        prop_assert!(img.ranges().iter().all(|&r| (0.0..=85.0).contains(&r)));
    }

    #[test]
    fn split_strings_round_trip(ids in prop::collection::btree_set(0u8..40, 3..12)) {
        let ids: Vec<u8> = ids.into_iter().collect();
        let k = ids.len() / 3;
        let part = |s: &[u8]| s.iter().map(|&i| SequenceId(i)).collect::<Vec<_>>();
        let split = DatasetSplit {
            train: part(&ids[..k]),
            val: part(&ids[k..2 * k]),
            test: part(&ids[2 * k..]),
        };
        let back: DatasetSplit = split.to_string().parse().unwrap();
        prop_assert_eq!(back, split);
    }
}
