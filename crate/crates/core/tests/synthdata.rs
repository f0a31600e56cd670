use std::collections::BTreeMap;
use std::path::Path;

use defattn::synthdata::{
    generate_sequence, load_split, make_split, mean_centroid_displacement, read_pgm, read_ppm, read_sequence,
    write_pgm, write_sequence, Difficulty, GenerateOptions, SplitOptions,
};
use defattn::Error;
use sha2::{Digest, Sha256};

fn opts(n_objects: usize, difficulty: Difficulty) -> GenerateOptions {
    GenerateOptions {
        n_objects,
        difficulty,
        ..GenerateOptions::default()
    }
}

/// SHA-256 over every relative path and file content under `root`.
fn tree_hash(root: &Path) -> String {
    fn walk(dir: &Path, root: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(&p, root, out);
            } else {
                out.insert(
                    p.strip_prefix(root).unwrap().display().to_string(),
                    std::fs::read(&p).unwrap(),
                );
            }
        }
    }
    let mut files = BTreeMap::new();
    walk(root, root, &mut files);
    let mut h = Sha256::new();
    for (name, data) in files {
        h.update(name.as_bytes());
        h.update((data.len() as u64).to_le_bytes());
        h.update(&data);
    }
    format!("{:x}", h.finalize())
}

#[test]
fn generation_is_deterministic() {
    for d in Difficulty::ALL {
        let a = generate_sequence(42, &opts(3, d)).unwrap();
        let b = generate_sequence(42, &opts(3, d)).unwrap();
        assert_eq!(a, b);
        let c = generate_sequence(43, &opts(3, d)).unwrap();
        assert_ne!(a.frames, c.frames);
    }
}

#[test]
fn every_object_visible_in_first_frame_and_ids_valid() {
    for seed in 0..40 {
        let d = Difficulty::ALL[seed as usize % 4];
        let n = 1 + seed as usize % 4;
        let rec = generate_sequence(seed, &opts(n, d)).unwrap();
        for id in rec.object_ids() {
            assert!(rec.first_mask().count(id) > 0);
        }
        for t in 0..rec.len() {
            assert!(rec.mask(t).max_id() as usize <= n);
        }
    }
}

#[test]
fn static_scene_keeps_masks_fixed() {
    let o = GenerateOptions {
        motion_scale: 0.0,
        ..opts(1, Difficulty::Easy)
    };
    let rec = generate_sequence(7, &o).unwrap();
    for t in 1..rec.len() {
        assert_eq!(rec.mask(t), rec.first_mask());
        assert_eq!(rec.frames[t], rec.frames[0]);
    }
}

#[test]
fn fast_motion_moves_at_least_three_times_faster() {
    let mean = |d: Difficulty| {
        let v: Vec<f64> = (0..50)
            .filter_map(|s| mean_centroid_displacement(&generate_sequence(1000 + s, &opts(1, d)).unwrap()))
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let (easy, fast) = (mean(Difficulty::Easy), mean(Difficulty::FastMotion));
    assert!(fast >= 3.0 * easy, "easy {easy} fast {fast}");
}

#[test]
fn clutter_background_has_more_contrast() {
    let spread = |d: Difficulty| {
        let mut total = 0.0;
        for s in 0..20 {
            let o = GenerateOptions {
                n_frames: 1,
                ..opts(1, d)
            };
            let rec = generate_sequence(s, &o).unwrap();
            let img = &rec.frames[0];
            let m = rec.first_mask();
            let bg: Vec<f64> = (0..img.h * img.w)
                .filter(|&i| m.ids()[i] == 0)
                .map(|i| img.data[3 * i] as f64)
                .collect();
            let mean = bg.iter().sum::<f64>() / bg.len() as f64;
            total += (bg.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / bg.len() as f64).sqrt();
        }
        total
    };
    assert!(spread(Difficulty::Clutter) > 2.0 * spread(Difficulty::Easy));
}

#[test]
fn disk_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    for s in 0..20u64 {
        let rec = generate_sequence(s * 977, &opts(1 + s as usize % 4, Difficulty::ALL[s as usize % 4])).unwrap();
        let path = dir.path().join(format!("r{s}"));
        write_sequence(&rec, &path).unwrap();
        let back = read_sequence(&path).unwrap();
        assert_eq!(back, rec);
    }
}

#[test]
fn two_object_pgm_holds_only_ids() {
    let rec = generate_sequence(5, &opts(2, Difficulty::Easy)).unwrap();
    let bytes = write_pgm(rec.first_mask());
    let header_len = bytes.len() - 32 * 32;
    let mut values: Vec<u8> = bytes[header_len..].to_vec();
    values.sort();
    values.dedup();
    assert_eq!(values, vec![0, 1, 2]);
}

#[test]
fn malformed_files_report_offsets() {
    assert!(matches!(
        read_ppm(b"P5\n1 1\n255\n\0"),
        Err(Error::Parse { offset: 0, .. })
    ));
    assert!(matches!(
        read_ppm(b"P6\n2 2\n255\n\0\0\0"),
        Err(Error::Parse { offset: 14, .. })
    ));
    assert!(matches!(
        read_pgm(b"P5\n2 x\n255\n"),
        Err(Error::Parse { offset: 5, .. })
    ));
    let m = read_pgm(b"P5 # comment\n2 1\n255\n\x01\x02").unwrap();
    assert_eq!(m.ids(), &[1, 2]);

    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(read_sequence(dir.path()), Err(Error::MissingFile(_))));
}

#[test]
fn ground_truth_reads_are_counted() {
    let rec = generate_sequence(3, &opts(1, Difficulty::Easy)).unwrap();
    let _ = rec.first_mask();
    let _ = rec.mask(0);
    assert_eq!(rec.ground_truth_reads(), 0);
    let clone = rec.clone();
    let _ = clone.mask(2);
    assert_eq!(rec.ground_truth_reads(), 1);
}

#[test]
fn default_split_layout_seeds_and_regeneration() {
    let o = SplitOptions::default();
    let train: Vec<u64> = (0..o.n_train).map(|i| o.seed("train", i)).collect();
    let val: Vec<u64> = (0..o.n_val).map(|i| o.seed("val", i)).collect();
    assert!(train.iter().all(|s| !val.contains(s)));

    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let dirs = make_split(a.path(), &o).unwrap();
    assert_eq!(dirs.len(), 50);
    make_split(b.path(), &o).unwrap();
    assert_eq!(tree_hash(a.path()), tree_hash(b.path()));

    let loaded = load_split(a.path(), "val").unwrap();
    assert_eq!(loaded.len(), 10);
    let difficulties: Vec<Difficulty> = loaded.iter().map(|r| r.difficulty).collect();
    for d in Difficulty::ALL {
        assert!(difficulties.contains(&d));
    }
    assert!(a.path().join("train/train-0000/frames/00007.ppm").is_file());
    assert!(a.path().join("train/train-0000/masks/00000.pgm").is_file());
}
