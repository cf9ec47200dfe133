use std::collections::BTreeMap;
use std::path::Path;

use pebal::scenegen::{
    generate_benchmark, generate_scene, Benchmark, BenchmarkSizes, SceneSpec, Split,
};
use sha2::{Digest, Sha256};

#[test]
fn class_frequencies_match_layout_expectation() {
    for y in 3..=5u8 {
        let spec = SceneSpec::with_classes(y).unwrap();
        let expected = spec.expected_class_fractions().unwrap();
        let mut counts = vec![0usize; y as usize];
        for seed in 0..1000 {
            let s = generate_scene(&spec, seed).unwrap();
            for &l in s.labels.as_slice() {
                counts[l as usize - 1] += 1;
            }
        }
        let total = (1000 * spec.height * spec.width) as f64;
        for (c, (&n, &e)) in counts.iter().zip(&expected).enumerate() {
            let f = n as f64 / total;
            assert!(
                (f - e).abs() <= 0.2 * e,
                "Y={y} class {}: measured {f:.4}, expected {e:.4}",
                c + 1
            );
        }
    }
}

fn hash_tree(dir: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let digest = Sha256::digest(std::fs::read(&p).unwrap());
                out.insert(
                    p.strip_prefix(dir).unwrap().display().to_string(),
                    hex::encode(digest),
                );
            }
        }
    }
    out
}

#[test]
fn benchmark_on_disk_is_reproducible_and_round_trips() {
    let sizes = BenchmarkSizes {
        train: 64,
        val: 16,
        test: 32,
        ..BenchmarkSizes::default()
    };
    let spec = SceneSpec::default();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let bench = generate_benchmark(&spec, &sizes, 5).unwrap();
    bench.write(a.path()).unwrap();
    generate_benchmark(&spec, &sizes, 5)
        .unwrap()
        .write(b.path())
        .unwrap();
    let (ha, hb) = (hash_tree(a.path()), hash_tree(b.path()));
    assert_eq!(ha, hb);

    let count = |sub: &str, ext: &str| {
        std::fs::read_dir(a.path().join(sub))
            .unwrap()
            .filter(|e| e.as_ref().unwrap().path().extension().unwrap() == ext)
            .count()
    };
    assert_eq!(count("images", "ppm"), 112);
    assert_eq!(count("labels", "pgm"), 112);

    let loaded = Benchmark::load(a.path()).unwrap();
    assert_eq!(loaded, bench);
    assert_eq!(
        (
            loaded.count(Split::Train),
            loaded.count(Split::Val),
            loaded.count(Split::Test)
        ),
        (64, 16, 32)
    );
}

#[test]
fn different_seeds_give_different_data() {
    let sizes = BenchmarkSizes {
        train: 2,
        val: 2,
        test: 2,
        train_objects: 2,
        test_objects: 2,
    };
    let a = generate_benchmark(&SceneSpec::default(), &sizes, 1).unwrap();
    let b = generate_benchmark(&SceneSpec::default(), &sizes, 2).unwrap();
    assert_ne!(a.samples, b.samples);
}

#[test]
fn test_anomalies_mostly_overlap_the_road() {
    let sizes = BenchmarkSizes {
        train: 1,
        val: 1,
        test: 200,
        ..BenchmarkSizes::default()
    };
    let spec = SceneSpec::default();
    let bench = generate_benchmark(&spec, &sizes, 3).unwrap();
    let road = 3u8;
    let (mut on_road, mut total) = (0, 0);
    for (rec, s) in bench.records.iter().zip(&bench.samples) {
        if rec.split != Split::Test || rec.anomaly_pixels == 0 {
            continue;
        }
        // the scene before pasting, regenerated from its recorded seed
        let scene = generate_scene(&spec, rec.seed).unwrap();
        let hit = s
            .labels
            .as_slice()
            .iter()
            .zip(scene.labels.as_slice())
            .any(|(&now, &before)| now == 5 && before == road);
        total += 1;
        on_road += hit as usize;
    }
    assert_eq!(total, 100);
    assert!(on_road as f64 / total as f64 >= 0.8, "{on_road}/{total}");
}
