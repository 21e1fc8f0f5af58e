mod common;

use std::collections::HashMap;
use std::fs;

use common::{make_dataset, tiny_spec};
use kiprn::data::{batches, make_splits, normalize, DatasetManifest, Split, MANIFEST_FILE, PIXEL_MEAN, PIXEL_STD};
use kiprn::imageio::{load_png, save_png};
use kiprn::ops::bilinear_resize;
use kiprn::synth::{render_sample, synth_generate, CLASS_NAMES};
use kiprn::{Error, Tensor};

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf29ce484222325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x100000001b3))
}

fn file_hashes(m: &DatasetManifest) -> Vec<u64> {
    m.records.iter().map(|r| fnv1a(&fs::read(m.root.join(&r.path)).unwrap())).collect()
}

#[test]
fn hundred_per_class_gives_seven_hundred_files() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth_generate(&tiny_spec(100, 32, 0), dir.path()).unwrap();
    assert_eq!(m.records.len(), 700);
    for (c, name) in CLASS_NAMES.iter().enumerate() {
        assert_eq!(m.records.iter().filter(|r| r.label == c).count(), 100);
        let files = fs::read_dir(dir.path().join("images").join(name.replace(' ', "_"))).unwrap().count();
        assert_eq!(files, 100);
    }
    let mut paths: Vec<_> = m.records.iter().map(|r| &r.path).collect();
    paths.sort();
    paths.dedup();
    assert_eq!(paths.len(), 700);
}

#[test]
fn generation_is_byte_deterministic_and_seed_sensitive() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = make_dataset(a.path(), &tiny_spec(3, 48, 5));
    let mb = make_dataset(b.path(), &tiny_spec(3, 48, 5));
    let mc = make_dataset(c.path(), &tiny_spec(3, 48, 6));
    assert_eq!(file_hashes(&ma), file_hashes(&mb));
    assert_eq!(
        fs::read(a.path().join(MANIFEST_FILE)).unwrap(),
        fs::read(b.path().join(MANIFEST_FILE)).unwrap()
    );
    let (ha, hc) = (file_hashes(&ma), file_hashes(&mc));
    assert!(ha.iter().zip(&hc).any(|(x, y)| x != y));
}

#[test]
fn png_round_trip_within_quantisation() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.png");
    let img = render_sample(&tiny_spec(1, 40, 1), 2, 0).unwrap().image;
    save_png(&img, &path).unwrap();
    let back = load_png(&path).unwrap();
    let worst = img.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs()).fold(0f32, f32::max);
    assert!(worst <= 1.0 / 255.0 + 1e-6, "{worst}");

    let zeros = Tensor::<f32>::zeros(vec![3, 4, 6]);
    save_png(&zeros, &path).unwrap();
    assert!(load_png(&path).unwrap().bitwise_eq(&zeros));

    let out_of_range = Tensor::from_fn(vec![3, 2, 2], |i| i as f32 - 5.0);
    save_png(&out_of_range, &path).unwrap();
    assert!(load_png(&path).unwrap().data().iter().all(|v| *v == 0.0 || *v == 1.0));
}

#[test]
fn truncated_png_is_a_decode_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.png");
    save_png(&render_sample(&tiny_spec(1, 40, 1), 0, 0).unwrap().image, &path).unwrap();
    let bytes = fs::read(&path).unwrap();
    for cut in [8, 40, bytes.len() - 13] {
        fs::write(&path, &bytes[..cut]).unwrap();
        assert!(matches!(load_png(&path), Err(Error::Decode(_))), "cut at {cut}");
    }
}

#[test]
fn seven_hundred_split_in_half_per_class() {
    let labels: Vec<usize> = (0..700).map(|i| i / 100).collect();
    let s = make_splits(&labels, 7, 0.5, 9).unwrap();
    assert_eq!(s.iter().filter(|&&x| x == Split::Train).count(), 350);
    for c in 0..7 {
        let train = (0..700).filter(|&i| labels[i] == c && s[i] == Split::Train).count();
        assert_eq!(train, 50);
    }
    assert_eq!(s, make_splits(&labels, 7, 0.5, 9).unwrap());
    assert!(matches!(make_splits(&labels, 7, 0.0, 9), Err(Error::Argument(_))));
    assert!(matches!(make_splits(&labels, 7, 1.0, 9), Err(Error::Argument(_))));
}

#[test]
fn manifest_round_trips_through_jsonl() {
    let dir = tempfile::tempdir().unwrap();
    let m = make_dataset(dir.path(), &tiny_spec(2, 32, 3));
    let back = DatasetManifest::open(dir.path()).unwrap();
    assert_eq!(back.records, m.records);
    assert_eq!(back.spec, m.spec);
    assert_eq!(back.split_seed, Some(3));
    let text = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
    let first_record: serde_json::Value = serde_json::from_str(text.lines().nth(1).unwrap()).unwrap();
    for key in ["path", "label", "class_name", "split"] {
        assert!(first_record.get(key).is_some(), "missing {key}");
    }
}

#[test]
fn batches_partition_the_split() {
    let dir = tempfile::tempdir().unwrap();
    let m = make_dataset(dir.path(), &tiny_spec(4, 32, 0));
    let train = m.indices(Split::Train);

    let whole: Vec<_> = batches(&m, &train, train.len(), Some(1)).unwrap().collect();
    assert_eq!(whole.len(), 1);
    let mut seen = whole[0].as_ref().unwrap().indices.clone();
    seen.sort();
    assert_eq!(seen, train);

    let order = |seed| -> Vec<usize> {
        batches(&m, &train, 3, Some(seed)).unwrap().flat_map(|b| b.unwrap().indices).collect()
    };
    assert_eq!(order(7), order(7));
    assert_ne!(order(7), order(8));

    let all: Vec<_> = batches(&m, &train, 3, Some(2)).unwrap().map(|b| b.unwrap()).collect();
    assert_eq!(all.len(), train.len().div_ceil(3));
    assert_eq!(all.last().unwrap().labels.len(), train.len() - 3 * (all.len() - 1));
    let mut labels: Vec<usize> = all.iter().flat_map(|b| b.labels.clone()).collect();
    let mut want: Vec<usize> = train.iter().map(|&i| m.records[i].label).collect();
    labels.sort();
    want.sort();
    assert_eq!(labels, want);

    let b = &all[0];
    assert_eq!(b.images.dims(), &[3, 3, 32, 32]);
    let raw = m.load_image(b.indices[0]).unwrap();
    assert!(normalize(&raw).bitwise_eq(&Tensor::new(vec![3, 32, 32], b.images.sample(0).to_vec()).unwrap()));
    assert_eq!(normalize(&Tensor::full(vec![1], 1.0)).data()[0], (1.0 - PIXEL_MEAN) / PIXEL_STD);

    assert!(matches!(batches(&m, &train, 0, None), Err(Error::Argument(_))));
}

#[test]
fn missing_image_error_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let m = make_dataset(dir.path(), &tiny_spec(2, 32, 0));
    let victim = m.image_path(0);
    fs::remove_file(&victim).unwrap();
    let err = batches(&m, &[0, 1], 2, None).unwrap().next().unwrap().err().unwrap();
    assert!(matches!(err, Error::Io { .. }));
    assert!(err.to_string().contains(&victim.display().to_string()));
}

/// 32x32 nearest-centroid classifier: a floor on how separable the classes are.
#[test]
fn nearest_centroid_beats_chance() {
    let spec = tiny_spec(30, 256, 0);
    let labels: Vec<usize> = (0..7).flat_map(|c| std::iter::repeat_n(c, 30)).collect();
    let splits = make_splits(&labels, 7, 0.5, 0).unwrap();
    let features: Vec<Vec<f32>> = (0..7)
        .flat_map(|c| (0..30).map(move |i| (c, i)))
        .map(|(c, i)| {
            let img = render_sample(&spec, c, i).unwrap().image.reshape(vec![1, 3, 256, 256]).unwrap();
            bilinear_resize(&img, 32, 32).unwrap().into_data()
        })
        .collect();
    let dim = features[0].len();
    let mut centroids = vec![vec![0f32; dim]; 7];
    let mut counts: HashMap<usize, f32> = HashMap::new();
    for (i, f) in features.iter().enumerate() {
        if splits[i] == Split::Train {
            for (c, v) in centroids[labels[i]].iter_mut().zip(f) {
                *c += v;
            }
            *counts.entry(labels[i]).or_default() += 1.0;
        }
    }
    for (k, c) in centroids.iter_mut().enumerate() {
        c.iter_mut().for_each(|v| *v /= counts[&k]);
    }
    let (mut correct, mut total) = (0, 0);
    for (i, f) in features.iter().enumerate() {
        if splits[i] != Split::Test {
            continue;
        }
        let dist = |c: &Vec<f32>| c.iter().zip(f).map(|(a, b)| (a - b) * (a - b)).sum::<f32>();
        let pred = (0..7).min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b]))).unwrap();
        correct += usize::from(pred == labels[i]);
        total += 1;
    }
    let acc = correct as f64 / total as f64;
    println!("nearest-centroid accuracy {acc:.3}");
    assert!(acc > 2.0 / 7.0, "accuracy {acc}");
}
