use std::fs;
use std::path::Path;

use reroof::data::{
    generate_synthetic, load_dataset, load_flat_dataset, write_dataset, Image, ReroofLabel, SplitName,
    SynthConfig, LABELS_FILE, SPLITS_FILE,
};
use reroof::Error;

fn small_config(n: usize) -> SynthConfig {
    SynthConfig {
        num_buildings: n,
        ..SynthConfig::default()
    }
}

#[test]
fn written_dataset_loads_back_identically() {
    let dir = tempfile::tempdir().unwrap();
    let split = generate_synthetic(&small_config(12), 7).unwrap();
    write_dataset(dir.path(), &split).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.train.len() + back.validation.len() + back.test.len(), 12);
    for name in SplitName::ALL {
        let (a, b) = (split.get(name), back.get(name));
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert_eq!(x.building_id, y.building_id);
            assert_eq!(x.years, y.years);
            assert_eq!(x.label, y.label);
            // Written as 8-bit PNG, so values agree to quantization.
            for (p, q) in x.images.iter().zip(&y.images) {
                let worst = p.data().iter().zip(q.data()).map(|(u, v)| (u - v).abs()).fold(0.0, f32::max);
                assert!(worst <= 0.5 / 255.0 + 1e-6, "{worst}");
            }
        }
    }
}

#[test]
fn default_split_sizes() {
    let split = generate_synthetic(&SynthConfig::default(), 1).unwrap();
    assert_eq!((split.train.len(), split.validation.len(), split.test.len()), (150, 25, 55));
    assert!(split.train.iter().all(|s| s.len() == 7 && s.first_year() == 2012 && s.last_year() == 2018));
}

fn set_label(root: &Path, id: &str, value: &str) {
    let path = root.join(LABELS_FILE);
    let mut labels: serde_json::Map<String, serde_json::Value> =
        serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    labels.insert(id.into(), serde_json::from_str(value).unwrap());
    fs::write(&path, serde_json::to_string(&labels).unwrap()).unwrap();
}

#[test]
fn reroof_in_first_year_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let split = generate_synthetic(&small_config(5), 3).unwrap();
    write_dataset(dir.path(), &split).unwrap();
    let id = split.train[0].building_id.clone();
    set_label(dir.path(), &id, "2012");
    let err = load_dataset(dir.path()).unwrap_err();
    assert!(matches!(&err, Error::Dataset(m) if m.contains(&id) && m.contains("2012")), "{err}");
}

#[test]
fn missing_year_names_building_and_year() {
    let dir = tempfile::tempdir().unwrap();
    let split = generate_synthetic(&small_config(5), 3).unwrap();
    write_dataset(dir.path(), &split).unwrap();
    let id = split.train[1].building_id.clone();
    fs::remove_file(dir.path().join("train").join(&id).join("2015.png")).unwrap();
    let err = load_dataset(dir.path()).unwrap_err();
    assert!(matches!(&err, Error::Dataset(m) if m.contains(&id) && m.contains("2015")), "{err}");
}

#[test]
fn missing_root_is_a_dataset_error() {
    let err = load_dataset(Path::new("/nonexistent/reroof-data")).unwrap_err();
    assert!(matches!(err, Error::Dataset(_)));
}

#[test]
fn building_without_label_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let split = generate_synthetic(&small_config(4), 3).unwrap();
    write_dataset(dir.path(), &split).unwrap();
    let mut splits: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join(SPLITS_FILE)).unwrap()).unwrap();
    splits["train"].as_array_mut().unwrap().push("ghost".into());
    fs::write(dir.path().join(SPLITS_FILE), splits.to_string()).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::Dataset(m)) if m.contains("ghost")));
}

#[test]
fn flat_layout_with_csv_labels() {
    let dir = tempfile::tempdir().unwrap();
    let mut csv = String::from("building_id,reroof_year\n");
    for i in 0..10 {
        let id = format!("site{i}");
        let bdir = dir.path().join(&id);
        fs::create_dir_all(&bdir).unwrap();
        for year in 2012..=2018 {
            // Non-square frames exercise the crop and resize path.
            let v = if i % 2 == 0 && year >= 2015 { 0.8 } else { 0.3 };
            Image::filled(80, 100, [v; 3]).write_png(&bdir.join(format!("{year}.png"))).unwrap();
        }
        csv.push_str(&format!("{id},{}\n", if i % 2 == 0 { "2015" } else { "" }));
    }
    fs::write(dir.path().join("labels.csv"), csv).unwrap();
    let split = load_flat_dataset(dir.path()).unwrap();
    assert_eq!(split.train.len() + split.validation.len() + split.test.len(), 10);
    let all: Vec<_> = SplitName::ALL.iter().flat_map(|n| split.get(*n)).collect();
    for seq in all {
        assert_eq!(seq.images[0].height(), 64);
        let even = seq.building_id.trim_start_matches("site").parse::<u32>().unwrap() % 2 == 0;
        assert_eq!(seq.label, if even { ReroofLabel::ReroofYear(2015) } else { ReroofLabel::NoReroof });
    }
}
