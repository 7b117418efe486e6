use std::fs;

use painvit::dataset::{
    channel_names, ingest, load_frame, synth, synth_sample, SyntheticSpec, CHANNELS_PER_GROUP, FNIRS_FILE,
    SAMPLES_DIR,
};
use painvit::Error;

fn small(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        per_class: 2,
        seed,
        frames: 30,
        fnirs_len: 20,
        ..SyntheticSpec::default()
    }
}

#[test]
fn synth_writes_the_layout() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        per_class: 10,
        frames: 30,
        fnirs_len: 8,
        ..SyntheticSpec::default()
    };
    synth(&spec, dir.path()).unwrap();
    let samples = fs::read_dir(dir.path().join(SAMPLES_DIR)).unwrap().count();
    assert_eq!(samples, 30);
    let labels = fs::read_to_string(dir.path().join("labels.csv")).unwrap();
    assert_eq!(labels.lines().count(), 31);
    let ds = ingest(dir.path()).unwrap();
    assert_eq!(ds.class_counts(), [10, 10, 10]);
    let s = &ds.samples[0];
    assert_eq!(s.frame_paths.len(), 30);
    assert_eq!((s.hbo.len(), s.hbr.len()), (24, 24));
    assert_eq!(load_frame(&s.frame_paths[0]).unwrap().shape(), &[3, 224, 224]);
    assert_eq!(s.hbo[0].1.values().len(), 8);
}

#[test]
fn synth_is_seed_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    synth(&small(4), a.path()).unwrap();
    synth(&small(4), b.path()).unwrap();
    let read = |d: &std::path::Path, rel: &str| fs::read(d.join(rel)).unwrap();
    assert_eq!(read(a.path(), "labels.csv"), read(b.path(), "labels.csv"));
    let f = format!("{SAMPLES_DIR}/c1_0001/{FNIRS_FILE}");
    assert_eq!(read(a.path(), &f), read(b.path(), &f));
    let png = format!("{SAMPLES_DIR}/c2_0000/frames/frame_007.png");
    assert_eq!(read(a.path(), &png), read(b.path(), &png));

    let c = tempfile::tempdir().unwrap();
    synth(&small(5), c.path()).unwrap();
    assert_ne!(read(a.path(), &f), read(c.path(), &f));
}

#[test]
fn fnirs_values_round_trip_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small(9);
    synth(&spec, dir.path()).unwrap();
    let ds = ingest(dir.path()).unwrap();
    let raw = synth_sample(&spec, 1, 0);
    let s = ds.samples.iter().find(|s| s.id == raw.id).unwrap();
    assert_eq!(s.label, 1);
    assert_eq!(s.hbo[3].1.values(), raw.fnirs[3].as_slice());
    assert_eq!(s.hbr[0].1.values(), raw.fnirs[CHANNELS_PER_GROUP].as_slice());
    let frame = load_frame(&s.frame_paths[2]).unwrap();
    assert_eq!(frame, raw.frame_tensor(2));
}

#[test]
fn exclusions_drop_channels() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        excluded: vec!["HbO_05".into(), "HbO_19".into()],
        ..small(1)
    };
    synth(&spec, dir.path()).unwrap();
    let ds = ingest(dir.path()).unwrap();
    assert_eq!(ds.excluded.len(), 2);
    for s in &ds.samples {
        assert_eq!((s.hbo.len(), s.hbr.len()), (22, 24));
        assert!(s.hbo.iter().all(|(n, _)| n != "HbO_05" && n != "HbO_19"));
    }
    fs::write(dir.path().join("excluded_channels.txt"), "").unwrap();
    assert_eq!(ingest(dir.path()).unwrap().samples[0].hbo.len(), 24);
    fs::write(dir.path().join("excluded_channels.txt"), "HbX_99\n").unwrap();
    assert!(matches!(ingest(dir.path()), Err(Error::Data(_))));
}

fn data_message(r: Result<painvit::dataset::Dataset, Error>) -> String {
    match r {
        Err(Error::Data(m)) => m,
        other => panic!("expected a data error, got {other:?}"),
    }
}

#[test]
fn corrupt_row_cites_sample_and_row() {
    let dir = tempfile::tempdir().unwrap();
    synth(&small(2), dir.path()).unwrap();
    let path = dir.path().join(SAMPLES_DIR).join("c0_0001").join(FNIRS_FILE);
    let text = fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    lines[5] = lines[5].rsplit_once(',').unwrap().0.to_string();
    fs::write(&path, lines.join("\n") + "\n").unwrap();
    let msg = data_message(ingest(dir.path()));
    assert!(msg.contains("c0_0001") && msg.contains("row 5"), "{msg}");
}

#[test]
fn missing_frame_and_bad_header_name_the_sample() {
    let dir = tempfile::tempdir().unwrap();
    synth(&small(3), dir.path()).unwrap();
    let frame = dir.path().join(SAMPLES_DIR).join("c2_0000/frames/frame_029.png");
    fs::remove_file(&frame).unwrap();
    assert!(data_message(ingest(dir.path())).contains("c2_0000"));

    synth(&small(3), dir.path()).unwrap();
    let path = dir.path().join(SAMPLES_DIR).join("c1_0000").join(FNIRS_FILE);
    let text = fs::read_to_string(&path).unwrap();
    fs::write(&path, text.replacen("HbR_24", "HbR_25", 1)).unwrap();
    assert!(data_message(ingest(dir.path())).contains("c1_0000"));

    synth(&small(3), dir.path()).unwrap();
    fs::remove_dir_all(dir.path().join(SAMPLES_DIR).join("c0_0000")).unwrap();
    assert!(data_message(ingest(dir.path())).contains("c0_0000"));
}

#[test]
fn bad_labels_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    synth(&small(3), dir.path()).unwrap();
    fs::write(dir.path().join("labels.csv"), "id,label\nc0_0000,7\n").unwrap();
    assert!(matches!(ingest(dir.path()), Err(Error::Data(_))));
    fs::write(dir.path().join("labels.csv"), "id,label\n").unwrap();
    assert!(matches!(ingest(dir.path()), Err(Error::Data(_))));
}

#[test]
fn channel_names_are_hbo_then_hbr() {
    let n = channel_names();
    assert_eq!(n.len(), 48);
    assert_eq!((n[0].as_str(), n[23].as_str(), n[24].as_str(), n[47].as_str()), ("HbO_01", "HbO_24", "HbR_01", "HbR_24"));
}
