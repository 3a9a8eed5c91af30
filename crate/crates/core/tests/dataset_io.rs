//! JSON Lines loading, validation and round-tripping.

use std::fs;
use std::path::PathBuf;

use odm_core::dataset::{
    encode_vehicle_action, generate_synthetic, load_annotations, load_jsonl, write_jsonl, Source,
    VehicleAction,
};
use odm_core::rng::seeded;
use odm_core::OdmError;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

#[test]
fn loads_pie_fixture() {
    let recs = load_annotations(&fixture("pie3.jsonl"), Source::Pie).unwrap();
    assert_eq!(recs.len(), 3);
    assert_eq!(
        recs.iter().map(|r| r.label).collect::<Vec<_>>(),
        vec![1, 0, 1]
    );
    assert!(recs
        .iter()
        .all(|r| r.source == Source::Pie && r.frames.len() == 16));
    assert_eq!(recs[0].frames[3].speed, 10.3);
    assert_eq!(recs[0].frames[0].bbox, [380.0, 450.0, 420.0, 550.0]);
}

#[test]
fn wrong_source_is_rejected() {
    // The second line names "pie" explicitly.
    let err = load_annotations(&fixture("pie3.jsonl"), Source::Jaad).unwrap_err();
    assert!(
        matches!(err, OdmError::Validation { ref id, .. } if id == "p1"),
        "{err}"
    );
}

#[test]
fn jaad_actions_map_to_ordinal_speed() {
    let recs = load_annotations(&fixture("jaad1.jsonl"), Source::Jaad).unwrap();
    let speeds: Vec<f64> = recs[0].frames[..3].iter().map(|f| f.speed).collect();
    let expected: Vec<f64> = [
        VehicleAction::Stopped,
        VehicleAction::MovingSlow,
        VehicleAction::MovingFast,
    ]
    .into_iter()
    .map(encode_vehicle_action)
    .collect();
    assert_eq!(speeds, expected);
    // A file without source fields has no default under the generic loader.
    assert!(matches!(
        load_jsonl(&fixture("jaad1.jsonl")),
        Err(OdmError::Parse { line: 1, .. })
    ));
}

#[test]
fn bad_lines_report_their_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let good = fs::read_to_string(fixture("pie3.jsonl")).unwrap();
    let first = good.lines().next().unwrap();

    let path = dir.path().join("bad.jsonl");
    fs::write(&path, format!("{first}\n\n{{not json\n")).unwrap();
    assert!(matches!(
        load_annotations(&path, Source::Pie),
        Err(OdmError::Parse { line: 3, .. })
    ));

    let unknown = first.replacen("10.0", "{\"action\":\"flying\"}", 1);
    fs::write(&path, format!("{unknown}\n")).unwrap();
    assert!(matches!(
        load_annotations(&path, Source::Pie),
        Err(OdmError::Parse { line: 1, .. })
    ));
}

#[test]
fn invalid_geometry_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let good = fs::read_to_string(fixture("pie3.jsonl")).unwrap();
    let first = good.lines().next().unwrap();
    let path = dir.path().join("inv.jsonl");

    // Swap x_tl and x_br of the first frame.
    let inverted = first.replacen("[380, 450.0, 420, 550.0]", "[420, 450.0, 380, 550.0]", 1);
    assert_ne!(inverted, first);
    fs::write(&path, format!("{inverted}\n")).unwrap();
    let err = load_annotations(&path, Source::Pie).unwrap_err();
    assert!(
        matches!(err, OdmError::Validation { .. }) && err.to_string().contains("inverted"),
        "{err}"
    );

    let bad_label = first.replacen("\"label\": 1", "\"label\": 2", 1);
    fs::write(&path, format!("{bad_label}\n")).unwrap();
    assert!(matches!(
        load_annotations(&path, Source::Pie),
        Err(OdmError::Validation { .. })
    ));
}

#[test]
fn empty_file_loads_no_records_and_missing_file_is_io() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.jsonl");
    fs::write(&path, "").unwrap();
    assert!(load_jsonl(&path).unwrap().is_empty());
    assert!(matches!(
        load_jsonl(&dir.path().join("absent.jsonl")),
        Err(OdmError::Io { .. })
    ));
}

#[test]
fn write_then_load_round_trips() {
    let m =
        generate_synthetic(12, 20, &mut seeded(4), odm_core::dataset::Profile::Stopper).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rt.jsonl");
    write_jsonl(&path, &m.records).unwrap();
    assert_eq!(load_jsonl(&path).unwrap(), m.records);
}
