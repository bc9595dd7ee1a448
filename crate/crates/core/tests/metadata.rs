use lact_core::metadata::*;
use proptest::prelude::*;

fn physics_only(angle: f64, exposure: &str, current: &str) -> MetadataRecord {
    MetadataRecord {
        scan_angle_deg: Some(angle),
        exposure_time: Some(exposure.into()),
        tube_current: Some(current.into()),
        enabled_categories: vec![Category::Phy],
        ..MetadataRecord::default()
    }
}

fn full() -> MetadataRecord {
    MetadataRecord {
        scan_angle_deg: Some(120.0),
        exposure_time: Some("800 ms".into()),
        tube_current: Some("250 mA".into()),
        slice_idx: Some(17),
        age: Some(54),
        sex: Some(Sex::Male),
        diseases: vec!["emphysema".into(), "atelectasis".into()],
        impressions: Some("mild basal changes".into()),
        enabled_categories: Category::ALL.to_vec(),
    }
}

#[test]
fn physics_sentence_is_byte_exact() {
    let p = physics_only(90.0, "500 ms", "200 mA").render_prompt().unwrap();
    assert_eq!(
        p.as_bytes(),
        b"CT Parameters: Scan angle is 90 degree, exposure time is 500 ms, X-Ray tube current is 200 mA."
    );
}

#[test]
fn physics_template_under_substitution() {
    for (angle, exposure, current) in [(60.0, "300 ms", "100 mA"), (150.0, "1000 ms", "350 mA"), (360.0, "x", "y")] {
        let p = physics_only(angle, exposure, current).render_prompt().unwrap();
        let expected = format!(
            "CT Parameters: Scan angle is {angle} degree, exposure time is {exposure}, X-Ray tube current is {current}."
        );
        assert_eq!(p, expected);
    }
}

#[test]
fn full_prompt_and_ablation_residue() {
    let r = full();
    assert_eq!(
        r.render_prompt().unwrap(),
        "CT Parameters: Scan angle is 120 degree, exposure time is 800 ms, X-Ray tube current is 250 mA. \
         17th slice of 54 years old male with emphysema, atelectasis: mild basal changes."
    );
    let markers = [
        (Category::Phy, vec!["CT Parameters", "Scan angle", "exposure", "tube current", "mA"]),
        (Category::Demo, vec!["th slice", "years old", "male"]),
        (Category::Diag, vec!["emphysema", "atelectasis", "mild basal"]),
    ];
    for (cat, words) in &markers {
        let mut r = full();
        r.ablate(&[*cat]);
        let p = r.render_prompt().unwrap();
        for w in words {
            assert!(!p.contains(w), "ablating {cat:?} left `{w}` in {p:?}");
        }
        assert!(!p.starts_with(' ') && !p.ends_with(' ') && !p.contains("  "));
    }
    let mut none = full();
    none.ablate(&Category::ALL);
    assert_eq!(none.render_prompt().unwrap(), "");
}

#[test]
fn empty_file_and_single_record_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("meta.toml");
    std::fs::write(&path, "").unwrap();
    assert!(load_records(&path).unwrap().is_empty());
    save_records(&path, &[full()]).unwrap();
    assert_eq!(load_records(&path).unwrap(), vec![full()]);
    let ablated = load_records_ablated(&path, &[Category::Diag]).unwrap();
    assert_eq!(ablated[0].enabled_categories, vec![Category::Phy, Category::Demo]);
}

#[test]
fn malformed_age_names_the_field() {
    let err = records_from_toml("[[record]]\nage = \"abc\"\n", "meta.toml").unwrap_err();
    assert!(err.to_string().contains("age"), "{err}");
}

fn sex_strategy() -> impl Strategy<Value = Sex> {
    prop_oneof![
        Just(Sex::Male),
        Just(Sex::Female),
        "[a-z]{1,8}".prop_filter("reserved", |s| s != "male" && s != "female").prop_map(Sex::Other),
    ]
}

fn record_strategy() -> impl Strategy<Value = MetadataRecord> {
    (
        prop::option::of(0.0f64..360.0),
        prop::option::of("[ -~]{0,12}"),
        prop::option::of("[ -~]{0,12}"),
        prop::option::of(0u32..1000),
        prop::option::of(0u32..120),
        prop::option::of(sex_strategy()),
        prop::collection::vec("[a-z ]{1,10}", 0..4),
        prop::option::of("[ -~]{0,20}"),
        prop::sample::subsequence(Category::ALL.to_vec(), 0..=3),
    )
        .prop_map(|(a, e, c, s, age, sex, d, i, cats)| MetadataRecord {
            scan_angle_deg: a,
            exposure_time: e,
            tube_current: c,
            slice_idx: s,
            age,
            sex,
            diseases: d,
            impressions: i,
            enabled_categories: cats,
        })
}

proptest! {
    #[test]
    fn records_round_trip_exactly(records in prop::collection::vec(record_strategy(), 0..5)) {
        let text = records_to_toml(&records).unwrap();
        prop_assert_eq!(records_from_toml(&text, "mem").unwrap(), records);
    }

    #[test]
    fn rendering_is_deterministic(r in record_strategy()) {
        let a = r.render_prompt().map_err(|e| e.to_string());
        let b = r.clone().render_prompt().map_err(|e| e.to_string());
        prop_assert_eq!(a, b);
    }
}
