//! Source-format parsing against independent reference parsers, the worked
//! conversion examples, and directory loading.

mod common;

use std::fs;

use common::rng;
use hkgx_core::ingest::{
    load_dataset, parse_jf17k_record, parse_wikipeople_json, write_canonical, IngestOptions, LabeledFact, SourceFormat,
};
use hkgx_core::model::Split;
use rand::seq::SliceRandom;
use rand::Rng;

/// Reference reading of a JF17K line: first token is the relation, the next
/// two are subject and object, the rest are values of numbered roles.
fn jf17k_oracle(line: &str) -> (String, String, String, Vec<(String, String)>) {
    let mut tokens = line.split([' ', '\t']).filter(|t| !t.is_empty());
    let rel = tokens.next().unwrap();
    let s = tokens.next().unwrap();
    let o = tokens.next().unwrap();
    let mut quals = Vec::new();
    let mut i = 0;
    for v in tokens {
        i += 1;
        quals.push((rel.to_string() + "_" + &i.to_string(), v.to_string()));
    }
    (s.into(), rel.to_string() + "_so", o.into(), quals)
}

fn token(r: &mut impl Rng) -> String {
    let alphabet = b"abcdefghijklmnopqrstuvwxyz0123456789._";
    let n = r.gen_range(1..12);
    (0..n).map(|_| alphabet[r.gen_range(0..alphabet.len())] as char).collect()
}

#[test]
fn jf17k_matches_reference_on_random_lines() {
    let mut r = rng(17);
    for _ in 0..20 {
        let n = r.gen_range(3..9);
        let toks: Vec<String> = (0..n).map(|_| token(&mut r)).collect();
        let sep = if r.gen_bool(0.5) { "\t" } else { " " };
        let line = toks.join(sep);
        let got = parse_jf17k_record(&line).unwrap();
        let (s, rel, o, q) = jf17k_oracle(&line);
        assert_eq!((got.subject, got.relation, got.object, got.qualifiers), (s, rel, o, q), "{line}");
    }
}

#[test]
fn wikipeople_matches_reference_on_random_lines() {
    let mut r = rng(23);
    for _ in 0..20 {
        let stem = format!("P{}", r.gen_range(1..5000));
        let s = format!("Q{}", r.gen_range(1..99999));
        let o = format!("Q{}", r.gen_range(1..99999));
        let n = r.gen_range(0..5);
        let mut quals: Vec<(String, String)> = (0..n)
            .map(|_| (format!("P{}", r.gen_range(1..5000)), format!("Q{}", r.gen_range(1..99999))))
            .collect();
        quals.sort();
        quals.dedup_by(|a, b| a.0 == b.0);
        let mut fields = vec![
            format!("\"{stem}_h\": \"{s}\""),
            format!("\"{stem}_t\": \"{o}\""),
            format!("\"N\": {}", quals.len() + 2),
        ];
        fields.extend(quals.iter().map(|(a, v)| format!("\"{a}\": [\"{v}\"]")));
        fields.shuffle(&mut r);
        let line = format!("{{{}}}", fields.join(", "));
        let mut got = parse_wikipeople_json(&line).unwrap();
        got.qualifiers.sort();
        assert_eq!(got, LabeledFact { subject: s, relation: stem, object: o, qualifiers: quals }, "{line}");
    }
}

#[test]
fn worked_conversion_examples() {
    let jf = parse_jf17k_record("soccer.football_player_match_participation\t02pp1\t04xkpd\t0c0lv1g").unwrap();
    assert_eq!(
        jf.to_string(),
        "(02pp1, soccer.football_player_match_participation_so, 04xkpd, \
         (soccer.football_player_match_participation_1, 0c0lv1g))"
    );
    let wp = parse_wikipeople_json(r#"{"P3919_h": "Q337913", "P3919_t": "Q1210343", "P2868": "Q864380"}"#).unwrap();
    assert_eq!(wp.to_string(), "(Q337913, P3919, Q1210343, (P2868, Q864380))");
    assert_eq!(wp.to_canonical_line(), "Q337913\tP3919\tQ1210343\tP2868\tQ864380");
}

#[test]
fn load_reports_file_and_line() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("train.txt"), "r a b\nr a\n").unwrap();
    fs::write(dir.path().join("valid.txt"), "").unwrap();
    fs::write(dir.path().join("test.txt"), "").unwrap();
    let err = load_dataset(dir.path(), SourceFormat::Jf17k, &IngestOptions::default()).unwrap_err().to_string();
    assert!(err.contains("train.txt:2"), "{err}");
    let (ds, report) = load_dataset(
        dir.path(),
        SourceFormat::Jf17k,
        &IngestOptions { skip_malformed: true, ..Default::default() },
    )
    .unwrap();
    assert_eq!(ds.split(Split::Train).len(), 1);
    assert_eq!(report.skipped.len(), 1);
}

#[test]
fn missing_directory_names_path() {
    let err = load_dataset(std::path::Path::new("/no/such/dir"), SourceFormat::Canonical, &IngestOptions::default())
        .unwrap_err()
        .to_string();
    assert!(err.contains("/no/such/dir"), "{err}");
}

#[test]
fn strict_mode_rejects_unseen_entities() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("train.txt"), "a\tr\tb\n").unwrap();
    fs::write(dir.path().join("valid.txt"), "a\tr\tc\n").unwrap();
    fs::write(dir.path().join("test.txt"), "").unwrap();
    let strict = IngestOptions { strict: true, ..Default::default() };
    assert!(load_dataset(dir.path(), SourceFormat::Canonical, &strict).is_err());
    assert!(load_dataset(dir.path(), SourceFormat::Canonical, &IngestOptions::default()).is_ok());
}

#[test]
fn canonical_write_then_load_is_identity() {
    let ds = common::random_hkg(5, 200, 4);
    let dir = tempfile::tempdir().unwrap();
    write_canonical(&ds, dir.path()).unwrap();
    let (back, _) = load_dataset(dir.path(), SourceFormat::Canonical, &IngestOptions::default()).unwrap();
    // Ids may be reassigned on reload, which reorders qualifiers.
    let by_label = |d: &hkgx_core::model::HkgDataset, split| -> Vec<LabeledFact> {
        d.split(split)
            .iter()
            .map(|f| {
                let mut l = hkgx_core::ingest::labeled(d, f);
                l.qualifiers.sort();
                l
            })
            .collect()
    };
    for split in Split::ALL {
        assert_eq!(by_label(&ds, split), by_label(&back, split));
    }
}
