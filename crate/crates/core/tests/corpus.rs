use std::fs;

use mixkit_core::corpus::*;

#[test]
fn file_round_trip_and_skip_counts() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.jsonl");
    let lines = [
        r#"{"id":"a","text":"Bonjour le monde","lang":"fr","source":"web"}"#,
        r#"{"id":"b","text":"Hello world","lang":"en"}"#,
        r#"{"id":"c","text":"x","meta":{"k":"v"}}"#,
    ];
    fs::write(&input, format!("{}\n\n{}\nnot json\n{}\n", lines[0], lines[1], lines[2])).unwrap();

    assert!(read_jsonl(&input, Strictness::Strict).is_err());
    let (docs, skipped) = read_jsonl(&input, Strictness::SkipBad).unwrap();
    assert_eq!(skipped, 1);
    assert_eq!(docs.len(), 3);

    let output = dir.path().join("out.jsonl");
    write_jsonl(fs::File::create(&output).unwrap(), &docs).unwrap();
    assert_eq!(fs::read_to_string(&output).unwrap(), lines.join("\n") + "\n");
    let (again, _) = read_jsonl(&output, Strictness::Strict).unwrap();
    assert_eq!(again, docs);
}

#[test]
fn missing_file_names_the_path() {
    let err = read_jsonl("/nonexistent/x.jsonl", Strictness::Strict).unwrap_err();
    assert!(err.to_string().contains("/nonexistent/x.jsonl"));
}

#[test]
fn stats_buckets_by_language_and_source() {
    let docs = vec![
        Document::new("1", "un deux").with_lang("fr").with_source("web"),
        Document::new("2", "trois").with_lang("fr").with_source("web"),
        Document::new("3", "one two three").with_lang("en").with_source("books"),
    ];
    let report = corpus_stats(&docs, None);
    assert_eq!(report.buckets.len(), 2);
    let fr = &report.buckets[&("fr".to_string(), "web".to_string())];
    assert_eq!((fr.docs, fr.tokens, fr.bytes), (2, 3, 12));
    assert_eq!(report.totals(), CorpusStats::new(25, 3, 6));
}
