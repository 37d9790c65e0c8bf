mod common;

use std::process::Command;

use bsap_core::embstore::{load_matrix, Modality};
use bsap_core::retrieval::parse_results;
use common::{reversal_fixture, run, Fixture};

fn strings(args: &[&str]) -> Vec<String> {
    args.iter().map(|s| s.to_string()).collect()
}

#[test]
fn raw_picks_identical_vector() {
    let f = Fixture::new();
    f.matrix("texts", &[vec![0.3, 0.4]], &["q"], Modality::Text);
    f.matrix(
        "images",
        &[vec![0.4, 0.3], vec![0.6, 0.8]],
        &["a", "b"],
        Modality::Image,
    );
    f.write(
        "ann.jsonl",
        r#"{"query_id":"q","gt_id":"b","candidates":[{"id":"a","box":[0,0,1,1]},{"id":"b","box":[2,2,3,3]}]}"#,
    );
    assert_eq!(run(&f.score_args("raw", "out.jsonl")), 0);
    let recs = parse_results(&f.read("out.jsonl")).unwrap();
    assert_eq!(recs.len(), 1);
    assert_eq!(recs[0].predicted_id, "b");
    assert_eq!(recs[0].gt_id.as_deref(), Some("b"));
}

#[test]
fn bsap_flips_constructed_reversal() {
    let f = reversal_fixture();
    assert_eq!(run(&f.score_args("raw", "raw.jsonl")), 0);
    assert_eq!(run(&f.score_args("bsap", "bsap.jsonl")), 0);
    let raw = parse_results(&f.read("raw.jsonl")).unwrap();
    let bsap = parse_results(&f.read("bsap.jsonl")).unwrap();
    assert_eq!(raw[0].predicted_id, "c0");
    assert_eq!(bsap[0].predicted_id, "c1");

    // f32 storage puts the similarities within a few 1e-6 of 60 and 55
    let line = f.read("raw.jsonl");
    assert!(
        line.starts_with(
            r#"{"query_id":"dog","mode":"raw","predicted_id":"c0","gt_id":"c1","scores":["#
        ),
        "{line}"
    );
    assert!((raw[0].scores[0] - 60.0).abs() < 1e-5 && (raw[0].scores[1] - 55.0).abs() < 1e-5);
    assert!((raw[0].margin - 5.0).abs() < 1e-5);
    assert!(line.ends_with("}\n") && line.lines().count() == 1);
}

#[test]
fn score_reruns_are_byte_identical() {
    let f = reversal_fixture();
    assert_eq!(run(&f.score_args("bsap_h", "a.jsonl")), 0);
    assert_eq!(run(&f.score_args("bsap_h", "b.jsonl")), 0);
    assert_eq!(f.read("a.jsonl"), f.read("b.jsonl"));
}

#[test]
fn config_file_then_flags() {
    let f = reversal_fixture();
    let cfg = format!(
        r#"{{"mode": "bsap", "texts": "{}", "text_manifest": "{}", "images": "{}",
            "image_manifest": "{}", "aux": "{}", "annotations": "{}", "out": "{}"}}"#,
        f.arg("texts.emb"),
        f.arg("texts.json"),
        f.arg("images.emb"),
        f.arg("images.json"),
        f.arg("aux.emb"),
        f.arg("ann.jsonl"),
        f.arg("from_file.jsonl"),
    );
    f.write("run.json", &cfg);
    let base = ["bsap", "score", "--config", &f.arg("run.json")];
    assert_eq!(run(&strings(&base)), 0);
    assert_eq!(
        parse_results(&f.read("from_file.jsonl")).unwrap()[0].predicted_id,
        "c1"
    );

    let mut over = strings(&base);
    over.extend(strings(&["--mode", "raw", "--out", &f.arg("flag.jsonl")]));
    assert_eq!(run(&over), 0);
    let r = parse_results(&f.read("flag.jsonl")).unwrap();
    assert_eq!(r[0].predicted_id, "c0");

    f.write("typo.json", r#"{"mdoe": "raw"}"#);
    assert_eq!(
        run(&strings(&[
            "bsap",
            "score",
            "--config",
            &f.arg("typo.json")
        ])),
        1
    );
}

#[test]
fn exit_codes() {
    let f = reversal_fixture();
    // bad flag value and missing required setting are usage errors
    assert_eq!(run(&strings(&["bsap", "score", "--mode", "fancy"])), 1);
    assert_eq!(run(&strings(&["bsap", "score"])), 1);
    assert_eq!(run(&strings(&["bsap", "frobnicate"])), 1);
    assert_eq!(run(&strings(&["bsap", "--help"])), 0);
    assert_eq!(run(&strings(&["bsap", "--version"])), 0);

    let mut missing_file = f.score_args("raw", "o.jsonl");
    missing_file[5] = f.arg("nope.emb");
    assert_eq!(run(&missing_file), 1);

    // annotation refers to an id that the image manifest lacks
    f.write(
        "ann.jsonl",
        "\n{\"query_id\":\"dog\",\"gt_id\":\"c9\",\"candidates\":[{\"id\":\"c0\",\"box\":[0,0,1,1]},{\"id\":\"c9\",\"box\":[0,0,1,1]}]}\n",
    );
    assert_eq!(run(&f.score_args("raw", "o.jsonl")), 2);
    f.write("ann.jsonl", "{\"query_id\": \n");
    assert_eq!(run(&f.score_args("raw", "o.jsonl")), 2);
    f.write("images.emb", "EMB2....");
    assert_eq!(run(&f.score_args("raw", "o.jsonl")), 2);
}

#[test]
fn binary_reports_file_and_line() {
    let f = reversal_fixture();
    f.write(
        "ann.jsonl",
        "\n{\"query_id\":\"dog\",\"gt_id\":\"c9\",\"candidates\":[{\"id\":\"c0\",\"box\":[0,0,1,1]},{\"id\":\"c9\",\"box\":[0,0,1,1]}]}\n",
    );
    let args = f.score_args("raw", "o.jsonl");
    let out = Command::new(env!("CARGO_BIN_EXE_bsap"))
        .args(&args[1..])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("ann.jsonl:2:") && err.contains("c9"), "{err}");

    let out = Command::new(env!("CARGO_BIN_EXE_bsap"))
        .args(["eval", "--task", "nope"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

fn rec_annotations(n: usize) -> String {
    (0..n)
        .map(|k| {
            format!(
                concat!(
                    r#"{{"query_id":"q{}","category":"cat","gt_id":"g","candidates":["#,
                    r#"{{"id":"g","category":"cat","box":[0,0,10,10]}},"#,
                    r#"{{"id":"near","category":"cat","box":[1,0,10,10]}},"#,
                    r#"{{"id":"far","category":"dog","box":[50,50,60,60]}}]}}"#,
                    "\n"
                ),
                k
            )
        })
        .collect()
}

fn result_lines(picks: &[&str]) -> String {
    picks
        .iter()
        .enumerate()
        .map(|(k, p)| {
            format!("{{\"query_id\":\"q{k}\",\"mode\":\"raw\",\"predicted_id\":\"{p}\"}}\n")
        })
        .collect()
}

fn eval(f: &Fixture, task: &str) -> i32 {
    run(&strings(&[
        "bsap",
        "eval",
        "--task",
        task,
        "--results",
        &f.arg("res.jsonl"),
        "--annotations",
        &f.arg("ann.jsonl"),
        "--out",
        &f.arg("metrics"),
    ]))
}

#[test]
fn eval_rec_accuracy_and_diagnostics() {
    let f = Fixture::new();
    f.write("ann.jsonl", &rec_annotations(4));
    f.write("res.jsonl", &result_lines(&["g", "g", "g", "g"]));
    assert_eq!(eval(&f, "rec"), 0);
    let m: serde_json::Value = serde_json::from_str(&f.read("metrics/metrics.json")).unwrap();
    assert_eq!(m["accuracy"], 100.0);

    // "near" overlaps the target at 0.9, "far" not at all
    f.write("res.jsonl", &result_lines(&["g", "near", "g", "far"]));
    assert_eq!(eval(&f, "rec"), 0);
    let m: serde_json::Value = serde_json::from_str(&f.read("metrics/metrics.json")).unwrap();
    assert_eq!(m["accuracy"], 75.0);
    assert_eq!(m["outside_rate"], 75.0);
    assert!((m["inside_rate"].as_f64().unwrap() - 200.0 / 3.0).abs() < 1e-6);
    assert!(f
        .read("metrics/metrics.json")
        .contains("\"accuracy\": 75.000000"));
    assert_eq!(
        f.read("metrics/metrics.csv"),
        "metric,value\naccuracy,75.000000\noutside_rate,75.000000\ninside_rate,66.666667\n"
    );

    f.write("res.jsonl", &result_lines(&["g", "g", "g"]));
    assert_eq!(eval(&f, "rec"), 2);
}

#[test]
fn eval_ris_overall_vs_mean() {
    // pair 1: identical 4-pixel masks; pair 2: disjoint 6-pixel masks
    let f = Fixture::new();
    let ann = concat!(
        r#"{"query_id":"q0","gt_id":"g","candidates":[{"id":"g","mask":{"h":4,"w":4,"runs":[0,4,12]}},{"id":"x","mask":{"h":4,"w":4,"runs":[4,4,8]}}]}"#,
        "\n",
        r#"{"query_id":"q1","gt_id":"g","candidates":[{"id":"g","mask":{"h":4,"w":4,"runs":[0,6,10]}},{"id":"x","mask":{"h":4,"w":4,"runs":[6,6,4]}}]}"#,
        "\n"
    );
    f.write("ann.jsonl", ann);
    f.write("res.jsonl", &result_lines(&["g", "x"]));
    assert_eq!(eval(&f, "ris"), 0);
    let m: serde_json::Value = serde_json::from_str(&f.read("metrics/metrics.json")).unwrap();
    assert_eq!(m["oiou"], 0.25);
    assert_eq!(m["miou"], 0.5);
}

fn sweep(f: &Fixture, extra: &[&str]) -> i32 {
    let mut args = f.score_args("bsap_h", "sweep.csv");
    args[1] = "sweep-alpha".into();
    args.splice(2..4, []);
    args.extend(strings(extra));
    run(&args)
}

#[test]
fn sweep_endpoints_match_raw_and_bsap() {
    let f = reversal_fixture();
    assert_eq!(sweep(&f, &["--grid", "0,1"]), 0);
    assert_eq!(
        f.read("sweep.csv"),
        "alpha,accuracy\n0.000000,0.000000\n1.000000,100.000000\n"
    );
    assert_eq!(sweep(&f, &["--steps", "3"]), 0);
    assert_eq!(f.read("sweep.csv").lines().count(), 4);

    assert_eq!(sweep(&f, &["--steps", "0"]), 1);
    assert_eq!(sweep(&f, &["--grid", "0,1.5"]), 1);
    assert_eq!(sweep(&f, &[]), 1);
    f.write("empty.json", r#"{"grid": []}"#);
    assert_eq!(sweep(&f, &["--config", &f.arg("empty.json")]), 1);
}

#[test]
fn sweep_on_synthetic_population() {
    let f = Fixture::new();
    let args = strings(&[
        "bsap",
        "sweep-alpha",
        "--population",
        "g1",
        "--aggregator",
        "mean",
        "--steps",
        "11",
        "--out",
        &f.arg("g1.csv"),
    ]);
    assert_eq!(run(&args), 0);
    let csv = f.read("g1.csv");
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 12);
    assert_eq!(rows[0], "alpha,accuracy");
    assert_eq!(rows[1], "0.000000,10.000000");
    assert!(rows[11].starts_with("1.000000,100.0"));
    assert!(rows[6].starts_with("0.500000,"));
}

#[test]
fn simulate_writes_report_and_scatter() {
    let f = Fixture::new();
    let args = |dir: &str| {
        strings(&[
            "bsap",
            "simulate",
            "--population",
            "fig3_pair",
            "--out",
            &f.arg(dir),
        ])
    };
    assert_eq!(run(&args("a")), 0);
    assert_eq!(run(&args("b")), 0);
    let report = f.read("a/report.json");
    assert_eq!(report, f.read("b/report.json"));
    assert_eq!(f.read("a/scatter.csv"), f.read("b/scatter.csv"));
    let v: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert_eq!(v["report"]["n_sets"], 200);
    assert!(report.contains("\"offset_bias_used\": 0.120000"));
    let scatter = f.read("a/scatter.csv");
    assert!(scatter.starts_with("query_class,candidate_class,rank,raw_score\n"));
    assert_eq!(scatter.lines().count(), 1 + 2 * 2 * 100);

    let mut other = args("c");
    other.extend(strings(&["--seed", "8"]));
    assert_eq!(run(&other), 0);
    assert_ne!(f.read("c/scatter.csv"), scatter);
    assert_eq!(
        run(&strings(&[
            "bsap",
            "simulate",
            "--population",
            "nope.json",
            "--out",
            &f.arg("d")
        ])),
        1
    );
}

#[test]
fn build_prompts_catalog() {
    let f = Fixture::new();
    let out = f.arg("prompts.json");
    assert_eq!(run(&strings(&["bsap", "build-prompts", "--out", &out])), 0);
    let v: serde_json::Value = serde_json::from_str(&f.read("prompts.json")).unwrap();
    assert_eq!(v["prompts"].as_array().unwrap().len(), 180);
    assert_eq!(v["prompts"][0], "a photo of person");
    assert_eq!(v["templated_query"], true);

    assert_eq!(
        run(&strings(&[
            "bsap",
            "build-prompts",
            "--template-length",
            "2",
            "--out",
            &out
        ])),
        0
    );
    let v: serde_json::Value = serde_json::from_str(&f.read("prompts.json")).unwrap();
    assert_eq!(v["template_used"], "this is {}");
    assert_eq!(v["templated_query"], false);

    f.write("mine.txt", "red car\nblue car\n");
    let heads = format!("{},coco80", f.arg("mine.txt"));
    let args = [
        "bsap",
        "build-prompts",
        "--head-lists",
        &heads,
        "--query",
        "the man on the left",
        "--out",
        &out,
    ];
    assert_eq!(run(&strings(&args)), 0);
    let v: serde_json::Value = serde_json::from_str(&f.read("prompts.json")).unwrap();
    assert_eq!(v["prompts"].as_array().unwrap().len(), 82);
    assert_eq!(v["template_used"], "this is a photo of {}");

    assert_eq!(
        run(&strings(&[
            "bsap",
            "build-prompts",
            "--head-lists",
            "imagenet",
            "--out",
            &out
        ])),
        1
    );
}

#[test]
fn convert_validates_and_normalizes() {
    let f = Fixture::new();
    f.matrix(
        "m",
        &[vec![3.0, 4.0], vec![0.0, 2.0]],
        &["x", "y"],
        Modality::Text,
    );
    let ok = strings(&[
        "bsap",
        "convert",
        "--matrix",
        &f.arg("m.emb"),
        "--manifest",
        &f.arg("m.json"),
    ]);
    assert_eq!(run(&ok), 0);

    f.write(
        "short.json",
        r#"[{"row":0,"id":"x","kind":"text","meta":{}}]"#,
    );
    let bad = strings(&[
        "bsap",
        "convert",
        "--matrix",
        &f.arg("m.emb"),
        "--manifest",
        &f.arg("short.json"),
    ]);
    assert_eq!(run(&bad), 2);

    let norm = strings(&[
        "bsap",
        "convert",
        "--matrix",
        &f.arg("m.emb"),
        "--normalize",
        "--out",
        &f.arg("n.emb"),
    ]);
    assert_eq!(run(&norm), 0);
    let n = load_matrix(f.path("n.emb")).unwrap();
    assert_eq!(n.row(0), &[0.6, 0.8]);
    assert_eq!(n.row(1), &[0.0, 1.0]);

    f.write(
        "ann.jsonl",
        "{\"query_id\":\"a\",\"gt_id\":\"z\",\"candidates\":[{\"id\":\"b\"}]}\n",
    );
    assert_eq!(
        run(&strings(&[
            "bsap",
            "convert",
            "--annotations",
            &f.arg("ann.jsonl")
        ])),
        2
    );
    assert_eq!(run(&strings(&["bsap", "convert"])), 1);
}

#[test]
fn image_to_text_direction() {
    let f = Fixture::new();
    // image query at e0; text candidates; auxiliary image orthogonal to both texts
    f.matrix("images", &[vec![1.0, 0.0, 0.0]], &["img"], Modality::Image);
    f.matrix(
        "texts",
        &[vec![0.9, 0.1, 0.0], vec![0.1, 0.9, 0.0]],
        &["t_dog", "t_cat"],
        Modality::Text,
    );
    f.matrix("aux", &[vec![0.0, 0.0, 1.0]], &["other"], Modality::Image);
    f.write("ann.jsonl", "{\"query_id\":\"img\",\"gt_id\":\"t_dog\",\"candidates\":[{\"id\":\"t_cat\",\"box\":[0,0,1,1]},{\"id\":\"t_dog\",\"box\":[0,0,1,1]}]}\n");
    let mut args = f.score_args("bsap", "i2t.jsonl");
    args.extend(strings(&["--direction", "image-to-text"]));
    assert_eq!(run(&args), 0);
    let r = parse_results(&f.read("i2t.jsonl")).unwrap();
    assert_eq!(r[0].predicted_id, "t_dog");

    // more auxiliary rows than requested needs a seed
    f.matrix(
        "aux",
        &[vec![0.0, 0.0, 1.0], vec![0.0, 1.0, 0.0]],
        &["o1", "o2"],
        Modality::Image,
    );
    assert_eq!(run(&args), 1);
    args.extend(strings(&["--seed", "3"]));
    assert_eq!(run(&args), 0);
}
