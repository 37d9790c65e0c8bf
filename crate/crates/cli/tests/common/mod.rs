#![allow(dead_code)]

use std::fs;
use std::path::PathBuf;

use bsap_core::embstore::{save_manifest, save_matrix, EmbeddingMatrix, Manifest, Modality};
use tempfile::TempDir;

pub struct Fixture {
    pub dir: TempDir,
}

impl Fixture {
    pub fn new() -> Self {
        Self {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    pub fn arg(&self, name: &str) -> String {
        self.path(name).display().to_string()
    }

    pub fn matrix(&self, name: &str, rows: &[Vec<f32>], ids: &[&str], kind: Modality) {
        let m = EmbeddingMatrix::from_rows(rows).unwrap();
        save_matrix(&m, self.path(&format!("{name}.emb"))).unwrap();
        let man = Manifest::from_ids(ids.iter().map(|s| s.to_string()), kind).unwrap();
        save_manifest(&man, self.path(&format!("{name}.json"))).unwrap();
    }

    pub fn write(&self, name: &str, text: &str) -> PathBuf {
        let p = self.path(name);
        fs::write(&p, text).unwrap();
        p
    }

    pub fn read(&self, name: &str) -> String {
        fs::read_to_string(self.path(name)).unwrap()
    }

    /// Standard score arguments for the `texts`/`images`/`aux` matrices.
    pub fn score_args(&self, mode: &str, out: &str) -> Vec<String> {
        let mut v = vec![
            "bsap".to_string(),
            "score".into(),
            "--mode".into(),
            mode.into(),
        ];
        for (flag, file) in [
            ("--texts", "texts.emb"),
            ("--text-manifest", "texts.json"),
            ("--images", "images.emb"),
            ("--image-manifest", "images.json"),
            ("--annotations", "ann.jsonl"),
            ("--out", out),
        ] {
            v.push(flag.into());
            v.push(self.arg(file));
        }
        if mode != "raw" {
            v.push("--aux".into());
            v.push(self.arg("aux.emb"));
        }
        v
    }
}

pub fn run(args: &[String]) -> i32 {
    bsap_cli::run(args.iter().map(String::as_str))
}

/// Query e1, candidate 0 at cosine 0.60 and candidate 1 at 0.55 with the
/// query; one auxiliary prompt at cosine 0.30 with candidate 0 and 0 with
/// candidate 1.
pub fn reversal_vectors() -> (Vec<f32>, [Vec<f32>; 2], Vec<f32>) {
    let a2 = 0.375f64;
    let a3 = (1.0 - a2 * a2).sqrt();
    let k = (1.0f64 - 0.55 * 0.55).sqrt();
    (
        vec![1.0, 0.0, 0.0],
        [
            vec![0.6, 0.8, 0.0],
            vec![0.55, (k * a3) as f32, (-k * a2) as f32],
        ],
        vec![0.0, a2 as f32, a3 as f32],
    )
}

pub fn reversal_fixture() -> Fixture {
    let f = Fixture::new();
    let (q, imgs, aux) = reversal_vectors();
    f.matrix("texts", &[q], &["dog"], Modality::Text);
    f.matrix("images", &imgs, &["c0", "c1"], Modality::Image);
    f.matrix("aux", &[aux], &["a photo of person"], Modality::Text);
    f.write(
        "ann.jsonl",
        concat!(
            r#"{"query_id":"dog","query_text":"a dog","category":"dog","gt_id":"c1","candidates":["#,
            r#"{"id":"c0","category":"person","box":[0,0,10,10]},"#,
            r#"{"id":"c1","category":"dog","box":[20,20,30,30]}]}"#,
            "\n"
        ),
    );
    f
}
