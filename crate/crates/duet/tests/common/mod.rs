//! Deterministic scripted corpora shared by the integration tests.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

pub const MAX_CYCLES: u32 = 5;

/// What one generated round is expected to produce.
#[derive(Debug, Clone)]
pub struct RoundPlan {
    pub id: String,
    pub image: String,
    /// Per analysis: `Some(k)` agrees at cycle `k`, `None` never agrees.
    pub analyses: Vec<Option<u32>>,
    pub roi: char,
    pub correct: bool,
}

pub struct Corpus {
    pub tasks: PathBuf,
    pub responder: PathBuf,
    pub reviewer: PathBuf,
    pub truth: PathBuf,
    pub plans: Vec<RoundPlan>,
}

fn write_lines(path: &Path, lines: &[serde_json::Value]) {
    let text: String = lines.iter().map(|l| format!("{l}\n")).collect();
    fs::write(path, text).unwrap();
}

/// Writes `rounds` task scripts with per-round responder and reviewer
/// scripts. The first `correct` rounds end on an acceptable label, the
/// rest on a wrong one.
pub fn write_exp1_corpus(root: &Path, rounds: usize, correct: usize, seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dirs = ["tasks", "responder", "reviewer"].map(|d| {
        let p = root.join(d);
        fs::create_dir_all(&p).unwrap();
        p
    });
    let mut truth: BTreeMap<String, Vec<char>> = BTreeMap::new();
    let mut plans = Vec::new();
    for i in 0..rounds {
        let id = format!("round-{:02}", i + 1);
        let captures = rng.gen_range(1..=2);
        let image = format!("{id}-img{captures}");
        let accepted: Vec<char> = if rng.gen_bool(0.5) { vec!['c'] } else { vec!['c', 'f'] };
        let roi = if i < correct { *accepted.choose(&mut rng).unwrap() } else { ['a', 'b', 'd'][i % 3] };
        truth.insert(image.clone(), accepted);
        let analyses: Vec<Option<u32>> = (0..rng.gen_range(1..=3))
            .map(|_| if rng.gen_bool(0.2) { None } else { Some(rng.gen_range(1..=MAX_CYCLES)) })
            .collect();

        let mut driver = Vec::new();
        for c in 1..=captures {
            driver.push(json!({
                "response": "Capturing the sample at HFW 80 microns.",
                "tool_calls": [{"name": "take_image", "args": {"name": format!("{id}-img{c}")}}]
            }));
        }
        let mut responder = Vec::new();
        let mut reviewer = Vec::new();
        for (j, plan) in analyses.iter().enumerate() {
            driver.push(json!({
                "response": "Checking the capture for martensite.",
                "tool_calls": [{"name": "image_analysis", "args": {"description": "Locate needle-like martensite."}}]
            }));
            responder.push(json!({"response": format!("Analysis {j}: region {roi} shows needle structures.")}));
            let disagreements = plan.map_or(MAX_CYCLES, |k| k - 1);
            for n in 1..=disagreements {
                reviewer
                    .push(json!({"response": format!("[Objective: martensite] I do not agree, check region {n}.")}));
                responder.push(json!({"response": format!("Refinement {n} of analysis {j}: region {roi}.")}));
            }
            if plan.is_some() {
                reviewer.push(json!({"response": "[Objective: martensite] I agree with this analysis."}));
            }
        }
        driver.push(json!({
            "response": format!("Summary of the round. The final largest ROI is {roi}."),
            "tool_calls": [{"name": "list-summarize", "args": {}}]
        }));
        write_lines(&dirs[0].join(format!("{id}.jsonl")), &driver);
        write_lines(&dirs[1].join(format!("{id}.jsonl")), &responder);
        write_lines(&dirs[2].join(format!("{id}.jsonl")), &reviewer);
        plans.push(RoundPlan { id, image, analyses, roi, correct: i < correct });
    }
    let truth_path = root.join("truth.json");
    fs::write(&truth_path, serde_json::to_string_pretty(&truth).unwrap()).unwrap();
    let [tasks, responder, reviewer] = dirs;
    Corpus { tasks, responder, reviewer, truth: truth_path, plans }
}

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}
