//! Acceptance criteria. Runs without the libtest harness so each
//! criterion prints one PASS/FAIL line with its runtime budget.

mod common;

use std::collections::VecDeque;
use std::f64::consts::PI;
use std::panic::{self, AssertUnwindSafe};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use duet::config::{BackendSpec, Config, RESPONDER, REVIEWER};
use duet::report::{read_jsonl, RoundRow, RunDir, ROUNDS, SUMMARY_CSV, SUMMARY_MD};
use duet::runner::{execute_exp1, load_fixture, run_exp2, Exp1Mode, Exp1Request, Exp2Source};
use duet_core::exp1::{format_round_line, parse_round_line, ScoreVerdict};
use duet_core::exp2::{improved, summarize_exp2, CritiqueLoopRecord};
use duet_core::particles::{
    calibrate, count_particles, label_components, otsu_threshold, CalibrationSource, Connectivity, GrayImage, Mask,
    ParticleOptions, Rect,
};
use duet_core::prompt::{build_refine_prompt, build_reviewer_prompt, build_system_prompt};
use duet_core::{
    detect_verdict, run_debate, DebateConfig, DebateStatus, FinalObjective, PromptTemplateSet, ScriptedBackend,
    SystemPromptFlags, VerdictValue,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const AGREE: &str = "[Objective: martensite] I agree with the analysis.";
const DISAGREE: &str = "[Objective: martensite] I do not agree, region b is smaller.";
const AMBIGUOUS: &str = "[Objective: martensite] Region b may be relevant.";

fn pair(verdicts: &[&str], refinements: usize) -> (ScriptedBackend, ScriptedBackend) {
    let reviewer = ScriptedBackend::from_responses(verdicts.iter().copied());
    let responder = ScriptedBackend::from_responses((1..=refinements).map(|n| format!("R{n}")));
    (responder, reviewer)
}

fn debate_termination_and_cap() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let templates = PromptTemplateSet::default();
    let config = DebateConfig::default();
    let mut all_disagree_seen = 0;
    for _ in 0..1000 {
        let verdicts: Vec<&str> = (0..5).map(|_| [AGREE, DISAGREE, DISAGREE, AMBIGUOUS][rng.gen_range(0..4)]).collect();
        let (mut responder, mut reviewer) = pair(&verdicts, 5);
        let out = run_debate("R0", &mut responder, &mut reviewer, &templates, &config).unwrap();
        assert!(out.cycles_used <= 5);
        let total = 1 + responder.calls() + reviewer.calls();
        assert!(total <= 11, "{total} calls");
        if verdicts.iter().all(|v| *v != AGREE) {
            all_disagree_seen += 1;
            assert_eq!(out.status, DebateStatus::FallbackAfterMaxCycles);
            assert_eq!(out.final_text, "R5");
            assert_eq!(total, 11);
        } else {
            assert_eq!(out.status, DebateStatus::Agreed);
        }
    }
    assert!(all_disagree_seen > 50, "only {all_disagree_seen} all-disagree scripts");
}

fn short_circuit_exactness() {
    for k in 1..=5usize {
        let mut verdicts = vec![DISAGREE; k - 1];
        verdicts.push(AGREE);
        let (mut responder, mut reviewer) = pair(&verdicts, 5);
        let out =
            run_debate("R0", &mut responder, &mut reviewer, &PromptTemplateSet::default(), &DebateConfig::default())
                .unwrap();
        assert_eq!(reviewer.calls(), k);
        assert_eq!(responder.calls(), k - 1);
        assert_eq!(out.cycles_used as usize, k);
        assert_eq!(out.status, DebateStatus::Agreed);
    }
}

fn critique_counts_reproduce() {
    // Improved? column as recorded, rows 1 to 10
    let printed = [false, true, true, true, true, true, true, true, true, false];
    let rows = load_fixture(&common::fixture("critique_counts.json")).unwrap();
    assert_eq!(rows.len(), 10);
    let records: Vec<CritiqueLoopRecord> = rows
        .iter()
        .map(|r| {
            CritiqueLoopRecord::new(
                &r.image_id,
                r.first_answer.unwrap(),
                "",
                r.revised_answer.unwrap(),
                r.correct_answer,
            )
        })
        .collect();
    for (r, want) in records.iter().zip(printed) {
        assert_eq!(improved(r.first_answer, r.revised_answer, r.correct_answer), want, "image {}", r.image_id);
    }
    let summary = summarize_exp2(&records).unwrap();
    assert_eq!(summary.improved_count, 8);
    assert_eq!(summary.improvement_rate, 0.80);
    let replayed =
        run_exp2(&Config::default(), &Exp2Source::Fixture(common::fixture("critique_counts.json")), None).unwrap();
    assert_eq!(replayed.summary, summary);
}

fn teamwork_config(corpus: &common::Corpus, jobs: usize) -> Config {
    let mut config = Config { jobs, ..Config::default() };
    config.backends.insert(RESPONDER.into(), BackendSpec::scripted(&corpus.responder));
    config.backends.insert(REVIEWER.into(), BackendSpec::scripted(&corpus.reviewer));
    config
}

fn exp1_pipeline_parity() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = common::write_exp1_corpus(&tmp.path().join("corpus"), 20, 12, 7);
    let config = teamwork_config(&corpus, 4);
    let req =
        Exp1Request { task: corpus.tasks.clone(), truth: corpus.truth.clone(), rounds: None, mode: Exp1Mode::Teamwork };
    let dir = RunDir::create(tmp.path().join("run")).unwrap();
    let out = execute_exp1(&config, &req, &dir, "parity").unwrap();
    assert_eq!(out.rows.len(), 20);
    for (row, plan) in out.rows.iter().zip(&corpus.plans) {
        assert_eq!(row.record.round_id, plan.id);
        assert_eq!(row.record.final_roi, Some(plan.roi));
        assert_eq!(row.record.last_photo_name, plan.image);
        assert_eq!(row.record.function_call_count, plan.analyses.len());
        let want = if plan.correct { ScoreVerdict::Correct } else { ScoreVerdict::Incorrect };
        assert_eq!(row.score, want);
        let expected =
            format!("{} * Number of function calls: {} * ROI Identified: {}.", plan.id, plan.analyses.len(), plan.roi);
        assert_eq!(row.line, expected);
        assert_eq!(format_round_line(&row.record), expected);
        let parsed = parse_round_line(&row.line).unwrap();
        assert_eq!(parsed.to_string(), row.line);
        assert_eq!((parsed.function_calls, parsed.roi), (plan.analyses.len(), Some(plan.roi)));
        for (debate, analysis) in row.record.debates.iter().zip(&plan.analyses) {
            match analysis {
                Some(k) => assert_eq!((debate.status, debate.cycles_used), (DebateStatus::Agreed, *k)),
                None => assert_eq!(debate.status, DebateStatus::FallbackAfterMaxCycles),
            }
        }
    }
    let md = std::fs::read_to_string(dir.path(SUMMARY_MD)).unwrap();
    assert!(md.contains("Accuracy: 60.0% (12 correct, 8 incorrect, 0 unscorable)"), "{md}");
    let back: Vec<RoundRow> = read_jsonl(&dir.path(ROUNDS)).unwrap();
    assert_eq!(back, out.rows);
}

fn bfs_labels(mask: &Mask, eight: bool) -> Vec<u32> {
    let (w, h) = (mask.width as i64, mask.height as i64);
    let mut labels = vec![0u32; mask.bits.len()];
    let mut next = 0;
    for start in 0..mask.bits.len() {
        if !mask.bits[start] || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        let mut queue = VecDeque::from([start]);
        while let Some(i) = queue.pop_front() {
            let (x, y) = (i as i64 % w, i as i64 / w);
            for dy in -1..=1i64 {
                for dx in -1..=1i64 {
                    if (dx == 0 && dy == 0) || (!eight && dx != 0 && dy != 0) {
                        continue;
                    }
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w || ny >= h {
                        continue;
                    }
                    let j = (ny * w + nx) as usize;
                    if mask.bits[j] && labels[j] == 0 {
                        labels[j] = next;
                        queue.push_back(j);
                    }
                }
            }
        }
    }
    labels
}

fn components_match_flood_fill() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..100 {
        let density = 0.1 + 0.8 * case as f64 / 99.0;
        let bits = (0..64 * 64).map(|_| rng.gen_bool(density)).collect();
        let mask = Mask::new(64, 64, bits);
        for (conn, eight) in [(Connectivity::Four, false), (Connectivity::Eight, true)] {
            let labeling = label_components(&mask, conn);
            assert_eq!(labeling.labels, bfs_labels(&mask, eight), "case {case} {conn:?}");
        }
    }
}

/// Exhaustive between-class variance search, `n0*n1*(mu0-mu1)^2`, over
/// thresholds from the lowest occupied level, compared as exact
/// fractions; the first maximum wins.
fn otsu_exhaustive(hist: &[u64; 256]) -> u8 {
    let lowest = hist.iter().position(|&h| h > 0).unwrap();
    let mut best = (lowest, 0i128, 1i128);
    for t in lowest..256 {
        let (mut n0, mut s0, mut n1, mut s1) = (0i128, 0i128, 0i128, 0i128);
        for (v, &c) in hist.iter().enumerate() {
            if v <= t {
                n0 += c as i128;
                s0 += v as i128 * c as i128;
            } else {
                n1 += c as i128;
                s1 += v as i128 * c as i128;
            }
        }
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let d = s0 * n1 - s1 * n0;
        let (num, den) = (d * d, n0 * n1);
        if num * best.2 > best.1 * den {
            best = (t, num, den);
        }
    }
    best.0 as u8
}

fn otsu_matches_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for case in 0..1000 {
        let mut hist = [0u64; 256];
        match case % 4 {
            0 => hist.iter_mut().for_each(|h| *h = rng.gen_range(0..1000)),
            1 => hist.iter_mut().for_each(|h| *h = if rng.gen_bool(0.05) { rng.gen_range(1..1000) } else { 0 }),
            2 => {
                for _ in 0..rng.gen_range(1..=3) {
                    hist[rng.gen_range(0..256)] = rng.gen_range(1..5);
                }
            }
            _ => {
                let (a, b) = (rng.gen_range(0..128), rng.gen_range(128..256));
                hist[a] = rng.gen_range(1..1000);
                hist[b] = hist[a];
            }
        }
        if hist.iter().all(|&h| h == 0) {
            hist[rng.gen_range(0..256)] = 1;
        }
        assert_eq!(otsu_threshold(&hist).unwrap(), otsu_exhaustive(&hist), "case {case}: {hist:?}");
    }
}

fn paint_disk(img: &mut GrayImage, cx: i64, cy: i64, r: i64) -> u64 {
    let mut n = 0;
    for y in 0..img.height() as i64 {
        for x in 0..img.width() as i64 {
            if (x - cx).pow(2) + (y - cy).pow(2) <= r * r {
                img.set(x as u32, y as u32, 230);
                n += 1;
            }
        }
    }
    n
}

fn synthetic_particle_counts() {
    const UM_PER_PX: f64 = 0.5;
    let bar = Rect::new(0, 180, 80, 20);
    let cal = calibrate(CalibrationSource::Bar { physical_length_um: 300.0, pixel_length: 600, exclusion_region: bar })
        .unwrap();
    assert_eq!(cal.microns_per_pixel, UM_PER_PX);
    let opts = ParticleOptions::default();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        // one disk per 40x40 cell keeps disks apart and off the borders
        let mut img = GrayImage::filled(240, 200, 20).unwrap();
        let mut expected = 0;
        for cell in 0..24 {
            let (col, row) = (cell % 6, cell / 6);
            if row == 4 || !rng.gen_bool(0.6) {
                continue;
            }
            let r = [2i64, 8, 10][rng.gen_range(0..3)];
            let n = paint_disk(&mut img, col * 40 + 20, row * 40 + 20, r);
            if r >= 10 {
                let exact = PI * (r * r) as f64;
                assert!((n as f64 - exact).abs() / exact < 0.05);
            }
            if PI * (r as f64 * UM_PER_PX).powi(2) > opts.min_area_um2 {
                expected += 1;
            }
        }
        let base = count_particles(&img, &cal, &opts).unwrap().count;
        assert_eq!(base, expected);

        let mut bottom = img.clone();
        paint_disk(&mut bottom, 200, 176, 10);
        assert_eq!(count_particles(&bottom, &cal, &opts).unwrap().count, base);

        let mut barred = img.clone();
        for y in 185..195 {
            for x in 5..75 {
                barred.set(x, y, 255);
            }
        }
        assert_eq!(count_particles(&barred, &cal, &opts).unwrap().count, base);
    }
}

fn verdict_table() {
    use VerdictValue::{Agree as A, Ambiguous as N, Disagree as D};
    let mut cases: Vec<(String, VerdictValue)> = Vec::new();
    let agree = ["I agree", "i agree", "I AGREE", "I Agree", "i AgReE"];
    let disagree = ["I do not agree", "i do not agree", "I DO NOT AGREE", "I Do Not Agree", "i dO nOt AgReE"];
    for (a, d) in agree.iter().zip(disagree) {
        cases.push((format!("{a} with the analysis."), A));
        cases.push((format!("[Objective: martensite at HFW 80 microns] {a}."), A));
        cases.push((format!("Region c shows needles, so {a} with the conclusion."), A));
        cases.push((format!("Needles are visible in region c. {a}"), A));
        cases.push((format!("{d}. Region b is smaller."), D));
        cases.push((format!("[Objective: martensite] {d}, the label is wrong."), D));
        cases.push((format!("Having checked the scale bar, {d}."), D));
        cases.push((format!("[Final objective] {d}. Although I agree the HFW is right."), D));
        cases.push((format!("I agree the HFW is right, but {d} with the label."), D));
    }
    for text in [
        "",
        "[Objective: martensite] The analysis looks plausible.",
        "Region b may be the largest.",
        "I disagree with the label.",
        "I would agree if region c were larger.",
    ] {
        cases.push((text.into(), N));
    }
    assert_eq!(cases.len(), 50);
    let wrong: Vec<_> = cases.iter().filter(|(t, want)| detect_verdict(t).value != *want).collect();
    assert!(wrong.is_empty(), "misclassified: {wrong:?}");
}

fn prompt_fidelity() {
    let templates = PromptTemplateSet::default();
    let reviewer = build_reviewer_prompt(&templates, "Region c shows needles").unwrap();
    assert!(reviewer.contains("provide your critique or agreement: Region c shows needles"));
    assert!(reviewer.contains("If you agree, please explicitly state 'I agree'"));
    assert!(reviewer.contains("In brackets, state the final objective at the start of your response."));
    let refine = build_refine_prompt(&templates, "Region b is larger").unwrap();
    assert!(refine.starts_with("ChatGPT has provided the following critique: Region b is larger."));
    let objective = FinalObjective::default();
    let system = build_system_prompt(&templates, &SystemPromptFlags::default(), &objective).unwrap();
    assert!(system.contains("exactly one time at the end"));
    assert!(system.contains("The final largest ROI is a"));
    assert!(system.contains("reach an agreement as soon as possible"));
    assert!(system.contains("Label can be found in the final image generated."));
    assert!(system.trim_end().ends_with(&objective.text));
    assert!(system.trim_end().lines().last().unwrap().contains(&objective.text));
    assert!(system.rfind(&objective.text).unwrap() > system.rfind("exactly one time at the end").unwrap());
}

fn exp1_cli_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = common::write_exp1_corpus(&tmp.path().join("corpus"), 20, 12, 11);
    let run = |name: &str| {
        let out = tmp.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_duet"))
            .args(["exp1", "run", "--mode", "teamwork", "--jobs", "4"])
            .arg("--task")
            .arg(&corpus.tasks)
            .arg("--truth")
            .arg(&corpus.truth)
            .arg("--responder")
            .arg(&corpus.responder)
            .arg("--reviewer")
            .arg(&corpus.reviewer)
            .arg("--out")
            .arg(&out)
            .output()
            .unwrap();
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
        let read = |f: &str| std::fs::read(out.join(f)).unwrap();
        (read(ROUNDS), read(SUMMARY_CSV))
    };
    let (a, b) = (run("first"), run("second"));
    assert!(!a.0.is_empty() && !a.1.is_empty());
    assert_eq!(a.0, b.0, "rounds.jsonl differs");
    assert_eq!(a.1, b.1, "summary.csv differs");
}

type Criterion = (u32, &'static str, u64, fn());

const CRITERIA: [Criterion; 10] = [
    (1, "debate termination and cap", 5, debate_termination_and_cap),
    (2, "short-circuit exactness", 1, short_circuit_exactness),
    (3, "recorded critique-loop counts", 1, critique_counts_reproduce),
    (4, "Exp-I pipeline parity", 5, exp1_pipeline_parity),
    (5, "union-find equals flood fill", 10, components_match_flood_fill),
    (6, "Otsu equals exhaustive search", 5, otsu_matches_exhaustive_search),
    (7, "synthetic particle counts", 5, synthetic_particle_counts),
    (8, "verdict detection table", 1, verdict_table),
    (9, "prompt fidelity", 1, prompt_fidelity),
    (10, "Exp-I determinism", 10, exp1_cli_determinism),
];

fn main() -> ExitCode {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (id, name, budget, check) in CRITERIA {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(check));
        let took = start.elapsed();
        let over = took > Duration::from_secs(budget);
        let verdict = match (&result, over) {
            (Ok(()), false) => "PASS",
            _ => "FAIL",
        };
        let detail = match result {
            Err(e) => e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default(),
            Ok(()) if over => format!("exceeded {budget} s budget"),
            Ok(()) => String::new(),
        };
        println!("{verdict} criterion {id:>2}: {name} ({:.3} s, budget {budget} s) {detail}", took.as_secs_f64());
        failed += usize::from(verdict == "FAIL");
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
