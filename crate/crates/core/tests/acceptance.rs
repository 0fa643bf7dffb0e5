//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use common::{close, oracle_fit, random_dataset};
use hbaudit_core::config::{config_hash, LoadedConfig, ProviderChoice, StudyConfig};
use hbaudit_core::embed::{embed_corpus, HashEmbedder, SpreadCurve};
use hbaudit_core::genclient::{generate_batch, Backend, DegeneratePolicy, SimulatorConfig};
use hbaudit_core::lmm::{fit_stats, FitOptions, StatsTable};
use hbaudit_core::report::{run_in_memory, Overrides, Pipeline, Stage};
use hbaudit_core::simengine::{build_observations, group_conditions, pair_count, standardize};
use hbaudit_core::{validate_design, Dimension, Gender, Knob, Race, Setting, StudyDesign, SweepSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn secs(d: Duration) -> String {
    format!("{:.2}s", d.as_secs_f64())
}

fn pair_count_identity() -> Outcome {
    let start = Instant::now();
    let plan = validate_design(&StudyDesign::default(), &SweepSpec::new(Knob::TopP, vec![0.2])).unwrap();
    let backend = Backend::Simulated { config: SimulatorConfig::default(), seed: Some(1) };
    let mut records = Vec::with_capacity(plan.len());
    generate_batch(&plan, &backend, &DegeneratePolicy::default(), &HashSet::new(), |r| {
        records.push(r);
        Ok(())
    })
    .unwrap();
    let ok: Vec<_> = records.iter().filter(|r| r.is_ok()).collect();
    let set = embed_corpus(&ok, &HashEmbedder::new(64, 7), 64).unwrap();
    let blocks = group_conditions(&set, &plan.stimuli).unwrap();
    let per_condition: Vec<usize> = blocks.iter().map(|b| b.len()).collect();
    let n = build_observations(&blocks).unwrap().len() as u64;
    let elapsed = start.elapsed();
    let pass = n == 1_123_500 && n == pair_count(750, 4) && per_condition == [750; 4] && elapsed < Duration::from_secs(60);
    outcome(pass, format!("{n} observations from 4 conditions of {per_condition:?} stories in {}", secs(elapsed)))
}

fn oracle_equivalence() -> Outcome {
    let datasets: Vec<_> = (0..50).map(|s| random_dataset(1000 + s)).collect();
    let start = Instant::now();
    let fits: Vec<_> = datasets.iter().map(|d| fit_stats(&mut d.table(), &FitOptions::default()).unwrap()).collect();
    let elapsed = start.elapsed();
    let mut worst = 0.0f64;
    let mut bad = 0;
    for (d, fit) in datasets.iter().zip(&fits) {
        let o = oracle_fit(d);
        let scale = o.sigma2_e.max(1e-12);
        let beta_scale = o.beta.iter().fold(1.0f64, |m, b| m.max(b.abs()));
        let mut ok = close(fit.theta, o.theta, 1e-6, 1e-3)
            && close(fit.sigma2_e, o.sigma2_e, 1e-6, 0.0)
            && close(fit.sigma2_b, o.sigma2_b, 1e-6, 1e-3 * scale)
            && close(fit.reml_loglik, o.loglik, 1e-6, 0.0);
        for (a, b) in fit.beta.iter().zip(&o.beta) {
            ok &= close(*a, *b, 1e-6, 1e-3 * beta_scale);
        }
        worst = worst.max((fit.reml_loglik - o.loglik).abs() / o.loglik.abs());
        bad += usize::from(!ok);
    }
    let pass = bad == 0 && elapsed < Duration::from_secs(10);
    outcome(pass, format!("{bad}/50 mismatches, worst loglik rel err {worst:.1e}, fits took {}", secs(elapsed)))
}

fn balanced_anova() -> Outcome {
    let mut layouts: Vec<Vec<Vec<f64>>> = vec![vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    while layouts.len() < 20 {
        let k = rng.random_range(2..10);
        let n = rng.random_range(2..8);
        let layout: Vec<Vec<f64>> = (0..k)
            .map(|_| {
                let b = rng.random_range(-3.0..3.0);
                (0..n).map(|_| b + rng.random_range(-1.0..1.0)).collect()
            })
            .collect();
        layouts.push(layout);
    }
    let mut worst = 0.0f64;
    let mut used = 0;
    let mut first = (0.0, 0.0);
    for (i, layout) in layouts.iter().enumerate() {
        let (k, n) = (layout.len() as f64, layout[0].len() as f64);
        let grand = layout.iter().flatten().sum::<f64>() / (k * n);
        let means: Vec<f64> = layout.iter().map(|c| c.iter().sum::<f64>() / n).collect();
        let msa = n * means.iter().map(|m| (m - grand).powi(2)).sum::<f64>() / (k - 1.0);
        let mse = layout.iter().zip(&means).map(|(c, m)| c.iter().map(|y| (y - m).powi(2)).sum::<f64>()).sum::<f64>() / (k * (n - 1.0));
        if msa <= mse {
            continue;
        }
        used += 1;
        let mut t = StatsTable::<f64, usize>::with_columns(1);
        for (j, c) in layout.iter().enumerate() {
            for y in c {
                t.push(&j, &[1.0], *y).unwrap();
            }
        }
        let fit = fit_stats(&mut t, &FitOptions::default()).unwrap();
        let sb = (msa - mse) / n;
        if i == 0 {
            first = (fit.sigma2_e, fit.sigma2_b);
        }
        worst = worst.max(((fit.sigma2_e - mse) / mse).abs()).max(((fit.sigma2_b - sb) / sb).abs());
    }
    let textbook = (first.0 - 0.5).abs() < 1e-8 && (first.1 - 3.75).abs() < 1e-8;
    outcome(
        worst < 1e-8 && textbook,
        format!("{used} layouts, worst rel err {worst:.1e}; textbook case gives {:.10} and {:.10}", first.0, first.1),
    )
}

fn gaussian_study(seed: u64, knob: Knob, spread: Vec<SpreadCurve>) -> StudyConfig {
    let mut c = StudyConfig::default();
    c.design.sets_per_gender = 3;
    c.design.stories_per_stimulus = 10;
    c.sweep.knob = knob;
    c.generation.seed = seed;
    c.embed.provider = ProviderChoice::Gaussian;
    c.embed.dim = 32;
    c.embed.gaussian.spread = spread;
    c
}

fn by_race(black: impl Fn(Gender) -> SpreadCurve, white: f64) -> Vec<SpreadCurve> {
    Gender::ALL
        .into_iter()
        .flat_map(|g| [black(g), SpreadCurve::constant(Race::White, g, white)])
        .collect()
}

fn sign_recovery() -> Outcome {
    let runs = 100;
    let planted = by_race(|g| SpreadCurve::constant(Race::Black, g, 0.20), 0.25);
    let reversed = by_race(|g| SpreadCurve { race: Race::Black, gender: g, knob: None, points: vec![(1.5, 0.20), (2.0, 0.30)] }, 0.25);
    let top = Setting::new(2.0);
    let mut recovered = 0;
    let mut flipped = 0;
    let mut lower_ok = 0;
    for seed in 0..runs {
        let r = run_in_memory(&gaussian_study(seed, Knob::Temperature, planted.clone())).unwrap().result;
        let all = r.settings(Knob::Temperature).iter().all(|&s| {
            let (b, _, p) = r.per_setting_fit(Knob::Temperature, s, Dimension::Race).unwrap().coefficient("Race").unwrap();
            b > 0.0 && p < 1e-3
        });
        recovered += usize::from(all);

        let r = run_in_memory(&gaussian_study(seed, Knob::Temperature, reversed.clone())).unwrap().result;
        let (b, _, _) = r.per_setting_fit(Knob::Temperature, top, Dimension::Race).unwrap().coefficient("Race").unwrap();
        flipped += usize::from(b < 0.0);
        let below = r.settings(Knob::Temperature).iter().filter(|&&s| s < top).all(|&s| {
            r.per_setting_fit(Knob::Temperature, s, Dimension::Race).unwrap().coefficient("Race").unwrap().0 > 0.0
        });
        lower_ok += usize::from(below);
    }
    let pass = recovered >= 95 && flipped >= 95 && lower_ok >= 95;
    outcome(
        pass,
        format!(
            "positive at every setting in {recovered}/{runs} runs; reversed plant flips the top setting in {flipped}/{runs}, lower settings stay positive in {lower_ok}/{runs}"
        ),
    )
}

fn interaction_recovery() -> Outcome {
    let runs = 100;
    let shrinking = by_race(|g| SpreadCurve { race: Race::Black, gender: g, knob: None, points: vec![(0.2, 0.15), (1.0, 0.25)] }, 0.25);
    let mut right = 0;
    for seed in 0..runs {
        let r = run_in_memory(&gaussian_study(500 + seed, Knob::TopP, shrinking.clone())).unwrap().result;
        let fit = &r.pooled_fit(Knob::TopP, Dimension::Race).unwrap();
        let (main, _, pm) = fit.coefficient("Race").unwrap();
        let (b, _, p) = fit.coefficient("Race:Knob").unwrap();
        right += usize::from(b < 0.0 && p < 1e-3 && main > 0.0 && pm < 1e-3);
    }
    outcome(right >= 95, format!("negative interaction with p < .001 in {right}/{runs} runs"))
}

fn standardization_invariants() -> Outcome {
    let mut c = StudyConfig::default();
    c.design.sets_per_gender = 4;
    c.design.stories_per_stimulus = 10;
    c.embed.provider = ProviderChoice::Hash;
    let mut obs = run_in_memory(&c).unwrap().observations;
    let mut strata: BTreeMap<Setting, Vec<f64>> = BTreeMap::new();
    for o in &obs {
        strata.entry(o.setting).or_default().push(o.cosine_std);
    }
    let mut worst_mean = 0.0f64;
    let mut worst_sd = 0.0f64;
    for xs in strata.values() {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let sd = (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        worst_mean = worst_mean.max(m.abs());
        worst_sd = worst_sd.max((sd - 1.0).abs());
    }
    let before: Vec<f64> = obs.iter().map(|o| o.cosine_std).collect();
    for o in &mut obs {
        o.cosine_raw = 3.7 * o.cosine_raw - 1.25;
    }
    standardize(&mut obs).unwrap();
    let drift = obs.iter().zip(&before).map(|(o, b)| (o.cosine_std - b).abs()).fold(0.0, f64::max);
    outcome(
        worst_mean < 1e-10 && worst_sd < 1e-10 && drift < 1e-10,
        format!("{} strata: max |mean| {worst_mean:.1e}, max |sd-1| {worst_sd:.1e}, affine drift {drift:.1e}", strata.len()),
    )
}

fn files_under(dir: &Path, prefix: &str, out: &mut Vec<String>) {
    for e in fs::read_dir(dir).unwrap() {
        let e = e.unwrap();
        let name = format!("{prefix}{}", e.file_name().to_string_lossy());
        if e.file_type().unwrap().is_dir() {
            files_under(&e.path(), &format!("{name}/"), out);
        } else if name != "manifest.json" {
            out.push(name);
        }
    }
}

const DETERMINISM: &str = "[design]\nsets_per_gender = 4\nstories_per_stimulus = 10\n[generation]\nseed = 99\n";

fn pipeline(text: &str, out: &Path) -> Pipeline {
    let config = StudyConfig::from_toml_str(text).unwrap();
    Pipeline::new(LoadedConfig { config, hash: config_hash(text.as_bytes()) }, out, &Overrides::default())
}

fn determinism() -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(DETERMINISM, a.path()).run(&Stage::ALL).unwrap();
    pipeline(DETERMINISM, b.path()).run(&Stage::ALL).unwrap();
    let (mut fa, mut fb) = (Vec::new(), Vec::new());
    files_under(a.path(), "", &mut fa);
    files_under(b.path(), "", &mut fb);
    fa.sort();
    fb.sort();
    let differing: Vec<&String> = fa.iter().filter(|f| fs::read(a.path().join(f)).ok() != fs::read(b.path().join(f)).ok()).collect();
    let has_core = ["corpus.jsonl", "observations.csv", "tables/tables.md"].iter().all(|f| fa.iter().any(|x| x == f));
    outcome(
        fa == fb && differing.is_empty() && has_core,
        format!("{} artifacts compared, {} differ", fa.len(), differing.len()),
    )
}

fn peak_rss_kib() -> Option<u64> {
    let status = fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    line.split_whitespace().nth(1)?.parse().ok()
}

fn scale() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let m = pipeline("", dir.path()).run(&Stage::ALL).unwrap();
    let elapsed = start.elapsed();
    let stories = m.stages[&Stage::Generate].counts["ok"];
    let rows = m.stages[&Stage::Observe].counts["rows"];
    let fits = m.stages[&Stage::Fit].counts.get("fits").copied().unwrap_or(0);
    let peak = peak_rss_kib();
    let mem_ok = peak.is_some_and(|k| k < 2 * 1024 * 1024);
    outcome(
        stories == 15_000 && rows == 5 * 1_123_500 && fits == 12 && elapsed < Duration::from_secs(300) && mem_ok,
        format!(
            "{stories} stories, {rows} pairs, {fits} fits in {}, peak RSS {}",
            secs(elapsed),
            peak.map_or("unknown".into(), |k| format!("{} MiB", k / 1024))
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("scale", scale),
        ("pair count identity", pair_count_identity),
        ("oracle equivalence", oracle_equivalence),
        ("balanced ANOVA", balanced_anova),
        ("sign recovery", sign_recovery),
        ("interaction recovery", interaction_recovery),
        ("standardization invariants", standardization_invariants),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let o = check();
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
