//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero when any fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use prodcat::catalog::{split, LabeledExample, Product, Taxonomy};
use prodcat::config::RunConfig;
use prodcat::models::{
    train_hierarchical, Classifier, HierarchicalConfig, LoadedModel, ModelConfig, ModelKind, MultiCnn,
};
use prodcat::pipeline::{run_training, RunSummary, Trained};
use prodcat::synthetic::{generate, AttrSignal, Scenario, SyntheticSpec};
use prodcat::tensor::{grad_check, ConvBankSpec};
use prodcat::text::build_dictionary;
use prodcat::train::{annealed_lr, evaluate, f1_lift_report, SgdrSchedule};
use prodcat_serve::{AppState, Batcher, BatcherConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

const SEEDS: [u64; 3] = [1, 2, 3];

/// Channel and network sizes used by every desk-scale multicnn run.
const DESK: &str = "title_len = 16\ndescription_len = 0\nstructured_len = 32\nembed_dim = 32\n\
                    filters = 32\nwidths = 1,2,3,4,5\nfc = 128,128\n";

/// Optimizer settings shared by the structured-mode comparison. Word averaging
/// barely moves at the default rate and batch size, so all three modes use this.
const COMPARISON: &str = "epochs = 15\nbase_lr = 0.3\nbatch_size = 16\n";

struct Check {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: impl Into<String>) -> Result<Check> {
    Ok(Check {
        pass,
        detail: detail.into(),
    })
}

fn desk_config(extra: &str, seed: u64) -> Result<RunConfig> {
    let mut cfg = RunConfig::parse(&format!("{DESK}{extra}"))?;
    cfg.set_seed(seed);
    Ok(cfg)
}

fn c1_gradients() -> Result<Check> {
    let start = Instant::now();
    let words: Vec<String> = (0..17).map(|i| format!("t{i}")).collect();
    let vocab = build_dictionary([words.join(" ").as_str()], 100)?;
    if vocab.len() != 20 {
        bail!("micro vocabulary has {} entries", vocab.len());
    }
    let mut dicts = BTreeMap::new();
    dicts.insert("product_name".to_string(), vocab.clone());
    dicts.insert("structured".to_string(), vocab);
    let mut config = ModelConfig {
        conv: ConvBankSpec {
            widths: vec![1, 2, 3],
            filters_per_width: 4,
            embed_dim: 8,
        },
        fc_sizes: vec![8, 8],
        num_classes: 3,
        ..Default::default()
    };
    config.channels.truncate(1);
    config.structured.max_len = 12;
    let labels: Vec<String> = (0..3).map(|i| format!("c{i}")).collect();
    let model = MultiCnn::<f32>::new(config, Arc::new(dicts), labels, 5)?.cast::<f64>();
    let products = [
        Product::new("a").with_text("product_name", "t1 t2 t3 t4").with_attr("t5", "t6"),
        Product::new("b").with_text("product_name", "t7 t0 t16").with_attr("t9", "t10 t11"),
        Product::new("c").with_text("product_name", "t3 unknownword t12 t13 t14 t15"),
    ];
    let enc: Vec<_> = products.iter().map(|p| model.encode(p)).collect();
    let refs: Vec<_> = enc.iter().collect();
    let mut store = model.params().clone();
    let report = grad_check(&mut store, 1e-6, |store, tape| {
        let mut m = model.clone();
        m.params_mut().load_values(store)?;
        m.loss(tape, &refs, &[0, 2, 1])
    })?;
    let secs = start.elapsed().as_secs_f64();
    check(
        report.max_relative_error < 1e-3 && secs < 60.0,
        format!(
            "max relative error {:.2e} over {} entries (worst {:?}) in {secs:.1}s",
            report.max_relative_error, report.entries, report.worst
        ),
    )
}

fn cli(args: &[&str]) -> Result<String> {
    let out = Command::new(env!("CARGO_BIN_EXE_prodcat"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()?;
    if !out.status.success() {
        bail!("prodcat {args:?}: {}", String::from_utf8_lossy(&out.stderr).trim());
    }
    Ok(String::from_utf8(out.stdout)?)
}

fn c2_cli_accuracy(tmp: &Path) -> Result<Check> {
    let start = Instant::now();
    let data = tmp.join("c2_data");
    let run = tmp.join("c2_run");
    let conf = tmp.join("c2.conf");
    std::fs::write(&conf, format!("{DESK}epochs = 7\n"))?;
    let p = |p: &Path| p.to_str().unwrap().to_string();
    cli(&[
        "gen-synthetic", "--out", &p(&data), "--classes", "50", "--per-class", "200",
        "--title-overlap", "0.3", "--attr-signal", "strong", "--seed", "1",
    ])?;
    cli(&[
        "train", "--config", &p(&conf), "--data", &p(&data.join("corpus.jsonl")),
        "--taxonomy", &p(&data.join("taxonomy.txt")), "--out", &p(&run), "--seed", "1",
    ])?;
    let report: Value = serde_json::from_str(&cli(&["evaluate", "--model", &p(&run)])?)?;
    let top1 = report["topk_accuracy"]["1"].as_f64().context("top-1 missing")?;
    check(
        top1 >= 0.90,
        format!("test top-1 {top1:.3} after 7 epochs ({:.0}s end to end)", start.elapsed().as_secs_f64()),
    )
}

struct ModeRuns {
    none: Vec<RunSummary>,
    word_avg: Vec<RunSummary>,
    conv: Vec<RunSummary>,
    identifying: Vec<Vec<String>>,
}

fn mode_runs() -> Result<ModeRuns> {
    let mut runs = ModeRuns {
        none: vec![],
        word_avg: vec![],
        conv: vec![],
        identifying: vec![],
    };
    for seed in SEEDS {
        let corpus = generate(&SyntheticSpec {
            title_overlap: 1.0,
            attr_signal: AttrSignal::Strong,
            seed,
            ..Default::default()
        })?;
        runs.identifying
            .push(corpus.truth.identifying_classes().iter().map(|s| s.to_string()).collect());
        for (mode, out) in [
            ("none", &mut runs.none),
            ("word_avg", &mut runs.word_avg),
            ("conv", &mut runs.conv),
        ] {
            let cfg = desk_config(&format!("{COMPARISON}structured = {mode}\n"), seed)?;
            out.push(run_training(&cfg, &corpus.taxonomy, &corpus.examples, None)?);
        }
    }
    Ok(runs)
}

fn c3_structured_lift(runs: &ModeRuns) -> Result<Check> {
    let mut pass = true;
    let mut parts = vec![];
    for (i, seed) in SEEDS.iter().enumerate() {
        let (base, conv) = (&runs.none[i].test, &runs.conv[i].test);
        let lift = conv.top1() - base.top1();
        let min_support = conv.per_class.values().map(|c| c.support).min().unwrap_or(0);
        let report = f1_lift_report(base, conv, min_support)?;
        let top: Vec<&(String, f64)> = report.iter().take(5).collect();
        let top_ok = !top.is_empty()
            && top
                .iter()
                .all(|(label, delta)| *delta > 0.0 && runs.identifying[i].contains(label));
        pass &= lift >= 0.20 && top_ok;
        parts.push(format!(
            "seed {seed}: none {:.3} conv {:.3} lift {lift:+.3}, top-5 f1 lifts identifying and positive: {top_ok}",
            base.top1(),
            conv.top1()
        ));
    }
    check(pass, parts.join("; "))
}

fn c4_separator() -> Result<Check> {
    let mut wins = 0;
    let mut parts = vec![];
    for seed in SEEDS {
        let corpus = generate(&SyntheticSpec {
            scenario: Scenario::Separator,
            seed,
            ..Default::default()
        })?;
        let mut acc = [0.0; 2];
        for (slot, sep) in [(0, true), (1, false)] {
            let cfg = desk_config(&format!("epochs = 7\nstructured = conv\nseparator = {sep}\n"), seed)?;
            acc[slot] = run_training(&cfg, &corpus.taxonomy, &corpus.examples, None)?.test.top1();
        }
        if acc[0] >= acc[1] {
            wins += 1;
        }
        parts.push(format!("seed {seed}: with {:.3} without {:.3}", acc[0], acc[1]));
    }
    check(wins >= 2, format!("separator wins {wins}/3; {}", parts.join("; ")))
}

fn c5_mode_order(runs: &ModeRuns) -> Result<Check> {
    let mean = |rs: &[RunSummary]| rs.iter().map(|r| r.test.top1()).sum::<f64>() / rs.len() as f64;
    let (b, w, c) = (mean(&runs.none), mean(&runs.word_avg), mean(&runs.conv));
    check(
        b <= w && w <= c,
        format!("mean top-1 none {b:.3} <= word_avg {w:.3} <= conv {c:.3}"),
    )
}

fn random_product(rng: &mut ChaCha8Rng, id: usize) -> Product {
    let words: Vec<String> = (0..rng.random_range(0..8))
        .map(|_| format!("w{}", rng.random_range(0..40)))
        .collect();
    let mut p = Product::new(format!("p{id}")).with_text("product_name", words.join(" "));
    if rng.random_bool(0.5) {
        p = p.with_attr("color", format!("c{}", rng.random_range(0..5)));
    }
    p
}

fn c6_beam_exact() -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let paths: Vec<Vec<String>> = (0..20)
        .map(|leaf| {
            let a = rng.random_range(0..3);
            let b = rng.random_range(0..3);
            vec![format!("a{a}"), format!("a{a}b{b}"), format!("leaf{leaf:02}")]
        })
        .collect();
    let taxonomy = Taxonomy::from_paths(&paths)?;
    let examples: Vec<LabeledExample> = (0..400)
        .map(|i| LabeledExample {
            product: random_product(&mut rng, i),
            label: format!("leaf{:02}", rng.random_range(0..20)),
        })
        .collect();
    let model = train_hierarchical(
        &examples,
        &taxonomy,
        &HierarchicalConfig {
            hash_dim: 1024,
            epochs: 5,
            ..Default::default()
        },
    )?;
    let n = taxonomy.leaves().len();
    let mut mismatches = 0;
    for i in 0..100 {
        let product = random_product(&mut rng, 1000 + i);
        let x = model.features(&product);
        let mut exhaustive: Vec<(usize, f64)> = taxonomy
            .leaves()
            .iter()
            .map(|&leaf| {
                let path = taxonomy.path(leaf);
                let mut score = 1.0;
                for pair in path.windows(2) {
                    let slot = taxonomy.node(pair[0]).children.iter().position(|&c| c == pair[1]).unwrap();
                    score *= model.node_probabilities(pair[0], &x)[slot];
                }
                (leaf, score)
            })
            .collect();
        exhaustive.sort_by(|a, b| {
            b.1.total_cmp(&a.1)
                .then(model.class_of_leaf(a.0).cmp(&model.class_of_leaf(b.0)))
        });
        let beam = model.topk(&product, n, n)?;
        let same = beam.len() == exhaustive.len()
            && beam
                .iter()
                .zip(&exhaustive)
                .all(|(a, b)| a.0 == b.0 && a.1.to_bits() == b.1.to_bits());
        if !same {
            mismatches += 1;
        }
    }
    check(
        mismatches == 0,
        format!("{mismatches}/100 products differ from exhaustive path products over {n} leaves"),
    )
}

fn c7_confusable() -> Result<Check> {
    let corpus = generate(&SyntheticSpec {
        scenario: Scenario::Confusable,
        classes: 24,
        per_class: 100,
        title_overlap: 1.0,
        attr_signal: AttrSignal::None,
        seed: 3,
    })?;
    let mut cfg = desk_config("epochs = 7\nstructured = none\nhash_dim = 65536\n", 1)?;
    let flat = run_training(&cfg, &corpus.taxonomy, &corpus.examples, None)?;
    cfg.kind = ModelKind::Hierarchical;
    let hier = run_training(&cfg, &corpus.taxonomy, &corpus.examples, None)?;
    let Trained::Hierarchical(model) = &hier.model else {
        bail!("expected a hierarchical model");
    };
    let depths = model.error_depths(&hier.test_examples)?;
    let root_dominates = depths.len() > 1 && depths[1..].iter().all(|&d| depths[0] > d);
    let (f, h) = (flat.test.top1(), hier.test.top1());
    check(
        root_dominates && f > h,
        format!("errors by decision depth {depths:?}; flat top-1 {f:.3} vs hierarchical {h:.3}"),
    )
}

fn c8_schedule() -> Result<Check> {
    let spe = 7;
    let s = SgdrSchedule::new(0.05, 0.001, spe)?;
    let mut failures = vec![];
    for end in [0, 1, 3, 7, 15] {
        if s.lr_at(end * spe) != 0.05 {
            failures.push(format!("no restart at epoch {end}"));
        }
    }
    for (start, epochs) in [(0usize, 1usize), (1, 2), (3, 4), (7, 8)] {
        let len = epochs * spe;
        for t in 0..len {
            let want = 0.001 + 0.5 * (0.05 - 0.001) * (1.0 + (std::f64::consts::PI * t as f64 / len as f64).cos());
            if s.lr_at(start * spe + t) != want {
                failures.push(format!("step {} differs", start * spe + t));
            }
        }
    }
    if annealed_lr(0.05, 0.001, 10.0, 10.0) != 0.001 || (annealed_lr(0.05, 0.001, 5.0, 10.0) - 0.0255).abs() > 1e-15 {
        failures.push("annealing endpoints".into());
    }

    // The trainer must apply exactly this schedule.
    let corpus = generate(&SyntheticSpec {
        classes: 4,
        per_class: 25,
        ..Default::default()
    })?;
    let cfg = RunConfig::parse(
        "title_len = 8\ndescription_len = 0\nstructured_len = 8\nembed_dim = 4\nfilters = 2\nwidths = 1,2\n\
         fc = 8\nepochs = 4\nbatch_size = 16\nbase_lr = 0.05\nmin_lr = 0.001\nstratify_floor = 0\n",
    )?;
    let run = run_training(&cfg, &corpus.taxonomy, &corpus.examples, None)?;
    let n_train = split(&corpus.examples, cfg.split, cfg.seed())?.train.len();
    let steps = n_train.div_ceil(16);
    let trained = SgdrSchedule::new(0.05, 0.001, steps)?;
    for m in &run.curve {
        let last = m.epoch * steps - 1;
        if m.final_lr != trained.lr_at(last) {
            failures.push(format!("epoch {} ended at lr {}", m.epoch, m.final_lr));
        }
    }
    check(
        failures.is_empty(),
        if failures.is_empty() {
            format!("restarts at epochs 1, 3, 7, 15 and {} trainer epochs match", run.curve.len())
        } else {
            failures.join("; ")
        },
    )
}

fn c9_server(tmp: &Path) -> Result<Check> {
    let start = Instant::now();
    let corpus = generate(&SyntheticSpec {
        classes: 8,
        per_class: 30,
        ..Default::default()
    })?;
    let cfg = RunConfig::parse(
        "title_len = 8\ndescription_len = 0\nstructured_len = 16\nembed_dim = 8\nfilters = 4\n\
         widths = 1,2,3\nfc = 16\nepochs = 2\nstratify_floor = 0\n",
    )?;
    let dir = tmp.join("c9_run");
    run_training(&cfg, &corpus.taxonomy, &corpus.examples, Some(&dir))?;
    let model = Arc::new(LoadedModel::load(&dir)?);
    let config = BatcherConfig::default();
    let defaults_ok = config.poll_interval == Duration::from_millis(300) && config.max_batch == 1024;
    let products: Vec<Product> = corpus.examples.iter().take(100).map(|e| e.product.clone()).collect();
    let offline: Vec<_> = products
        .iter()
        .map(|p| model.predict_topk(p, 3))
        .collect::<prodcat::Result<_>>()?;

    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    let (concurrent, sequential_batches, online) = rt.block_on(async {
        let app = Arc::new(AppState {
            batcher: Batcher::start(model.clone(), config)?,
            model_hash: model.config_hash(),
            config_hash: model.config_hash(),
        });
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await?;
        let base = format!("http://{}", listener.local_addr()?);
        let (stop, stopped) = tokio::sync::oneshot::channel::<()>();
        let server = tokio::spawn(prodcat_serve::serve(listener, Arc::clone(&app), async {
            let _ = stopped.await;
        }));
        let client = reqwest::Client::new();
        let body = |id: String, p: &Product| {
            json!({
                "request_id": id,
                "unstructured": {"product_name": p.text("product_name")},
                "structured": p.structured,
            })
        };
        let tasks: Vec<_> = products
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let (client, url, body) = (client.clone(), format!("{base}/v1/predict"), body(format!("c{i}"), p));
                tokio::spawn(async move { client.post(url).json(&body).send().await?.json::<Value>().await })
            })
            .collect();
        let mut online = vec![];
        for t in tasks {
            online.push(t.await??);
        }
        let concurrent = app.batcher.stats().recent_batches();
        for (i, p) in products.iter().take(5).enumerate() {
            client.post(format!("{base}/v1/predict")).json(&body(format!("s{i}"), p)).send().await?;
        }
        let all = app.batcher.stats().recent_batches();
        let sequential = all[concurrent.len()..].to_vec();
        let _ = stop.send(());
        let _ = server.await;
        anyhow::Ok((concurrent, sequential, online))
    })?;

    let mut worst = 0.0f64;
    let mut labels_match = true;
    for (off, on) in offline.iter().zip(&online) {
        let preds = on["predictions"].as_array().context("predictions missing")?;
        labels_match &= preds.len() == off.len();
        for (a, b) in off.iter().zip(preds) {
            labels_match &= b["label"] == a.label.as_str();
            worst = worst.max((b["probability"].as_f64().unwrap_or(f64::NAN) - a.probability).abs());
        }
    }
    let max_concurrent = concurrent.iter().copied().max().unwrap_or(0);
    let secs = start.elapsed().as_secs_f64();
    check(
        defaults_ok
            && labels_match
            && worst <= 1e-5
            && max_concurrent > 1
            && sequential_batches.iter().all(|&b| b == 1)
            && secs < 120.0,
        format!(
            "100 concurrent: batches {concurrent:?}, max |dp| {worst:.1e}, labels match {labels_match}; \
             sequential batches {sequential_batches:?}; {secs:.1}s"
        ),
    )
}

fn files(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        out.insert(entry.file_name().to_string_lossy().into_owned(), std::fs::read(entry.path())?);
    }
    Ok(out)
}

fn c10_round_trip(tmp: &Path) -> Result<Check> {
    let corpus = generate(&SyntheticSpec {
        classes: 10,
        per_class: 40,
        seed: 10,
        ..Default::default()
    })?;
    let cfg = desk_config("epochs = 2\nstratify_floor = 0\n", 10)?;
    let run = run_training(&cfg, &corpus.taxonomy, &corpus.examples, None)?;
    let (a, b) = (tmp.join("c10_a"), tmp.join("c10_b"));
    run.model.save(&a)?;
    let loaded = LoadedModel::load(&a)?;
    match &loaded {
        LoadedModel::Flat(m) => m.save(&b)?,
        LoadedModel::Hierarchical(m) => m.save(&b)?,
    }
    let (fa, fb) = (files(&a)?, files(&b)?);
    let identical = fa == fb;
    let original = evaluate(run.model.classifier(), &run.test_examples)?;
    let reloaded = evaluate(&loaded, &run.test_examples)?;
    let mut probs_equal = true;
    for ex in &run.test_examples {
        let x = run.model.classifier().predict_topk(&ex.product, 3)?;
        let y = loaded.predict_topk(&ex.product, 3)?;
        probs_equal &= x == y;
    }
    check(
        identical && original == reloaded && probs_equal,
        format!(
            "{} files byte-identical after reload: {identical}; metrics equal: {}; predictions equal: {probs_equal}",
            fa.len(),
            original == reloaded
        ),
    )
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let tmp = tmp.path();
    let mut failed = 0;
    let mut report = |n: usize, outcome: Result<Check>| {
        let (pass, detail) = match outcome {
            Ok(c) => (c.pass, c.detail),
            Err(e) => (false, format!("error: {e:#}")),
        };
        if !pass {
            failed += 1;
        }
        println!("criterion {n}: {} - {detail}", if pass { "PASS" } else { "FAIL" });
    };
    report(1, c1_gradients());
    report(2, c2_cli_accuracy(tmp));
    match mode_runs() {
        Ok(runs) => {
            report(3, c3_structured_lift(&runs));
            report(4, c4_separator());
            report(5, c5_mode_order(&runs));
        }
        Err(e) => {
            let msg = format!("{e:#}");
            report(3, Err(anyhow::anyhow!(msg.clone())));
            report(4, c4_separator());
            report(5, Err(anyhow::anyhow!(msg)));
        }
    }
    report(6, c6_beam_exact());
    report(7, c7_confusable());
    report(8, c8_schedule());
    report(9, c9_server(tmp));
    report(10, c10_round_trip(tmp));
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
