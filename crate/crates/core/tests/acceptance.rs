//! Acceptance suite. Runs every criterion in order and prints one
//! PASS/FAIL line per criterion; exits nonzero if any fails.

mod common;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::Instant;

use common::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use retrorank::baseline_classifier::{classifier_buckets, ClassifierConfig};
use retrorank::curation::{
    generate_corpus, reaction_signature, remove_leakage, write_jsonl, GeneratorConfig, ReactionRecord, Split,
};
use retrorank::encoder::{ops, EncoderConfig, EncoderParams, ParamGroup, Trainable};
use retrorank::error::Error;
use retrorank::evaluation::{evaluate, rank_reactants, Bucket, EvalConfig, EvalModel, EvalReport};
use retrorank::library::TemplateLibrary;
use retrorank::objectives::{kld_loss, smoothed_targets, stage1_loss, stage2_loss, ScoreMatrix};
use retrorank::pipeline::{corpus_vocab, curate};
use retrorank::reaction_engine::{canonicalize, ReactionEngine, RewriteEngine};
use retrorank::retrieval::{
    build_bank, build_candidate_set, candidate_rng, BankSource, CandidateConfig, SlotSource, TemplateBank,
};
use retrorank::stability::{ema_drift_bound, ema_unroll, measure_drift, steady_state_lag, DriftConstants, DriftProbe};
use retrorank::tokenizer::build_vocab;
use retrorank::trainer::*;

type Check = fn() -> String;

fn main() {
    std::panic::set_hook(Box::new(|_| {}));
    let criteria: [(&str, Check); 12] = [
        ("gradient correctness", gradients),
        ("EMA algebra", ema_algebra),
        ("drift bound", drift_bound),
        ("candidate-set contract", candidate_sets),
        ("reactant ranking oracle", ranking_oracle),
        ("metric identities", metric_identities),
        ("variant contracts", variant_contracts),
        ("micro-batch dedup equivalence", dedup_equivalence),
        ("end-to-end learning signal", learning_signal),
        ("long-tail direction", long_tail),
        ("leakage removal", leakage),
        ("reproducibility", reproducibility),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check));
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name} ({secs:.1}s): {detail}", i + 1),
            Err(e) => {
                failed += 1;
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panic".into());
                println!("FAIL {:>2} {name} ({secs:.1}s): {msg}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Worst relative error of `analytic` against central differences of `f`.
fn fd_worst(x: &[f64], analytic: &[f64], f: impl Fn(&[f64]) -> f64) -> f64 {
    let h = 1e-6;
    let mut p = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        p[i] = x[i] + h;
        let up = f(&p);
        p[i] = x[i] - h;
        let down = f(&p);
        p[i] = x[i];
        worst = worst.max(rel_err((up - down) / (2.0 * h), analytic[i], 1e-3));
    }
    worst
}

fn gradients() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = [0.0f64; 4];
    for _ in 0..100 {
        let b = rng.gen_range(1..7);
        let v: Vec<f64> = (0..b * b).map(|_| rng.gen_range(-14.0..14.0)).collect();
        let g = stage1_loss(&ScoreMatrix::new(b, b, v.clone()).unwrap()).unwrap().grad;
        let e = fd_worst(&v, &g, |x| {
            stage1_loss(&ScoreMatrix::new(b, b, x.to_vec()).unwrap()).unwrap().loss
        });
        worst[0] = worst[0].max(e);

        let c = rng.gen_range(2..20);
        let mut mask: Vec<bool> = (0..c).map(|_| rng.gen_bool(0.2)).collect();
        mask[rng.gen_range(0..c)] = true;
        let t = smoothed_targets(&mask, rng.gen_range(0.001..0.3)).unwrap();
        let beta = rng.gen_range(0.0005..0.2);
        let s: Vec<f64> = (0..c).map(|_| rng.gen_range(-14.0..14.0)).collect();
        let g = stage2_loss(&s, &t, beta).unwrap().grad;
        worst[1] = worst[1].max(fd_worst(&s, &g, |x| stage2_loss(x, &t, beta).unwrap().loss));

        let teacher: Vec<f64> = (0..c).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let g = kld_loss(&teacher, &s).unwrap().grad;
        worst[2] = worst[2].max(fd_worst(&s, &g, |x| kld_loss(&teacher, x).unwrap().loss));
    }

    let vocab = build_vocab(["CCO(=O)N", "c1ccccc1Cl>>Br"]).unwrap();
    let cfg = EncoderConfig {
        vocab_size: vocab.size(),
        hidden_dim: 8,
        layers: 2,
        heads: 2,
        ff_dim: 16,
        max_len: 12,
        dropout: 0.0,
    };
    let mut params = EncoderParams::new(cfg.clone(), 11).unwrap();
    for v in params.data.iter_mut() {
        *v += rng.gen_range(-0.3..0.3);
    }
    let seq = vocab.encode("CC(=O)Nc1", cfg.max_len).unwrap();
    let probe: Vec<f64> = (0..cfg.hidden_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let cache = params.forward(&seq, None).unwrap();
    let mut grads = params.zeros_like();
    params.backward(&cache, &probe, &mut grads).unwrap();
    let x = params.data.clone();
    let h = 1e-5;
    let mut p = params.clone();
    for i in 0..x.len() {
        p.data[i] = x[i] + h;
        let up = ops::dot(p.embed(&seq).unwrap().as_slice(), &probe);
        p.data[i] = x[i] - h;
        let down = ops::dot(p.embed(&seq).unwrap().as_slice(), &probe);
        p.data[i] = x[i];
        worst[3] = worst[3].max(rel_err((up - down) / (2.0 * h), grads[i], 1e-6));
    }
    for (name, w) in ["stage1", "stage2", "kld", "encoder"].iter().zip(worst) {
        assert!(w < 1e-4, "{name} worst relative error {w:.2e}");
    }
    format!(
        "worst rel err stage1 {:.1e}, stage2 {:.1e}, kld {:.1e}, encoder(d8,L2) {:.1e}",
        worst[0], worst[1], worst[2], worst[3]
    )
}

fn ema_algebra() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let alpha = rng.gen_range(0.01..0.999);
        let m = rng.gen_range(1..40);
        let n = rng.gen_range(1..10);
        let init: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let lives: Vec<Vec<f64>> = (0..m)
            .map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let mut shadow = init.clone();
        for l in &lives {
            ema_update(&mut shadow, l, alpha).unwrap();
        }
        let closed = ema_unroll(&init, &lives, alpha).unwrap();
        worst = worst.max(max_abs_diff(&shadow, &closed));
    }
    assert!(worst <= 1e-12, "unroll differs from recursion by {worst:e}");

    let c = DriftConstants {
        eta_g: 1.0,
        l_s: 1.0,
        l_sm: 2.0,
        delta0: 0.0,
        alpha: 0.5,
        m: 2,
    };
    let hand = ema_drift_bound(&c).unwrap();
    assert!(
        (hand.closed_form - 1.25).abs() < 1e-12,
        "closed form {}",
        hand.closed_form
    );
    assert!((hand.bound - 1.25).abs() < 1e-12, "bound {}", hand.bound);

    let mut checked = 0;
    for i in 0..40 {
        for j in 0..25 {
            let alpha = 0.001 + 0.998 * i as f64 / 39.0;
            let m = 1 + j * 40;
            let b = ema_drift_bound(&DriftConstants { alpha, m, ..c }).unwrap();
            assert!(
                b.closed_form <= m as f64 * (1.0 + 1e-12),
                "alpha {alpha} m {m}: {}",
                b.closed_form
            );
            assert!(
                rel_err(b.closed_form, b.bound, 1.0) < 1e-9,
                "sum and closed form disagree"
            );
            checked += 1;
        }
    }
    assert_eq!(checked, 1000);
    format!("unroll max diff {worst:.1e}; hand value 1.25 ok; {checked} (alpha, m) pairs within m*etaG")
}

fn drift_bound() -> String {
    let fx = corpus(60, 400, 3);
    let enc = EncoderConfig::desk(fx.vocab.size());
    let data = Stage2Data::build(&fx.records, &fx.library, &fx.vocab, enc.max_len).unwrap();
    let cfg = TrainConfig {
        epochs: 5,
        seed: 3,
        ..TrainConfig::desk()
    };
    let towers = DualEncoder::new(enc.clone(), 3).unwrap();
    let out = run_stage2(
        &data,
        &towers,
        &Stage2Flags::ema(3),
        &cfg,
        Stage2Options { record_trace: true },
    )
    .unwrap();
    let trace = out.trace.unwrap();
    let queries: Vec<Vec<f64>> = data
        .products
        .iter()
        .take(16)
        .map(|p| out.towers.product.embed(&p.tokens).unwrap())
        .collect();
    let probe = DriftProbe {
        template_config: &enc,
        templates: &data.templates,
        queries: &queries,
        temperature: cfg.temperature,
        perturbations: 4,
        seed: 3,
    };
    let rep = measure_drift(&trace, &probe).unwrap();
    assert_eq!(rep.epochs.len(), 5);
    let mut ratio = 0.0f64;
    for e in &rep.epochs {
        assert!(
            e.shadow_drift <= e.bound.bound,
            "epoch {}: drift {:e} > bound {:e}",
            e.epoch,
            e.shadow_drift,
            e.bound.bound
        );
        assert!(
            e.within_bound,
            "epoch {} retrieval drift {:e} > {:e}",
            e.epoch, e.retrieval_l1, e.retrieval_l1_bound
        );
        ratio = ratio.max(e.shadow_drift / e.bound.bound);
    }
    let g: Vec<f64> = (0..32).map(|i| ((i * 7 % 11) as f64 - 5.0) * 1e-3).collect();
    let (lag, predicted) = steady_state_lag(0.99, &g, 5000).unwrap();
    let lag_err = rel_err(lag, predicted, 0.0);
    assert!(lag_err < 0.05, "steady lag {lag:e} vs {predicted:e}");
    format!("5 epochs within bound (max drift/bound {ratio:.3}); steady lag rel err {lag_err:.1e}")
}

fn candidate_sets() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut sources: BTreeMap<String, usize> = BTreeMap::new();
    for case in 0..10_000 {
        let n = rng.gen_range(1..40);
        let d = 4;
        let rows: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let bank = TemplateBank::from_rows(d, rows, BankSource::Live, 0).unwrap();
        let query: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n_pos = rng.gen_range(1..=n.min(5));
        let mut ids: Vec<usize> = (0..n).collect();
        ids.shuffle(&mut rng);
        let positives: Vec<usize> = ids[..n_pos].to_vec();
        let batch: Vec<usize> = (0..rng.gen_range(0..12)).map(|_| rng.gen_range(0..n)).collect();
        let cfg = CandidateConfig {
            size: rng.gen_range(1..48),
            in_batch_cap: rng.gen_range(0..6),
            hard_pool: rng.gen_range(0..20),
        };
        let seed = rng.gen::<u64>();
        let set = build_candidate_set(
            &positives,
            &batch,
            &bank,
            &query,
            &cfg,
            &mut candidate_rng(seed, 1, case),
        )
        .unwrap();
        let again = build_candidate_set(
            &positives,
            &batch,
            &bank,
            &query,
            &cfg,
            &mut candidate_rng(seed, 1, case),
        )
        .unwrap();
        assert_eq!(set, again, "case {case} not deterministic");
        assert_eq!(set.len(), cfg.size, "case {case} size");

        // Deterministic prefix by brute force: sorted positives, capped
        // in-batch ids in order, then full-sort nearest neighbours.
        let pos_set: BTreeSet<usize> = positives.iter().copied().collect();
        let mut want: Vec<(usize, SlotSource)> = pos_set.iter().map(|&p| (p, SlotSource::Positive)).collect();
        let mut taken: BTreeSet<usize> = pos_set.clone();
        let mut in_batch = 0;
        for &b in &batch {
            if in_batch < cfg.in_batch_cap && taken.insert(b) {
                want.push((b, SlotSource::InBatch));
                in_batch += 1;
            }
        }
        let scores = bank.scores(&query);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        for &h in order.iter().take(cfg.hard_pool) {
            if taken.insert(h) {
                want.push((h, SlotSource::Hard));
            }
        }
        want.truncate(cfg.size);
        let got: Vec<(usize, SlotSource)> = set
            .template_ids
            .iter()
            .copied()
            .zip(set.provenance.iter().copied())
            .take(want.len())
            .collect();
        assert_eq!(got, want, "case {case} assembly order");

        let first_pos = pos_set.len().min(cfg.size);
        assert!(
            set.positive_mask[..first_pos].iter().all(|&p| p),
            "case {case} positives not first"
        );
        let mut seen = BTreeSet::new();
        for (i, (&id, src)) in set.template_ids.iter().zip(&set.provenance).enumerate() {
            assert_eq!(set.positive_mask[i], pos_set.contains(&id), "case {case} mask");
            *sources.entry(format!("{src:?}")).or_default() += 1;
            match src {
                SlotSource::Replacement => {
                    let negatives_exist = set.positive_mask.iter().any(|&p| !p);
                    assert!(
                        !negatives_exist || !pos_set.contains(&id),
                        "case {case} replacement of a positive"
                    );
                    assert!(seen.contains(&id), "case {case} replacement of unseen id");
                }
                SlotSource::Random => assert!(seen.insert(id), "case {case} duplicate random id"),
                _ => {
                    seen.insert(id);
                }
            }
        }
        let distinct = set.provenance.iter().filter(|s| **s != SlotSource::Replacement).count();
        assert_eq!(distinct, seen.len(), "case {case} duplicate outside replacement");
        if set.provenance.contains(&SlotSource::Replacement) {
            assert_eq!(
                seen.len(),
                n.min(cfg.size),
                "case {case} replacement before library exhausted"
            );
        }
    }
    let summary: Vec<String> = sources.iter().map(|(k, v)| format!("{k} {v}")).collect();
    format!("10000 cases; slots by source: {}", summary.join(", "))
}

fn ranking_oracle() -> String {
    let fx = corpus(80, 600, 6);
    // Repeating half the rules makes identical reactant sets arrive from
    // different templates at different scores.
    let mut raws = fx.library.raws().to_vec();
    raws.extend_from_slice(&fx.library.raws()[..40]);
    let library = TemplateLibrary::new(raws);
    let cfg = EvalConfig {
        apply_top: library.len(),
        ..EvalConfig::f3()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut products: Vec<&str> = fx.records.iter().map(|r| r.product.as_str()).collect();
    products.sort();
    products.dedup();
    products.shuffle(&mut rng);
    let mut nonempty = 0;
    let mut merged = 0;
    for product in products.iter().take(200) {
        let n = library.len();
        let mut ids: Vec<usize> = (0..n).collect();
        ids.shuffle(&mut rng);
        // Coarse scores so that ties occur.
        let mut retrieved: Vec<(usize, f64)> = ids.into_iter().map(|t| (t, rng.gen_range(0..6) as f64 * 0.5)).collect();
        retrieved.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let got = rank_reactants(product, &retrieved, &library, &RewriteEngine, &cfg);

        // Brute force: apply every slot, collect (key, score, rank, index of
        // first appearance among that slot's distinct keys), keep the best.
        let mut all: Vec<(String, f64, usize, usize, usize)> = Vec::new();
        for (rank, &(tid, score)) in retrieved.iter().take(cfg.apply_top).enumerate() {
            let Some(t) = library.template(tid) else { continue };
            let Ok(outs) = RewriteEngine.apply(t, product, cfg.max_outcomes_per_template) else {
                continue;
            };
            let mut distinct: Vec<String> = Vec::new();
            for o in outs {
                if let Ok(k) = canonicalize(&o) {
                    let k = k.as_str().to_string();
                    if !distinct.contains(&k) {
                        distinct.push(k.clone());
                        all.push((k, score, tid, rank, distinct.len() - 1));
                    }
                }
            }
        }
        let mut best: HashMap<String, (f64, usize, usize, usize)> = HashMap::new();
        for (k, s, tid, rank, oi) in &all {
            let better = match best.get(k) {
                None => true,
                Some(&(bs, _, br, bo)) => *s > bs || (*s == bs && (*rank, *oi) < (br, bo)),
            };
            if better {
                best.insert(k.clone(), (*s, *tid, *rank, *oi));
            }
        }
        merged += all.len() - best.len();
        let mut want: Vec<(String, f64, usize, usize, usize)> =
            best.into_iter().map(|(k, (s, t, r, o))| (k, s, t, r, o)).collect();
        want.sort_by(|a, b| {
            b.1.total_cmp(&a.1)
                .then(a.3.cmp(&b.3))
                .then(a.4.cmp(&b.4))
                .then(a.0.cmp(&b.0))
        });
        let got: Vec<(String, f64, usize, usize, usize)> = got
            .iter()
            .map(|p| {
                (
                    p.reactant_key.as_str().to_string(),
                    p.score,
                    p.best_template_id,
                    p.best_template_rank,
                    p.outcome_index,
                )
            })
            .collect();
        assert_eq!(got, want, "product {product}");
        if !got.is_empty() {
            nonempty += 1;
        }
    }
    assert!(nonempty > 100, "only {nonempty} products produced predictions");
    assert!(merged > 0, "no duplicate keys exercised");
    format!("200 products exact; {nonempty} with predictions; {merged} duplicate keys merged")
}

/// Monotone top-k curves and YieldCov@1 = YieldRate@1.
fn check_identities(r: &EvalReport, label: &str) {
    for (name, curve) in [("reaction", &r.reaction_topk), ("template", &r.template_retrieval_topk)] {
        let v: Vec<f64> = curve.values().copied().collect();
        assert!(
            v.windows(2).all(|w| w[0] <= w[1] + 1e-12),
            "{label}: {name} top-k not monotone {v:?}"
        );
    }
    let (c, y) = (r.yield_cov[&1], r.yield_rate[&1]);
    assert!((c - y).abs() < 1e-12, "{label}: YieldCov@1 {c} != YieldRate@1 {y}");
}

fn metric_identities() -> String {
    // 90 rows solvable by single-input templates, 10 rows whose only
    // template is multi-input and whose product no other template matches.
    let singles = ["CO>>C.O", "NC>>N.CCl", "OCN>>O.CN", "CCO>>CC.O", "NO>>N.O"];
    let mut raws: Vec<String> = singles.iter().map(|s| s.to_string()).collect();
    raws.push("SP.PS>>SPPS".into());
    let library = TemplateLibrary::new(raws);
    let mut rows = Vec::new();
    let contexts = ["c", "cc", "ccc", "s", "ss", "cs", "sc", "scs", "csc"];
    for i in 0..90 {
        let t = library.template(i % singles.len()).unwrap();
        let ctx = contexts[i / singles.len() % contexts.len()];
        let (product, reactants) = t.compose(ctx, &format!("{}", "s".repeat(1 + i / 45)));
        rows.push(ReactionRecord {
            id: i as u64,
            product,
            reactants,
            template_id: i % singles.len(),
            template_raw: t.raw.clone(),
            split: Split::Test,
        });
    }
    for i in 0..10 {
        rows.push(ReactionRecord {
            id: 90 + i as u64,
            product: format!("SP{}PS", "S".repeat(i)),
            reactants: vec!["SPP".into(), format!("S{}", "S".repeat(i))],
            template_id: singles.len(),
            template_raw: library.raw(singles.len()).to_string(),
            split: Split::Test,
        });
    }
    let vocab = corpus_vocab(&rows, &library).unwrap();
    let enc = EncoderConfig {
        dropout: 0.0,
        ..tiny_encoder(vocab.size(), 1)
    };
    let product = EncoderParams::new(enc.clone(), 1).unwrap();
    let template = EncoderParams::new(enc.clone(), 2).unwrap();
    let seqs = tokenize_library(&library, &vocab, enc.max_len).unwrap();
    let bank = build_bank(&template, &seqs, BankSource::Live, 0).unwrap();
    let model = EvalModel {
        product: &product,
        template: &template,
        bank: &bank,
        vocab: &vocab,
        temperature: 0.07,
    };
    let (report, _) = evaluate(&model, &library, &rows, &RewriteEngine, &EvalConfig::e3()).unwrap();
    check_identities(&report, "constructed corpus");
    assert_eq!(report.rows, 100);
    assert_eq!(
        report.empty_prediction_rows, 10,
        "empty rows {}",
        report.empty_prediction_rows
    );
    let top = report.reaction_topk.values().copied().fold(0.0, f64::max);
    assert!(top <= 90.0 + 1e-9, "reaction top-k {top} exceeds 90%");

    let runs = learning_runs();
    for r in runs {
        check_identities(&r.stage1, &format!("seed {} stage 1", r.seed));
        check_identities(&r.stage2, &format!("seed {} stage 2", r.seed));
    }
    format!(
        "constructed corpus: {} empty rows of {}, max reaction top-k {top:.1}%; identities hold on {} learning-run reports",
        report.empty_prediction_rows,
        report.rows,
        2 * runs.len() + 1
    )
}

fn variant_contracts() -> String {
    let fx = corpus(12, 120, 5);
    let enc = tiny_encoder(fx.vocab.size(), 4);
    let data = Stage2Data::build(&fx.records, &fx.library, &fx.vocab, enc.max_len).unwrap();
    let cfg = TrainConfig {
        batch_size: 8,
        micro_batch: 4,
        accum_steps: 2,
        lr_product: 5e-3,
        lr_template: 5e-3,
        warmup_steps: 2,
        epochs: 2,
        seed: 11,
        candidates: CandidateConfig {
            size: 8,
            in_batch_cap: 3,
            hard_pool: 6,
        },
        ..TrainConfig::default()
    };
    let towers = DualEncoder::new(enc, 4).unwrap();

    let frozen = run_stage2(&data, &towers, &Stage2Flags::frozen(), &cfg, Stage2Options::default()).unwrap();
    assert!(
        frozen
            .towers
            .template
            .data
            .iter()
            .zip(&towers.template.data)
            .all(|(a, b)| a.to_bits() == b.to_bits()),
        "frozen template tower changed"
    );
    assert_ne!(
        frozen.towers.product.data, towers.product.data,
        "product tower did not train"
    );

    let ema = run_stage2(&data, &towers, &Stage2Flags::ema(3), &cfg, Stage2Options::default()).unwrap();
    let mask = towers.template.trainable_mask(Trainable::TopLayers(3));
    let mut moved_slots = 0;
    for slot in &towers.template.layout().slots {
        let top = matches!(slot.group, ParamGroup::FinalNorm | ParamGroup::Layer(1..=3));
        assert!(slot.range().all(|i| mask[i] == top), "{} mask", slot.name);
        let changed = towers.template.data[slot.range()] != ema.towers.template.data[slot.range()];
        assert!(top || !changed, "{} moved outside the top layers", slot.name);
        moved_slots += changed as usize;
    }
    assert!(moved_slots > 0);

    let alt_cfg = TrainConfig {
        epochs: 6,
        ..cfg.clone()
    };
    let alt = run_stage2(
        &data,
        &towers,
        &Stage2Flags::alternating(2, 1),
        &alt_cfg,
        Stage2Options::default(),
    )
    .unwrap();
    let pattern: String = alt.freeze_pattern.iter().map(|s| s.letter()).collect();
    assert_eq!(pattern, "FFUFFU");

    let bad = Stage2Flags {
        kld: true,
        snapshot: false,
        ..Stage2Flags::ema(3)
    };
    assert!(matches!(
        run_stage2(&data, &towers, &bad, &cfg, Stage2Options::default()),
        Err(Error::InvalidFlags(_))
    ));
    format!("frozen bit-identical; EMA moved {moved_slots} top slots only; ALT 2:1 = {pattern}; KLD without snapshot rejected")
}

fn dedup_equivalence() -> String {
    let fx = corpus(12, 120, 5);
    let enc = tiny_encoder(fx.vocab.size(), 2);
    let data = Stage2Data::build(&fx.records, &fx.library, &fx.vocab, enc.max_len).unwrap();
    let cfg = TrainConfig {
        batch_size: 8,
        micro_batch: 4,
        accum_steps: 2,
        seed: 11,
        candidates: CandidateConfig {
            size: 8,
            in_batch_cap: 3,
            hard_pool: 6,
        },
        ..TrainConfig::default()
    };
    let towers = DualEncoder::new(enc, 4).unwrap();
    let bank = build_bank(&towers.template, &data.templates, BankSource::Snapshot, 0).unwrap();
    let mut worst = 0.0f64;
    let mut min_overlap = 1.0f64;
    let mut batches = 0;
    for start in (0..data.products.len().saturating_sub(8)).step_by(8).take(6) {
        for teacher in [None, Some(&bank)] {
            let ids: Vec<usize> = (start..start + 8).collect();
            let inputs = StepInputs {
                data: &data,
                product_ids: &ids,
                bank: &bank,
                teacher,
                frozen_templates: None,
                epoch: 0,
                step: start,
                product_trainable: true,
                template_trainable: true,
            };
            let fast = train_step_stage2(&towers, &inputs, &cfg).unwrap();
            let naive = naive_step(&towers, &data, &ids, &bank, teacher, start, &cfg);
            let slots = ids.len() * cfg.candidates.size;
            let overlap = 1.0 - fast.unique_templates.len() as f64 / slots as f64;
            assert!(overlap >= 0.5, "overlap {overlap:.2} below 50%");
            min_overlap = min_overlap.min(overlap);
            worst = worst
                .max((fast.loss - naive.loss).abs())
                .max(max_abs_diff(&fast.grad_product, &naive.grad_product))
                .max(max_abs_diff(&fast.grad_template, &naive.grad_template));
            batches += 1;
        }
    }
    assert!(worst < 1e-6, "max abs diff {worst:e}");
    format!(
        "{batches} batches, min overlap {:.0}%, max abs diff {worst:.1e}",
        100.0 * min_overlap
    )
}

struct LearningRun {
    seed: u64,
    stage1: EvalReport,
    stage2: EvalReport,
}

const LEARNING_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

/// Stage 1 then Stage 2 Frozen-TE on a 2,000-reaction corpus per seed,
/// both evaluated on the test split; Stage 1 also scores the classifier.
fn learning_runs() -> &'static [LearningRun] {
    static RUNS: OnceLock<Vec<LearningRun>> = OnceLock::new();
    RUNS.get_or_init(|| LEARNING_SEEDS.iter().map(|&s| learning_run(s)).collect())
}

fn learning_run(seed: u64) -> LearningRun {
    let gen = GeneratorConfig {
        n_templates: 200,
        n_reactions: 2000,
        seed,
        ..GeneratorConfig::default()
    };
    let (records, mut library) = generate_corpus(&gen, &RewriteEngine).unwrap();
    let splits = curate(&records, &mut library, &RewriteEngine, 4).unwrap();
    let vocab = corpus_vocab(&splits.all(), &library).unwrap();
    let enc = EncoderConfig::desk(vocab.size());
    let cfg = TrainConfig {
        seed,
        ..TrainConfig::desk()
    };
    let s1_data = Stage1Data::build(&splits.train, &library, &vocab, enc.max_len).unwrap();
    let s1 = run_stage1(&s1_data, DualEncoder::new(enc.clone(), seed).unwrap(), &cfg).unwrap();
    let s2_data = Stage2Data::build(&splits.train, &library, &vocab, enc.max_len).unwrap();
    let s2 = run_stage2(
        &s2_data,
        &s1.towers,
        &Stage2Flags::frozen(),
        &cfg,
        Stage2Options::default(),
    )
    .unwrap();

    let eval_cfg = EvalConfig::e3();
    let s1_bank = build_bank(&s1.towers.template, &s1_data.templates, BankSource::Live, 0).unwrap();
    let m1 = EvalModel {
        product: &s1.towers.product,
        template: &s1.towers.template,
        bank: &s1_bank,
        vocab: &vocab,
        temperature: cfg.temperature,
    };
    let (mut stage1, _) = evaluate(&m1, &library, &splits.test, &RewriteEngine, &eval_cfg).unwrap();
    stage1.classifier_buckets = Some(
        classifier_buckets(
            &s1.towers.product,
            &vocab,
            &splits.train,
            &splits.test,
            library.frequencies(),
            &eval_cfg.k_list,
            &ClassifierConfig {
                seed,
                ..ClassifierConfig::default()
            },
        )
        .unwrap(),
    );
    let m2 = EvalModel {
        product: &s2.towers.product,
        template: &s2.towers.template,
        bank: &s2.bank,
        vocab: &vocab,
        temperature: cfg.temperature,
    };
    let (stage2, _) = evaluate(&m2, &library, &splits.test, &RewriteEngine, &eval_cfg).unwrap();
    LearningRun { seed, stage1, stage2 }
}

fn learning_signal() -> String {
    let mut wins = 0;
    let mut lines = Vec::new();
    for r in learning_runs() {
        let (a, b) = (
            r.stage1.template_retrieval_topk[&1],
            r.stage2.template_retrieval_topk[&1],
        );
        wins += (b > a) as usize;
        lines.push(format!("seed {} {a:.1}->{b:.1}", r.seed));
    }
    let detail = format!("TRetr@1 stage1->stage2: {}; {wins}/5 improved", lines.join(", "));
    assert!(wins >= 4, "{detail}");
    detail
}

fn long_tail() -> String {
    let k = 10;
    let mut wins = 0;
    let mut lines = Vec::new();
    for r in learning_runs() {
        let clf = r.stage1.classifier_buckets.as_ref().unwrap();
        let get = |m: &BTreeMap<Bucket, retrorank::evaluation::BucketResult>, b: Bucket| {
            m.get(&b).map(|x| x.template_topk[&k]).unwrap_or(0.0)
        };
        let (rt, ct) = (get(&r.stage1.buckets, Bucket::Tail), get(clf, Bucket::Tail));
        let (ru, cu) = (get(&r.stage1.buckets, Bucket::Unseen), get(clf, Bucket::Unseen));
        let ok = rt > ct && ru > 0.0 && cu == 0.0;
        wins += ok as usize;
        lines.push(format!(
            "seed {} tail {rt:.1} vs {ct:.1}, unseen {ru:.1} vs {cu:.1}",
            r.seed
        ));
    }
    let detail = format!("@{k} retrieval vs classifier: {}; {wins}/5 hold", lines.join("; "));
    assert!(wins >= 4, "{detail}");
    detail
}

fn leakage() -> String {
    let gen = GeneratorConfig {
        n_templates: 80,
        n_reactions: 800,
        leak_fraction: 0.05,
        seed: 9,
        ..GeneratorConfig::default()
    };
    let (records, mut library) = generate_corpus(&gen, &RewriteEngine).unwrap();
    let splits = curate(&records, &mut library, &RewriteEngine, 4).unwrap();
    let held: BTreeSet<_> = splits
        .val
        .iter()
        .chain(&splits.test)
        .filter_map(|r| reaction_signature(r).ok())
        .collect();
    let hits = splits
        .train
        .iter()
        .filter(|r| reaction_signature(r).is_ok_and(|s| held.contains(&s)))
        .count();
    assert_eq!(hits, 0, "{hits} train rows still overlap holdouts");
    assert!(splits.leakage.union_removed > 0, "corpus had no leakage to remove");

    // Train rows 0 and 1 overlap both holdouts, row 2 only the first.
    let rec = |id: u64, product: &str, split: Split| ReactionRecord {
        id,
        product: product.into(),
        reactants: vec!["C".into(), "O".into()],
        template_id: 0,
        template_raw: "CO>>C.O".into(),
        split,
    };
    let train = vec![
        rec(0, "xCOy", Split::Train),
        rec(1, "xCOy[3]", Split::Train),
        rec(2, "zCO", Split::Train),
        rec(3, "wCO", Split::Train),
    ];
    let a = vec![rec(10, "xCOy", Split::Val), rec(11, "zCO", Split::Val)];
    let b = vec![rec(20, "xCOy", Split::Test)];
    let (kept, report) = remove_leakage(&train, &[("a", &a), ("b", &b)]);
    let per_set: usize = report.per_holdout.iter().map(|h| h.removed).sum();
    assert_eq!(kept.len(), 1);
    assert_eq!(report.union_removed, 3);
    assert_eq!(per_set, 5);
    assert!(per_set > report.union_removed);
    format!(
        "generated corpus: {} leaked rows removed, 0 remaining overlaps; constructed case per-set sum {per_set} > union {}",
        splits.leakage.union_removed, report.union_removed
    )
}

fn pipeline_bytes() -> (Vec<u8>, String, String) {
    let gen = GeneratorConfig {
        n_templates: 40,
        n_reactions: 300,
        seed: 12,
        ..GeneratorConfig::default()
    };
    let (records, mut library) = generate_corpus(&gen, &RewriteEngine).unwrap();
    let splits = curate(&records, &mut library, &RewriteEngine, 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.jsonl");
    write_jsonl(&path, &splits.all()).unwrap();
    let dataset = std::fs::read(&path).unwrap();
    let vocab = corpus_vocab(&splits.all(), &library).unwrap();
    let enc = tiny_encoder(vocab.size(), 2);
    let cfg = TrainConfig {
        epochs: 2,
        seed: 12,
        ..TrainConfig::desk()
    };
    let s1_data = Stage1Data::build(&splits.train, &library, &vocab, enc.max_len).unwrap();
    let s1 = run_stage1(&s1_data, DualEncoder::new(enc.clone(), 12).unwrap(), &cfg).unwrap();
    let s2_data = Stage2Data::build(&splits.train, &library, &vocab, enc.max_len).unwrap();
    let s2 = run_stage2(
        &s2_data,
        &s1.towers,
        &Stage2Flags::ema(1),
        &cfg,
        Stage2Options::default(),
    )
    .unwrap();
    let mut metrics = metrics_to_jsonl(&s1.metrics).unwrap();
    metrics.push_str(&metrics_to_jsonl(&s2.metrics).unwrap());
    let model = EvalModel {
        product: &s2.towers.product,
        template: &s2.towers.template,
        bank: &s2.bank,
        vocab: &vocab,
        temperature: cfg.temperature,
    };
    let (report, _) = evaluate(&model, &library, &splits.test, &RewriteEngine, &EvalConfig::f3()).unwrap();
    (dataset, metrics, serde_json::to_string(&report).unwrap())
}

fn reproducibility() -> String {
    let a = pipeline_bytes();
    let b = pipeline_bytes();
    assert!(a.0 == b.0, "dataset bytes differ");
    assert!(a.1 == b.1, "metrics log differs");
    assert!(a.2 == b.2, "evaluation report differs");
    format!(
        "dataset {} B, metrics {} B, report {} B identical across reruns",
        a.0.len(),
        a.1.len(),
        a.2.len()
    )
}
