//! End-to-end acceptance checks. Runs without the libtest harness so every
//! check prints its verdict line even when it passes:
//!
//! ```text
//! cargo test -p sdtag --test acceptance
//! ```
//! Set `ACCEPTANCE_ONLY=3,7` to run a subset.

use std::collections::HashSet;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sdtag::corpus::{decode_bio, encode_bio, Clause, Corpus, LabelSet, Paragraph};
use sdtag::embeddings::{synthetic_store, EmbeddingStore};
use sdtag::encoder::{attention_matrix, summarize, EmbeddedParagraph, EncoderParams};
use sdtag::featcrf::{decode_featcrf, extract_features, train_featcrf, FeatureVector};
use sdtag::fragments::{decode_blocks, encode_blocks, extract_mentions, BlockTag, CodeSet, FragmentCounts, SubfigureCode};
use sdtag::metrics::{cohen_kappa, mcnemar_counts, micro_f1};
use sdtag::numeric::{grad_check, Tensor};
use sdtag::synthetic::{fragment_corpus, keyword_corpus, random_permutation, relabel};
use sdtag::tagger::crf::{log_partition, path_score, viterbi, Transitions};
use sdtag::tagger::{checkpoint, fit, loss_on_tape, train, TaggerConfig, TaggerModel};
use sdtag::transfer::{fine_tune, learn_label_map};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

fn crf_instances() -> Vec<(Tensor, Transitions)> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    (0..500)
        .map(|_| {
            let n = rng.gen_range(1..=6);
            let k = rng.gen_range(1..=5);
            let em = rand_tensor(&mut rng, &[n, k], 3.0);
            let tr = Transitions {
                scores: rand_tensor(&mut rng, &[k, k], 2.0),
                start: rand_tensor(&mut rng, &[k], 2.0),
                end: rand_tensor(&mut rng, &[k], 2.0),
            };
            (em, tr)
        })
        .collect()
}

/// Every tag path of length `n` over `k` tags with its score, computed
/// directly from the definition.
fn enumerate_paths(em: &Tensor, tr: &Transitions) -> Vec<(Vec<usize>, f64)> {
    let (n, k) = (em.rows(), em.cols());
    let mut out = Vec::new();
    for code in 0..k.pow(n as u32) {
        let path: Vec<usize> = (0..n).map(|t| code / k.pow(t as u32) % k).collect();
        let mut s = tr.start.data()[path[0]] + tr.end.data()[path[n - 1]];
        for t in 0..n {
            s += em.at(t, path[t]);
            if t > 0 {
                s += tr.scores.at(path[t - 1], path[t]);
            }
        }
        out.push((path, s));
    }
    out
}

fn crf_partition() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for (em, tr) in crf_instances() {
        let paths = enumerate_paths(&em, &tr);
        let m = paths.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        let brute = m + paths.iter().map(|p| (p.1 - m).exp()).sum::<f64>().ln();
        let got = log_partition(&em, &tr, &vec![true; em.rows()]).unwrap();
        worst = worst.max((got - brute).abs() / brute.abs().max(1e-300));
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(worst <= 1e-9 && secs < 5.0, format!("max rel err {worst:.2e} over 500 instances, {secs:.2}s"))
}

fn crf_viterbi() -> Outcome {
    let start = Instant::now();
    let mut bad = 0;
    for (em, tr) in crf_instances() {
        let n = em.rows();
        let mask = vec![true; n];
        let best = enumerate_paths(&em, &tr).iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        let path = viterbi(&em, &tr, &mask).unwrap();
        if (path_score(&em, &tr, &path, &mask).unwrap() - best).abs() > 1e-9 * best.abs().max(1.0) {
            bad += 1;
        }
        let zero = Transitions::zeros(em.cols());
        let argmax: Vec<usize> = (0..n)
            .map(|t| (0..em.cols()).fold(0, |b, j| if em.at(t, j) > em.at(t, b) { j } else { b }))
            .collect();
        if viterbi(&em, &zero, &mask).unwrap() != argmax {
            bad += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(bad == 0 && secs < 5.0, format!("{bad} mismatches over 500 instances, {secs:.2}s"))
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let config = TaggerConfig { c: 3, w: 4, d: 6, p: 5, h: 4, d2: 5, hidden: 4, ..TaggerConfig::default() };
    let ls = LabelSet::new("toy", ["a", "b", "none"], "none").unwrap();
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<&str> = (0..3).map(|_| ["a", "b", "none"][rng.gen_range(0..3)]).collect();
        let clauses: Vec<Clause> = labels
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let n = rng.gen_range(1..=4);
                let text: Vec<String> = (0..n).map(|j| format!("w{seed}_{i}_{j}")).collect();
                Clause::from_text(&text.join(" "), Some(l.to_string()))
            })
            .collect();
        let p = Paragraph::new(format!("g{seed}"), clauses, None).unwrap();
        let store = synthetic_store([&p], config.d, seed).unwrap();
        let ep = store.embed(&p, 0..p.len(), config.w).unwrap();
        let gold: Vec<usize> = encode_bio(&labels, &ls).unwrap().into_iter().map(|t| ls.bio_index(t)).collect();
        let mut m = TaggerModel::new(TaggerConfig { seed, ..config.clone() }, ls.clone()).unwrap();
        for t in m.tensors_mut() {
            for v in t.data_mut() {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
        let params: Vec<Tensor> = m.tensors().into_iter().cloned().collect();
        let err = grad_check(|tape, vars| loss_on_tape(tape, vars, &config, &ep, &gold), &params, 1e-4).unwrap();
        worst = worst.max(err);
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(worst <= 1e-4 && secs < 60.0, format!("max rel err {worst:.2e} over 20 seeds, {secs:.2}s"))
}

fn attention_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (d, p, h) = (5, 4, 3);
    let mut failures = Vec::new();
    for trial in 0..50 {
        let mut params = EncoderParams::init(d, p, h, &mut rng);
        for t in params.tensors_mut() {
            for v in t.data_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
        }
        let lens: Vec<usize> = (0..rng.gen_range(1..5)).map(|_| rng.gen_range(1..6)).collect();
        let w = *lens.iter().max().unwrap();
        let pad = rng.gen_range(1..4);
        let build = |width: usize, rng: &mut ChaCha8Rng| {
            let mut data = vec![0.0; lens.len() * width * d];
            let mut mask = vec![false; lens.len() * width];
            for (i, &n) in lens.iter().enumerate() {
                for j in 0..n {
                    mask[i * width + j] = true;
                    for k in 0..d {
                        data[(i * width + j) * d + k] = rng.gen_range(-1.0..1.0);
                    }
                }
            }
            (data, mask)
        };
        let tokens: Vec<Vec<String>> = lens.iter().map(|&n| (0..n).map(|j| format!("t{j}")).collect()).collect();
        let (data, mask) = build(w, &mut rng);
        let ep = EmbeddedParagraph::new(Tensor::new(vec![lens.len(), w, d], data.clone()).unwrap(), mask.clone(), tokens.clone()).unwrap();
        // same content in a wider buffer
        let wide = w + pad;
        let mut wdata = vec![0.0; lens.len() * wide * d];
        let mut wmask = vec![false; lens.len() * wide];
        for i in 0..lens.len() {
            for j in 0..w {
                wmask[i * wide + j] = mask[i * w + j];
                for k in 0..d {
                    wdata[(i * wide + j) * d + k] = data[(i * w + j) * d + k];
                }
            }
        }
        let padded = EmbeddedParagraph::new(Tensor::new(vec![lens.len(), wide, d], wdata).unwrap(), wmask, tokens).unwrap();

        let a = attention_matrix(&ep, &params).unwrap();
        for (i, &n) in lens.iter().enumerate() {
            let row = a.row(i);
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 || row.iter().any(|&v| v < 0.0) || row[n..].iter().any(|&v| v != 0.0) {
                failures.push(format!("trial {trial}: row {i} not in simplex"));
            }
        }
        let b = attention_matrix(&padded, &params).unwrap();
        let (sa, sb) = (summarize(&ep, &a).unwrap(), summarize(&padded, &b).unwrap());
        let same_attn = (0..lens.len()).all(|i| (0..w).all(|j| a.at(i, j).to_bits() == b.at(i, j).to_bits()) && b.row(i)[w..].iter().all(|&v| v == 0.0));
        let same_summary = sa.data().iter().zip(sb.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        if !(same_attn && same_summary) {
            failures.push(format!("trial {trial}: padding changed the output"));
        }

        params.score.data_mut().fill(0.0);
        let u = attention_matrix(&ep, &params).unwrap();
        for (i, &n) in lens.iter().enumerate() {
            if u.row(i)[..n].iter().any(|&v| (v - 1.0 / n as f64).abs() > 1e-12) {
                failures.push(format!("trial {trial}: s=0 row {i} not uniform"));
            }
        }
    }
    let detail = if failures.is_empty() { "50 random encoders: simplex rows, uniform at s=0, bitwise padding invariance".to_string() } else { failures.join("; ") };
    outcome(failures.is_empty(), detail)
}

fn random_code(rng: &mut ChaCha8Rng) -> SubfigureCode {
    let panel = if rng.gen_bool(0.8) { Some((b'a' + rng.gen_range(0..5u8)) as char) } else { None };
    SubfigureCode::new(rng.gen_range(1..=6), panel).unwrap()
}

fn bio_codecs() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ls = LabelSet::scidt();
    let mut label_fail = 0;
    for _ in 0..10_000 {
        let n = rng.gen_range(1..=30);
        let labels: Vec<&str> = (0..n).map(|_| ls.label(rng.gen_range(0..ls.len()))).collect();
        if decode_bio(&encode_bio(&labels, &ls).unwrap(), &ls) != labels {
            label_fail += 1;
        }
    }
    let mut block_fail = 0;
    for _ in 0..10_000 {
        // compliant: adjacent non-empty sets differ, each block mentions its set
        let mut referred: Vec<CodeSet> = Vec::new();
        let mut mentioned: Vec<CodeSet> = Vec::new();
        let mut prev = CodeSet::new();
        for _ in 0..rng.gen_range(1..=6) {
            if rng.gen_bool(0.3) {
                referred.push(CodeSet::new());
                mentioned.push(CodeSet::new());
                prev = CodeSet::new();
                continue;
            }
            let set = loop {
                let s: CodeSet = (0..rng.gen_range(1..=3)).map(|_| random_code(&mut rng)).collect();
                if s != prev {
                    break s;
                }
            };
            let len = rng.gen_range(1..=4);
            let start = referred.len();
            for _ in 0..len {
                referred.push(set.clone());
                mentioned.push(CodeSet::new());
            }
            for code in &set {
                mentioned[start + rng.gen_range(0..len)].insert(*code);
            }
            prev = set;
        }
        if decode_blocks(&encode_blocks(&referred), &mentioned).unwrap() != referred {
            block_fail += 1;
        }
    }
    outcome(label_fail == 0 && block_fail == 0, format!("label round-trip failures {label_fail}/10000, block round-trip failures {block_fail}/10000"))
}

fn block_ceiling() -> Outcome {
    let fx = fragment_corpus(300, 0.1, 6);
    let mut got = FragmentCounts::default();
    for p in &fx.corpus.paragraphs {
        let ann = p.fragment.as_ref().unwrap();
        let mentioned: Vec<CodeSet> = p.clauses.iter().map(|c| extract_mentions(&c.raw_text)).collect();
        got.add(&decode_blocks(&encode_blocks(&ann.referred), &mentioned).unwrap(), &ann.referred).unwrap();
    }
    let (f1, expected) = (got.score().f1, fx.expected.score().f1);
    let pass = f1 == expected && (0.85..=0.95).contains(&f1);
    outcome(pass, format!("gold-BIO decode F1 {f1:.4}, bookkeeping {expected:.4}, {}/{} blocks violating", fx.violating, fx.blocks))
}

fn training_f1(model: &TaggerModel, corpus: &Corpus, store: &EmbeddingStore) -> f64 {
    let mut pred = Vec::new();
    let mut gold = Vec::new();
    for p in &corpus.paragraphs {
        pred.extend(model.tag(p, store).unwrap());
        gold.extend(p.gold_labels().unwrap());
    }
    micro_f1(&pred, &gold).unwrap()
}

fn overfit_config() -> TaggerConfig {
    TaggerConfig { max_epochs: 200, validation_ratio: 0.0, patience: 200, seed: 11, ..TaggerConfig::scaled_down() }
}

fn synthetic_overfit() -> Outcome {
    let ls = LabelSet::scidt();
    let corpus = keyword_corpus(&ls, 20, 7);
    let config = overfit_config();
    let store = synthetic_store(&corpus.paragraphs, config.d, 3).unwrap();
    let start = Instant::now();
    let (model, report) = train(&corpus, &store, &config).unwrap();
    let elapsed = start.elapsed();
    let f1 = training_f1(&model, &corpus, &store);
    let (again, _) = train(&corpus, &store, &config).unwrap();
    let identical = checkpoint::to_bytes(&model).unwrap() == checkpoint::to_bytes(&again).unwrap();
    let pass = f1 >= 0.99 && elapsed < Duration::from_secs(120) && identical;
    outcome(
        pass,
        format!(
            "training micro F1 {f1:.4} after {} epochs (best {}), {:.1}s, repeat run bit-identical: {identical}",
            report.epochs.len(),
            report.best_epoch,
            elapsed.as_secs_f64()
        ),
    )
}

fn fragment_data(corpus: &Corpus, with_tags: bool) -> Vec<(Vec<FeatureVector>, Vec<BlockTag>, Vec<CodeSet>, Vec<CodeSet>)> {
    corpus
        .paragraphs
        .iter()
        .map(|p| {
            let ann = p.fragment.as_ref().unwrap();
            let mentions: Vec<CodeSet> = p.clauses.iter().map(|c| extract_mentions(&c.raw_text)).collect();
            let tags = p.gold_labels().unwrap();
            let fs = extract_features(p, with_tags.then_some(tags.as_slice()), &mentions).unwrap();
            (fs, encode_blocks(&ann.referred), mentions, ann.referred.clone())
        })
        .collect()
}

fn fragment_f1_for(train_c: &Corpus, test_c: &Corpus, with_tags: bool) -> f64 {
    let train_d = fragment_data(train_c, with_tags);
    let pairs: Vec<(Vec<FeatureVector>, Vec<BlockTag>)> = train_d.iter().map(|(f, b, _, _)| (f.clone(), b.clone())).collect();
    let (model, _) = train_featcrf(&pairs, 1.0).unwrap();
    let mut counts = FragmentCounts::default();
    for (fs, _, mentions, gold) in fragment_data(test_c, with_tags) {
        let bio = decode_featcrf(&fs, &model);
        counts.add(&decode_blocks(&bio, &mentions).unwrap(), &gold).unwrap();
    }
    counts.score().f1
}

fn featcrf_ablation() -> Outcome {
    let train_c = fragment_corpus(150, 0.1, 21).corpus;
    let test_c = fragment_corpus(100, 0.1, 22).corpus;
    let with = fragment_f1_for(&train_c, &test_c, true);
    let without = fragment_f1_for(&train_c, &test_c, false);
    outcome(with - without >= 0.05, format!("fragment F1 with tags {with:.4}, without {without:.4}, gap {:.4}", with - without))
}

fn source_config(seed: u64) -> TaggerConfig {
    TaggerConfig { max_epochs: 150, patience: 10, seed, ..TaggerConfig::scaled_down() }
}

fn mapping_recovery() -> Outcome {
    let ls = LabelSet::scidt();
    let mut recovered = 0;
    let mut notes = Vec::new();
    for seed in 0..10u64 {
        let source = keyword_corpus(&ls, 120, 100 + seed);
        let held = keyword_corpus(&ls, 20, 200 + seed);
        let perm = random_permutation(&ls, seed);
        let target = relabel(&keyword_corpus(&ls, 30, 300 + seed), &perm, &ls).unwrap();
        let config = source_config(seed);
        let store = synthetic_store(source.paragraphs.iter().chain(&held.paragraphs).chain(&target.paragraphs), config.d, seed).unwrap();
        let (model, _) = train(&source, &store, &config).unwrap();
        let acc = training_f1(&model, &held, &store);
        let map = learn_label_map(&model, &target, &store).unwrap();
        let ok = acc >= 0.95 && map.mapping == perm;
        recovered += usize::from(ok);
        notes.push(format!("{acc:.3}{}", if ok { "" } else { "!" }));
    }
    outcome(recovered == 10, format!("{recovered}/10 seeds recovered the permutation; held-out source accuracy per seed [{}]", notes.join(" ")))
}

/// B is an independent draw from A's generator; the head is still replaced,
/// so only the encoder and BiLSTM carry over.
fn transfer_benefit() -> Outcome {
    let ls = LabelSet::scidt();
    let mut wins = 0;
    let mut notes = Vec::new();
    for seed in 0..10u64 {
        let a = keyword_corpus(&ls, 120, 400 + seed);
        let b = keyword_corpus(&ls, 100, 500 + seed);
        let config = source_config(seed);
        let store = synthetic_store(a.paragraphs.iter().chain(&b.paragraphs), config.d, seed).unwrap();
        let (pretrained, _) = train(&a, &store, &config).unwrap();
        let one = TaggerConfig { max_epochs: 1, validation_ratio: 0.2, ..config.clone() };
        let (_, tuned) = fine_tune(&pretrained, &b, &store, &one).unwrap();
        let scratch_model = TaggerModel::new(one.clone(), ls.clone()).unwrap();
        let (_, scratch) = fit(scratch_model, &b, &store, &one).unwrap();
        let (t, s) = (tuned.epochs[0].monitor_loss, scratch.epochs[0].monitor_loss);
        wins += usize::from(t < s);
        notes.push(format!("{t:.3}/{s:.3}"));
    }
    outcome(wins >= 8, format!("fine-tuned below scratch on {wins}/10 seeds; epoch-1 validation loss tuned/scratch [{}]", notes.join(" ")))
}

fn metric_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let labels = ["a", "b", "c", "none"];
    let seq: Vec<&str> = (0..500).map(|_| labels[rng.gen_range(0..4)]).collect();
    let k_same = cohen_kappa(&seq, &seq).unwrap();
    let fixed: Vec<&str> = (0..10_000).map(|_| if rng.gen_bool(0.7) { "x" } else { "y" }).collect();
    let indep: Vec<&str> = (0..10_000).map(|_| if rng.gen_bool(0.5) { "x" } else { "y" }).collect();
    let k_indep = cohen_kappa(&fixed, &indep).unwrap();
    let m = mcnemar_counts(10, 0, false);
    let pred: Vec<&str> = seq.iter().map(|&l| if rng.gen_bool(0.6) { l } else { labels[rng.gen_range(0..4)] }).collect();
    let correct = pred.iter().zip(&seq).filter(|(p, g)| p == g).count();
    let f1 = micro_f1(&pred, &seq).unwrap();
    let pass = k_same == 1.0 && k_indep.abs() <= 0.05 && (m.p_value - 0.0044).abs() <= 1e-3 && f1 == correct as f64 / seq.len() as f64;
    outcome(pass, format!("kappa identical {k_same}, independent {k_indep:.4}, McNemar(10,0) stat {:.2} p {:.5}, micro F1 {f1:.4} = accuracy", m.statistic, m.p_value))
}

fn main() -> ExitCode {
    let criteria: [(u32, &str, fn() -> Outcome); 11] = [
        (1, "CRF partition vs enumeration", crf_partition),
        (2, "Viterbi vs enumeration", crf_viterbi),
        (3, "end-to-end gradient check", gradient_suite),
        (4, "attention properties", attention_properties),
        (5, "BIO and block codecs", bio_codecs),
        (6, "gold-BIO block decode ceiling", block_ceiling),
        (7, "synthetic overfit", synthetic_overfit),
        (8, "feature CRF discourse-tag ablation", featcrf_ablation),
        (9, "zero-shot label map recovery", mapping_recovery),
        (10, "metrics", metric_checks),
        (11, "transfer benefit", transfer_benefit),
    ];
    let only: Option<HashSet<u32>> = std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut failed = 0;
    for (id, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let result = run();
        let verdict = if result.pass { "PASS" } else { "FAIL" };
        println!("criterion {id:>2} {verdict} {name}: {} [{:.1}s]", result.detail, start.elapsed().as_secs_f64());
        failed += usize::from(!result.pass);
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    } else {
        println!("all acceptance criteria passed");
        ExitCode::SUCCESS
    }
}
