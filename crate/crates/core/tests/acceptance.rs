//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed. Set `KPT_BLESS=1` to rewrite the ablation
//! prompt snapshots.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use kpt::augment::{punish_and_retry, AugmentError, PTKeywordDatabase, PunishmentConfig};
use kpt::clustering::{kmeans, MAX_CLUSTERS};
use kpt::dialogue::{
    records_from_jsonl, records_to_jsonl, Attempt, AugmentationRecord, Corpus, Dialogue, Language, PostProcessor, Speaker,
    SpeakerAliases, Verdict,
};
use kpt::knowledge::{generate_knowledge, KShotBlock};
use kpt::metrics::{bleu_n, distinct_n, evaluate_corpus};
use kpt::pipeline::{mock_providers, request_snapshot, Augmenter, PipelineConfig};
use kpt::prompts::{PromptTemplateRegistry, Prompter};
use kpt::providers::mock::{ScriptedChat, SequenceSimilarity, StaticKnowledgeGraph};
use kpt::providers::{ChatProvider, ChatRequest, Decoding, EmbeddingVector, KnowledgeEntry, ProviderError};
use kpt::thought::{
    build_progressive_prompt, build_thought_database, match_by_text, match_combinations, DialogueThoughtCombination,
    ThoughtDatabase, ThoughtEntry, ThoughtStep,
};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<(), String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Outcome {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/basic")
}

fn fixture_corpus() -> Corpus {
    let bytes = std::fs::read(fixture().join("corpus.jsonl")).expect("fixture corpus");
    Corpus::from_jsonl("corpus", &bytes, &SpeakerAliases::default()).expect("fixture corpus parses")
}

// ---------------------------------------------------------------------------
// 1. metric oracle

/// Reference BLEU: n-grams keyed as joined strings, clipped counts, product
/// of precisions raised to 1/n.
fn oracle_bleu(cands: &[Vec<String>], refs: &[Vec<String>], n: usize) -> f64 {
    let grams = |toks: &[String], k: usize| -> BTreeMap<String, u64> {
        let mut m = BTreeMap::new();
        if toks.len() >= k {
            for i in 0..=toks.len() - k {
                *m.entry(toks[i..i + k].join("\u{1}")).or_insert(0) += 1;
            }
        }
        m
    };
    let mut product = 1.0f64;
    for k in 1..=n {
        let (mut hit, mut all) = (0u64, 0u64);
        for (c, r) in cands.iter().zip(refs) {
            let rg = grams(r, k);
            for (g, cnt) in grams(c, k) {
                hit += cnt.min(*rg.get(&g).unwrap_or(&0));
                all += cnt;
            }
        }
        if hit == 0 {
            return 0.0;
        }
        product *= hit as f64 / all as f64;
    }
    let c: usize = cands.iter().map(Vec::len).sum();
    let r: usize = refs.iter().map(Vec::len).sum();
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    100.0 * bp * product.powf(1.0 / n as f64)
}

fn random_sentence(rng: &mut ChaCha8Rng) -> Vec<String> {
    const VOCAB: [&str; 8] = ["我", "很", "难过", "sleep", "work", "家", "the", "累"];
    let len = rng.random_range(4..16);
    (0..len).map(|_| VOCAB[rng.random_range(0..VOCAB.len())].to_string()).collect()
}

fn split(s: &str) -> Vec<String> {
    kpt::text::tokenize(s).into_iter().map(str::to_string).collect()
}

fn criterion_metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..20 {
        let c = random_sentence(&mut rng);
        let r = random_sentence(&mut rng);
        for n in 1..=4 {
            let got = bleu_n(std::slice::from_ref(&c), std::slice::from_ref(&r), n).map_err(|e| e.to_string())?;
            let want = oracle_bleu(std::slice::from_ref(&c), std::slice::from_ref(&r), n);
            ensure((got - want).abs() <= 1e-6, || format!("pair {case} BLEU-{n}: {got} vs oracle {want}"))?;
        }
    }
    // hand-enumerated Distinct fixtures: (texts, n, unique, total)
    let fixtures: [(&[&str], usize, usize, usize); 10] = [
        (&["a b a"], 1, 2, 3),
        (&["a b c"], 2, 2, 2),
        (&["a b", "a b"], 1, 2, 4),
        (&["a b", "a b"], 2, 1, 2),
        (&["我很好"], 1, 3, 3),
        (&["我很好", "我很累"], 1, 4, 6),
        (&["我很好", "我很累"], 2, 3, 4),
        (&["a a a a"], 2, 1, 3),
        (&["x", "y z"], 2, 1, 1),
        (&["I feel low", "I feel fine", "low"], 2, 3, 4),
    ];
    for (i, (texts, n, unique, total)) in fixtures.iter().enumerate() {
        let corpus: Vec<Vec<String>> = texts.iter().map(|t| split(t)).collect();
        let got = distinct_n(&corpus, *n).map_err(|e| e.to_string())?;
        let want = 100.0 * *unique as f64 / *total as f64;
        ensure(got == want, || format!("distinct fixture {i}: {got} vs {want}"))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// 2. identity metrics

fn criterion_identity_metrics() -> Outcome {
    let corpus = fixture_corpus();
    let report = evaluate_corpus(&corpus, &corpus).map_err(|e| e.to_string())?;
    ensure(report.bleu == [100.0; 4], || format!("fixture corpus BLEU {:?}", report.bleu))?;
    let turns: Vec<Vec<String>> = corpus.dialogues().iter().flat_map(|d| d.turns().iter().map(|u| split(&u.text))).collect();
    ensure(report.distinct[0] == distinct_n(&turns, 1).unwrap(), || "distinct differs from original".into())?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for i in 0..20 {
        let dialogues: Vec<Dialogue> = (0..rng.random_range(1..6))
            .map(|j| {
                let turns: Vec<(Speaker, String)> = (0..rng.random_range(2..6))
                    .map(|t| (if t % 2 == 0 { Speaker::Patient } else { Speaker::Therapist }, random_sentence(&mut rng).join(" ")))
                    .collect();
                Dialogue::new(format!("r{j}"), Language::En, turns).unwrap()
            })
            .collect();
        let c = Corpus::new("r", dialogues).unwrap();
        let report = evaluate_corpus(&c, &c).map_err(|e| e.to_string())?;
        ensure(report.bleu == [100.0; 4], || format!("random corpus {i}: BLEU {:?}", report.bleu))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// 3. punishment loop trace

#[derive(Debug, PartialEq)]
struct Step {
    verdict: Verdict,
    similarity: Option<f64>,
    injected: Option<String>,
}

/// Straight-line model of the loop: scored attempts 1..=max_retries+1,
/// injection from the second attempt on, fallback after the last rejection.
fn simulate(scores: &[f64], parse_fail: &[bool], cfg: &PunishmentConfig, keywords: &[String], seed: u64) -> (Vec<Step>, bool) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut steps = Vec::new();
    let mut next_score = 0;
    let mut call = 0;
    let mut n = 1;
    while n <= cfg.max_retries + 1 {
        let injected = if n >= 2 && !keywords.is_empty() {
            Some(keywords[rng.random_range(0..keywords.len())].clone())
        } else {
            None
        };
        let failed = parse_fail.get(call).copied().unwrap_or(false);
        call += 1;
        if failed {
            steps.push(Step { verdict: Verdict::ParseFailed, similarity: None, injected });
            n += 1;
            continue;
        }
        let s = scores[next_score];
        next_score += 1;
        if s > cfg.upper_threshold {
            steps.push(Step { verdict: Verdict::TooSimilar, similarity: Some(s), injected });
        } else if s < cfg.lower_threshold {
            steps.push(Step { verdict: Verdict::TooDivergent, similarity: Some(s), injected });
        } else {
            steps.push(Step { verdict: Verdict::Accepted, similarity: Some(s), injected });
            return (steps, false);
        }
        n += 1;
    }
    steps.push(Step { verdict: Verdict::Fallback, similarity: None, injected: None });
    (steps, true)
}

fn two_turns() -> Dialogue {
    Dialogue::new("s", Language::En, [(Speaker::Patient, "hello"), (Speaker::Therapist, "hi")]).unwrap()
}

fn run_loop(scores: &[f64], parse_fail: &[bool], cfg: &PunishmentConfig, keywords: &[String], seed: u64) -> Result<AugmentationRecord, AugmentError> {
    let db = PTKeywordDatabase::new(keywords.to_vec());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut call = 0;
    let source = two_turns();
    punish_and_retry(
        &source,
        |_, fallback| {
            if fallback {
                return Ok(two_turns());
            }
            let failed = parse_fail.get(call).copied().unwrap_or(false);
            call += 1;
            if failed {
                Err(AugmentError::Parse("scripted".into()))
            } else {
                Ok(two_turns())
            }
        },
        &SequenceSimilarity::new(scores.iter().copied()),
        cfg,
        db.as_ref(),
        &mut rng,
    )
}

fn criterion_punishment_trace() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let specials = [0.35, 0.90, 0.349, 0.901, 0.0, 1.0];
    for case in 0..200 {
        let lower = rng.random_range(0.0..0.5);
        let upper = rng.random_range(lower + 0.01..=1.0);
        let cfg = PunishmentConfig { lower_threshold: lower, upper_threshold: upper, max_retries: rng.random_range(0..6), seed: 0 };
        let cfg = if case % 4 == 0 { PunishmentConfig { max_retries: cfg.max_retries, ..PunishmentConfig::default() } } else { cfg };
        let len = cfg.max_retries + 1;
        let scores: Vec<f64> = (0..len)
            .map(|_| if rng.random_bool(0.3) { specials[rng.random_range(0..specials.len())] } else { rng.random::<f64>() })
            .collect();
        let parse_fail: Vec<bool> = (0..len).map(|_| rng.random_bool(0.15)).collect();
        let keywords: Vec<String> = (0..rng.random_range(0..4)).map(|i| format!("kw{i}")).collect();
        let seed = rng.random::<u64>();
        let record = run_loop(&scores, &parse_fail, &cfg, &keywords, seed).map_err(|e| format!("case {case}: {e}"))?;
        let got: Vec<Step> = record
            .attempts
            .iter()
            .map(|a| Step { verdict: a.verdict, similarity: a.similarity, injected: a.injected_keyword.clone() })
            .collect();
        let (want, fallback) = simulate(&scores, &parse_fail, &cfg, &keywords, seed);
        ensure(got == want, || format!("case {case}: trace {got:?} != simulation {want:?}"))?;
        ensure(record.fallback_used == fallback, || format!("case {case}: fallback flag"))?;
    }
    let cfg = PunishmentConfig::default();
    for (s, accepted) in [(0.35, true), (0.90, true), (0.349, false), (0.901, false)] {
        let record = run_loop(&[s, 0.5, 0.5, 0.5], &[], &cfg, &[], 0).map_err(|e| e.to_string())?;
        ensure((record.attempts[0].verdict == Verdict::Accepted) == accepted, || format!("boundary {s}"))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// 4. prompt budget

fn sized_step(rng: &mut ChaCha8Rng, tokens: usize) -> ThoughtStep {
    // patient words + "x<thought_prior>t<thought_next>h": one token per word
    let words: Vec<String> = (0..tokens.max(1)).map(|_| ["w", "v", "我", "u"][rng.random_range(0..4)].to_string()).collect();
    ThoughtStep::new(words.join(" "), "t", "h").unwrap()
}

fn criterion_prompt_budget() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let registry = PromptTemplateRegistry::default();
    let vocab = ["a", "b", "c", "d", "e", "f"];
    for case in 0..500 {
        let size = rng.random_range(3..12);
        let entries: Vec<ThoughtEntry> = (0..size)
            .map(|i| {
                let scale = [50, 400, 900, 1500][rng.random_range(0..4)];
                let tokens = rng.random_range(1..=scale);
                let count = rng.random_range(1..4);
                let kw: Vec<String> = vocab.choose_multiple(&mut rng, count).map(|s| s.to_string()).collect();
                ThoughtEntry {
                    combination: DialogueThoughtCombination::new(vec![], sized_step(&mut rng, tokens)).unwrap(),
                    keywords: kw,
                    source_id: format!("s{i}"),
                }
            })
            .collect();
        let db = ThoughtDatabase { entries };
        let candidates: Vec<String> = vocab.choose_multiple(&mut rng, 2).map(|s| s.to_string()).collect();
        let ranked = match match_combinations(&candidates, &db) {
            Ok(r) => r,
            Err(_) => match_by_text(&candidates, &db),
        };
        let top: Vec<&ThoughtEntry> = ranked.iter().take(3).map(|r| &db.entries[r.index]).collect();
        let prompt = build_progressive_prompt(&top, 1000, &registry).map_err(|e| e.to_string())?;
        let lens: Vec<usize> = top.iter().map(|e| kpt::text::token_count(&e.combination.serialize())).collect();
        let sum = |n: usize| lens[..n.min(lens.len())].iter().sum::<usize>();
        let rule = (prompt.combinations == 3 && prompt.token_count < 1000)
            || prompt.combinations == 2
            || (prompt.combinations == 1 && (lens.len() < 2 || sum(2) > 2000));
        ensure(rule, || format!("case {case}: {} combinations, {} tokens, lengths {lens:?}", prompt.combinations, prompt.token_count))?;
        // the choice is also the unique one the rule allows
        let expected = if lens.len() >= 3 && sum(3) < 1000 {
            3
        } else if lens.len() >= 2 && sum(2) <= 2000 {
            2
        } else {
            1
        };
        ensure(prompt.combinations == expected, || format!("case {case}: chose {} expected {expected}", prompt.combinations))?;
        ensure(prompt.token_count == sum(prompt.combinations), || format!("case {case}: token count"))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// 5. round-trips

const CHARS: &[char] = &['a', 'Z', '9', ' ', '我', '很', '？', '！', '<', '>', '"', '\\', '\t', 'é', '😀', ',', ':', '{', '}', 'k'];

fn random_text(rng: &mut ChaCha8Rng, allow_newline: bool) -> String {
    loop {
        let len = rng.random_range(1..20);
        let mut s: String = (0..len).map(|_| CHARS[rng.random_range(0..CHARS.len())]).collect();
        if allow_newline && rng.random_bool(0.2) {
            s.push('\n');
            s.push('x');
        }
        let t = s.trim().to_string();
        if !t.is_empty() && !t.contains("<thought_prior>") && !t.contains("<thought_next>") && (allow_newline || !t.contains(['\n', '\t'])) {
            return t;
        }
    }
}

fn random_dialogue(rng: &mut ChaCha8Rng, id: String) -> Dialogue {
    let lang = if rng.random_bool(0.5) { Language::Zh } else { Language::En };
    let turns: Vec<(Speaker, String)> = (0..rng.random_range(2..7))
        .map(|_| (if rng.random_bool(0.5) { Speaker::Patient } else { Speaker::Therapist }, random_text(rng, true)))
        .collect();
    Dialogue::new(id, lang, turns).unwrap()
}

fn random_combination(rng: &mut ChaCha8Rng) -> DialogueThoughtCombination {
    fn step(rng: &mut ChaCha8Rng) -> ThoughtStep {
        ThoughtStep::new(random_text(rng, false), random_text(rng, false), random_text(rng, false)).unwrap()
    }
    let prior: Vec<ThoughtStep> = (0..rng.random_range(0..=3)).map(|_| step(rng)).collect();
    DialogueThoughtCombination::new(prior, step(rng)).unwrap()
}

fn criterion_round_trips() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for i in 0..1000 {
        let c = random_combination(&mut rng);
        let back = DialogueThoughtCombination::parse(&c.serialize()).map_err(|e| format!("combination {i}: {e}"))?;
        ensure(back == c, || format!("combination {i} differs"))?;
    }
    let aliases = SpeakerAliases::default();
    for i in 0..1000 {
        let dialogues: Vec<Dialogue> = (0..rng.random_range(1..4)).map(|j| random_dialogue(&mut rng, format!("d{i}-{j}"))).collect();
        let corpus = Corpus::new("rt", dialogues).unwrap();
        let back = Corpus::from_jsonl("rt", &corpus.to_jsonl(), &aliases).map_err(|e| format!("corpus {i}: {e}"))?;
        ensure(back == corpus, || format!("corpus {i} differs"))?;
    }
    for i in 0..1000 {
        let entries: Vec<ThoughtEntry> = (0..rng.random_range(1..4))
            .map(|j| ThoughtEntry {
                combination: random_combination(&mut rng),
                keywords: (0..rng.random_range(1..4)).map(|_| random_text(&mut rng, false)).collect(),
                source_id: format!("s{j}"),
            })
            .collect();
        let db = ThoughtDatabase { entries };
        let text = String::from_utf8(db.to_jsonl()).unwrap();
        let back = ThoughtDatabase::from_jsonl(&text).map_err(|e| format!("database {i}: {e}"))?;
        ensure(back == db, || format!("database {i} differs"))?;
    }
    let verdicts = [Verdict::Accepted, Verdict::TooSimilar, Verdict::TooDivergent, Verdict::ParseFailed, Verdict::Fallback];
    for i in 0..1000 {
        let records: Vec<AugmentationRecord> = (0..rng.random_range(1..3))
            .map(|j| {
                let attempts: Vec<Attempt> = (0..rng.random_range(1..6))
                    .map(|_| Attempt {
                        similarity: rng.random_bool(0.8).then(|| rng.random::<f64>()),
                        verdict: verdicts[rng.random_range(0..verdicts.len())],
                        injected_keyword: rng.random_bool(0.5).then(|| random_text(&mut rng, false)),
                        generated: rng.random_bool(0.5).then(|| random_dialogue(&mut rng, format!("g{j}"))),
                    })
                    .collect();
                AugmentationRecord {
                    source_id: format!("s{j}"),
                    attempts,
                    fallback_used: rng.random_bool(0.5),
                    final_dialogue: random_dialogue(&mut rng, format!("s{j}")),
                }
            })
            .collect();
        let text = String::from_utf8(records_to_jsonl(&records)).unwrap();
        let back = records_from_jsonl(&text).map_err(|e| format!("records {i}: {e}"))?;
        ensure(back == records, || format!("records {i} differ"))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// 6. chain cap

fn criterion_chain_cap() -> Outcome {
    let chat = ScriptedChat::new().on_contains("### task: keywords", "k1, k2").with_default("a thought");
    let registry = PromptTemplateRegistry::default();
    let decoding = Decoding::default();
    let prompter = Prompter::new(&chat, &registry, &decoding);
    let post = PostProcessor::default();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for lead in [false, true] {
        let dialogues: Vec<Dialogue> = (1..=10)
            .map(|pairs| {
                let mut turns: Vec<(Speaker, String)> = Vec::new();
                if lead {
                    turns.push((Speaker::Therapist, "welcome".into()));
                }
                for p in 0..pairs {
                    turns.push((Speaker::Patient, format!("p{pairs}-{p} {}", rng.random::<u16>())));
                    turns.push((Speaker::Therapist, format!("t{pairs}-{p}")));
                }
                Dialogue::new(format!("d{pairs}"), Language::En, turns).unwrap()
            })
            .collect();
        let corpus = Corpus::new("chain", dialogues).unwrap();
        let (db, _) = build_thought_database(&corpus, &prompter, &post, 2).map_err(|e| e.to_string())?;
        ensure(db.len() == 55, || format!("expected 55 entries, got {}", db.len()))?;
        let mut per_source: HashMap<&str, Vec<&ThoughtEntry>> = HashMap::new();
        for e in &db.entries {
            ensure(e.combination.chain_depth() <= 3, || format!("{} has depth {}", e.source_id, e.combination.chain_depth()))?;
            per_source.entry(e.source_id.as_str()).or_default().push(e);
        }
        for entries in per_source.values() {
            for (i, e) in entries.iter().enumerate() {
                let depth = e.combination.chain_depth();
                ensure(depth == i.min(3), || format!("{}: entry {i} depth {depth}", e.source_id))?;
                let expected: Vec<&ThoughtStep> = entries[i - depth..i].iter().map(|p| p.combination.current()).collect();
                let got: Vec<&ThoughtStep> = e.combination.prior().iter().collect();
                ensure(got == expected, || format!("{}: entry {i} chains the wrong steps", e.source_id))?;
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// 7. clustering

fn criterion_clustering() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..50 {
        let dim = rng.random_range(2..8);
        let radius = rng.random_range(0.1..2.0);
        let center_a: Vec<f64> = (0..dim).map(|_| rng.random_range(-50.0..50.0)).collect();
        let dir: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0f64)).collect();
        let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
        let sep = radius * rng.random_range(10.0..30.0);
        let center_b: Vec<f64> = center_a.iter().zip(&dir).map(|(c, d)| c + d / norm * sep).collect();
        let mut points = Vec::new();
        let mut truth = Vec::new();
        for (label, center) in [(0usize, &center_a), (1, &center_b)] {
            for _ in 0..rng.random_range(3..20) {
                // uniform in a ball of the given radius
                let offset: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0f64)).collect();
                let n = offset.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
                let r = radius * rng.random::<f64>();
                points.push(EmbeddingVector(center.iter().zip(&offset).map(|(c, o)| c + o / n * r).collect()));
                truth.push(label);
            }
        }
        let seed = rng.random::<u64>();
        let a = kmeans(&points, 2, seed).map_err(|e| e.to_string())?;
        let same = |x: usize, y: usize| truth[x] == truth[y];
        for i in 0..points.len() {
            for j in 0..points.len() {
                ensure((a.labels[i] == a.labels[j]) == same(i, j), || format!("instance {case}: planted partition not recovered"))?;
            }
        }
        for k_max in [1, 5, 6, 12] {
            let b = kmeans(&points, k_max, seed).map_err(|e| e.to_string())?;
            ensure(b.k <= MAX_CLUSTERS && b.k <= k_max, || format!("instance {case}: k = {} for k_max {k_max}", b.k))?;
        }
        let mut order: Vec<usize> = (0..points.len()).collect();
        order.shuffle(&mut rng);
        let shuffled: Vec<EmbeddingVector> = order.iter().map(|i| points[*i].clone()).collect();
        for k_max in [2, 5] {
            let base = kmeans(&points, k_max, seed).unwrap();
            let perm = kmeans(&shuffled, k_max, seed).unwrap();
            for x in 0..points.len() {
                for y in 0..points.len() {
                    let together = base.labels[order[x]] == base.labels[order[y]];
                    ensure((perm.labels[x] == perm.labels[y]) == together, || format!("instance {case}: partition changed under permutation (k_max {k_max})"))?;
                }
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// 8. end-to-end determinism

fn criterion_end_to_end() -> Outcome {
    let golden = fixture().join("golden");
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let fixture_dir = fixture();
    for (run, workers) in [(0, "1"), (1, "1"), (2, "4"), (3, "4")] {
        let out = tmp.path().join(format!("run{run}"));
        let args = ["kpt", "mock-run", "--fixture", fixture_dir.to_str().unwrap(), "--out", out.to_str().unwrap(), "--workers", workers];
        let code = kpt::cli::run(args);
        ensure(code == 0, || format!("run {run} (workers {workers}) exited {code}"))?;
        let diff = kpt::cli::golden_differences(&golden, &out);
        ensure(diff.is_empty(), || format!("run {run} (workers {workers}) differs from golden: {diff:?}"))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// 9. knowledge truncation

/// Returns the scripted reply verbatim, ignoring stop sequences.
struct RawChat(String);

impl ChatProvider for RawChat {
    fn chat(&self, _request: &ChatRequest) -> Result<String, ProviderError> {
        Ok(self.0.clone())
    }
}

fn criterion_knowledge_truncation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let pieces = ["知识", "text", "\n", "\r\n", "\r", "<knowledge>", " ", "\u{2028}", "\u{85}", "\t", "keyword_2", "。", "\n\n"];
    let block = KShotBlock::new(vec![KnowledgeEntry::new("焦虑", "一种情绪").unwrap()]);
    let post = PostProcessor::default();
    let decoding = Decoding::default();
    let mut produced = 0;
    for case in 0..200 {
        let reply: String = (0..rng.random_range(0..12)).map(|_| pieces[rng.random_range(0..pieces.len())]).collect();
        match generate_knowledge(&block, "失眠", &RawChat(reply.clone()), &decoding, &post) {
            Ok(k) => {
                produced += 1;
                ensure(!k.text.contains(['\n', '\r']) && !k.text.is_empty(), || format!("case {case}: {reply:?} -> {:?}", k.text))?;
                ensure(!k.text.chars().any(|c| c.is_whitespace() && c != ' '), || format!("case {case}: {:?} keeps a line break", k.text))?;
                let first = reply.split(['\n', '\r']).next().unwrap_or("");
                ensure(k.text == post.process(first), || format!("case {case}: {reply:?} -> {:?} is not the first line", k.text))?;
            }
            Err(kpt::knowledge::KnowledgeError::EmptyKnowledge) => {}
            Err(e) => return Err(format!("case {case}: {e}")),
        }
    }
    ensure(produced > 50, || format!("only {produced} non-empty cases"))
}

// ---------------------------------------------------------------------------
// 10. ablation prompt snapshots

const SNAPSHOT_DIALOGUE: &str = "csconv-001";

fn first_request(disable: (bool, bool, bool)) -> Result<ChatRequest, String> {
    let fixture = fixture();
    let mut config = PipelineConfig::from_json(&std::fs::read_to_string(fixture.join("config.json")).unwrap()).map_err(|e| e.to_string())?;
    config.ablation.disable_thought = disable.0;
    config.ablation.disable_knowledge = disable.1;
    config.ablation.disable_punishment = disable.2;
    let kg = StaticKnowledgeGraph::from_json(&std::fs::read_to_string(fixture.join("kg.json")).unwrap()).unwrap();
    let corpus = fixture_corpus();
    let providers = mock_providers(kg);
    let registry = PromptTemplateRegistry::default();
    let decoding = Decoding::default();
    let db = {
        let prompter = Prompter::new(providers.chat.as_ref(), &registry, &decoding);
        build_thought_database(&corpus, &prompter, &PostProcessor::default(), 1).map_err(|e| e.to_string())?.0
    };
    let augmenter = Augmenter::new(config, providers, db).map_err(|e| e.to_string())?;
    let source = corpus.get(SNAPSHOT_DIALOGUE).unwrap();
    let prep = augmenter.prepare(source).map_err(|e| e.to_string())?;
    augmenter.first_request(source, &prep).map_err(|e| e.to_string())
}

/// Checks that `smaller` is `larger` with one contiguous block removed, the
/// block starting at the first occurrence of `marker`, and returns the block.
fn removed_block<'a>(larger: &'a str, smaller: &str, marker: &str) -> Option<&'a str> {
    let start = larger.find(marker)?;
    let len = larger.len().checked_sub(smaller.len()).filter(|l| *l > 0)?;
    let end = start + len;
    (smaller.get(..start) == Some(&larger[..start]) && smaller.get(start..) == larger.get(end..)).then(|| &larger[start..end])
}

fn criterion_ablation_snapshots() -> Outcome {
    let variants = [
        ("kpt", (false, false, false)),
        ("no_thought", (true, false, false)),
        ("no_knowledge", (false, true, false)),
        ("no_punishment", (false, false, true)),
    ];
    let dir = fixture().join("prompts");
    let bless = std::env::var("KPT_BLESS").is_ok_and(|v| v == "1");
    let mut requests = BTreeMap::new();
    for (name, flags) in variants {
        let request = first_request(flags)?;
        let snapshot = request_snapshot(&request);
        let path = dir.join(format!("{name}.txt"));
        if bless {
            std::fs::create_dir_all(&dir).unwrap();
            std::fs::write(&path, &snapshot).unwrap();
        }
        let golden = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        ensure(golden == snapshot, || format!("{name} prompt differs from {}", path.display()))?;
        requests.insert(name, request);
    }
    let prompt = |n: &str| requests[n].prompt().to_string();
    let history = |n: &str| requests[n].messages[..requests[n].messages.len() - 1].to_vec();

    ensure(requests["no_punishment"] == requests["kpt"], || "no_punishment prompt differs from kpt".into())?;

    let kpt_prompt = prompt("kpt");
    let block = removed_block(&kpt_prompt, &prompt("no_thought"), "\nProgressive thought:\n").ok_or("no_thought is not kpt minus the thought block")?;
    ensure( !block.contains("<dialogue>") && !block.contains("knowledge"), || format!("no_thought removed {block:?}"))?;
    ensure(history("no_thought") == history("kpt"), || "no_thought changed the history".into())?;

    let block = removed_block(&kpt_prompt, &prompt("no_knowledge"), "\nPsychological knowledge:\n").ok_or("no_knowledge is not kpt minus the knowledge block")?;
    ensure( !block.contains("Progressive thought") && !block.contains("<dialogue>"), || format!("no_knowledge removed {block:?}"))?;
    ensure(!history("kpt").is_empty() && history("no_knowledge").is_empty(), || "no_knowledge should drop exactly the knowledge history".into())?;
    Ok(())
}

fn main() {
    let criteria: [(&str, fn() -> Outcome, Duration); 10] = [
        ("metric oracle equivalence", criterion_metric_oracle, Duration::from_secs(5)),
        ("identity metrics", criterion_identity_metrics, Duration::MAX),
        ("punishment-loop trace equivalence", criterion_punishment_trace, Duration::from_secs(5)),
        ("prompt-budget rule", criterion_prompt_budget, Duration::from_secs(2)),
        ("serialization round-trips", criterion_round_trips, Duration::MAX),
        ("chain cap", criterion_chain_cap, Duration::MAX),
        ("clustering", criterion_clustering, Duration::MAX),
        ("end-to-end determinism", criterion_end_to_end, Duration::from_secs(10)),
        ("knowledge truncation", criterion_knowledge_truncation, Duration::MAX),
        ("ablation prompt snapshots", criterion_ablation_snapshots, Duration::MAX),
    ];
    let mut failed = 0;
    for (i, (name, run, limit)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panicked".into()))
        });
        let elapsed = start.elapsed();
        let outcome = outcome.and_then(|()| {
            ensure(elapsed <= *limit, || format!("took {elapsed:.2?}, limit {limit:?}"))
        });
        match outcome {
            Ok(()) => println!("PASS  {:>2}. {name} ({elapsed:.2?})", i + 1),
            Err(e) => {
                failed += 1;
                println!("FAIL  {:>2}. {name} ({elapsed:.2?}): {e}", i + 1);
            }
        }
    }
    println!("{} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
