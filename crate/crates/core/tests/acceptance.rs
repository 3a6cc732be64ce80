//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Set `ACCEPTANCE_ONLY=2,5` to run a subset and `CNN_DATA_DIR` to point the
//! first criterion at a real training directory.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::Rng;

use cloze_core::corpus::{
    build_vocab, candidates, corpus_stats, generate_synthetic, load_corpus_dir, relabel_entities, relabel_map,
    SynthMode, SynthSpec,
};
use cloze_core::eval::{compare_systems, parse_label_file, per_category_report, CategoryLabel};
use cloze_core::features::{featurize_corpus, FeatureGroup, FeaturizedExample};
use cloze_core::par::Execution;
use cloze_core::ranker::{ablation_run, predict_ranker, ranker_accuracy, train_ranker, RankerConfig, RankerModel};
use cloze_core::reader::{
    encode_example, ensemble_predict, forward, loss, predict_reader, reader_accuracy, trace, trace_encoded,
    train_reader, ReaderConfig, ReaderError, ReaderModel, ReaderTraining,
};
use cloze_core::rng::{stream_rng, Stream};
use cloze_core::tensor::grad_check;
use cloze_core::{ClozeExample, EntityId, FeatureConfig};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn synth(mode: SynthMode, n: usize, seed: u64) -> Vec<ClozeExample> {
    generate_synthetic(&SynthSpec::new(mode, n, seed)).expect("synthetic corpus")
}

/// Train / dev / test splits drawn with seeds 1, 2, 3.
struct Splits {
    train: Vec<ClozeExample>,
    dev: Vec<ClozeExample>,
    test: Vec<ClozeExample>,
}

impl Splits {
    fn new(mode: SynthMode) -> Self {
        Splits { train: synth(mode, 5000, 1), dev: synth(mode, 1000, 2), test: synth(mode, 1000, 3) }
    }
}

fn featurize(c: &[ClozeExample]) -> Vec<FeaturizedExample> {
    featurize_corpus(c, &[], &FeatureConfig::default(), Execution::Parallel).expect("featurize")
}

/// Desk-scale reader recipe used by the synthetic-corpus criteria.
fn desk_reader(seed: u64) -> ReaderConfig {
    ReaderConfig {
        embed_dim: 32,
        gru_hidden: 32,
        learning_rate: 1.0,
        batch_size: 8,
        clip_norm: 1.0,
        max_epochs: 10,
        embed_init_scale: 1.0,
        ..ReaderConfig::new(seed)
    }
}

fn small_reader(seed: u64, d: usize, h: usize) -> ReaderConfig {
    ReaderConfig { embed_dim: d, gru_hidden: h, vocab_capacity: 5000, relabel: false, ..ReaderConfig::new(seed) }
}

/// 1,000 examples from generator settings that vary chunk by chunk.
fn random_examples() -> Vec<ClozeExample> {
    let modes = [SynthMode::ExactMatch, SynthMode::Paraphrase, SynthMode::PartialClue];
    let mut out = Vec::new();
    for chunk in 0..10u64 {
        let mut rng = stream_rng(chunk, Stream::Synth, &[7]);
        let mut spec = SynthSpec::new(modes[chunk as usize % 3], 100, 1000 + chunk);
        let ents = rng.random_range(2..=6);
        spec.n_entities_range = (ents, ents + rng.random_range(0..=3));
        let len = rng.random_range(5..=8);
        spec.sentence_len_range = (len, len + rng.random_range(0..=5));
        let needed = (spec.n_entities_range.1 - 1).div_ceil(len - 4);
        let sents = rng.random_range(1..=3usize).max(needed);
        spec.passage_sentences_range = (sents, sents + rng.random_range(0..=4));
        spec.decoy_rate = rng.random_range(0.0..1.0);
        out.extend(generate_synthetic(&spec).expect("varied synthetic spec"));
    }
    out
}

/// Small relabel-free models with O(1) random weights, one per `group` examples.
fn random_models(examples: &[ClozeExample], count: usize) -> Vec<ReaderModel> {
    let mut all: Vec<ClozeExample> = examples.to_vec();
    all.extend(examples.iter().map(relabel_entities));
    let vocab = build_vocab(&all, 5000).expect("vocab");
    (0..count as u64)
        .map(|i| {
            let mut m = ReaderModel::zeros(&small_reader(i, 4 + (i as usize % 3), 3 + (i as usize % 4)), vocab.clone());
            m.fill_uniform([0.1, 0.5, 1.0, 2.0][i as usize % 4], 500 + i);
            m
        })
        .collect()
}

fn c1_cnn_statistics() -> Outcome {
    let Some(dir) = std::env::var_os("CNN_DATA_DIR") else {
        return Ok("optional full-data job not run: CNN_DATA_DIR is unset".into());
    };
    let loaded = load_corpus_dir(Path::new(&dir)).map_err(e2s)?;
    let corpus: Vec<ClozeExample> = loaded.into_iter().map(|l| l.example).collect();
    let s = corpus_stats(&corpus).map_err(e2s)?;
    let near = |got: f64, want: f64| (got - want).abs() <= 0.5;
    ensure(s.example_count == 380_298, || format!("{} examples, expected 380298", s.example_count))?;
    ensure(
        near(s.avg_passage_tokens, 761.8)
            && near(s.avg_passage_sentences, 32.3)
            && near(s.avg_question_tokens, 12.5)
            && near(s.avg_entities, 26.2),
        || format!("{s:?}"),
    )?;
    Ok(format!("{s:?}"))
}

fn c2_gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let passage = "@entity1 saw @entity2 at the fair . @entity3 left the fair early";
    let question = "@placeholder saw @entity2 there at noon";
    let toks = |s: &str| s.split(' ').map(cloze_core::Token::parse).collect::<Vec<_>>();
    let ex = ClozeExample::new("grad", toks(passage), toks(question), EntityId(1)).map_err(e2s)?;
    ensure((ex.passage.len(), ex.question.len()) == (12, 6), || "instance shape".into())?;
    let mut model = ReaderModel::init(&small_reader(4, 8, 8), build_vocab(std::slice::from_ref(&ex), 100).map_err(e2s)?);
    // Gradients at the default init scale sit below finite-difference
    // roundoff, so the check runs at O(1) weights.
    model.fill_uniform(0.5, 4);
    let enc = encode_example(&model.vocab, &ex).map_err(e2s)?;
    let target = enc.answer_index.ok_or("answer missing")?;
    let r = grad_check(&model.params, 1e-4, |t| {
        let f = forward(t, &model, &enc, 0, None).map_err(|e| match e {
            ReaderError::Tensor(t) => t,
            other => panic!("{other}"),
        })?;
        t.softmax_cross_entropy(f.logits, target)
    })
    .map_err(e2s)?;
    let elapsed = start.elapsed();
    let detail = format!("max relative error {:.2e} over {} coordinates in {elapsed:.1?}", r.max_relative_error, r.coordinates);
    ensure(r.max_relative_error < 1e-4 && elapsed < Duration::from_secs(30), || detail.clone())?;
    Ok(detail)
}

fn c3_distribution_invariants() -> Outcome {
    let examples = random_examples();
    let models = random_models(&examples, 50);
    let mut ranker = RankerModel::zeros();
    let mut rng = stream_rng(3, Stream::Init, &[]);
    let featurized = featurize(&examples);
    let mut worst_sum = 0.0f64;
    let mut worst_pad = 0.0f64;
    for (i, ex) in examples.iter().enumerate() {
        let model = &models[i % models.len()];
        let cands = candidates(ex).map_err(e2s)?;
        let (pred, t) = predict_reader(model, ex).map_err(e2s)?;
        ensure(t.alpha.iter().chain(&t.candidate_probs).all(|x| *x >= 0.0), || format!("negative weight on {i}"))?;
        worst_sum = worst_sum
            .max((t.alpha.iter().sum::<f64>() - 1.0).abs())
            .max((t.candidate_probs.iter().sum::<f64>() - 1.0).abs());
        ensure(cands.contains(&pred), || format!("reader predicted {pred} outside candidates on {i}"))?;
        ensure(t.candidates == cands.iter().copied().collect::<Vec<_>>(), || format!("candidate list on {i}"))?;

        let enc = encode_example(&model.vocab, ex).map_err(e2s)?;
        let extra = 1 + i % 17;
        let padded = trace_encoded(model, &enc, ex.passage.len() + extra).map_err(e2s)?;
        ensure(padded.alpha[ex.passage.len()..].iter().all(|a| *a == 0.0), || format!("padding attended on {i}"))?;
        for (a, b) in t.alpha.iter().zip(&padded.alpha).chain(t.candidate_probs.iter().zip(&padded.candidate_probs)) {
            worst_pad = worst_pad.max((a - b).abs());
        }
        for (a, b) in t.output_vector.iter().zip(&padded.output_vector) {
            worst_pad = worst_pad.max((a - b).abs());
        }

        ranker.weights.iter_mut().for_each(|w| *w = rng.random_range(-1.0..1.0));
        let rp = predict_ranker(&ranker, &featurized[i]).map_err(e2s)?;
        ensure(cands.contains(&rp), || format!("classifier predicted {rp} outside candidates on {i}"))?;
    }
    let detail = format!(
        "{} examples, {} models; max |sum-1| {worst_sum:.1e}, max padding deviation {worst_pad:.1e}",
        examples.len(),
        models.len()
    );
    ensure(worst_sum <= 1e-6 && worst_pad <= 1e-9, || detail.clone())?;
    Ok(detail)
}

/// Copy of `model` in which entity `map[e]` carries the embedding and
/// output rows that `e` had.
fn permuted(model: &ReaderModel, map: &HashMap<EntityId, EntityId>) -> ReaderModel {
    let mut out = model.clone();
    let d = model.config.embed_dim;
    let w = 2 * model.hidden();
    for (from, to) in map {
        let (src, dst) = (model.vocab.entity_id(*from).unwrap(), model.vocab.entity_id(*to).unwrap());
        let row = model.params.get(model.embedding).data()[src * d..(src + 1) * d].to_vec();
        out.params.get_mut(out.embedding).data_mut()[dst * d..(dst + 1) * d].copy_from_slice(&row);
        if let (Some(&rs), Some(&rd)) = (model.entity_rows.get(from), model.entity_rows.get(to)) {
            let row = model.params.get(model.w_a).data()[rs * w..(rs + 1) * w].to_vec();
            out.params.get_mut(out.w_a).data_mut()[rd * w..(rd + 1) * w].copy_from_slice(&row);
        }
    }
    out
}

fn c4_relabeling() -> Outcome {
    let examples = random_examples();
    let models = random_models(&examples, 50);
    let mut worst = 0.0f64;
    let mut nontrivial = 0;
    for (i, ex) in examples.iter().enumerate() {
        let r = relabel_entities(ex);
        ensure(relabel_entities(&r) == r, || format!("relabel not idempotent on {i}"))?;
        let map = relabel_map(ex);
        let before: BTreeSet<EntityId> = candidates(ex).map_err(e2s)?.iter().map(|e| map[e]).collect();
        ensure(candidates(&r).map_err(e2s)? == before, || format!("candidate set changed on {i}"))?;
        ensure(r.answer == map[&ex.answer], || format!("answer not carried over on {i}"))?;
        ensure(r.passage.len() == ex.passage.len() && r.question.len() == ex.question.len(), || "lengths".into())?;
        nontrivial += map.iter().any(|(a, b)| a != b) as usize;

        let model = &models[i % models.len()];
        let base = trace(model, ex).map_err(e2s)?;
        let moved = trace(&permuted(model, &map), &r).map_err(e2s)?;
        let moved: BTreeMap<EntityId, f64> = moved.candidates.iter().copied().zip(moved.candidate_probs).collect();
        for (c, p) in base.candidates.iter().zip(&base.candidate_probs) {
            worst = worst.max((moved[&map[c]] - p).abs());
        }
    }
    let detail =
        format!("{} examples ({nontrivial} with a non-identity renaming); max probability deviation {worst:.1e}", examples.len());
    ensure(worst <= 1e-9, || detail.clone())?;
    Ok(detail)
}

fn c5_classifier_exact_match() -> Outcome {
    let start = Instant::now();
    let s = Splits::new(SynthMode::ExactMatch);
    let (tr, dv, te) = (featurize(&s.train), featurize(&s.dev), featurize(&s.test));
    let cfg = RankerConfig::new(7);
    let trained = train_ranker(&tr, &dv, &cfg).map_err(e2s)?;
    let acc = ranker_accuracy(&trained.model, &te).map_err(e2s)?;
    let elapsed = start.elapsed();
    let report = ablation_run(&tr, &dv, &FeatureGroup::ALL, &cfg).map_err(e2s)?;
    let (group, drop) = report.largest_drop().ok_or("empty ablation")?;
    let detail = format!(
        "test accuracy {acc:.4} in {elapsed:.1?}; largest ablation drop -{} ({:.1} points)",
        group.name(),
        100.0 * drop
    );
    ensure(acc >= 0.99 && elapsed < Duration::from_secs(120), || detail.clone())?;
    ensure(group == FeatureGroup::NgramMatch && drop >= 0.10, || detail.clone())?;
    ensure(report.rows.iter().filter(|(_, a)| report.full_accuracy - a >= drop).count() == 1, || {
        format!("{detail}; drop is tied")
    })?;
    Ok(detail)
}

/// Shared state for criteria 6 and 8: the paraphrase corpus and its seed-11 reader.
struct ParaphraseRun {
    splits: Splits,
    reader: Option<ReaderTraining>,
}

fn c6_reader_synthetic(para: &mut ParaphraseRun) -> Outcome {
    let start = Instant::now();
    let exact = Splits::new(SynthMode::ExactMatch);
    let trained = train_reader(&exact.train, &exact.dev, &desk_reader(11)).map_err(e2s)?;
    let exact_acc = reader_accuracy(&trained.model, &exact.test, Execution::Parallel).map_err(e2s)?;

    let s = &para.splits;
    let trained = train_reader(&s.train, &s.dev, &desk_reader(11)).map_err(e2s)?;
    let reader_acc = reader_accuracy(&trained.model, &s.test, Execution::Parallel).map_err(e2s)?;
    para.reader = Some(trained);
    let (tr, dv, te) = (featurize(&s.train), featurize(&s.dev), featurize(&s.test));
    let ranker = train_ranker(&tr, &dv, &RankerConfig::new(7)).map_err(e2s)?;
    let clf_acc = ranker_accuracy(&ranker.model, &te).map_err(e2s)?;
    let elapsed = start.elapsed();
    let detail = format!(
        "exact-match reader {exact_acc:.4}; paraphrase reader {reader_acc:.4} vs classifier {clf_acc:.4} \
         (+{:.1} points); {elapsed:.0?}",
        100.0 * (reader_acc - clf_acc)
    );
    ensure(exact_acc >= 0.90, || detail.clone())?;
    ensure(reader_acc - clf_acc >= 0.05, || detail.clone())?;
    ensure(elapsed < Duration::from_secs(600), || detail.clone())?;
    Ok(detail)
}

fn c7_overfit() -> Outcome {
    let ten = synth(SynthMode::Paraphrase, 10, 21);
    let cfg = ReaderConfig {
        max_epochs: 200,
        batch_size: 10,
        dropout_p: 0.0,
        ..desk_reader(5)
    };
    let trained = train_reader(&ten, &ten, &cfg).map_err(e2s)?;
    let mut total = 0.0;
    for ex in &ten {
        total += loss(&trained.final_model, ex).map_err(e2s)?;
    }
    let mean = total / ten.len() as f64;
    let detail = format!("mean train loss {mean:.4} after {} steps", trained.steps);
    ensure(trained.steps <= 200 && mean < 0.1, || detail.clone())?;
    Ok(detail)
}

fn c8_ensemble(para: &mut ParaphraseRun) -> Outcome {
    let s = &para.splits;
    let mut models = Vec::new();
    if let Some(r) = para.reader.take() {
        models.push(r.model);
    }
    for seed in [11u64, 12, 13, 14, 15].into_iter().skip(models.len()) {
        models.push(train_reader(&s.train, &s.dev, &desk_reader(seed)).map_err(e2s)?.model);
    }
    let mut member_accs = Vec::new();
    for m in &models {
        member_accs.push(reader_accuracy(m, &s.dev, Execution::Parallel).map_err(e2s)?);
    }
    let mean = member_accs.iter().sum::<f64>() / member_accs.len() as f64;
    let mut hits = 0usize;
    for ex in &s.dev {
        hits += (ensemble_predict(&models, ex).map_err(e2s)? == ex.answer) as usize;
    }
    let ens = hits as f64 / s.dev.len() as f64;

    let copies = vec![models[0].clone(); 3];
    for ex in &s.dev {
        let single = predict_reader(&models[0], ex).map_err(e2s)?.0;
        ensure(ensemble_predict(&copies, ex).map_err(e2s)? == single, || format!("copies disagree on {}", ex.source_id))?;
    }
    let accs: Vec<String> = member_accs.iter().map(|a| format!("{a:.3}")).collect();
    let detail = format!("ensemble {ens:.4} vs member mean {mean:.4} (members {})", accs.join(" "));
    ensure(ens >= mean - 0.005, || detail.clone())?;
    Ok(detail)
}

fn c9_determinism() -> Outcome {
    let train = synth(SynthMode::Paraphrase, 300, 31);
    let dev = synth(SynthMode::Paraphrase, 60, 32);
    let (ftr, fdv) = (featurize(&train), featurize(&dev));
    let runs: Vec<_> = (0..2).map(|_| train_ranker(&ftr, &fdv, &RankerConfig::new(9))).collect::<Result<_, _>>().map_err(e2s)?;
    ensure(runs[0].model.to_bytes() == runs[1].model.to_bytes(), || "classifier model bytes differ".into())?;
    ensure(runs[0].log_tsv() == runs[1].log_tsv(), || "classifier logs differ".into())?;
    let seq = featurize_corpus(&train, &[], &FeatureConfig::default(), Execution::Sequential).map_err(e2s)?;
    ensure(seq == ftr, || "sequential and parallel features differ".into())?;

    let cfg = ReaderConfig { embed_dim: 8, gru_hidden: 8, max_epochs: 2, ..desk_reader(9) };
    let mut outputs = Vec::new();
    for exec in [Execution::Parallel, Execution::Parallel, Execution::Sequential] {
        let r = train_reader(&train, &dev, &ReaderConfig { execution: exec, ..cfg.clone() }).map_err(e2s)?;
        outputs.push((r.model.to_bytes(), r.log_tsv()));
    }
    ensure(outputs[0] == outputs[1], || "reader runs differ".into())?;
    ensure(outputs[0] == outputs[2], || "sequential reader run differs".into())?;
    let other = train_reader(&train, &dev, &ReaderConfig { seed: 10, ..cfg }).map_err(e2s)?;
    ensure(other.model.to_bytes() != outputs[0].0, || "seed has no effect".into())?;
    Ok("classifier and reader logs and model bytes identical across runs and schedulers".into())
}

fn c10_per_category_fixture() -> Outcome {
    let labels_text = include_str!("fixtures/category_labels.tsv");
    let labels = parse_label_file(labels_text).map_err(e2s)?;
    ensure(labels.len() == 100, || format!("{} labels", labels.len()))?;
    // Correct answers per category for the two systems, in reporting order.
    let counts = [(13, 13), (32, 39), (14, 17), (1, 1), (4, 3), (2, 1)];
    let mut rank: BTreeMap<CategoryLabel, usize> = BTreeMap::new();
    let (mut gold, mut pa, mut pb) = (BTreeMap::new(), BTreeMap::new(), BTreeMap::new());
    for (id, cat) in &labels {
        let k = rank.entry(*cat).or_default();
        let pos = CategoryLabel::ALL.iter().position(|c| c == cat).unwrap();
        let (ca, cb) = counts[pos];
        let pick = |n: usize| if *k < n { EntityId(1) } else { EntityId(2) };
        gold.insert(id.clone(), EntityId(1));
        pa.insert(id.clone(), pick(ca));
        pb.insert(id.clone(), pick(cb));
        *k += 1;
    }
    let ra = per_category_report(&pa, &gold, &labels).map_err(e2s)?;
    let rb = per_category_report(&pb, &gold, &labels).map_err(e2s)?;
    let table = compare_systems(&ra, &rb, ("Classifier", "Neural net")).map_err(e2s)?.render();
    let expected = [
        ("Exact match", "13 (100.0%)", "13 (100.0%)"),
        ("Paraphrasing", "32 (78.1%)", "39 (95.1%)"),
        ("Partial clue", "14 (73.7%)", "17 (89.5%)"),
        ("Multiple sentences", "1 (50.0%)", "1 (50.0%)"),
        ("Coreference errors", "4 (50.0%)", "3 (37.5%)"),
        ("Ambiguous / hard", "2 (11.8%)", "1 (5.9%)"),
        ("All", "66 (66.0%)", "74 (74.0%)"),
    ];
    let mut want = format!("{:<20}{:>14}{:>14}\n", "Category", "Classifier", "Neural net");
    for (c, a, b) in expected {
        want.push_str(&format!("{c:<20}{a:>14}{b:>14}\n"));
    }
    ensure(table == want, || format!("rendered table differs:\n{table}"))?;
    Ok("7 rows match, including All 66 (66.0%) and All 74 (74.0%)".into())
}

fn main() {
    let only: Option<BTreeSet<usize>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |n: usize| only.as_ref().is_none_or(|s| s.contains(&n));
    let mut para = ParaphraseRun { splits: Splits::new(SynthMode::Paraphrase), reader: None };

    let mut failures = 0;
    let mut report = |n: usize, name: &str, outcome: Outcome| {
        match &outcome {
            Ok(detail) => println!("PASS {n:>2} {name}: {detail}"),
            Err(detail) => {
                failures += 1;
                println!("FAIL {n:>2} {name}: {detail}");
            }
        }
    };
    if wanted(1) {
        report(1, "full-data corpus statistics", c1_cnn_statistics());
    }
    if wanted(2) {
        report(2, "gradient fidelity", c2_gradient_fidelity());
    }
    if wanted(3) {
        report(3, "distribution invariants", c3_distribution_invariants());
    }
    if wanted(4) {
        report(4, "relabeling", c4_relabeling());
    }
    if wanted(5) {
        report(5, "classifier on exact-match", c5_classifier_exact_match());
    }
    if wanted(6) {
        report(6, "reader on synthetic corpora", c6_reader_synthetic(&mut para));
    }
    if wanted(7) {
        report(7, "overfit sanity", c7_overfit());
    }
    if wanted(8) {
        report(8, "ensembling", c8_ensemble(&mut para));
    }
    if wanted(9) {
        report(9, "determinism", c9_determinism());
    }
    if wanted(10) {
        report(10, "per-category reporting", c10_per_category_fixture());
    }
    if failures > 0 {
        std::process::exit(1);
    }
}
