//! Replay-fixture construction for the acceptance suite.
//!
//! The MCQ fixture is built by a small constraint search over per-item
//! answer patterns: each pattern class fixes who votes gold, who votes
//! which wrong letter and who abstains, and the solver finds class counts
//! that hit the target per-system, ensemble and leave-one-out accuracies
//! simultaneously. Every proposed solution is re-verified against pattern
//! contributions computed by an independent straight-line vote evaluator
//! before any file is written.

// each test target compiles this module and uses its own subset
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use medqa_core::backend::{
    cache_key, CacheEntry, CompletionRequest, DecodingParams, ReplayCache, DEFAULT_MODEL,
};
use medqa_core::dataset::{escape_field, load_mcq, GenKind, McqItem, GEN_HEADER, MCQ_HEADER};
use medqa_core::prompting::{mcq_block, render_free, render_mcq, TemplateName, TemplateSet};
use medqa_core::textnorm::{canonicalize_choice, CanonicalChoice};

/// Who a system votes for within one pattern class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ballot {
    Gold,
    /// First wrong letter.
    WrongA,
    /// Second, distinct wrong letter.
    WrongB,
    Abstain,
}

/// A per-item answer pattern: ballots in priority order (RFA, AFS, ETA).
#[derive(Debug, Clone, Copy)]
pub struct PatternClass {
    pub name: &'static str,
    pub rfa: Ballot,
    pub afs: Ballot,
    pub eta: Ballot,
}

const CLASSES: [PatternClass; 9] = [
    PatternClass { name: "all_gold", rfa: Ballot::Gold, afs: Ballot::Gold, eta: Ballot::Gold },
    PatternClass { name: "ra_gold", rfa: Ballot::Gold, afs: Ballot::Gold, eta: Ballot::WrongA },
    PatternClass { name: "re_gold", rfa: Ballot::Gold, afs: Ballot::WrongA, eta: Ballot::Gold },
    PatternClass { name: "r_gold_split", rfa: Ballot::Gold, afs: Ballot::WrongA, eta: Ballot::WrongB },
    PatternClass { name: "r_gold_pair", rfa: Ballot::Gold, afs: Ballot::WrongA, eta: Ballot::WrongA },
    PatternClass { name: "ae_gold", rfa: Ballot::WrongA, afs: Ballot::Gold, eta: Ballot::Gold },
    PatternClass { name: "alpha", rfa: Ballot::Abstain, afs: Ballot::Gold, eta: Ballot::WrongA },
    PatternClass { name: "beta", rfa: Ballot::WrongA, afs: Ballot::Abstain, eta: Ballot::Gold },
    PatternClass { name: "all_wrong", rfa: Ballot::WrongA, afs: Ballot::WrongB, eta: Ballot::WrongA },
];

/// Straight-line vote: count ballots, take the maxima, first voter in
/// priority order among the tied maxima wins. Independent of the library.
fn straight_vote(votes: &[Option<u8>; 3], exclude: Option<usize>) -> Option<u8> {
    let mut counts = [0u32; 3];
    let mut in_order = Vec::new();
    for (idx, vote) in votes.iter().enumerate() {
        if Some(idx) == exclude {
            continue;
        }
        if let Some(choice) = *vote {
            counts[choice as usize] += 1;
            in_order.push(choice);
        }
    }
    let top = *counts.iter().max().unwrap();
    if top == 0 {
        return None;
    }
    in_order.into_iter().find(|c| counts[*c as usize] == top)
}

/// Contribution of one item of this class to
/// (rfa, afs, eta, ensemble, loo_rfa, loo_afs, loo_eta) correct counts.
fn contribution(class: &PatternClass) -> [u32; 7] {
    let vote = |b: Ballot| -> Option<u8> {
        match b {
            Ballot::Gold => Some(0),
            Ballot::WrongA => Some(1),
            Ballot::WrongB => Some(2),
            Ballot::Abstain => None,
        }
    };
    let votes = [vote(class.rfa), vote(class.afs), vote(class.eta)];
    let hit = |w: Option<u8>| u32::from(w == Some(0));
    [
        u32::from(votes[0] == Some(0)),
        u32::from(votes[1] == Some(0)),
        u32::from(votes[2] == Some(0)),
        hit(straight_vote(&votes, None)),
        hit(straight_vote(&votes, Some(0))),
        hit(straight_vote(&votes, Some(1))),
        hit(straight_vote(&votes, Some(2))),
    ]
}

/// Accuracy targets ×100 in the order
/// (rfa, afs, eta, ensemble, loo_rfa, loo_afs, loo_eta).
pub const TARGETS: [u32; 7] = [74, 71, 69, 76, 73, 74, 75];
pub const N_ITEMS: usize = 100;

/// Search class counts hitting every target exactly. Loop bounds cover the
/// slack classes generously; gold-heavy counts are propagated from the
/// per-system equations and the full target vector is re-checked against
/// the evaluator-computed contributions, so a wrong derivation cannot slip
/// through.
pub fn solve_pattern_counts() -> Option<BTreeMap<&'static str, usize>> {
    let [t_rfa, t_afs, t_eta, ..] = TARGETS.map(|t| t as i64);
    for alpha in 0..=4i64 {
        for beta in 0..=4i64 {
            for r_gold_pair in 0..=8i64 {
                for ae_gold in 0..=8i64 {
                    for ra_gold in 0..=24i64 {
                        let all_gold = t_afs - ra_gold - ae_gold - alpha;
                        let re_gold = t_eta - all_gold - ae_gold - beta;
                        let r_gold_split =
                            t_rfa - all_gold - ra_gold - re_gold - r_gold_pair;
                        let named = [
                            ("all_gold", all_gold),
                            ("ra_gold", ra_gold),
                            ("re_gold", re_gold),
                            ("r_gold_split", r_gold_split),
                            ("r_gold_pair", r_gold_pair),
                            ("ae_gold", ae_gold),
                            ("alpha", alpha),
                            ("beta", beta),
                        ];
                        if named.iter().any(|(_, c)| *c < 0) {
                            continue;
                        }
                        let used: i64 = named.iter().map(|(_, c)| c).sum();
                        let all_wrong = N_ITEMS as i64 - used;
                        if all_wrong < 0 {
                            continue;
                        }
                        let mut counts: BTreeMap<&'static str, usize> = named
                            .iter()
                            .map(|(name, c)| (*name, *c as usize))
                            .collect();
                        counts.insert("all_wrong", all_wrong as usize);
                        if verify_counts(&counts) {
                            return Some(counts);
                        }
                    }
                }
            }
        }
    }
    None
}

/// Check a candidate solution against all seven targets using the
/// independently computed contribution vectors.
pub fn verify_counts(counts: &BTreeMap<&'static str, usize>) -> bool {
    let mut totals = [0u32; 7];
    let mut items = 0usize;
    for class in &CLASSES {
        let count = *counts.get(class.name).unwrap_or(&0);
        items += count;
        let contribution = contribution(class);
        for (total, per_item) in totals.iter_mut().zip(contribution) {
            *total += per_item * count as u32;
        }
    }
    items == N_ITEMS && totals == TARGETS
}

pub struct Table1Fixture {
    pub data: PathBuf,
    pub cache: PathBuf,
    pub counts: BTreeMap<&'static str, usize>,
}

fn latin_for(letter: CanonicalChoice) -> &'static str {
    match letter {
        CanonicalChoice::Alif => "A",
        CanonicalChoice::Ba => "B",
        CanonicalChoice::Jim => "C",
        CanonicalChoice::Dal => "D",
        CanonicalChoice::Ha => "E",
    }
}

/// A raw answer surface that canonicalizes back to `letter`; the variant
/// cycles so the fixture exercises the cleaning rules, not just plain
/// letters.
fn answer_surface(letter: CanonicalChoice, variant: usize) -> String {
    let s = letter.surface();
    let text = match variant % 5 {
        0 => s.to_string(),
        1 => format!("{s}."),
        2 => format!("الإجابة: {s}"),
        3 => format!("({s})"),
        _ => latin_for(letter).to_string(),
    };
    assert_eq!(
        canonicalize_choice(&text),
        Ok(letter),
        "fixture surface {text:?} must canonicalize to {letter}"
    );
    text
}

const ABSTAIN_RESPONSE: &str = "لا أعرف الجواب";

fn request(prompt: medqa_core::prompting::RenderedPrompt) -> CompletionRequest {
    CompletionRequest {
        model_id: DEFAULT_MODEL.to_string(),
        prompt,
        params: DecodingParams::default(),
    }
}

fn record(cache: &ReplayCache, req: &CompletionRequest, response: String) {
    let inserted = cache
        .insert(CacheEntry::from_request(req, response))
        .expect("fixture cache insert");
    assert!(inserted, "duplicate fixture key for {}", cache_key(req));
}

fn ballot_letter(
    ballot: Ballot,
    gold: CanonicalChoice,
    wrongs: (CanonicalChoice, CanonicalChoice),
) -> Option<CanonicalChoice> {
    match ballot {
        Ballot::Gold => Some(gold),
        Ballot::WrongA => Some(wrongs.0),
        Ballot::WrongB => Some(wrongs.1),
        Ballot::Abstain => None,
    }
}

/// A refined question that keeps every option label in label position.
fn refined_text(item: &McqItem, index: usize) -> String {
    let options = item
        .options
        .iter()
        .map(|(label, _)| format!("{label}. خيار موضح (شرح مختصر من النموذج)"))
        .collect::<Vec<_>>()
        .join(" ");
    format!("السؤال المحسّن {index}: {} {options}", item.stem)
}

/// Build the 100-item MCQ replay fixture: dataset TSV plus a cache holding
/// every completion the three-system committee will request.
pub fn build_table1_fixture(dir: &Path) -> Table1Fixture {
    let counts = solve_pattern_counts().expect("pattern targets are jointly satisfiable");
    assert!(verify_counts(&counts));

    // expand counts into one class per item
    let mut classes: Vec<&PatternClass> = Vec::with_capacity(N_ITEMS);
    for class in &CLASSES {
        for _ in 0..counts[class.name] {
            classes.push(class);
        }
    }

    // dataset file
    let mut tsv = String::from(MCQ_HEADER);
    tsv.push('\n');
    for (i, _) in classes.iter().enumerate() {
        let five = i % 2 == 0;
        let label_count = if five { 5 } else { 4 };
        let gold = CanonicalChoice::from_index(i % label_count).unwrap();
        let opts: Vec<String> = (0..5)
            .map(|col| {
                if col < label_count {
                    format!("الخيار رقم {col} ضمن الحالة السريرية {i}")
                } else {
                    String::new()
                }
            })
            .collect();
        tsv.push_str(&format!(
            "q{i:03}\tالسؤال {i}: ما التدبير الأنسب في الحالة السريرية رقم {i}؟\t{}\t{}\n",
            opts.join("\t"),
            gold.surface(),
        ));
    }
    let data = dir.join("mcq.tsv");
    std::fs::write(&data, tsv).expect("write fixture dataset");

    let load = load_mcq(&data).expect("fixture dataset loads");
    assert!(load.clean(), "fixture rows must all validate: {:?}", load.rejects);
    assert_eq!(load.items.len(), N_ITEMS);

    // cache with every completion the committee will ask for
    let cache_path = dir.join("cache.jsonl");
    let (cache, _) = ReplayCache::open(&cache_path).expect("open fixture cache");
    let templates = TemplateSet::builtin();
    for (i, (item, class)) in load.items.iter().zip(&classes).enumerate() {
        let labels: Vec<CanonicalChoice> = item.labels().collect();
        let gold = item.gold.expect("fixture items carry gold");
        let mut non_gold = labels.iter().copied().filter(|l| *l != gold);
        let wrongs = (non_gold.next().unwrap(), non_gold.next().unwrap());
        let vote = |b: Ballot| ballot_letter(b, gold, wrongs);
        let reply = |b: Ballot, variant: usize| match vote(b) {
            Some(letter) => answer_surface(letter, variant),
            None => ABSTAIN_RESPONSE.to_string(),
        };
        let question = mcq_block(item);

        // AFS: one completion
        let afs_prompt = render_mcq(templates.get(TemplateName::Afs), item).unwrap();
        record(&cache, &request(afs_prompt), reply(class.afs, i));

        // ETA: translation then answer over the translation
        let translate_prompt =
            render_free(templates.get(TemplateName::EtaTranslate), &question, &item.id).unwrap();
        let translation = format!(
            "Case {i}: choose the most appropriate management. A. option B. option C. option D. option"
        );
        record(&cache, &request(translate_prompt), translation.clone());
        let answer_prompt =
            render_free(templates.get(TemplateName::EtaAnswer), &translation, &item.id).unwrap();
        record(&cache, &request(answer_prompt), reply(class.eta, i + 1));

        // RFA: refinement (keeping all labels) then answer over it
        let refine_prompt =
            render_free(templates.get(TemplateName::RfaRefine), &question, &item.id).unwrap();
        let refined = refined_text(item, i);
        record(&cache, &request(refine_prompt), refined.clone());
        let answer_prompt =
            render_free(templates.get(TemplateName::RfaAnswer), &refined, &item.id).unwrap();
        record(&cache, &request(answer_prompt), reply(class.rfa, i + 2));
    }

    Table1Fixture {
        data,
        cache: cache_path,
        counts,
    }
}

/// One generation fixture case with the properties the cleaning must
/// guarantee.
pub struct GenCase {
    pub id: String,
    pub kind: GenKind,
    pub blank_count: usize,
    pub prompt: String,
    pub response: String,
    /// Exact cleaned output, when pinned.
    pub expected: Option<&'static str>,
}

pub struct GenFixture {
    pub data: PathBuf,
    pub cache: PathBuf,
    pub cases: Vec<GenCase>,
}

/// 20 markdown- and blank-laden generation cases.
pub fn gen_cases() -> Vec<GenCase> {
    let blanks = |n: usize| vec!["____"; n].join(" ثم ");
    let mut cases = Vec::new();
    let mut push = |kind: GenKind,
                    blank_count: usize,
                    prompt: String,
                    response: &str,
                    expected: Option<&'static str>| {
        cases.push(GenCase {
            id: format!("g{:02}", cases.len()),
            kind,
            blank_count,
            prompt,
            response: response.to_string(),
            expected,
        });
    };

    let fb = GenKind::FillBlank;
    push(fb, 1, format!("يفرز الأنسولين من خلايا {} في البنكرياس.", blanks(1)), "**بيتا**", Some("بيتا"));
    push(
        fb,
        2,
        "الحمرة هي عدوى جلدية تسببها ____، وهي تصيب عادةً ____ الوجه.".to_string(),
        "العقديات A و G، الأدمة الحليمية",
        Some("العقديات A و G، الأدمة الحليمية"),
    );
    push(fb, 2, format!("عنصران: {}.", blanks(2)), "أ, ب, ج", Some("أ، ب, ج"));
    push(fb, 2, format!("عنصران آخران: {}.", blanks(2)), "واحد", None);
    push(fb, 3, format!("ثلاثة: {}.", blanks(3)), "أول، **ثان**، ثالث", Some("أول، ثان، ثالث"));
    push(fb, 1, format!("عنوان مع {}.", blanks(1)), "# العنوان\nالجواب", Some("العنوان\nالجواب"));
    push(fb, 2, format!("عضوان: {}.", blanks(2)), "البنكرياس ، الكبد", Some("البنكرياس، الكبد"));
    push(fb, 2, format!("طبقتان: {}.", blanks(2)), "*الأدمة*، `البشرة`", Some("الأدمة، البشرة"));

    let qa = GenKind::PatientQa;
    push(qa, 0, "أعاني من صداع مستمر منذ ثلاثة أيام.".into(), "**ينصح** بمراجعة الطبيب", Some("ينصح بمراجعة الطبيب"));
    push(qa, 0, "أشعر بتعب عام وفقدان شهية.".into(), "- اشرب الماء بكثرة\n- خذ قسطاً من الراحة", Some("اشرب الماء بكثرة\nخذ قسطاً من الراحة"));
    push(qa, 0, "لدي حرقة في المعدة ليلاً.".into(), "## نصيحة\nتجنب الوجبات الدسمة مساءً", Some("نصيحة\nتجنب الوجبات الدسمة مساءً"));
    push(qa, 0, "يدي تؤلمني بعد إصابة رياضية.".into(), "`كمادات باردة` مع *رفع اليد*", Some("كمادات باردة مع رفع اليد"));

    let gec = GenKind::Gec;
    push(gec, 0, "انا عندي الم ف ضهري من اسبوع.".into(), "يرجى **مراجعة** طبيب العظام", Some("يرجى مراجعة طبيب العظام"));
    push(gec, 0, "بنتي عندها سخونه من امبارح.".into(), "• خافض حرارة\n• كمادات فاترة", Some("خافض حرارة\nكمادات فاترة"));
    push(gec, 0, "عيني بتدمع كتير من الغبار.".into(), "استخدم `دموعاً اصطناعية` واغسل العين", Some("استخدم دموعاً اصطناعية واغسل العين"));
    push(gec, 0, "معدتي بتوجعني بعد الاكل.".into(), "*تجنب* الأطعمة الحارة **والمقلية**", Some("تجنب الأطعمة الحارة والمقلية"));

    let pp = GenKind::Paraphrase;
    push(pp, 0, "ما التدبير الأولي لحرق سطحي في اليد؟".into(), "# الإجابة\n- تبريد بماء جارٍ", Some("الإجابة\nتبريد بماء جارٍ"));
    push(pp, 0, "ما العلامة المميزة لنقص الحديد؟".into(), "شحوب **الأغشية المخاطية**", Some("شحوب الأغشية المخاطية"));
    push(pp, 0, "متى يعطى لقاح الحصبة الأول؟".into(), "بعمر `تسعة أشهر` غالباً", Some("بعمر تسعة أشهر غالباً"));
    push(pp, 0, "ما الفحص الأنسب لاشتباه قصور الدرق؟".into(), "- معايرة TSH في الدم", Some("معايرة TSH في الدم"));

    assert_eq!(cases.len(), 20);
    cases
}

/// Build the generation replay fixture: dataset TSV plus cached responses.
pub fn build_gen_fixture(dir: &Path) -> GenFixture {
    let cases = gen_cases();
    let mut tsv = String::from(GEN_HEADER);
    tsv.push('\n');
    for case in &cases {
        let gold = case.expected.unwrap_or("إجابة مرجعية");
        tsv.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            case.id,
            case.kind.as_str(),
            escape_field(&case.prompt),
            escape_field(gold)
        ));
    }
    let data = dir.join("gen.tsv");
    std::fs::write(&data, tsv).expect("write gen fixture");

    let load = medqa_core::dataset::load_gen(&data, None).expect("gen fixture loads");
    assert!(load.clean(), "{:?}", load.rejects);
    assert_eq!(load.items.len(), cases.len());

    let cache_path = dir.join("gen_cache.jsonl");
    let (cache, _) = ReplayCache::open(&cache_path).expect("open gen cache");
    let templates = TemplateSet::builtin();
    for (item, case) in load.items.iter().zip(&cases) {
        assert_eq!(item.id, case.id);
        assert_eq!(item.blank_count, case.blank_count, "{}", case.id);
        let prompt = render_free(
            templates.get(TemplateName::GenUnified),
            &item.prompt_text,
            &item.id,
        )
        .unwrap();
        record(&cache, &request(prompt), case.response.clone());
    }

    GenFixture {
        data,
        cache: cache_path,
        cases,
    }
}

/// Canonical separators in a joined fill-blank answer: `، ` boundaries
/// plus a bare trailing `،` left by an empty padded part.
pub fn canonical_separators(text: &str) -> usize {
    text.matches("، ").count() + usize::from(text.ends_with('،'))
}

/// A small all-systems-vote-gold MCQ fixture for CLI-level tests. Only the
/// committee systems get cache entries. `gold_gap` empties the gold cell
/// of one item, for missing-gold error paths.
pub fn build_simple_mcq_fixture(dir: &Path, n: usize, gold_gap: Option<usize>) -> (PathBuf, PathBuf) {
    let mut tsv = String::from(MCQ_HEADER);
    tsv.push('\n');
    for i in 0..n {
        let gold = CanonicalChoice::from_index(i % 4).unwrap();
        let gold_cell = if gold_gap == Some(i) { "" } else { gold.surface() };
        tsv.push_str(&format!(
            "q{i:03}\tسؤال بسيط رقم {i} عن الحالة؟\tخيار أول {i}\tخيار ثان {i}\tخيار ثالث {i}\tخيار رابع {i}\t\t{gold_cell}\n",
        ));
    }
    let data = dir.join("small_mcq.tsv");
    std::fs::write(&data, tsv).expect("write small fixture");

    let load = load_mcq(&data).expect("small fixture loads");
    assert!(load.clean(), "{:?}", load.rejects);
    let cache_path = dir.join("small_cache.jsonl");
    let (cache, _) = ReplayCache::open(&cache_path).expect("open small cache");
    let templates = TemplateSet::builtin();
    for (i, item) in load.items.iter().enumerate() {
        let gold = CanonicalChoice::from_index(i % 4).unwrap();
        let question = mcq_block(item);
        let afs_prompt = render_mcq(templates.get(TemplateName::Afs), item).unwrap();
        record(&cache, &request(afs_prompt), answer_surface(gold, i));
        let translate =
            render_free(templates.get(TemplateName::EtaTranslate), &question, &item.id).unwrap();
        let translation = format!("Simple case {i}. A. one B. two C. three D. four");
        record(&cache, &request(translate), translation.clone());
        let answer =
            render_free(templates.get(TemplateName::EtaAnswer), &translation, &item.id).unwrap();
        record(&cache, &request(answer), answer_surface(gold, i + 1));
        let refine =
            render_free(templates.get(TemplateName::RfaRefine), &question, &item.id).unwrap();
        let refined = refined_text(item, i);
        record(&cache, &request(refine), refined.clone());
        let answer =
            render_free(templates.get(TemplateName::RfaAnswer), &refined, &item.id).unwrap();
        record(&cache, &request(answer), answer_surface(gold, i + 2));
    }
    (data, cache_path)
}
