//! Build a tiny self-contained demo: a two-question dataset and a replay
//! cache with scripted model answers, ready for the `medqa` binary.
//!
//!     cargo run -p medqa-cli --example offline_demo -- demo/
//!     medqa run-mcq --data demo/mcq.tsv --cache demo/cache.jsonl --run-dir demo/run
//!     medqa eval   --run-dir demo/run  --gold demo/mcq.tsv

use std::path::Path;

use medqa_core::backend::{CacheEntry, CompletionRequest, DecodingParams, ReplayCache, DEFAULT_MODEL};
use medqa_core::dataset::{load_mcq, MCQ_HEADER};
use medqa_core::prompting::{mcq_block, render_free, render_mcq, TemplateName, TemplateSet};

fn record(cache: &ReplayCache, prompt: medqa_core::prompting::RenderedPrompt, response: &str) {
    let req = CompletionRequest {
        model_id: DEFAULT_MODEL.to_string(),
        prompt,
        params: DecodingParams::default(),
    };
    cache
        .insert(CacheEntry::from_request(&req, response.to_string()))
        .expect("cache insert");
}

fn main() {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "demo".to_string());
    let dir = Path::new(&dir);
    std::fs::create_dir_all(dir).expect("create demo dir");

    let data = dir.join("mcq.tsv");
    std::fs::write(
        &data,
        format!(
            "{MCQ_HEADER}\n\
             q001\tكل ما يلي من وظائف الكبد ما عدا:\tأ) تصنيع الألبومين\tب- إفراز الأنسولين\tج. تخزين الغليكوجين\tد: استقلاب الأدوية\t\tب\n\
             q002\tما العضو المسؤول عن إفراز الأنسولين؟\tالكبد\tالبنكرياس\tالطحال\tالكلية\tالمعدة\tب\n"
        ),
    )
    .expect("write dataset");

    let load = load_mcq(&data).expect("demo dataset loads");
    assert!(load.clean());

    let cache_path = dir.join("cache.jsonl");
    let (cache, _) = ReplayCache::open(&cache_path).expect("open cache");
    let templates = TemplateSet::builtin();
    // scripted answers: AFS and RFA are right on both, ETA slips on q002
    let eta_answers = ["B", "هـ"];
    for (i, item) in load.items.iter().enumerate() {
        let question = mcq_block(item);
        record(
            &cache,
            render_mcq(templates.get(TemplateName::Afs), item).unwrap(),
            "الإجابة: ب",
        );
        let translation = format!("Demo translation of question {i} with options A-E.");
        record(
            &cache,
            render_free(templates.get(TemplateName::EtaTranslate), &question, &item.id).unwrap(),
            &translation,
        );
        record(
            &cache,
            render_free(templates.get(TemplateName::EtaAnswer), &translation, &item.id).unwrap(),
            eta_answers[i],
        );
        let refined = format!(
            "صياغة أوضح للسؤال {i}: {} {}",
            item.stem,
            item.options
                .iter()
                .map(|(label, text)| format!("{label}. {text} (شرح مختصر)"))
                .collect::<Vec<_>>()
                .join(" ")
        );
        record(
            &cache,
            render_free(templates.get(TemplateName::RfaRefine), &question, &item.id).unwrap(),
            &refined,
        );
        record(
            &cache,
            render_free(templates.get(TemplateName::RfaAnswer), &refined, &item.id).unwrap(),
            "ب.",
        );
    }

    println!("demo written to {}", dir.display());
    println!("next:");
    println!(
        "  medqa run-mcq --data {} --cache {} --run-dir {}",
        data.display(),
        cache_path.display(),
        dir.join("run").display()
    );
    println!(
        "  medqa eval --run-dir {} --gold {}",
        dir.join("run").display(),
        data.display()
    );
}
