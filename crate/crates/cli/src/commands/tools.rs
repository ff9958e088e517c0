use super::compress::load_adapter;
use crate::common::{cfg_err, eval_all, eval_components, load_data, load_model};
use crate::error::CliResult;
use crate::Ctx;
use lmstack_core::data::{decode_string, encode, NGramIndex, SEP};
use lmstack_core::model::generate;
use serde_json::{json, Value};
use std::io::BufRead;
use std::path::Path;

pub fn sample(ctx: &Ctx) -> CliResult<()> {
    ctx.one_pass_resume()?;
    let cfg = &ctx.cfg;
    let model = load_model(&cfg.required_path("init")?)?;
    let prompt = cfg.str("sample.prompt");
    if prompt.is_empty() {
        return Err(cfg_err("sample.prompt", "required by this command"));
    }
    let t = cfg.f64("sample.temperature");
    if t < 0.0 {
        return Err(cfg_err("sample.temperature", "must be non-negative"));
    }
    let max_new = cfg.positive("sample.max_tokens")?;
    let x = encode(prompt.as_bytes());
    if x.len() >= model.config.max_seq_len {
        return Err(cfg_err("sample.prompt", format!("{} tokens leave no room under max_seq_len", x.len())));
    }
    let run = ctx.open_one_pass()?;
    let mut rows = Vec::new();
    for i in 0..cfg.positive("sample.count")? {
        let mut y = generate(&model, &x, max_new, Some(SEP), t, &mut ctx.seeds.stream("sample", i as u64))?;
        let stopped = y.last() == Some(&SEP);
        if stopped {
            y.pop();
        }
        rows.push(json!({ "index": i, "prompt": prompt, "completion": decode_string(&y), "tokens": y.len(), "stopped": stopped }));
    }
    run.write_jsonl("samples.jsonl", &rows)?;
    run.finish(&json!({ "command": "sample", "count": rows.len(), "samples": rows }))
}

pub fn eval(ctx: &Ctx) -> CliResult<()> {
    ctx.one_pass_resume()?;
    let cfg = &ctx.cfg;
    let mut model = load_model(&cfg.required_path("init")?)?;
    if let Some(p) = cfg.path("eval.adapter") {
        model = load_adapter(&p, &model.config)?.merge_into(&model)?;
    }
    let data = load_data(cfg, &ctx.seeds)?;
    let tags = cfg.list("eval.components");
    let len = cfg.positive("eval.max_len")?;
    let per = eval_components(&model, &data.eval, &tags, len)?;
    if per.is_empty() {
        return Err(cfg_err("eval.components", "none of the listed components has held-out documents"));
    }
    let all = eval_all(&model, &data.eval, &tags, len)?;
    let run = ctx.open_one_pass()?;
    let v = json!({ "loss": all, "components": per });
    run.write_json("eval.json", &v)?;
    run.finish(&json!({ "command": "eval", "eval": v }))
}

/// Documents from a JSONL file with a `text` field per line, or one
/// document per line of plain text.
fn read_docs(key: &str, path: &Path) -> CliResult<Vec<(String, Vec<u8>, Option<Value>)>> {
    let f = std::fs::File::open(path).map_err(|e| cfg_err(key, format!("{}: {e}", path.display())))?;
    let jsonl = path.extension().is_some_and(|e| e == "jsonl");
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| cfg_err(key, format!("{}: {e}", path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        if jsonl {
            let v: Value = serde_json::from_str(&line).map_err(|e| cfg_err(key, format!("{}:{}: {e}", path.display(), i + 1)))?;
            let text = v
                .get("text")
                .and_then(Value::as_str)
                .ok_or_else(|| cfg_err(key, format!("{}:{}: no string `text` field", path.display(), i + 1)))?;
            let id = v.get("id").and_then(Value::as_str).map_or_else(|| format!("{}", i + 1), String::from);
            out.push((id, text.as_bytes().to_vec(), Some(v)));
        } else {
            out.push((format!("{}", i + 1), line.into_bytes(), None));
        }
    }
    Ok(out)
}

pub fn decontaminate(ctx: &Ctx) -> CliResult<()> {
    ctx.one_pass_resume()?;
    let cfg = &ctx.cfg;
    let bench = read_docs("decontam.benchmark", &cfg.required_path("decontam.benchmark")?)?;
    let corpus = read_docs("decontam.corpus", &cfg.required_path("decontam.corpus")?)?;
    let threshold = cfg.u64("decontam.threshold");
    let index = NGramIndex::build(bench.iter().map(|d| d.1.as_slice()), corpus.iter().map(|d| d.1.as_slice()));
    let run = ctx.open_one_pass()?;
    let mut report = Vec::new();
    let mut kept = Vec::new();
    for (id, text, raw) in &corpus {
        let d = index.decontaminate(text, threshold);
        if d.drop {
            let matches: Vec<Value> = d
                .matches
                .iter()
                .map(|(g, c)| json!({ "ngram": String::from_utf8_lossy(g), "count": c }))
                .collect();
            report.push(json!({ "id": id, "matches": matches }));
        } else {
            kept.push(raw.clone().unwrap_or_else(|| json!({ "id": id, "text": String::from_utf8_lossy(text) })));
        }
    }
    run.write_jsonl("report.jsonl", &report)?;
    run.write_jsonl("kept.jsonl", &kept)?;
    run.finish(&json!({
        "command": "decontaminate",
        "benchmark_docs": bench.len(),
        "corpus_docs": corpus.len(),
        "indexed_ngrams": index.len(),
        "dropped": report.len(),
        "kept": kept.len(),
        "threshold": threshold,
    }))
}
