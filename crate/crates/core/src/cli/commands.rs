//! Command implementations. Each returns a one-line summary for stdout.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::corpus::{DocId, TokenId, Vocab};
use crate::error::Error;
use crate::oracle::{
    choose_option, consistent_policy, count_segmentations, distribution_json, diversity, exact_terminal_distribution,
    marginal_log_likelihood, reward_distribution, tv_distance, Distribution, EnumeratedSpace,
};
use crate::policy::{sample_trajectory, PolicyParams, PolicySession};
use crate::reward::{PreferenceModel, RewardModels, TrigramLM};
use crate::rng;

use super::config::RunConfig;
use super::pipeline::Workspace;
use super::PolicyChoice;

pub const LM_FILE: &str = "lm.json";
pub const PM_FILE: &str = "pm.ckpt";
pub const POLICY_FILE: &str = "policy.ckpt";
pub const SAMPLES_FILE: &str = "samples.jsonl";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";

/// Artifact writer for one command run.
struct Output {
    dir: PathBuf,
    hash: String,
    artifacts: Vec<String>,
}

fn with_hash(hash: &str, value: impl Serialize) -> Result<Value> {
    let mut v = serde_json::to_value(value)?;
    match v.as_object_mut() {
        Some(map) => {
            map.insert("config_hash".into(), Value::from(hash));
            Ok(v)
        }
        None => Ok(json!({ "config_hash": hash, "value": v })),
    }
}

impl Output {
    fn new(cfg: &RunConfig) -> Result<Self> {
        fs::create_dir_all(&cfg.output_dir)
            .with_context(|| format!("cannot create {}", cfg.output_dir.display()))?;
        Ok(Self {
            dir: cfg.output_dir.clone(),
            hash: cfg.hash(),
            artifacts: Vec::new(),
        })
    }

    fn create(&mut self, name: &str) -> Result<BufWriter<File>> {
        let path = self.dir.join(name);
        let f = File::create(&path).with_context(|| format!("cannot write {}", path.display()))?;
        self.artifacts.push(name.to_string());
        Ok(BufWriter::new(f))
    }

    fn json(&mut self, name: &str, value: impl Serialize) -> Result<()> {
        let v = with_hash(&self.hash, value)?;
        let mut w = self.create(name)?;
        serde_json::to_writer_pretty(&mut w, &v)?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }

    fn jsonl<S: Serialize>(&mut self, name: &str, rows: impl IntoIterator<Item = S>) -> Result<()> {
        let hash = self.hash.clone();
        let mut w = self.create(name)?;
        for row in rows {
            serde_json::to_writer(&mut w, &with_hash(&hash, row)?)?;
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }

    fn finish(mut self, command: &str, cfg: &RunConfig, summary: Value) -> Result<()> {
        let artifacts = std::mem::take(&mut self.artifacts);
        let manifest = json!({
            "command": command,
            "seed": cfg.seed,
            "config": cfg,
            "artifacts": artifacts,
            "summary": summary,
        });
        self.json(&format!("{command}.manifest.json"), manifest)
    }
}

fn open_artifact(dir: &Path, name: &str, producer: &str) -> Result<BufReader<File>> {
    let path = dir.join(name);
    let f = File::open(&path)
        .with_context(|| format!("missing checkpoint {}; run `{producer}` first", path.display()))?;
    Ok(BufReader::new(f))
}

fn check_tag(name: &str, tag: &str, hash: &str) {
    if tag != hash {
        eprintln!("warning: {name} was written under a different config (hash {tag})");
    }
}

fn load_reward(ws: &Workspace) -> Result<RewardModels> {
    let dir = &ws.config.output_dir;
    let hash = ws.config.hash();
    let (lm, tag) = TrigramLM::read_json_tagged(open_artifact(dir, LM_FILE, "train-reward")?)?;
    check_tag(LM_FILE, &tag, &hash);
    let (pm, tag) = PreferenceModel::load_tagged(open_artifact(dir, PM_FILE, "train-reward")?)?;
    check_tag(PM_FILE, &tag, &hash);
    Ok(ws.reward_models(lm, pm))
}

fn load_policy(ws: &Workspace) -> Result<PolicyParams> {
    let (params, tag) = PolicyParams::load_tagged(open_artifact(&ws.config.output_dir, POLICY_FILE, "train")?)?;
    check_tag(POLICY_FILE, &tag, &ws.config.hash());
    if params.config.vocab_size != ws.corpus.vocab.len() {
        anyhow::bail!(Error::Checkpoint("policy vocabulary does not match the corpus".into()));
    }
    Ok(params)
}

pub fn segment(cfg: RunConfig) -> Result<String> {
    let ws = Workspace::load(cfg)?;
    let mut out = Output::new(&ws.config)?;
    let vocab = &ws.corpus.vocab;
    let mut rows = Vec::new();
    let mut lossless = true;
    for (doc_id, segs) in ws.segmentations() {
        let doc = ws.index.document(doc_id).expect("indexed");
        for s in segs {
            lossless &= s.concat() == doc.tokens;
            let pieces: Vec<Value> = s
                .pieces
                .iter()
                .map(|p| json!({ "text": vocab.decode(&p.tokens), "tokens": p.tokens, "provenance": p.provenance }))
                .collect();
            rows.push(json!({
                "doc_id": doc_id,
                "threshold_index": s.threshold_index,
                "threshold": ws.config.segmentation.thresholds[s.threshold_index],
                "pieces": pieces,
            }));
        }
    }
    let n = rows.len();
    out.jsonl("segments.jsonl", rows)?;
    out.finish("segment", &ws.config, json!({ "segmentations": n, "lossless": lossless }))?;
    Ok(format!("segment: {n} segmentations, lossless = {lossless}"))
}

pub fn index(cfg: RunConfig) -> Result<String> {
    let ws = Workspace::load(cfg)?;
    let mut out = Output::new(&ws.config)?;
    let mut prefixes = Vec::new();
    for (i, doc) in ws.corpus.documents.iter().enumerate() {
        let (prefix, _) = ws.split(i)?;
        prefixes.push(json!({
            "doc_id": doc.doc_id,
            "prefix": ws.corpus.vocab.decode(&prefix),
            "train_neighbours": ws.index.retrieve_topk(&prefix, ws.index.k_train),
            "infer_neighbours": ws.index.retrieve_topk(&prefix, ws.index.k_infer),
        }));
    }
    let surfaces: Vec<String> = ws.corpus.vocab.clone().into();
    out.json(
        "index.json",
        json!({
            "documents": ws.corpus.documents.len(),
            "k_train": ws.index.k_train,
            "k_infer": ws.index.k_infer,
            "vocab": surfaces,
            "term_weights": ws.index.term_weights,
            "prefixes": prefixes,
        }),
    )?;
    let summary = json!({ "documents": ws.corpus.documents.len(), "vocab_size": ws.corpus.vocab.len() });
    out.finish("index", &ws.config, summary)?;
    Ok(format!(
        "index: {} documents, {} tokens in vocabulary",
        ws.corpus.documents.len(),
        ws.corpus.vocab.len()
    ))
}

pub fn train_reward(cfg: RunConfig) -> Result<String> {
    let ws = Workspace::load(cfg)?;
    let mut out = Output::new(&ws.config)?;
    let lm = ws.fit_lm()?;
    let (pm, report) = ws.train_pm()?;
    let hash = out.hash.clone();
    let mut w = out.create(LM_FILE)?;
    lm.write_json_tagged(&mut w, &hash)?;
    w.flush()?;
    let mut w = out.create(PM_FILE)?;
    pm.save_tagged(&mut w, &hash)?;
    w.flush()?;
    let summary = serde_json::to_value(&report)?;
    out.json("reward_report.json", &report)?;
    out.finish("train-reward", &ws.config, summary)?;
    Ok(format!(
        "train-reward: {} pairs, final loss {:.4}",
        report.train_pairs, report.final_train_loss
    ))
}

pub fn train(cfg: RunConfig) -> Result<String> {
    let ws = Workspace::load(cfg)?;
    let reward = load_reward(&ws)?;
    let mut out = Output::new(&ws.config)?;
    let trainer = ws.train_policy(&reward, |_| Ok(()))?;
    let hash = out.hash.clone();
    let mut w = out.create(POLICY_FILE)?;
    trainer.params.save_tagged(&mut w, &hash)?;
    w.flush()?;
    out.jsonl(TRAIN_LOG_FILE, &trainer.log)?;
    let last_epoch = ws.config.train.epochs;
    let last: Vec<f64> = trainer.log.iter().filter(|l| l.epoch == last_epoch).map(|l| l.loss).collect();
    let final_loss = last.iter().sum::<f64>() / last.len().max(1) as f64;
    let summary = json!({ "steps": trainer.steps(), "final_epoch_loss": final_loss });
    out.finish("train", &ws.config, summary)?;
    Ok(format!("train: {} steps, final epoch loss {final_loss:.4}", trainer.steps()))
}

fn sample_prefixes(ws: &Workspace) -> Result<Vec<(Option<DocId>, Vec<TokenId>)>> {
    match &ws.config.sample.prefixes {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
            Ok(text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(|l| (None, ws.corpus.vocab.tokenize(l)))
                .collect())
        }
        None => (0..ws.corpus.documents.len())
            .map(|i| Ok((Some(ws.corpus.documents[i].doc_id), ws.split(i)?.0)))
            .collect(),
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleRow {
    source: usize,
    doc_id: Option<DocId>,
    sample: usize,
    prefix: String,
    continuation: String,
    tokens: Vec<TokenId>,
    steps: usize,
    log_prob: f64,
}

pub fn sample(cfg: RunConfig) -> Result<String> {
    let ws = Workspace::load(cfg)?;
    let params = load_policy(&ws)?;
    let mut out = Output::new(&ws.config)?;
    let vocab = &ws.corpus.vocab;
    let mut rows = Vec::new();
    for (i, (doc_id, prefix)) in sample_prefixes(&ws)?.into_iter().enumerate() {
        let dv = ws.inference_vocab(&prefix);
        let session = PolicySession::new(&params, &dv, ws.max_len());
        for j in 0..ws.config.sample.num_samples {
            let t = sample_trajectory(&prefix, &session, rng::derive(ws.config.seed, &[i as u64, j as u64]))?;
            let gen = t.generated();
            rows.push(SampleRow {
                source: i,
                doc_id,
                sample: j,
                prefix: vocab.decode(&prefix),
                continuation: vocab.decode(&gen),
                tokens: gen,
                steps: t.actions.len(),
                log_prob: t.log_prob(),
            });
        }
    }
    let n = rows.len();
    out.jsonl(SAMPLES_FILE, &rows)?;
    out.finish("sample", &ws.config, json!({ "samples": n }))?;
    Ok(format!("sample: {n} continuations"))
}

fn dump(dist: &Distribution, vocab: &Vocab) -> Value {
    json!({ "distribution": distribution_json(dist, vocab) })
}

pub fn eval_exact(cfg: RunConfig, choice: PolicyChoice) -> Result<String> {
    let ws = Workspace::load(cfg)?;
    let reward = load_reward(&ws)?;
    let mut out = Output::new(&ws.config)?;
    let (prefix, _) = ws.split(ws.config.eval.doc_index)?;
    let dv = ws.inference_vocab(&prefix);
    let space = EnumeratedSpace::build(&dv, &prefix, ws.max_len(), ws.config.eval.bound as u128)?;
    let target = reward_distribution(&space, &reward)?;
    let (name, dist) = match choice {
        PolicyChoice::Trained => {
            let params = load_policy(&ws)?;
            let session = PolicySession::new(&params, &dv, ws.max_len());
            ("trained", exact_terminal_distribution(&session, &space)?)
        }
        PolicyChoice::Consistent => {
            let table = consistent_policy(&dv, &space, &reward)?;
            ("consistent", exact_terminal_distribution(&table, &space)?)
        }
    };
    let tv = tv_distance(&dist, &target);
    let report = json!({
        "policy": name,
        "doc_index": ws.config.eval.doc_index,
        "prefix": ws.corpus.vocab.decode(&prefix),
        "states": space.len(),
        "actions": dv.len(),
        "tv": tv,
        "policy_mass": dist.values().sum::<f64>(),
    });
    out.json("eval_exact.json", &report)?;
    out.json("distribution_policy.json", dump(&dist, &ws.corpus.vocab))?;
    out.json("distribution_target.json", dump(&target, &ws.corpus.vocab))?;
    out.finish("eval-exact", &ws.config, report)?;
    Ok(format!("eval-exact: {name} policy, {} states, TV = {tv:.6}", space.len()))
}

pub fn eval_likelihood(cfg: RunConfig) -> Result<String> {
    let ws = Workspace::load(cfg)?;
    let params = load_policy(&ws)?;
    let mut out = Output::new(&ws.config)?;
    let mut rows = Vec::new();
    let (mut total_ll, mut total_tokens) = (0.0, 0usize);
    for i in 0..ws.corpus.documents.len() {
        let (prefix, residual) = ws.split(i)?;
        let text = &residual[..residual.len().min(ws.max_len())];
        let dv = ws.inference_vocab(&prefix);
        let session = PolicySession::new(&params, &dv, ws.max_len());
        let ll = marginal_log_likelihood(text, &session, &prefix)?;
        total_ll += ll;
        total_tokens += text.len();
        rows.push(json!({
            "doc_id": ws.corpus.documents[i].doc_id,
            "tokens": text.len(),
            "segmentations": count_segmentations(text, &dv).to_string(),
            "log_likelihood": ll,
        }));
    }
    let nll = -total_ll / total_tokens.max(1) as f64;
    out.jsonl("likelihood.jsonl", rows)?;
    let summary = json!({ "documents": ws.corpus.documents.len(), "log_likelihood": total_ll, "nll_per_token": nll });
    out.finish("eval-likelihood", &ws.config, summary)?;
    Ok(format!("eval-likelihood: {nll:.4} nats per token"))
}

pub fn eval_diversity(cfg: RunConfig) -> Result<String> {
    let ws = Workspace::load(cfg)?;
    let mut out = Output::new(&ws.config)?;
    let reader = open_artifact(&ws.config.output_dir, SAMPLES_FILE, "sample")?;
    let mut scores = Vec::new();
    for line in reader.lines() {
        let row: SampleRow = serde_json::from_str(&line?).context("malformed sample row")?;
        scores.push(diversity(&row.tokens));
    }
    let mut reference = Vec::new();
    for i in 0..ws.corpus.documents.len() {
        let (_, residual) = ws.split(i)?;
        reference.push(diversity(&residual[..residual.len().min(ws.max_len())]));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let report = json!({
        "samples": scores.len(),
        "mean_diversity": mean(&scores),
        "reference_mean_diversity": mean(&reference),
    });
    out.json("diversity.json", &report)?;
    out.finish("eval-diversity", &ws.config, report)?;
    Ok(format!("eval-diversity: mean {:.3} over {} samples", mean(&scores), scores.len()))
}

#[derive(Debug, Deserialize)]
struct QaItem {
    prompt: String,
    options: Vec<String>,
    #[serde(default)]
    answer_index: Option<usize>,
}

pub fn qa(cfg: RunConfig, options: Option<PathBuf>) -> Result<String> {
    let path = options
        .or_else(|| cfg.eval.qa_path.clone())
        .ok_or_else(|| Error::Config("qa needs --options or eval.qa_path".into()))?;
    let ws = Workspace::load(cfg)?;
    let params = load_policy(&ws)?;
    let mut out = Output::new(&ws.config)?;
    let text = fs::read_to_string(&path).with_context(|| format!("cannot read {}", path.display()))?;
    let vocab = &ws.corpus.vocab;
    let mut rows = Vec::new();
    let (mut answered, mut correct) = (0usize, 0usize);
    for (line, raw) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let item: QaItem = serde_json::from_str(raw).with_context(|| format!("malformed options line {}", line + 1))?;
        let prompt = vocab.tokenize(&item.prompt);
        let opts: Vec<Vec<TokenId>> = item.options.iter().map(|o| vocab.tokenize(o)).collect();
        let max_len = opts.iter().map(Vec::len).max().unwrap_or(0).max(ws.max_len());
        let dv = ws.inference_vocab(&prompt);
        let session = PolicySession::new(&params, &dv, max_len);
        let choice = choose_option(&prompt, &opts, &session)?;
        let lls = opts
            .iter()
            .map(|o| marginal_log_likelihood(o, &session, &prompt))
            .collect::<crate::Result<Vec<f64>>>()?;
        let is_correct = item.answer_index.map(|a| a == choice);
        if let Some(c) = is_correct {
            answered += 1;
            correct += c as usize;
        }
        rows.push(json!({
            "line": line + 1,
            "choice": choice,
            "log_likelihoods": lls,
            "answer_index": item.answer_index,
            "correct": is_correct,
        }));
    }
    let accuracy = (answered > 0).then(|| correct as f64 / answered as f64);
    let n = rows.len();
    out.jsonl("qa.jsonl", rows)?;
    out.finish("qa", &ws.config, json!({ "items": n, "answered": answered, "accuracy": accuracy }))?;
    Ok(match accuracy {
        Some(a) => format!("qa: {n} items, accuracy {a:.3}"),
        None => format!("qa: {n} items"),
    })
}
