use std::collections::{BTreeMap, HashMap};
use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use ifclust_core::baselines::{
    chars_div4, cluster, embedding_input, filter_by_length, read_embedding_blocks, write_embedding_block,
    BaselineConfig, EmbeddingSet,
};
use ifclust_core::bench::{build_benchmark, load_examples, read_jsonl, write_examples, write_jsonl, write_tasks, Range, SamplerConfig, SplitCounts};
use ifclust_core::metrics::{aggregate, render_table, v_measure, ReportRecord};
use ifclust_core::reward::{group_advantages, score_response};
use ifclust_core::{Example, FormatVerdict, MetricScore, Partition, Report, RewardBreakdown, RewardConfig};
use ifclust_llm::eval::{build_report, infer, score_responses};
use ifclust_llm::synth::{
    synthesize_task, trace_examples, Agents, CandidateTaxonomy, Corpus, SynthConfig, SynthError, SynthStart,
};
use ifclust_llm::{CachedResponse, InferOptions, OpenAiClient};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tracing::info;

use crate::manifest::RunManifest;
use crate::{io_context, BaselineArgs, CliError, Command, InferArgs, RewardArgs, ScoreArgs, SplitArgs, StartStage, SynthArgs, TracesArgs};

pub(crate) fn dispatch(command: Command, argv: &[OsString]) -> Result<(), CliError> {
    match command {
        Command::Split(a) => split(&a, argv),
        Command::Synth(a) => synth(&a, argv),
        Command::Traces(a) => traces(&a, argv),
        Command::Infer(a) => infer_cmd(&a, argv),
        Command::Score(a) => score(&a, argv),
        Command::Baseline(a) => baseline(&a, argv),
        Command::Reward(a) => reward(&a, argv),
    }
}

fn ensure_input(path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Data(format!("{}: no such file", path.display())))
    }
}

fn ensure_out(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_context(dir, e))
}

fn runtime() -> Result<tokio::runtime::Runtime, CliError> {
    tokio::runtime::Runtime::new().map_err(|e| CliError::Data(format!("cannot start async runtime: {e}")))
}

fn reward_config(gamma: f64, epsilon: f64) -> Result<RewardConfig, CliError> {
    Ok(RewardConfig::new(gamma, epsilon)?)
}

fn write_pretty(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| io_context(path, e))
}

fn load_responses(path: &Path) -> Result<Vec<CachedResponse>, CliError> {
    Ok(read_jsonl::<CachedResponse>(path)?.into_iter().map(|(_, r)| r).collect())
}

// ---------------------------------------------------------------------------

fn split(a: &SplitArgs, argv: &[OsString]) -> Result<(), CliError> {
    ensure_input(&a.tasks)?;
    let cfg = SamplerConfig {
        seed: a.seed,
        cluster_subset_range: Range::new(a.min_clusters, a.max_clusters),
        per_cluster_range: Range::new(a.min_texts, a.max_texts),
        train_ratio: a.ratio,
    };
    cfg.validate()?;
    let tasks = ifclust_core::bench::load_tasks(&a.tasks)?;
    if tasks.is_empty() {
        return Err(CliError::Data(format!("{}: no tasks", a.tasks.display())));
    }
    let counts = SplitCounts {
        train: a.train_count,
        c0: a.c0_count,
        c1: a.c1_count,
        c2: a.c2_count,
    };
    let splits = build_benchmark(&tasks, counts, &cfg)?;

    ensure_out(&a.out)?;
    let mut manifest = RunManifest::new("split", argv, a)?;
    manifest.input("tasks", &a.tasks);
    for (name, examples) in [
        ("train", &splits.train),
        ("c0", &splits.c0),
        ("c1", &splits.c1),
        ("c2", &splits.c2),
    ] {
        let path = a.out.join(format!("{name}.jsonl"));
        write_examples(examples, &path)?;
        manifest.output(&path);
    }
    let pools_path = a.out.join("pools.json");
    write_pretty(&pools_path, &splits.pools)?;
    manifest.output(&pools_path);
    manifest.summary = json!({
        "tasks": tasks.len(),
        "held_out_tasks": tasks.iter().filter(|t| t.held_out).count(),
        "train": splits.train.len(),
        "c0": splits.c0.len(),
        "c1": splits.c1.len(),
        "c2": splits.c2.len(),
    });
    manifest.write(&a.out)?;
    println!(
        "train {}  c0 {}  c1 {}  c2 {}",
        splits.train.len(),
        splits.c0.len(),
        splits.c1.len(),
        splits.c2.len()
    );
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct TaxonomyLine {
    task_id: String,
    #[serde(flatten)]
    taxonomy: CandidateTaxonomy,
}

#[derive(Debug, Serialize)]
struct SynthFailure<'a> {
    task_id: &'a str,
    error: String,
}

fn synth(a: &SynthArgs, argv: &[OsString]) -> Result<(), CliError> {
    ensure_input(&a.corpus)?;
    let corpora: Vec<Corpus> = read_jsonl::<Corpus>(&a.corpus)?.into_iter().map(|(_, c)| c).collect();
    if corpora.is_empty() {
        return Err(CliError::Data(format!("{}: no corpora", a.corpus.display())));
    }
    let given: HashMap<String, CandidateTaxonomy> = match (&a.taxonomies, a.start) {
        (None, StartStage::Generate) => HashMap::new(),
        (None, _) => return Err(CliError::Usage("--start refine|label needs --taxonomies".into())),
        (Some(_), StartStage::Generate) => {
            return Err(CliError::Usage("--taxonomies needs --start refine or --start label".into()))
        }
        (Some(path), _) => {
            ensure_input(path)?;
            read_jsonl::<TaxonomyLine>(path)?
                .into_iter()
                .map(|(_, l)| (l.task_id, l.taxonomy))
                .collect()
        }
    };

    let cfg_a = a.endpoint.config()?;
    let cfg_b = a.endpoint.config_for(
        a.labeler_endpoint.clone().unwrap_or_else(|| cfg_a.base_url.clone()),
        a.labeler_model.clone().unwrap_or_else(|| cfg_a.model.clone()),
    );
    let client = OpenAiClient::new(cfg_a)?;
    let labeler_b = OpenAiClient::new(cfg_b)?;
    let cfg = SynthConfig {
        name_word_limit: a.name_limit,
        desc_word_limit: a.desc_limit,
        sample_size: a.sample_size,
        max_in_flight: a.endpoint.max_in_flight,
        ..SynthConfig::default()
    };

    ensure_out(&a.out)?;
    let rt = runtime()?;
    let mut tasks = Vec::new();
    let mut taxonomies = Vec::new();
    let mut audit = Vec::new();
    let mut labels = Vec::new();
    let mut failures = Vec::new();
    for corpus in &corpora {
        let start = match a.start {
            StartStage::Generate => SynthStart::Generate,
            stage => {
                let t = given.get(&corpus.task_id).cloned().ok_or_else(|| {
                    CliError::Data(format!("no taxonomy given for task {:?}", corpus.task_id))
                })?;
                if stage == StartStage::Refine {
                    SynthStart::Refine(t)
                } else {
                    SynthStart::Label(t)
                }
            }
        };
        let agents = Agents {
            generator: &client,
            refiner: &client,
            labeler_a: &client,
            labeler_b: &labeler_b,
        };
        info!(task_id = %corpus.task_id, "synthesizing");
        match rt.block_on(synthesize_task(agents, corpus, start, &cfg)) {
            Ok(out) => {
                for e in out.audit {
                    audit.push(json!({"task_id": corpus.task_id, "entry": e}));
                }
                for l in out.labels {
                    labels.push(json!({"task_id": corpus.task_id, "label": l}));
                }
                taxonomies.push(TaxonomyLine {
                    task_id: corpus.task_id.clone(),
                    taxonomy: out.taxonomy,
                });
                tasks.push(out.task);
            }
            Err(SynthError::Agent(e)) => return Err(e.into()),
            Err(e) => failures.push(SynthFailure {
                task_id: &corpus.task_id,
                error: e.to_string(),
            }),
        }
    }

    let mut manifest = RunManifest::new("synth", argv, a)?;
    manifest.input("corpus", &a.corpus);
    if let Some(t) = &a.taxonomies {
        manifest.input("taxonomies", t);
    }
    let tasks_path = a.out.join("tasks.jsonl");
    write_tasks(&tasks, &tasks_path)?;
    manifest.output(&tasks_path);
    for (name, rows) in [("audit.jsonl", &audit), ("labels.jsonl", &labels)] {
        let path = a.out.join(name);
        write_jsonl(&path, rows)?;
        manifest.output(&path);
    }
    let tax_path = a.out.join("taxonomies.jsonl");
    write_jsonl(&tax_path, &taxonomies)?;
    manifest.output(&tax_path);
    let fail_path = a.out.join("failures.jsonl");
    write_jsonl(&fail_path, &failures)?;
    manifest.output(&fail_path);
    manifest.summary = json!({"corpora": corpora.len(), "tasks": tasks.len(), "failed": failures.len()});
    manifest.write(&a.out)?;
    println!("tasks {}  failed {}", tasks.len(), failures.len());
    if tasks.is_empty() {
        return Err(CliError::Data(format!(
            "no task could be assembled; see {}",
            fail_path.display()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------

fn traces(a: &TracesArgs, argv: &[OsString]) -> Result<(), CliError> {
    ensure_input(&a.examples)?;
    let examples = load_examples(&a.examples)?;
    if examples.is_empty() {
        return Err(CliError::Data(format!("{}: no examples", a.examples.display())));
    }
    let gen_cfg = a.endpoint.config()?;
    let rev_cfg = a.endpoint.config_for(
        a.reviewer_endpoint.clone().unwrap_or_else(|| gen_cfg.base_url.clone()),
        a.reviewer_model.clone().unwrap_or_else(|| gen_cfg.model.clone()),
    );
    let generator = OpenAiClient::new(gen_cfg)?;
    let reviewer = OpenAiClient::new(rev_cfg)?;
    let cfg = SynthConfig {
        trace_min_chars: a.min_chars,
        max_in_flight: a.endpoint.max_in_flight,
        ..SynthConfig::default()
    };
    let records = runtime()?.block_on(trace_examples(&generator, &reviewer, &examples, &cfg));

    ensure_out(&a.out)?;
    let path = a.out.join("traces.jsonl");
    write_jsonl(&path, &records)?;
    let accepted = records
        .iter()
        .filter(|r| r.verdict == ifclust_llm::synth::TraceVerdict::Accept)
        .count();
    let agent_failures = records
        .iter()
        .filter(|r| r.reason.starts_with("agent call failed"))
        .count();
    let mut manifest = RunManifest::new("traces", argv, a)?;
    manifest.input("examples", &a.examples);
    manifest.output(&path);
    manifest.summary = json!({"examples": records.len(), "accepted": accepted, "agent_failures": agent_failures});
    manifest.write(&a.out)?;
    println!("accepted {accepted} of {}", records.len());
    if agent_failures == records.len() {
        return Err(CliError::Endpoint("every trace request failed".into()));
    }
    Ok(())
}

// ---------------------------------------------------------------------------

fn infer_cmd(a: &InferArgs, argv: &[OsString]) -> Result<(), CliError> {
    ensure_input(&a.examples)?;
    let examples = load_examples(&a.examples)?;
    if examples.is_empty() {
        return Err(CliError::Data(format!("{}: no examples", a.examples.display())));
    }
    let client = OpenAiClient::new(a.endpoint.config()?)?;
    let opts = InferOptions {
        samples: a.samples,
        max_in_flight: a.endpoint.max_in_flight,
        max_units: a.max_units,
        overlong: a.overlong.into(),
        format_system_prompt: a.format_system_prompt,
    };
    let responses = runtime()?.block_on(infer(&client, &examples, &opts))?;

    ensure_out(&a.out)?;
    let path = a.out.join("responses.jsonl");
    write_jsonl(&path, &responses)?;
    let failed = responses.iter().filter(|r| r.error.is_some()).count();
    let skipped = responses
        .iter()
        .filter(|r| r.error.as_deref().is_some_and(|e| e.starts_with("skipped")))
        .count();
    let mut manifest = RunManifest::new("infer", argv, a)?;
    manifest.input("examples", &a.examples);
    manifest.output(&path);
    manifest.summary = json!({"responses": responses.len(), "failed": failed, "skipped": skipped});
    manifest.write(&a.out)?;
    println!("responses {}  failed {failed}", responses.len());
    if failed == responses.len() && failed > skipped {
        let first = responses.iter().find_map(|r| r.error.clone()).unwrap_or_default();
        return Err(CliError::Endpoint(format!("every request failed; first error: {first}")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------

fn write_report(out: &Path, report: &Report, manifest: &mut RunManifest) -> Result<String, CliError> {
    let json_path = out.join("report.json");
    write_pretty(&json_path, report)?;
    manifest.output(&json_path);
    let table = render_table(std::slice::from_ref(report));
    let txt_path = out.join("report.txt");
    fs::write(&txt_path, &table).map_err(|e| io_context(&txt_path, e))?;
    manifest.output(&txt_path);
    Ok(table)
}

fn score(a: &ScoreArgs, argv: &[OsString]) -> Result<(), CliError> {
    ensure_input(&a.examples)?;
    ensure_input(&a.responses)?;
    let cfg = reward_config(a.reward.gamma, a.reward.epsilon)?;
    let examples = load_examples(&a.examples)?;
    let responses = load_responses(&a.responses)?;
    if responses.is_empty() {
        return Err(CliError::Data(format!("{}: no responses", a.responses.display())));
    }
    let records = score_responses(&examples, &responses, &cfg)?;
    let model = a
        .model
        .clone()
        .or_else(|| responses.first().map(|r| r.model.clone()))
        .unwrap_or_else(|| "unknown".into());
    let report = build_report(&model, &records)?;

    ensure_out(&a.out)?;
    let mut manifest = RunManifest::new("score", argv, a)?;
    manifest.input("examples", &a.examples);
    manifest.input("responses", &a.responses);
    let rec_path = a.out.join("records.jsonl");
    write_jsonl(&rec_path, &records)?;
    manifest.output(&rec_path);
    let table = write_report(&a.out, &report, &mut manifest)?;
    let answered: std::collections::HashSet<&str> = responses.iter().map(|r| r.example_id.as_str()).collect();
    manifest.summary = json!({
        "records": records.len(),
        "format_accuracy": report.format_accuracy,
        "overall_v": report.overall_v,
        "unanswered_examples": examples.iter().filter(|e| !answered.contains(e.example_id.as_str())).count(),
        "format_errors": report.error_histogram(),
    });
    manifest.write(&a.out)?;
    print!("{table}");
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Debug, Serialize)]
struct BaselineRow<'a> {
    example_id: &'a str,
    k: usize,
    partition: Partition,
    score: MetricScore,
}

fn load_embeddings(path: &Path, examples: &[Example]) -> Result<HashMap<String, EmbeddingSet>, CliError> {
    ensure_input(path)?;
    let file = File::open(path).map_err(|e| io_context(path, e))?;
    let blocks = read_embedding_blocks(BufReader::new(file), &path.display().to_string())?;
    let mut out = HashMap::new();
    for (id, set) in blocks {
        let id = match id {
            Some(id) => id,
            None if examples.len() == 1 => examples[0].example_id.clone(),
            None => {
                return Err(CliError::Data(format!(
                    "{}: embedding block without example_id",
                    path.display()
                )))
            }
        };
        if out.insert(id.clone(), set).is_some() {
            return Err(CliError::Data(format!("{}: duplicate block for {id}", path.display())));
        }
    }
    Ok(out)
}

fn baseline(a: &BaselineArgs, argv: &[OsString]) -> Result<(), CliError> {
    ensure_input(&a.examples)?;
    let examples = load_examples(&a.examples)?;
    let (kept, dropped) = filter_by_length(examples, a.max_units, &chars_div4);
    if kept.is_empty() {
        return Err(CliError::Data("no examples left after length filtering".into()));
    }
    ensure_out(&a.out)?;
    let mut manifest = RunManifest::new("baseline", argv, a)?;
    manifest.input("examples", &a.examples);

    let mut embeddings = match &a.embeddings {
        Some(path) => {
            manifest.input("embeddings", path);
            load_embeddings(path, &kept)?
        }
        None => {
            let client = OpenAiClient::new(a.endpoint.config()?)?;
            let rt = runtime()?;
            let cache_path = a.out.join("embeddings.jsonl");
            let mut w = BufWriter::new(File::create(&cache_path).map_err(|e| io_context(&cache_path, e))?);
            let mut out = HashMap::new();
            for ex in &kept {
                let inputs = ex
                    .items
                    .iter()
                    .map(|it| Ok(embedding_input(a.template.into(), &ex.instruction, &it.text)?.render()))
                    .collect::<Result<Vec<String>, CliError>>()?;
                let set = rt.block_on(client.embed(&inputs, false))?;
                write_embedding_block(&mut w, Some(&ex.example_id), &set)?;
                out.insert(ex.example_id.clone(), set);
            }
            w.flush()?;
            manifest.output(&cache_path);
            out
        }
    };

    let mut rows = Vec::with_capacity(kept.len());
    let mut records = Vec::with_capacity(kept.len());
    for ex in &kept {
        let mut set = embeddings
            .remove(&ex.example_id)
            .ok_or_else(|| CliError::Data(format!("no embeddings for example {}", ex.example_id)))?;
        if set.len() != ex.m() {
            return Err(CliError::Data(format!(
                "example {} has {} items but {} embeddings",
                ex.example_id,
                ex.m(),
                set.len()
            )));
        }
        if a.normalize {
            set.normalize();
        }
        let cfg = BaselineConfig {
            seed: a.seed,
            n_init: a.n_init,
            max_iter: a.max_iter,
            tol: a.tol,
            covariance: a.covariance.into(),
            reg_covar: a.reg_covar,
            ..BaselineConfig::new(a.algo.into(), ex.gold_k)
        };
        let partition = cluster(&set, &cfg)?;
        let score = v_measure(&partition, &ex.gold)?;
        records.push(ReportRecord {
            example_id: ex.example_id.clone(),
            dataset: ex.dataset,
            split: ex.split,
            verdict: FormatVerdict::ok(),
            score,
            reward: None,
        });
        rows.push(BaselineRow {
            example_id: &ex.example_id,
            k: ex.gold_k,
            partition,
            score,
        });
    }

    let label = match (&a.embeddings, &a.endpoint.model) {
        (None, Some(m)) => format!("{m}+{:?}", a.algo).to_lowercase(),
        _ => format!("{:?}", a.algo).to_lowercase(),
    };
    let report = aggregate(&label, records)?;
    let part_path = a.out.join("partitions.jsonl");
    write_jsonl(&part_path, &rows)?;
    manifest.output(&part_path);
    let table = write_report(&a.out, &report, &mut manifest)?;
    manifest.summary = json!({
        "clustered": rows.len(),
        "dropped_overlong": dropped.iter().map(|e| e.example_id.as_str()).collect::<Vec<_>>(),
        "overall_v": report.overall_v,
    });
    manifest.write(&a.out)?;
    print!("{table}");
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Debug, Serialize)]
struct RewardRow<'a> {
    example_id: &'a str,
    group: usize,
    sample: usize,
    reward: RewardBreakdown,
    advantage: f64,
}

fn reward(a: &RewardArgs, argv: &[OsString]) -> Result<(), CliError> {
    ensure_input(&a.examples)?;
    ensure_input(&a.responses)?;
    if a.group_size == 0 {
        return Err(CliError::Usage("--group-size must be >= 1".into()));
    }
    let cfg = reward_config(a.reward.gamma, a.reward.epsilon)?;
    let examples = load_examples(&a.examples)?;
    let by_id: HashMap<&str, &Example> = examples.iter().map(|e| (e.example_id.as_str(), e)).collect();
    let responses = load_responses(&a.responses)?;
    if responses.is_empty() {
        return Err(CliError::Data(format!("{}: no responses", a.responses.display())));
    }

    // responses per example, in file order
    let mut grouped: BTreeMap<&str, Vec<&CachedResponse>> = BTreeMap::new();
    for r in &responses {
        if !by_id.contains_key(r.example_id.as_str()) {
            return Err(CliError::Data(format!("response for unknown example {:?}", r.example_id)));
        }
        grouped.entry(r.example_id.as_str()).or_default().push(r);
    }

    let mut rows = Vec::with_capacity(responses.len());
    let mut n_groups = 0;
    for (id, rs) in &grouped {
        if rs.len() % a.group_size != 0 {
            return Err(CliError::Data(format!(
                "example {id} has {} responses, not a multiple of group size {}",
                rs.len(),
                a.group_size
            )));
        }
        let ex = by_id[id];
        for (g, chunk) in rs.chunks(a.group_size).enumerate() {
            let breakdowns: Vec<RewardBreakdown> =
                chunk.iter().map(|r| score_response(&r.raw, ex, &cfg).reward).collect();
            let totals: Vec<f64> = breakdowns.iter().map(|b| b.total).collect();
            let adv = group_advantages(&totals)?;
            for (s, (reward, advantage)) in breakdowns.into_iter().zip(adv).enumerate() {
                rows.push(RewardRow {
                    example_id: id,
                    group: g,
                    sample: s,
                    reward,
                    advantage,
                });
            }
            n_groups += 1;
        }
    }

    ensure_out(&a.out)?;
    let path = a.out.join("rewards.jsonl");
    write_jsonl(&path, &rows)?;
    let mean = rows.iter().map(|r| r.reward.total).sum::<f64>() / rows.len() as f64;
    let mut manifest = RunManifest::new("reward", argv, a)?;
    manifest.input("examples", &a.examples);
    manifest.input("responses", &a.responses);
    manifest.output(&path);
    manifest.summary = json!({"responses": rows.len(), "groups": n_groups, "mean_reward": mean});
    manifest.write(&a.out)?;
    println!("groups {n_groups}  responses {}  mean reward {mean:.4}", rows.len());
    Ok(())
}
