use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use neuronscope::annotation::{annotate, read_matrix, write_matrix, AnnotateOptions};
use neuronscope::attribution::{
    attribute, invert_mapping, read_report, write_report, AttributionParams, UnresolvedPolicy,
};
use neuronscope::corpus::{
    filter_corpus, load_corpus, split_corpus, split_distribution, FilterParams,
};
use neuronscope::descriptors::{
    apply_blacklist, assign_representatives, cluster_descriptors, generate_candidates,
    read_candidates, read_embeddings, unique_surfaces, write_candidates, ClusterParams,
    DescriptorSet, GenerateOptions, LabelMap, OneShotExample, PromptTemplate,
};
use neuronscope::evaluation::{
    build_report, default_t_grid, phi_correlation, EvalConfig, EvalInputs, GroundTruth,
};
use neuronscope::gateway::{Gateway, GatewayConfig};
use neuronscope::parallel::Parallelism;
use neuronscope::store::read_store;
use neuronscope::synthkit::{generate, write_all, SynthSpec};
use serde::Serialize;

use crate::manifest::{manifest_path, Manifest};
use crate::{
    AnnotateArgs, AttributeArgs, Cli, ClusterArgs, Command, EvaluateArgs, GatewayArgs, GenArgs,
    IngestArgs, ReportArgs, SplitArgs, SynthArgs, Unresolved, UsageError,
};

pub fn run(cli: Cli) -> Result<String> {
    let par = match cli.jobs {
        Some(0) => bail!(UsageError("--jobs must be at least 1".into())),
        Some(1) => Parallelism::Sequential,
        _ => Parallelism::Parallel,
    };
    #[cfg(feature = "parallel")]
    if let Some(n) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring worker threads")?;
    }
    match cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Split(a) => split(a),
        Command::GenDescriptors(a) => gen_descriptors(a),
        Command::Cluster(a) => cluster(a, par),
        Command::Annotate(a) => annotate_cmd(a),
        Command::Attribute(a) => attribute_cmd(a, par),
        Command::Evaluate(a) => evaluate(a, par),
        Command::Synth(a) => synth(a),
        Command::Report(a) => report(a, par),
    }
}

fn finish(
    command: &'static str,
    params: &impl Serialize,
    inputs: &[&Path],
    outputs: &[&Path],
) -> Result<()> {
    finish_at(outputs[0], command, params, inputs, outputs)
}

/// Manifest placed by `anchor`: next to a file, or inside a directory.
fn finish_at(
    anchor: &Path,
    command: &'static str,
    params: &impl Serialize,
    inputs: &[&Path],
    outputs: &[&Path],
) -> Result<()> {
    let inputs: Vec<PathBuf> = inputs.iter().map(|p| p.to_path_buf()).collect();
    let outputs: Vec<PathBuf> = outputs.iter().map(|p| p.to_path_buf()).collect();
    let m = Manifest::new(command, params, &inputs, &outputs)?;
    m.write(&manifest_path(anchor))
}

fn create_parents(paths: &[Option<&Path>]) -> Result<()> {
    for dir in paths.iter().flatten().filter_map(|p| p.parent()) {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    create_parents(&[Some(path)])?;
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn json_text(v: &impl Serialize) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s)
}

fn ingest(a: IngestArgs) -> Result<String> {
    if a.min_words > a.max_words {
        bail!(UsageError(format!(
            "--min-words {} exceeds --max-words {}",
            a.min_words, a.max_words
        )));
    }
    let raw = load_corpus(&a.input)?;
    let params = FilterParams {
        min_words: a.min_words,
        max_words: a.max_words,
        english_only: a.english_only,
    };
    let kept = filter_corpus(&raw, &params)?;
    create_parents(&[Some(&a.out)])?;
    kept.write_jsonl(&a.out)?;
    finish("ingest", &a, &[&a.input], &[&a.out])?;
    Ok(format!(
        "ingest: kept {} of {} sentences -> {}",
        kept.len(),
        raw.len(),
        a.out.display()
    ))
}

fn split(a: SplitArgs) -> Result<String> {
    let corpus = load_corpus(&a.corpus)?;
    let out = split_corpus(&corpus, a.seed)?;
    create_parents(&[Some(&a.out)])?;
    out.write_jsonl(&a.out)?;
    finish("split", &a, &[&a.corpus], &[&a.out])?;
    let n = out.len();
    Ok(format!(
        "split: {} calibration / {} validation -> {}",
        n.div_ceil(2),
        n / 2,
        a.out.display()
    ))
}

fn gateway(g: &GatewayArgs) -> Result<Gateway> {
    let config = GatewayConfig {
        mode: g.mode,
        endpoint: g.endpoint.clone(),
        api_key: g.api_key.clone(),
        cache_dir: Some(g.cache_dir.clone()),
        fixtures_dir: g.fixtures_dir.clone(),
        max_in_flight: g.max_in_flight,
        wire_format: g.wire_format,
        timeout: Duration::from_secs(g.timeout_secs),
        ..GatewayConfig::default()
    };
    if g.max_in_flight == 0 {
        bail!(UsageError("--max-in-flight must be at least 1".into()));
    }
    if config.mode == neuronscope::gateway::Mode::Replay && config.fixtures_dir.is_none() {
        bail!(UsageError("--mode replay needs --fixtures-dir".into()));
    }
    if config.mode == neuronscope::gateway::Mode::Live && config.endpoint.is_none() {
        bail!(UsageError(
            "--mode live needs --endpoint or NEURONSCOPE_LLM_ENDPOINT".into()
        ));
    }
    Ok(Gateway::new(config)?)
}

const MAX_WARNINGS: usize = 5;

fn more_failures(n: usize) {
    if n > MAX_WARNINGS {
        log::warn!("... and {} more failed requests", n - MAX_WARNINGS);
    }
}

fn read_template(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading template {}", path.display()))
}

fn gen_descriptors(a: GenArgs) -> Result<String> {
    let corpus = load_corpus(&a.corpus)?;
    let mut template = match &a.template {
        Some(p) => PromptTemplate::new(read_template(p)?),
        None => PromptTemplate::default_p1(),
    };
    if let Some(p) = &a.example {
        let text = read_template(p)?;
        let ex: OneShotExample = serde_json::from_str(&text)
            .with_context(|| format!("parsing example {}", p.display()))?;
        template = template.with_example(ex);
    }
    let gw = gateway(&a.gateway)?;
    let templates: Vec<(String, PromptTemplate)> = a
        .model
        .iter()
        .map(|m| (m.clone(), template.clone()))
        .collect();
    let opts = GenerateOptions {
        max_output_tokens: a.max_output_tokens,
        max_in_flight: a.gateway.max_in_flight,
    };
    let run = generate_candidates(&gw, &corpus, &templates, opts)?;
    for f in run.failures.iter().take(MAX_WARNINGS) {
        log::warn!("{} / {}: {}", f.sentence_id, f.model_id, f.message);
    }
    more_failures(run.failures.len());
    if run.requests > 0 && run.failures.len() == run.requests {
        bail!(
            "all {} generation requests failed; first: {}",
            run.requests,
            run.failures[0].message
        );
    }
    create_parents(&[Some(&a.out)])?;
    write_candidates(&run.candidates, &a.out)?;
    let surfaces = unique_surfaces(&run.candidates);
    let mut outputs = vec![a.out.as_path()];
    if let Some(p) = &a.surfaces_out {
        let mut text = surfaces.join("\n");
        if !text.is_empty() {
            text.push('\n');
        }
        write_text(p, &text)?;
        outputs.push(p);
    }
    let mut inputs = vec![a.corpus.as_path()];
    inputs.extend(a.template.as_deref());
    inputs.extend(a.example.as_deref());
    finish("gen-descriptors", &a, &inputs, &outputs)?;
    Ok(format!(
        "gen-descriptors: {} candidates, {} distinct surfaces, {} requests, {} failed -> {}",
        run.candidates.len(),
        surfaces.len(),
        run.requests,
        run.failures.len(),
        a.out.display()
    ))
}

fn cluster(a: ClusterArgs, par: Parallelism) -> Result<String> {
    if a.label_map.is_some() && a.descriptors_out.is_none() {
        bail!(UsageError("--label-map needs --descriptors-out".into()));
    }
    let candidates = read_candidates(&a.candidates)?;
    let table = read_embeddings(&a.embeddings)?;
    let params = ClusterParams {
        threshold: a.cluster_threshold,
        min_community_size: a.min_size,
    };
    let clusters = cluster_descriptors(&unique_surfaces(&candidates), &table, params, par)?;
    let communities = clusters.iter().filter(|c| !c.residual).count();

    let mut inputs = vec![a.candidates.as_path(), a.embeddings.as_path()];
    let (Some(map_path), Some(desc_out)) = (&a.label_map, &a.descriptors_out) else {
        write_text(&a.out, &json_text(&clusters)?)?;
        // Every community needs a label; residual singletons may be left out.
        let template: std::collections::BTreeMap<String, String> = clusters
            .iter()
            .enumerate()
            .filter(|(_, c)| !c.residual)
            .map(|(i, c)| (i.to_string(), c.seed.clone()))
            .collect();
        let template_path = a.out.with_file_name("label_map.template.json");
        write_text(&template_path, &json_text(&template)?)?;
        finish("cluster", &a, &inputs, &[&a.out, &template_path])?;
        return Ok(format!(
            "cluster: {communities} communities, {} residual surfaces; label template -> {}",
            clusters.len() - communities,
            template_path.display()
        ));
    };
    let labels = LabelMap::read_json(map_path)?;
    let labeling = assign_representatives(&clusters, &labels)?;
    let blacklist = if a.no_blacklist {
        Vec::new()
    } else {
        a.blacklist.clone()
    };
    let (set, warnings) = apply_blacklist(&labeling.set, &blacklist);
    for w in &warnings {
        log::warn!("{w}");
    }
    write_text(&a.out, &json_text(&labeling.clusters)?)?;
    write_text(desc_out, &set.to_json())?;
    inputs.push(map_path);
    finish("cluster", &a, &inputs, &[&a.out, desc_out])?;
    Ok(format!(
        "cluster: {communities} communities -> {} descriptors ({} blacklisted, {} residual surfaces dropped) -> {}",
        set.len(),
        set.blacklist_applied.len(),
        labeling.dropped_residuals.len(),
        desc_out.display()
    ))
}

fn annotate_cmd(a: AnnotateArgs) -> Result<String> {
    let corpus = load_corpus(&a.corpus)?;
    let set = DescriptorSet::read_json(&a.descriptors)?;
    let template = match &a.template {
        Some(p) => PromptTemplate::new(read_template(p)?),
        None => PromptTemplate::default_p2(),
    };
    let gw = gateway(&a.gateway)?;
    let opts = AnnotateOptions {
        max_output_tokens: a.max_output_tokens,
        max_in_flight: a.gateway.max_in_flight,
    };
    let ann = annotate(&gw, &a.model, &corpus, &set, &template, opts)?;
    for f in ann.failures.iter().take(MAX_WARNINGS) {
        log::warn!("{} / {}: {}", f.sentence_id, f.descriptor, f.message);
    }
    more_failures(ann.failures.len());
    if ann.requests > 0 && ann.failures.len() == ann.requests {
        bail!(
            "all {} annotation requests failed; first: {}",
            ann.requests,
            ann.failures[0].message
        );
    }
    create_parents(&[Some(&a.out)])?;
    write_matrix(&ann.matrix, &a.out)?;
    let mut outputs = vec![a.out.as_path()];
    if let Some(p) = &a.csv {
        write_text(p, &ann.matrix.to_csv()?)?;
        outputs.push(p);
    }
    let mut inputs = vec![a.corpus.as_path(), a.descriptors.as_path()];
    inputs.extend(a.template.as_deref());
    finish("annotate", &a, &inputs, &outputs)?;
    Ok(format!(
        "annotate: {} x {} cells, {} yes, {} unresolved -> {}",
        ann.matrix.rows(),
        ann.matrix.cols(),
        ann.matrix.ones(),
        ann.matrix.unresolved_count(),
        a.out.display()
    ))
}

fn attribute_cmd(a: AttributeArgs, par: Parallelism) -> Result<String> {
    if !(a.k_percent > 0.0 && a.k_percent <= 100.0) {
        bail!(UsageError(format!(
            "--k-percent {} not in (0, 100]",
            a.k_percent
        )));
    }
    if !(0.0..=1.0).contains(&a.threshold) {
        bail!(UsageError(format!(
            "--threshold {} not in [0, 1]",
            a.threshold
        )));
    }
    let store = read_store(&a.store)?;
    let matrix = read_matrix(&a.matrix)?;
    let params = AttributionParams {
        k_percent: a.k_percent,
        threshold: a.threshold,
        unresolved: match a.unresolved {
            Unresolved::CountAsNo => UnresolvedPolicy::CountAsNo,
            Unresolved::Exclude => UnresolvedPolicy::Exclude,
        },
    };
    let all = attribute(&store, &matrix, &store.neurons(), params, par)?;
    create_parents(&[Some(&a.out)])?;
    write_report(&all, &a.out)?;
    let mut outputs = vec![a.out.as_path()];
    if let Some(p) = &a.inverse_out {
        write_text(p, &invert_mapping(&all)?.to_json())?;
        outputs.push(p);
    }
    finish("attribute", &a, &[&a.store, &a.matrix], &outputs)?;
    let described = all.iter().filter(|n| !n.assigned.is_empty()).count();
    Ok(format!(
        "attribute: {described} of {} neurons assigned at least one descriptor -> {}",
        all.len(),
        a.out.display()
    ))
}

fn evaluate(a: EvaluateArgs, par: Parallelism) -> Result<String> {
    if a.k_list.contains(&0) {
        bail!(UsageError("--k-list values must be at least 1".into()));
    }
    let cal = read_report(&a.attr_cal)?;
    let val = a.attr_val.as_deref().map(read_report).transpose()?;
    let truth = a.truth.as_deref().map(GroundTruth::read).transpose()?;
    let matrix = a.matrix.as_deref().map(read_matrix).transpose()?;
    let reference = a.annotations_ref.as_deref().map(read_matrix).transpose()?;
    let other = a.annotations.as_deref().map(read_matrix).transpose()?;
    let cfg = EvalConfig {
        t_grid: a.t_grid.clone().unwrap_or_else(default_t_grid),
        k_list: a.k_list.clone(),
        truth_top: (a.truth_top > 0).then_some(a.truth_top),
        labels: a.labels.clone(),
    };
    let inputs = EvalInputs {
        calibration: &cal,
        validation: val.as_deref(),
        truth: truth.as_ref(),
        matrix: matrix.as_ref(),
        annotations: reference.as_ref().zip(other.as_ref()),
    };
    let report = build_report(&inputs, &cfg, par)?;
    write_text(&a.out, &json_text(&report)?)?;

    let mut ins = vec![a.attr_cal.as_path()];
    for p in [
        &a.attr_val,
        &a.truth,
        &a.matrix,
        &a.annotations_ref,
        &a.annotations,
    ] {
        ins.extend(p.as_deref());
    }
    finish("evaluate", &a, &ins, &[&a.out])?;

    let mut parts = Vec::new();
    if let Some(p) = report.pr_at_k.first() {
        parts.push(format!("P@{} {}", p.k, fmt_opt(p.precision.mean)));
    }
    if let Some(j) = report
        .neuron_jaccard
        .iter()
        .find(|j| (j.t - 0.35).abs() < 1e-9)
    {
        parts.push(format!("mean J(t=0.35) {:.4}", j.mean));
    }
    if let Some(k) = &report.kappa {
        parts.push(format!("kappa {}", fmt_opt(k.value)));
    }
    Ok(format!(
        "evaluate: {} -> {}",
        parts.join(", "),
        a.out.display()
    ))
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or("undefined".into(), |v| format!("{v:.4}"))
}

fn synth(a: SynthArgs) -> Result<String> {
    let mut spec = match &a.spec {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading spec {}", p.display()))?;
            serde_json::from_str::<SynthSpec>(&text)
                .with_context(|| format!("parsing spec {}", p.display()))?
        }
        None => SynthSpec::default(),
    };
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    let data = generate(&spec)?;
    let written = write_all(&spec, &data, &a.out_dir, !a.no_fixtures)?;
    let inputs: Vec<&Path> = a.spec.iter().map(PathBuf::as_path).collect();
    let outputs: Vec<&Path> = written.iter().map(PathBuf::as_path).collect();
    finish_at(&a.out_dir, "synth", &a, &inputs, &outputs)?;
    Ok(format!(
        "synth: {} sentences, {} descriptors, {} neurons -> {}",
        spec.n_sentences,
        spec.n_descriptors,
        spec.neuron_count(),
        a.out_dir.display()
    ))
}

fn report(a: ReportArgs, par: Parallelism) -> Result<String> {
    let matrix = read_matrix(&a.matrix)?;
    std::fs::create_dir_all(&a.out_dir)
        .with_context(|| format!("creating {}", a.out_dir.display()))?;
    let corr = phi_correlation(&matrix, par);
    let csv_path = a.out_dir.join("correlation.csv");
    let json_path = a.out_dir.join("correlation.json");
    write_text(&csv_path, &corr.to_csv())?;
    write_text(&json_path, &json_text(&corr)?)?;
    let mut outputs = vec![csv_path.as_path(), json_path.as_path()];
    let mut inputs = vec![a.matrix.as_path()];
    let dist_path = a.out_dir.join("split_distribution.json");
    if let Some(c) = &a.corpus {
        let corpus = load_corpus(c)?;
        let dist = split_distribution(&corpus, &matrix)?;
        write_text(&dist_path, &json_text(&dist)?)?;
        outputs.push(&dist_path);
        inputs.push(c);
    }
    finish_at(&a.out_dir, "report", &a, &inputs, &outputs)?;
    Ok(format!(
        "report: {} x {} correlation table -> {}",
        matrix.cols(),
        matrix.cols(),
        a.out_dir.display()
    ))
}
