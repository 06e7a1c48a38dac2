use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde_json::json;

use super::{resolve, selftest, Cli, CliError, Command, RunConfig, SEED_ENV};
use crate::analysis::{
    attended_timepoints, attended_union, chi_square_independence, cluster_group_ratio, contrast_test_at,
    glm_fit, kmeans, mean_spatial_attention, svg, task_design, temporal_attention_vector, top_percentile,
    upper_triangle, window_indicator, ICN_NAMES,
};
use crate::fcgraph::io::{read_timeseries, write_dfcg};
use crate::fcgraph::{build_dynamic_graph, correlation_matrix, sliding_windows, threshold_adjacency, RoiTimeseries};
use crate::stagin::checkpoint::{load_attention, load_checkpoint, save_attention, save_checkpoint, AttentionEntry};
use crate::stagin::predict;
use crate::synthdata::{self, GroundTruth, MANIFEST_FILE};
use crate::train::{class_auroc, metrics_jsonl, softmax, train_model, Dataset};

type Meta = BTreeMap<String, serde_json::Value>;

const LABELS_FILE: &str = "labels.csv";
const KMEANS_MAX_ITER: usize = 300;

/// Runs a parsed command line.
pub fn run(cli: Cli) -> Result<(), CliError> {
    let env_seed = std::env::var(SEED_ENV).ok();
    let cfg = resolve(&cli.command, env_seed.as_deref())?;
    let out = cli.command.common().out.clone();
    cfg.write_resolved(&out)?;
    info!("resolved configuration written to {}", out.display());
    match &cli.command {
        Command::Synth { .. } => synth(&cfg, &out),
        Command::Graphs { input, .. } => graphs(&cfg, input, &out),
        Command::Train {
            data, dump_attention, ..
        } => train(&cfg, data, *dump_attention, &out),
        Command::Eval { checkpoint, data, .. } => eval(&cfg, checkpoint, data, &out),
        Command::AnalyzeTime { attention, data, .. } => analyze_time(&cfg, attention, data, &out),
        Command::AnalyzeSpace {
            attention, data, design, ..
        } => analyze_space(&cfg, attention, data, design.as_deref(), &out),
        Command::Plot {
            attention, subject, icn, ..
        } => plot(attention, subject.as_deref(), icn.as_deref(), &out),
        Command::Selftest { .. } => {
            let outcomes = selftest(cfg.seed);
            let mut table = String::from("check,status,detail\n");
            for o in &outcomes {
                table.push_str(&format!("{},{},{}\n", o.name, if o.passed { "PASS" } else { "FAIL" }, o.detail));
                println!("{:<36} {}  {}", o.name, if o.passed { "PASS" } else { "FAIL" }, o.detail);
            }
            write(&out.join("selftest.csv"), &table)?;
            let failed = outcomes.iter().filter(|o| !o.passed).count();
            println!("{} checks, {failed} failed", outcomes.len());
            if failed == 0 {
                Ok(())
            } else {
                Err(CliError::Runtime(format!("{failed} selftest checks failed")))
            }
        }
    }
}

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn meta(cfg: &RunConfig, command: &str) -> Meta {
    let mut m = Meta::new();
    m.insert("seed".into(), json!(cfg.seed));
    m.insert("command".into(), json!(command));
    m
}

fn synth(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let truth = synthdata::generate_dataset(&cfg.synth, out).map_err(CliError::runtime)?;
    println!(
        "{} subjects, {} nodes, {} timepoints, {} classes -> {}",
        truth.subjects.len(),
        cfg.synth.n_nodes,
        cfg.synth.t_max,
        cfg.synth.n_classes(),
        out.display()
    );
    Ok(())
}

fn csv_inputs(input: &Path) -> Result<Vec<PathBuf>, CliError> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(input)
        .map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", input.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv") && p.file_name().is_some_and(|n| n != LABELS_FILE))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Runtime(format!("no timeseries CSV files in {}", input.display())));
    }
    Ok(files)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn graphs(cfg: &RunConfig, input: &Path, out: &Path) -> Result<(), CliError> {
    let mut table = String::from("file,windows,mean_density\n");
    for path in csv_inputs(input)? {
        let ts = read_timeseries(&path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        let graph = build_dynamic_graph(&ts, &cfg.window).map_err(CliError::runtime)?;
        let name = format!("{}.dfcg", stem(&path));
        write_dfcg(&graph, &out.join(&name)).map_err(CliError::runtime)?;
        let density = graph.adjacency.iter().map(|a| a.density()).sum::<f64>() / graph.len().max(1) as f64;
        table.push_str(&format!("{name},{},{density:.6}\n", graph.len()));
        println!("{}: {} graphs", path.display(), graph.len());
    }
    write(&out.join("graphs.csv"), &table)
}

/// A labeled dataset plus the ground truth when it was generated synthetically.
struct Loaded {
    data: Dataset,
    groups: Vec<usize>,
    truth: Option<GroundTruth>,
}

fn load_data(dir: &Path) -> Result<Loaded, CliError> {
    if dir.join(MANIFEST_FILE).exists() {
        let (series, truth) =
            synthdata::load_dataset(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
        let data = Dataset {
            ids: truth.subjects.iter().map(|s| s.id.clone()).collect(),
            series,
            labels: truth.subjects.iter().map(|s| s.label).collect(),
            n_classes: truth.config.n_classes(),
        };
        let groups = truth.subjects.iter().map(|s| s.group).collect();
        return Ok(Loaded {
            data,
            groups,
            truth: Some(truth),
        });
    }
    let labels_path = dir.join(LABELS_FILE);
    let mut reader = csv::Reader::from_path(&labels_path)
        .map_err(|e| CliError::Runtime(format!("{} needs {MANIFEST_FILE} or {LABELS_FILE}: {e}", dir.display())))?;
    let (mut ids, mut series, mut labels) = (Vec::new(), Vec::new(), Vec::new());
    for row in reader.deserialize::<(String, usize)>() {
        let (file, label) = row.map_err(|e| CliError::Runtime(format!("{}: {e}", labels_path.display())))?;
        let path = dir.join(&file);
        series.push(read_timeseries(&path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?);
        ids.push(stem(&path));
        labels.push(label);
    }
    if series.is_empty() {
        return Err(CliError::Runtime(format!("{} lists no subjects", labels_path.display())));
    }
    let n_classes = labels.iter().max().map_or(0, |m| m + 1).max(2);
    Ok(Loaded {
        groups: labels.clone(),
        data: Dataset {
            ids,
            series,
            labels,
            n_classes,
        },
        truth: None,
    })
}

fn probability_header(n_classes: usize) -> String {
    (0..n_classes).map(|c| format!(",p{c}")).collect()
}

fn train(cfg: &RunConfig, dir: &Path, dump_attention: bool, out: &Path) -> Result<(), CliError> {
    let loaded = load_data(dir)?;
    let data = &loaded.data;
    let model = cfg.model.to_config(data.series[0].n_rois(), data.n_classes);
    let outcome = train_model(data, &cfg.window, &model, &cfg.train).map_err(CliError::runtime)?;

    write(&out.join("metrics.jsonl"), &metrics_jsonl(&outcome.metrics))?;
    let mut preds = format!("subject,fold,label,pred{}\n", probability_header(data.n_classes));
    for (f, fold) in outcome.folds.iter().enumerate() {
        let mut m = meta(cfg, "train");
        m.insert("fold".into(), json!(f));
        m.insert("config".into(), serde_json::to_value(&model).expect("config serializes"));
        save_checkpoint(&fold.state, &m, &out.join(format!("fold-{f}.stgn"))).map_err(CliError::runtime)?;
        for (&i, p) in fold.test.iter().zip(&fold.probs) {
            let probs: String = p.iter().map(|v| format!(",{v:.6}")).collect();
            preds.push_str(&format!("{},{f},{},{}{probs}\n", data.ids[i], data.labels[i], crate::train::argmax(p)));
        }
    }
    write(&out.join("predictions.csv"), &preds)?;
    if dump_attention {
        let mut entries = Vec::with_capacity(data.series.len());
        for fold in &outcome.folds {
            for &i in &fold.test {
                let ts = &data.series[i];
                let graph = build_dynamic_graph(ts, &cfg.window).map_err(CliError::runtime)?;
                let p = predict(&fold.state, ts, &graph).map_err(CliError::runtime)?;
                entries.push(AttentionEntry {
                    subject: data.ids[i].clone(),
                    label: Some(data.labels[i]),
                    record: p.record,
                });
            }
        }
        save_attention(&entries, &meta(cfg, "train"), &out.join("attention.attn")).map_err(CliError::runtime)?;
    }
    let folds: Vec<_> = outcome
        .split
        .folds
        .iter()
        .map(|f| json!({"train": f.train.iter().map(|&i| &data.ids[i]).collect::<Vec<_>>(),
                        "test": f.test.iter().map(|&i| &data.ids[i]).collect::<Vec<_>>()}))
        .collect();
    write(
        &out.join("folds.json"),
        &format!("{}\n", serde_json::to_string_pretty(&json!({"seed": cfg.seed, "folds": folds})).expect("json")),
    )?;
    let s = &outcome.summary;
    let summary = json!({
        "seed": cfg.seed,
        "acc_mean": s.acc_mean, "acc_std": s.acc_std,
        "auroc_mean": s.auroc_mean, "auroc_std": s.auroc_std,
        "fold_acc": outcome.folds.iter().map(|f| f.acc).collect::<Vec<_>>(),
        "fold_auroc": outcome.folds.iter().map(|f| f.auroc).collect::<Vec<_>>(),
    });
    write(&out.join("summary.json"), &format!("{}\n", serde_json::to_string_pretty(&summary).expect("json")))?;
    println!(
        "accuracy {:.4} ± {:.4}, AUROC {:.4} ± {:.4} over {} folds",
        s.acc_mean,
        s.acc_std,
        s.auroc_mean,
        s.auroc_std,
        outcome.folds.len()
    );
    Ok(())
}

fn eval(cfg: &RunConfig, checkpoint: &Path, dir: &Path, out: &Path) -> Result<(), CliError> {
    let (state, _) =
        load_checkpoint(checkpoint).map_err(|e| CliError::Runtime(format!("{}: {e}", checkpoint.display())))?;
    let loaded = load_data(dir)?;
    let data = &loaded.data;
    let c = state.config.n_classes;
    let mut preds = format!("subject,label,pred{}\n", probability_header(c));
    let mut entries = Vec::with_capacity(data.series.len());
    let mut probs = Vec::with_capacity(data.series.len());
    for (i, ts) in data.series.iter().enumerate() {
        let graph = build_dynamic_graph(ts, &cfg.window).map_err(CliError::runtime)?;
        let p = predict(&state, ts, &graph).map_err(CliError::runtime)?;
        let prob = softmax(&p.logits);
        let cols: String = prob.iter().map(|v| format!(",{v:.6}")).collect();
        preds.push_str(&format!("{},{},{}{cols}\n", data.ids[i], data.labels[i], crate::train::argmax(&prob)));
        probs.push(prob);
        entries.push(AttentionEntry {
            subject: data.ids[i].clone(),
            label: Some(data.labels[i]),
            record: p.record,
        });
    }
    write(&out.join("predictions.csv"), &preds)?;
    save_attention(&entries, &meta(cfg, "eval"), &out.join("attention.attn")).map_err(CliError::runtime)?;
    let acc = crate::train::accuracy(&probs, &data.labels);
    let auc = class_auroc(&probs, &data.labels, c).ok();
    let summary = json!({"seed": cfg.seed, "acc": acc, "auroc": auc, "subjects": data.series.len()});
    write(&out.join("eval.json"), &format!("{}\n", serde_json::to_string_pretty(&summary).expect("json")))?;
    println!("accuracy {acc:.4}, AUROC {}", auc.map_or("n/a".to_string(), |a| format!("{a:.4}")));
    Ok(())
}

fn load_entries(path: &Path) -> Result<Vec<AttentionEntry>, CliError> {
    let (entries, _) = load_attention(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    if entries.is_empty() {
        return Err(CliError::Runtime(format!("{} holds no subjects", path.display())));
    }
    Ok(entries)
}

fn subject_index(data: &Dataset) -> HashMap<&str, usize> {
    data.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect()
}

fn lookup<'a>(index: &HashMap<&str, usize>, entry: &'a AttentionEntry) -> Result<usize, CliError> {
    index
        .get(entry.subject.as_str())
        .copied()
        .ok_or_else(|| CliError::Runtime(format!("subject {} is not in the dataset", entry.subject)))
}

/// Window connectivity features: binary adjacency or raw correlations, upper triangle.
fn window_features(ts: &RoiTimeseries, cfg: &RunConfig) -> Result<Vec<Vec<f64>>, CliError> {
    let n = ts.n_rois();
    sliding_windows(ts.t_max(), &cfg.window)
        .map_err(CliError::runtime)?
        .into_iter()
        .map(|(start, end)| {
            let fc = correlation_matrix(ts, start, end).map_err(CliError::runtime)?;
            Ok(if cfg.analysis.continuous {
                upper_triangle(&fc.r, n)
            } else {
                let adj = threshold_adjacency(&fc, cfg.window.edge_percentile).adjacency;
                upper_triangle(&adj.to_dense(), n)
            })
        })
        .collect()
}

fn analyze_time(cfg: &RunConfig, attention: &Path, dir: &Path, out: &Path) -> Result<(), CliError> {
    let entries = load_entries(attention)?;
    let loaded = load_data(dir)?;
    let index = subject_index(&loaded.data);
    let a = &cfg.analysis;

    let mut samples = Vec::new();
    let mut groups = Vec::new();
    let mut vectors = String::from("subject,layer,window,z_time\n");
    let mut attended_csv = String::from("subject,group,window\n");
    for e in &entries {
        let i = lookup(&index, e)?;
        let rec = &e.record;
        let mut sets = Vec::with_capacity(rec.n_layers);
        for layer in 0..rec.n_layers {
            let z = temporal_attention_vector(rec.time_layer(layer), rec.n_steps).map_err(CliError::runtime)?;
            for (t, v) in z.iter().enumerate() {
                vectors.push_str(&format!("{},{layer},{t},{v:.8}\n", e.subject));
            }
            sets.push(attended_timepoints(&z, a.alpha, a.centered));
        }
        let features = window_features(&loaded.data.series[i], cfg)?;
        if features.len() != rec.n_steps {
            return Err(CliError::Runtime(format!(
                "{}: {} windows in the data, {} in the attention record",
                e.subject,
                features.len(),
                rec.n_steps
            )));
        }
        let g = loaded.groups[i];
        for t in attended_union(&sets) {
            attended_csv.push_str(&format!("{},{g},{t}\n", e.subject));
            samples.push(features[t].clone());
            groups.push(g);
        }
    }
    write(&out.join("time-vectors.csv"), &vectors)?;
    write(&out.join("time-attended.csv"), &attended_csv)?;

    let mut report = Vec::new();
    for &k in &a.clusters {
        let clusters = kmeans(&samples, k, cfg.seed, KMEANS_MAX_ITER).map_err(CliError::runtime)?;
        let ratio = cluster_group_ratio(&clusters.assignments, &groups, k).map_err(CliError::runtime)?;
        let chi = chi_square_independence(&ratio.counts).ok();
        let mut table = String::from("cluster,rank,count_g0,count_g1,ratio_g0,ratio_g1\n");
        for c in 0..k {
            let rank = ratio.order.iter().position(|&o| o == c).expect("order covers clusters");
            table.push_str(&format!(
                "{c},{rank},{},{},{:.6},{:.6}\n",
                ratio.counts[c][0], ratio.counts[c][1], ratio.ratios[c][0], ratio.ratios[c][1]
            ));
        }
        write(&out.join(format!("time-clusters-k{k}.csv")), &table)?;
        println!(
            "k = {k}: chi-square {}",
            chi.map_or("undefined".to_string(), |c| format!("{:.3} (dof {}), p = {:.3e}", c.statistic, c.dof, c.p))
        );
        report.push(json!({"k": k, "order": ratio.order, "counts": ratio.counts, "chi_square": chi,
                           "inertia": clusters.inertia.last()}));
    }
    let summary = json!({"seed": cfg.seed, "attended_graphs": samples.len(), "clusterings": report});
    write(&out.join("time-summary.json"), &format!("{}\n", serde_json::to_string_pretty(&summary).expect("json")))
}

fn read_design(path: &Path) -> Result<Vec<f64>, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    let mut design = Vec::new();
    for row in reader.deserialize::<(f64, f64)>() {
        let (task, rest) = row.map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        design.extend([task, rest]);
    }
    Ok(design)
}

fn analyze_space(
    cfg: &RunConfig,
    attention: &Path,
    dir: &Path,
    design_path: Option<&Path>,
    out: &Path,
) -> Result<(), CliError> {
    let entries = load_entries(attention)?;
    let loaded = load_data(dir)?;
    let index = subject_index(&loaded.data);
    let a = &cfg.analysis;
    let shared = design_path.map(read_design).transpose()?;
    if shared.is_none() && loaded.truth.is_none() {
        return Err(CliError::Runtime(
            "a --design file is required when the dataset carries no task schedule".to_string(),
        ));
    }
    let n = entries[0].record.n_nodes;
    let mut betas = Vec::with_capacity(entries.len());
    let mut mean_attn = vec![0.0; n];
    for e in &entries {
        let i = lookup(&index, e)?;
        let rec = &e.record;
        let (k, t) = (rec.n_layers, rec.n_steps);
        let mut attn = vec![0.0; t * n];
        for layer in 0..k {
            attn.iter_mut().zip(rec.space_layer(layer)).for_each(|(s, v)| *s += v / k as f64);
        }
        let design = match (&shared, &loaded.truth) {
            (Some(d), _) => d.clone(),
            (None, Some(truth)) => {
                let windows = sliding_windows(loaded.data.series[i].t_max(), &cfg.window).map_err(CliError::runtime)?;
                task_design(&window_indicator(&truth.subjects[i].task_indicator(), &windows))
            }
            (None, None) => unreachable!("checked above"),
        };
        let fit = glm_fit(&attn, t, n, &design).map_err(|err| CliError::Runtime(format!("{}: {err}", e.subject)))?;
        betas.push(fit.beta);
        let avg = mean_spatial_attention(&rec.z_space, k, t, n).map_err(CliError::runtime)?;
        for layer in 0..k {
            mean_attn.iter_mut().zip(&avg[layer * n..(layer + 1) * n]).for_each(|(m, v)| *m += v);
        }
    }
    mean_attn.iter_mut().for_each(|m| *m /= (entries.len() * entries[0].record.n_layers) as f64);

    let icn_labels: Vec<String> = loaded.data.series[0].icn_labels().to_vec();
    let result = contrast_test_at(&betas, a.contrast, n, &icn_labels, a.fwe_level).map_err(CliError::runtime)?;
    let mut glm = String::from("node,icn,t,p_raw,p_fwe,significant\n");
    for r in 0..n {
        glm.push_str(&format!(
            "{r},{},{:.6},{:.6e},{:.6e},{}\n",
            icn_labels[r],
            result.t_values[r],
            result.p_raw[r],
            result.p_fwe[r],
            u8::from(result.significant.contains(&r))
        ));
    }
    write(&out.join("space-glm.csv"), &glm)?;
    let mut prop = String::from("icn,proportion\n");
    for (name, p) in ICN_NAMES.iter().zip(result.icn.proportions) {
        prop.push_str(&format!("{name},{p:.6}\n"));
    }
    prop.push_str(&format!("{},{:.6}\n", crate::fcgraph::UNKNOWN_ICN, result.icn.unknown));
    write(&out.join("icn-proportion.csv"), &prop)?;
    let mut top = String::from("rank,node,icn,mean_attention\n");
    for (rank, r) in top_percentile(&mean_attn, a.percentile).into_iter().enumerate() {
        top.push_str(&format!("{rank},{r},{},{:.8}\n", icn_labels[r], mean_attn[r]));
    }
    write(&out.join("space-top.csv"), &top)?;
    let summary = json!({"seed": cfg.seed, "subjects": entries.len(), "contrast": a.contrast,
                         "fwe_level": a.fwe_level, "significant": result.significant});
    write(&out.join("space-summary.json"), &format!("{}\n", serde_json::to_string_pretty(&summary).expect("json")))?;
    println!("{} of {n} regions significant at FWE {}", result.significant.len(), a.fwe_level);
    Ok(())
}

fn plot(attention: &Path, subject: Option<&str>, icn: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let entries = load_entries(attention)?;
    let entry = match subject {
        Some(s) => entries
            .iter()
            .find(|e| e.subject == s)
            .ok_or_else(|| CliError::Runtime(format!("subject {s} is not in {}", attention.display())))?,
        None => &entries[0],
    };
    let rec = &entry.record;
    let last = rec.n_layers - 1;
    let heat = svg::heatmap(
        rec.time_layer(last),
        rec.n_steps,
        rec.n_steps,
        &format!("{}: temporal attention, layer {last}", entry.subject),
    );
    write(&out.join(format!("{}-ztime-heatmap.svg", entry.subject)), &heat)?;
    let curves: Vec<(String, Vec<f64>)> = (0..rec.n_layers)
        .map(|l| {
            temporal_attention_vector(rec.time_layer(l), rec.n_steps)
                .map(|z| (format!("layer {l}"), z))
                .map_err(CliError::runtime)
        })
        .collect::<Result<_, _>>()?;
    let series: Vec<(&str, &[f64])> = curves.iter().map(|(n, v)| (n.as_str(), v.as_slice())).collect();
    let line = svg::line_plot(&series, &format!("{}: temporal attention vector", entry.subject));
    write(&out.join(format!("{}-ztime-curve.svg", entry.subject)), &line)?;
    if let Some(path) = icn {
        let mut reader = csv::Reader::from_path(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        let (mut labels, mut values) = (Vec::new(), Vec::new());
        for row in reader.deserialize::<(String, f64)>() {
            let (name, v) = row.map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
            labels.push(name);
            values.push(v);
        }
        write(
            &out.join("icn-proportion.svg"),
            &svg::bar_chart(&labels, &values, "Significant regions per network"),
        )?;
    }
    println!("plots for {} written to {}", entry.subject, out.display());
    Ok(())
}
