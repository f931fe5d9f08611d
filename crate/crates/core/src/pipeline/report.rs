//! Plot-ready CSV tables and artifact verification for a run directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{now, read_json_file, GridIndex, RunRecord, Stage, StageRecord, RUN_RECORD_FILE};
use crate::error::{Error, Result};
use crate::fairmetrics::{FairnessReport, MetricKind};
use crate::finetune::StrategyOrigin;
use crate::hashing::{file_sha256, sha256_hex};
use crate::simcka::GroupDistanceStats;

/// File-name prefixes of the report tables.
pub const REPORT_FAMILIES: [&str; 5] = ["fig4_", "fig5_", "fig6_", "fig7_", "table_"];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_else(|| "undefined".into())
}

struct SeedRun {
    seed: u64,
    reports: Vec<(String, StrategyOrigin, FairnessReport)>,
    cka: serde_json::Value,
}

impl SeedRun {
    fn report(&self, name: &str) -> Option<&FairnessReport> {
        self.reports.iter().find(|(n, _, _)| n == name).map(|(_, _, r)| r)
    }

    fn by_origin(&self, origin: StrategyOrigin) -> Option<&FairnessReport> {
        self.reports.iter().find(|(_, o, _)| *o == origin).map(|(_, _, r)| r)
    }

    fn selected(&self, key: &str) -> Option<&str> {
        self.cka[key].as_str()
    }
}

fn load_seed(dir: &Path, seed: u64) -> Result<SeedRun> {
    let index: GridIndex = read_json_file(&dir.join(format!("seed-{seed}/grid/strategies.json")))?;
    let mut reports = Vec::new();
    for e in index.strategies {
        let path = dir.join(format!("seed-{seed}/evaluate/{}.json", e.descriptor.name));
        reports.push((e.descriptor.name, e.descriptor.origin, FairnessReport::read_json(&path)?));
    }
    let cka = read_json_file(&dir.join(format!("seed-{seed}/cka/cka.json")))?;
    Ok(SeedRun { seed, reports, cka })
}

/// Writes the report tables and `summary.txt` into `<run>/report/` and
/// records them in the run record.
pub fn build_report(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut record = match RunRecord::read(dir) {
        Ok(r) => r,
        Err(Error::Io { .. }) => {
            let all: Vec<&str> = Stage::ALL.iter().map(|s| s.as_str()).collect();
            return Err(Error::Contract(format!(
                "{} has no completed stages; missing: {}",
                dir.display(),
                all.join(", ")
            )));
        }
        Err(e) => return Err(e),
    };
    let missing = record.missing_stages();
    if !missing.is_empty() {
        return Err(Error::Contract(format!(
            "run in {} is incomplete; missing stages: {}",
            dir.display(),
            missing.join(", ")
        )));
    }
    let hash = record.config_hash.clone();
    let runs = record
        .seeds
        .iter()
        .map(|&s| load_seed(dir, s))
        .collect::<Result<Vec<_>>>()?;
    let header = |columns: &str| format!("# config_hash={hash}\n{columns}\n");

    let mut fig4 = header("seed,strategy,attribute,segment,relative_size,auc_delta");
    let mut fig5 = header("seed,strategy,mask,origin,trainable_params,general_auc,deviation_min,deviation_mean,deviation_max");
    let mut table2 = header("seed,model,strategy,attribute,segment,size,auc,auc_ci,delta_vs_general");
    let mut table4 = header("seed,model,strategy,attribute,best_worst_gap");
    for run in &runs {
        for (name, origin, rep) in &run.reports {
            for (attr, a) in &rep.attributes {
                let total: usize = a.segments.values().map(|s| s.size).sum();
                for (value, seg) in &a.segments {
                    if let Some(delta) = seg.auc.delta_vs_general {
                        writeln!(
                            fig4,
                            "{},{name},{attr},{value},{},{delta}",
                            run.seed,
                            seg.size as f64 / total.max(1) as f64
                        )
                        .expect("string write");
                    }
                }
            }
            writeln!(
                fig5,
                "{},{name},{},{},{},{},{},{},{}",
                run.seed,
                rep.metadata.strategy,
                origin.as_str(),
                rep.metadata.trainable_params,
                opt(rep.general.auc),
                opt(rep.deviation.min),
                opt(rep.deviation.mean),
                opt(rep.deviation.max)
            )
            .expect("string write");
        }
        for (model, key) in [("ssl", "ssl"), ("supervised", "supervised")] {
            let Some(name) = run.selected(key) else { continue };
            let Some(rep) = run.report(name) else { continue };
            writeln!(
                table2,
                "{},{model},{name},all,all,{},{},{},0",
                run.seed,
                rep.general.n,
                opt(rep.general.auc),
                rep.general.formatted.clone().unwrap_or_else(|| "undefined".into())
            )
            .expect("string write");
            for (attr, a) in &rep.attributes {
                for (value, seg) in &a.segments {
                    writeln!(
                        table2,
                        "{},{model},{name},{attr},{value},{},{},{},{}",
                        run.seed,
                        seg.size,
                        opt(seg.auc.auc),
                        seg.auc.formatted.clone().unwrap_or_else(|| "undefined".into()),
                        opt(seg.auc.delta_vs_general)
                    )
                    .expect("string write");
                }
                writeln!(table4, "{},{model},{name},{attr},{}", run.seed, opt(a.best_worst_gap)).expect("string write");
            }
        }
    }

    // Ratio values averaged over seeds for the best SSL model, the linear
    // probe and the supervised baseline.
    let dataset = runs
        .first()
        .and_then(|r| r.reports.first())
        .map(|(_, _, r)| r.metadata.dataset.clone())
        .unwrap_or_default();
    let mut table3 = header("dataset,attribute,model,DIR,FDR,FNR,FOR,FPR");
    let mut sums: BTreeMap<(String, &str), BTreeMap<MetricKind, Vec<f64>>> = BTreeMap::new();
    for run in &runs {
        let picks = [
            ("ssl", run.selected("ssl").and_then(|n| run.report(n))),
            ("linear-probe", run.by_origin(StrategyOrigin::LinearProbe)),
            ("supervised", run.selected("supervised").and_then(|n| run.report(n))),
        ];
        for (model, rep) in picks {
            let Some(rep) = rep else { continue };
            for (attr, a) in &rep.attributes {
                let slot = sums.entry((attr.clone(), model)).or_default();
                for (k, m) in &a.metrics {
                    let values = slot.entry(*k).or_default();
                    if let Some(v) = m.value {
                        values.push(v);
                    }
                }
            }
        }
    }
    for ((attr, model), metrics) in &sums {
        let cell = |k: MetricKind| {
            metrics
                .get(&k)
                .filter(|v| !v.is_empty())
                .map(|v| v.iter().sum::<f64>() / v.len() as f64)
        };
        writeln!(
            table3,
            "{dataset},{attr},{model},{},{},{},{},{}",
            opt(cell(MetricKind::Dir)),
            opt(cell(MetricKind::Fdr)),
            opt(cell(MetricKind::Fnr)),
            opt(cell(MetricKind::For)),
            opt(cell(MetricKind::Fpr))
        )
        .expect("string write");
    }

    let mut fig7 = header("seed,model_a,model_b,attribute,segment,block_a,block_b,cka");
    let mut fig7_dist = header("seed,model,attribute,segment,size,medoid,intra_mean,mean_intra,mean_inter");
    for run in &runs {
        let (a, b) = (run.selected("ssl").unwrap_or(""), run.selected("supervised").unwrap_or(""));
        if let Some(attrs) = run.cka["matrices"].as_object() {
            for (attr, segs) in attrs {
                for (seg, rows) in segs.as_object().into_iter().flatten() {
                    for (i, row) in rows.as_array().into_iter().flatten().enumerate() {
                        for (j, v) in row.as_array().into_iter().flatten().enumerate() {
                            writeln!(fig7, "{},{a},{b},{attr},{seg},{i},{j},{}", run.seed, opt(v.as_f64()))
                                .expect("string write");
                        }
                    }
                }
            }
        }
        for model in ["ssl", "supervised"] {
            let stats: BTreeMap<String, GroupDistanceStats> =
                serde_json::from_value(run.cka["distances"][model].clone())?;
            for (attr, s) in &stats {
                for seg in &s.segments {
                    writeln!(
                        fig7_dist,
                        "{},{model},{attr},{},{},{},{},{},{}",
                        run.seed,
                        seg.value,
                        seg.size,
                        seg.medoid,
                        opt(seg.intra_mean),
                        opt(s.mean_intra),
                        opt(s.mean_inter)
                    )
                    .expect("string write");
                }
            }
        }
    }

    let fig6 = if record.sweep_configured {
        let path = dir.join("sweep/bands.csv");
        std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?
    } else {
        header("samples_per_segment,model,seeds,deviation_min,deviation_mean,deviation_max,auc")
    };

    let summary = summary_text(&record, &runs);
    let files = [
        ("fig4_segment_auc_vs_size.csv", fig4),
        ("fig5_deviation_vs_trainable.csv", fig5),
        ("fig6_sweep_bands.csv", fig6),
        ("fig7_cka.csv", fig7),
        ("fig7_medoid_distances.csv", fig7_dist),
        ("table_segment_auc.csv", table2),
        ("table_fairness_metrics.csv", table3),
        ("table_auc_gap.csv", table4),
        ("summary.txt", format!("config_hash={hash}\n{summary}")),
    ];
    let out = dir.join("report");
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let mut written = Vec::new();
    let mut artifacts = BTreeMap::new();
    for (name, text) in files {
        let path = out.join(name);
        std::fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
        artifacts.insert(format!("report/{name}"), sha256_hex(text.as_bytes()));
        written.push(path);
    }
    record.stages.insert(
        "report".into(),
        StageRecord {
            completed_at: now(),
            artifacts,
        },
    );
    record.write(dir)?;
    Ok(written)
}

fn summary_text(record: &RunRecord, runs: &[SeedRun]) -> String {
    let mut s = String::new();
    writeln!(s, "dataset: {}", record.dataset).expect("string write");
    writeln!(s, "toolkit version: {}", record.toolkit_version).expect("string write");
    for run in runs {
        writeln!(s, "\nseed {}", run.seed).expect("string write");
        for (name, _, rep) in &run.reports {
            writeln!(
                s,
                "  {name:<24} {:<10} AUC {:<22} mean parity deviation {}",
                rep.metadata.strategy,
                rep.general.formatted.clone().unwrap_or_else(|| opt(rep.general.auc)),
                rep.deviation.mean.map(|v| format!("{v:.3}")).unwrap_or_else(|| "undefined".into())
            )
            .expect("string write");
        }
        if let (Some(a), Some(b)) = (run.selected("ssl"), run.selected("supervised")) {
            writeln!(s, "  CKA compares {a} (best SSL) with {b}").expect("string write");
        }
    }
    s
}

/// Re-hashes every recorded artifact and checks that each one embeds the
/// run's config hash (and, when given, that the run belongs to
/// `expected_hash`). Returns the number of artifacts checked.
pub fn verify_run(dir: &Path, expected_hash: Option<&str>) -> Result<usize> {
    let record = RunRecord::read(dir)?;
    let mut problems = Vec::new();
    if let Some(h) = expected_hash {
        if h != record.config_hash {
            problems.push(format!(
                "{RUN_RECORD_FILE} was produced by config {} but the given config hashes to {h}",
                record.config_hash
            ));
        }
    }
    let mut checked = 0;
    for (stage, rec) in &record.stages {
        for (rel, digest) in &rec.artifacts {
            checked += 1;
            let path = dir.join(rel);
            match file_sha256(&path) {
                Ok(d) if &d == digest => {}
                Ok(_) => problems.push(format!("{rel} ({stage}) was modified")),
                Err(_) => {
                    problems.push(format!("{rel} ({stage}) is missing"));
                    continue;
                }
            }
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let needle = record.config_hash.as_bytes();
            if !bytes.windows(needle.len()).any(|w| w == needle) {
                problems.push(format!("{rel} ({stage}) does not embed the config hash"));
            }
        }
    }
    if problems.is_empty() {
        Ok(checked)
    } else {
        Err(Error::Integrity(problems.join("; ")))
    }
}
