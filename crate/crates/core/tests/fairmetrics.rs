use std::collections::BTreeMap;

use fairprobe::dataset::{AttributeTable, Dataset};
use fairprobe::fairmetrics::{
    auc_roc, best_worst_gap, bootstrap_ci, confusion_by_segment, data_efficiency_sweep, evaluate_fairness,
    format_auc_ci, is_fair, parity_deviation, ratio_metric, segment_delta, size_vs_gap_scatter,
    subsample_per_segment, summarize_sweep, EvaluationConfig, MetricKind, PrivilegeRule, PrivilegeSpec, RunMetadata,
    SegmentConfusion, SweepConfig,
};
use fairprobe::finetune::FinetuneConfig;
use fairprobe::model::{build_encoder, EncoderConfig, FreezeMask};
use fairprobe::rng::seeded;
use fairprobe::tensorcore::ArrayF;
use fairprobe::Error;
use proptest::prelude::*;
use rand::Rng;

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("p{i}")).collect()
}

fn one_attribute(values: &[&str]) -> AttributeTable {
    AttributeTable::new(
        vec!["group".into()],
        ids(values.len()),
        values.iter().map(|v| vec![v.to_string()]).collect(),
    )
    .unwrap()
}

#[test]
fn confusion_examples() {
    let t = one_attribute(&["a", "a", "a", "a", "b", "b", "b", "b"]);
    let labels = [1, 0, 1, 0, 1, 1, 0, 0];
    let perfect = confusion_by_segment(&labels, &labels, &ids(8), &t, "group").unwrap();
    assert!(perfect.values().all(|c| c.fp == 0 && c.fn_ == 0));
    let flipped: Vec<usize> = labels.iter().map(|l| 1 - l).collect();
    let inverted = confusion_by_segment(&flipped, &labels, &ids(8), &t, "group").unwrap();
    assert!(inverted.values().all(|c| c.tp == 0 && c.tn == 0));

    let preds = [1, 1, 0, 0, 1, 0, 1, 0];
    let c = confusion_by_segment(&preds, &labels, &ids(8), &t, "group").unwrap();
    // a: (1,1) tp, (1,0) fp, (0,1) fn, (0,0) tn; b: (1,1) tp, (0,1) fn, (1,0) fp, (0,0) tn.
    assert_eq!(c["a"], SegmentConfusion::new(1, 1, 1, 1));
    assert_eq!(c["b"], SegmentConfusion::new(1, 1, 1, 1));
    assert!(matches!(
        confusion_by_segment(&preds[..7], &labels, &ids(8), &t, "group"),
        Err(Error::Contract(_))
    ));
}

#[test]
fn ratio_examples() {
    let c = SegmentConfusion::new(5, 3, 9, 2);
    for k in MetricKind::ALL {
        let r = ratio_metric(&c, &c, k, "u", "p");
        assert_eq!(r.value, Some(1.0));
        assert_eq!(r.parity_deviation, Some(0.0));
    }
    // Selection rates 3/10 and 6/10.
    let u = SegmentConfusion::new(2, 1, 6, 1);
    let p = SegmentConfusion::new(4, 2, 3, 1);
    assert_eq!(ratio_metric(&u, &p, MetricKind::Dir, "u", "p").value, Some(0.5));

    let none = SegmentConfusion::new(0, 0, 5, 0);
    let r = ratio_metric(&u, &none, MetricKind::Fdr, "u", "p");
    assert!(r.value.is_none() && r.undefined_reason.is_some() && r.fair.is_none());
    let r = ratio_metric(&u, &none, MetricKind::Dir, "u", "p");
    assert!(r.value.is_none());
}

#[test]
fn table_three_spot_values() {
    let d = parity_deviation(1.19391);
    assert!((d - 0.19391).abs() < 1e-12);
    assert_eq!(format!("{d:.6}"), "0.193910");
    assert!(is_fair(d));
    let d = parity_deviation(2.132436);
    assert!((d - 1.132436).abs() < 1e-12);
    assert!(!is_fair(d));
    assert!((parity_deviation(1.916451) - 0.916451).abs() < 1e-12);
    assert_eq!(parity_deviation(1.0), 0.0);
    assert_eq!(parity_deviation(0.5), 0.5);
    assert!(!is_fair(0.2));
    assert!(is_fair(0.2 - 1e-15));
}

/// Appendix-style transcription: each rate written out from the counts.
fn transcribed(kind: MetricKind, u: &SegmentConfusion, p: &SegmentConfusion) -> Option<f64> {
    let rate = |c: &SegmentConfusion| -> Option<f64> {
        let (tp, fp, tn, fn_) = (c.tp as f64, c.fp as f64, c.tn as f64, c.fn_ as f64);
        let (num, den) = match kind {
            MetricKind::Dir => (tp + fp, tp + fp + tn + fn_),
            MetricKind::Fdr => (fp, tp + fp),
            MetricKind::Fnr => (fn_, tp + fn_),
            MetricKind::For => (fn_, tn + fn_),
            MetricKind::Fpr => (fp, fp + tn),
        };
        (den > 0.0).then(|| num / den)
    };
    let (ru, rp) = (rate(u)?, rate(p)?);
    (rp > 0.0).then(|| ru / rp)
}

fn confusion() -> impl Strategy<Value = SegmentConfusion> {
    (0u64..60, 0u64..60, 0u64..60, 0u64..60).prop_map(|(a, b, c, d)| SegmentConfusion::new(a, b, c, d))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn metrics_match_transcription(u in confusion(), p in confusion()) {
        for k in MetricKind::ALL {
            let got = ratio_metric(&u, &p, k, "u", "p");
            match (got.value, transcribed(k, &u, &p)) {
                (Some(a), Some(b)) => prop_assert!((a - b).abs() <= 1e-12 * b.max(1.0)),
                (None, None) => {}
                other => prop_assert!(false, "{k:?}: {other:?}"),
            }
        }
    }

    #[test]
    fn privilege_swap_inverts(u in confusion(), p in confusion()) {
        for k in MetricKind::ALL {
            let a = ratio_metric(&u, &p, k, "u", "p");
            let b = ratio_metric(&p, &u, k, "p", "u");
            if let (Some(x), Some(y)) = (a.value, b.value) {
                // Both are single roundings of reciprocal fractions.
                let (nu, du) = k.rate_parts(&u);
                let (np, dp) = k.rate_parts(&p);
                let (num, den) = (nu as u128 * dp as u128, du as u128 * np as u128);
                prop_assert_eq!(x, num as f64 / den as f64);
                prop_assert_eq!(y, den as f64 / num as f64);
                prop_assert!((x * y - 1.0).abs() < 4.0 * f64::EPSILON);
            }
        }
    }
}

fn pairwise_auc(scores: &[f64], labels: &[usize]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

#[test]
fn auc_examples() {
    assert_eq!(auc_roc(&[0.9, 0.1], &[1, 0]).unwrap(), 1.0);
    assert_eq!(auc_roc(&[0.3; 6], &[1, 0, 1, 0, 0, 1]).unwrap(), 0.5);
    assert_eq!(auc_roc(&[0.8, 0.6, 0.4], &[1, 0, 1]).unwrap(), 0.5);
    assert!(matches!(auc_roc(&[0.1, 0.2], &[1, 1]), Err(Error::UndefinedAuc(_))));
}

#[test]
fn auc_matches_exhaustive_enumeration() {
    let mut rng = seeded(5);
    for n in 2..=10usize {
        for mask in 1..(1u32 << n) - 1 {
            let labels: Vec<usize> = (0..n).map(|i| ((mask >> i) & 1) as usize).collect();
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..4) as f64 / 4.0).collect();
            assert_eq!(auc_roc(&scores, &labels).unwrap(), pairwise_auc(&scores, &labels));
        }
    }
}

#[test]
fn bootstrap_behaviour() {
    let n = 2000;
    let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let scores: Vec<f64> = labels.iter().enumerate().map(|(i, &l)| l as f64 + i as f64 * 1e-6).collect();
    let (lo, hi) = bootstrap_ci(&scores, &labels, 200, 0.05, 1).unwrap();
    assert!(hi - lo < 0.01 && lo > 0.99);

    let mut rng = seeded(3);
    let labels: Vec<usize> = (0..80).map(|_| rng.random_range(0..2)).collect();
    let scores: Vec<f64> = labels.iter().map(|&l| l as f64 * 0.4 + rng.random_range(0.0..1.0)).collect();
    let a = bootstrap_ci(&scores, &labels, 300, 0.05, 9).unwrap();
    assert_eq!(a, bootstrap_ci(&scores, &labels, 300, 0.05, 9).unwrap());
    let point = auc_roc(&scores, &labels).unwrap();
    assert!(a.0 <= point && point <= a.1);

    // One positive among many negatives: resamples often lack it but redraws succeed.
    let mut labels = vec![0; 30];
    labels[4] = 1;
    let scores: Vec<f64> = (0..30).map(|i| i as f64).collect();
    assert!(bootstrap_ci(&scores, &labels, 50, 0.05, 2).is_ok());
}

#[test]
fn auc_formatting() {
    assert_eq!(format_auc_ci(0.829, 0.81, 0.85), "0.829 (0.81-0.85)");
    assert_eq!(format_auc_ci(0.825, 0.8, 0.85), "0.825 (0.8-0.85)");
    assert_eq!(format_auc_ci(0.983, 0.93, 1.0), "0.983 (0.93-1.0)");
}

fn seg(pairs: &[(&str, f64)]) -> BTreeMap<String, Option<f64>> {
    pairs.iter().map(|(k, v)| (k.to_string(), Some(*v))).collect()
}

#[test]
fn deltas_and_gaps() {
    let d = segment_delta(&seg(&[("Black", 0.762)]), 0.839);
    assert!((d["Black"].unwrap() + 0.077).abs() < 1e-12);
    assert_eq!(segment_delta(&seg(&[("all", 0.8)]), 0.8)["all"], Some(0.0));
    let mut with_undefined = seg(&[("a", 0.7)]);
    with_undefined.insert("b".into(), None);
    assert_eq!(segment_delta(&with_undefined, 0.6)["b"], None);

    assert!((best_worst_gap(&seg(&[("x", 0.5), ("y", 0.7), ("z", 0.9)])).unwrap() - 0.4).abs() < 1e-12);
    assert_eq!(best_worst_gap(&seg(&[("x", 0.6), ("y", 0.6)])), Some(0.0));
    assert_eq!(best_worst_gap(&with_undefined), None);

    // Insurance segments of the mortality task, supervised and SSL columns.
    let sup = seg(&[("Medicare", 0.825), ("Private", 0.868), ("Medicaid", 0.788), ("Government", 0.885), ("Self Pay", 0.983)]);
    let ssl = seg(&[("Medicare", 0.819), ("Private", 0.856), ("Medicaid", 0.786), ("Government", 0.895), ("Self Pay", 0.944)]);
    assert!((best_worst_gap(&sup).unwrap() - 0.20).abs() <= 0.005 + 1e-9);
    assert!((best_worst_gap(&ssl).unwrap() - 0.16).abs() <= 0.005 + 1e-9);
}

#[test]
fn scatter_rows() {
    let sizes: BTreeMap<String, usize> = [("all".to_string(), 50)].into();
    let rows = size_vs_gap_scatter(&seg(&[("all", 0.8)]), &sizes, 0.8);
    assert_eq!(rows.len(), 1);
    assert_eq!((rows[0].relative_size, rows[0].delta), (1.0, 0.0));

    let mut per = seg(&[("a", 0.8), ("b", 0.6)]);
    per.insert("c".into(), None);
    let sizes: BTreeMap<String, usize> = [("a".into(), 70), ("b".into(), 20), ("c".into(), 10)].into();
    let rows = size_vs_gap_scatter(&per, &sizes, 0.78);
    assert_eq!(rows.len(), 2);
    assert!((rows[1].relative_size - 0.2).abs() < 1e-12);
}

#[test]
fn privilege_resolution() {
    let t = one_attribute(&["b", "a", "b", "a", "c"]);
    let g = PrivilegeSpec::default().resolve(&t, "group").unwrap();
    // Tie between a and b goes to the lexicographically first value.
    assert_eq!(g.privileged, "a");
    assert_eq!(g.side("c"), Some(false));
    let mut spec = PrivilegeSpec::default();
    spec.rules.insert(
        "group".into(),
        PrivilegeRule::Explicit {
            privileged: "b".into(),
            unprivileged: "c".into(),
        },
    );
    let g = spec.resolve(&t, "group").unwrap();
    assert_eq!((g.side("b"), g.side("c"), g.side("a")), (Some(true), Some(false), None));
    spec.rules.insert(
        "group".into(),
        PrivilegeRule::Explicit {
            privileged: "b".into(),
            unprivileged: "zz".into(),
        },
    );
    assert!(matches!(spec.resolve(&t, "group"), Err(Error::Config(_))));
}

#[test]
fn report_structure_and_canonical_json() {
    let mut rng = seeded(12);
    let n = 120;
    let values: Vec<&str> = (0..n).map(|i| if i % 4 == 0 { "minor" } else { "major" }).collect();
    let t = one_attribute(&values);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
    let scores: Vec<f64> = labels.iter().map(|&l| (0.3 * l as f64 + rng.random_range(0.0..0.7)).min(1.0)).collect();
    let cfg = EvaluationConfig {
        n_boot: 100,
        ..Default::default()
    };
    let r = evaluate_fairness(&scores, &labels, &ids(n), &t, &[], &PrivilegeSpec::default(), &cfg, RunMetadata::default())
        .unwrap();
    let a = &r.attributes["group"];
    assert_eq!(a.privileged, "major");
    assert_eq!(a.metrics.len(), 5);
    assert_eq!(a.segments["minor"].size, 30);
    let total: u64 = a.segments.values().map(|s| s.confusion.total()).sum();
    assert_eq!(total, n as u64);
    for m in a.metrics.values() {
        if let (Some(v), Some(d)) = (m.value, m.parity_deviation) {
            assert_eq!(d, (1.0 - v).abs());
            assert_eq!(m.fair, Some(d < 0.2));
        }
    }
    let json = r.to_canonical_json().unwrap();
    assert_eq!(json, r.to_canonical_json().unwrap());
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
    let mut sorted = keys.clone();
    sorted.sort();
    assert_eq!(keys, sorted);
    assert!(r.metric_csv().lines().count() == 6);
}

fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        kernel_sizes: vec![3, 3, 2],
        filters: vec![4, 4, 4],
        dropout_rate: 0.1,
        timesteps: 10,
        channels: 2,
    }
}

fn toy_cohort(n: usize, seed: u64) -> (Dataset, AttributeTable) {
    let mut rng = seeded(seed);
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut groups = Vec::new();
    for i in 0..n {
        let y = rng.random_range(0..2);
        groups.push(vec![if i % 2 == 0 { "x" } else { "y" }.to_string()]);
        for _ in 0..10 {
            data.push(y as f64 + rng.random_range(-1.0..1.0));
            data.push(rng.random_range(-1.0..1.0));
        }
        labels.push(y);
    }
    let ids: Vec<String> = (0..n).map(|i| format!("t{seed}-{i}")).collect();
    let d = Dataset::new(ArrayF::new(vec![n, 10, 2], data).unwrap(), labels, ids.clone()).unwrap();
    let t = AttributeTable::new(vec!["group".into()], ids, groups).unwrap();
    (d, t)
}

#[test]
fn subsampling_is_exact_and_ordered() {
    let (d, t) = toy_cohort(60, 1);
    let s = subsample_per_segment(&d, &t, "group", 7, 3).unwrap();
    let seg = t.segments(&s.sample_ids, "group").unwrap();
    assert!(seg.values().all(|r| r.len() == 7));
    let pos: Vec<usize> = s
        .sample_ids
        .iter()
        .map(|id| d.sample_ids.iter().position(|x| x == id).unwrap())
        .collect();
    assert!(pos.windows(2).all(|w| w[0] < w[1]));
    let full = subsample_per_segment(&d, &t, "group", 30, 3).unwrap();
    assert_eq!(full.sample_ids, d.sample_ids);
    assert!(matches!(
        subsample_per_segment(&d, &t, "group", 31, 3),
        Err(Error::InsufficientSegment { .. })
    ));
}

#[test]
fn sweep_is_deterministic_and_checks_segments() {
    let (train, t1) = toy_cohort(60, 1);
    let (test, t2) = toy_cohort(40, 2);
    let mut ids = t1.ids().to_vec();
    ids.extend(t2.ids().iter().cloned());
    let rows: Vec<Vec<String>> = ids.iter().map(|id| vec![t1.value(id, "group").or_else(|_| t2.value(id, "group")).unwrap().to_string()]).collect();
    let attrs = AttributeTable::new(vec!["group".into()], ids, rows).unwrap();
    let enc = build_encoder(&tiny_encoder(), 1).unwrap();
    let cfg = SweepConfig {
        attribute: "group".into(),
        samples_per_segment: vec![5, 10],
        seeds: vec![1, 2],
        ssl_mask: FreezeMask::parse("101").unwrap(),
        finetune: FinetuneConfig {
            epochs: 2,
            batch_size: 8,
            ..Default::default()
        },
        audit_attributes: vec![],
    };
    let a = data_efficiency_sweep(&enc, &train, &test, &attrs, &PrivilegeSpec::default(), &cfg).unwrap();
    assert_eq!(a.len(), 8);
    assert_eq!(a, data_efficiency_sweep(&enc, &train, &test, &attrs, &PrivilegeSpec::default(), &cfg).unwrap());
    let bands = summarize_sweep(&a);
    assert_eq!(bands.len(), 4);
    assert!(bands.iter().all(|b| b.seeds == 2));

    let too_many = SweepConfig {
        samples_per_segment: vec![10, 500],
        ..cfg
    };
    assert!(matches!(
        data_efficiency_sweep(&enc, &train, &test, &attrs, &PrivilegeSpec::default(), &too_many),
        Err(Error::InsufficientSegment { .. })
    ));
}
