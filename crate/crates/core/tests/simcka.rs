use fairprobe::dataset::AttributeTable;
use fairprobe::rng::seeded;
use fairprobe::simcka::{
    cka_table, conditioned_cka, group_distance_stats, layerwise_cka_matrix, linear_cka, medoid, ActivationMatrix,
};
use fairprobe::tensorcore::ArrayF;
use fairprobe::Error;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("u{i}")).collect()
}

fn act(rows: &[Vec<f64>]) -> ActivationMatrix {
    let d = rows[0].len();
    ActivationMatrix::new(ArrayF::new(vec![rows.len(), d], rows.concat()).unwrap(), ids(rows.len())).unwrap()
}

fn random_rows(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = seeded(seed);
    (0..n).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect()
}

/// The formula spelled out with explicit transposed products.
fn brute_cka(h: &[Vec<f64>], j: &[Vec<f64>], center: bool) -> f64 {
    let prep = |m: &[Vec<f64>]| -> Vec<Vec<f64>> {
        let d = m[0].len();
        let means: Vec<f64> = (0..d).map(|c| m.iter().map(|r| r[c]).sum::<f64>() / m.len() as f64).collect();
        m.iter()
            .map(|r| r.iter().zip(&means).map(|(v, mu)| if center { v - mu } else { *v }).collect())
            .collect()
    };
    let (h, j) = (prep(h), prep(j));
    let fro_sq_t = |a: &[Vec<f64>], b: &[Vec<f64>]| -> f64 {
        let (p, q) = (a[0].len(), b[0].len());
        let mut s = 0.0;
        for x in 0..p {
            for y in 0..q {
                let c: f64 = a.iter().zip(b).map(|(ra, rb)| ra[x] * rb[y]).sum();
                s += c * c;
            }
        }
        s
    };
    fro_sq_t(&h, &j) / (fro_sq_t(&h, &h).sqrt() * fro_sq_t(&j, &j).sqrt())
}

fn orthogonal(d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut q: Vec<Vec<f64>> = random_rows(d, d, seed);
    for i in 0..d {
        for k in 0..i {
            let dot: f64 = (0..d).map(|c| q[i][c] * q[k][c]).sum();
            for c in 0..d {
                q[i][c] -= dot * q[k][c];
            }
        }
        let n = q[i].iter().map(|v| v * v).sum::<f64>().sqrt();
        q[i].iter_mut().for_each(|v| *v /= n);
    }
    q
}

fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter()
        .map(|r| (0..b[0].len()).map(|c| r.iter().zip(b).map(|(x, br)| x * br[c]).sum()).collect())
        .collect()
}

#[test]
fn small_random_matches_brute_force() {
    let h = random_rows(5, 3, 1);
    let j = random_rows(5, 2, 2);
    for center in [true, false] {
        let got = linear_cka(&act(&h), &act(&j), center).unwrap();
        assert!((got - brute_cka(&h, &j, center)).abs() < 1e-12);
    }
}

#[test]
fn wide_activations_match_brute_force() {
    // More features than samples exercises the sample-space route.
    let h = random_rows(6, 20, 3);
    let j = random_rows(6, 9, 4);
    let got = linear_cka(&act(&h), &act(&j), true).unwrap();
    assert!((got - brute_cka(&h, &j, true)).abs() < 1e-10);
}

#[test]
fn identity_and_invariances() {
    let h = random_rows(30, 4, 5);
    assert!((linear_cka(&act(&h), &act(&h), true).unwrap() - 1.0).abs() < 1e-12);
    let scaled: Vec<Vec<f64>> = h.iter().map(|r| r.iter().map(|v| 3.7 * v).collect()).collect();
    assert!((linear_cka(&act(&h), &act(&scaled), true).unwrap() - 1.0).abs() < 1e-8);
    let rotated = matmul(&h, &orthogonal(4, 6));
    assert!((linear_cka(&act(&h), &act(&rotated), true).unwrap() - 1.0).abs() < 1e-8);
}

#[test]
fn errors() {
    let h = act(&random_rows(4, 3, 1));
    let constant = act(&vec![vec![1.0, 2.0]; 4]);
    assert!(matches!(linear_cka(&h, &constant, true), Err(Error::Degenerate(_))));
    let other = ActivationMatrix::new(
        ArrayF::new(vec![4, 2], vec![0.0; 8]).unwrap(),
        vec!["a".into(), "b".into(), "c".into(), "d".into()],
    )
    .unwrap();
    assert!(matches!(linear_cka(&h, &other, true), Err(Error::Alignment(_))));
    assert!(ActivationMatrix::new(ArrayF::zeros(&[2, 1]), vec!["a".into(), "a".into()]).is_err());
}

fn table(values: &[&str]) -> AttributeTable {
    AttributeTable::new(
        vec!["group".into()],
        ids(values.len()),
        values.iter().map(|v| vec![v.to_string()]).collect(),
    )
    .unwrap()
}

#[test]
fn conditioning_examples() {
    let h = random_rows(10, 3, 8);
    let j = random_rows(10, 4, 9);
    let single = table(&["x"; 10]);
    assert_eq!(
        conditioned_cka(&act(&h), &act(&j), &single, "group", "x", true).unwrap(),
        linear_cka(&act(&h), &act(&j), true).unwrap()
    );

    let mut dup = h.clone();
    dup[1] = dup[0].clone();
    let t = table(&["a", "a", "b", "b", "b", "b", "b", "b", "b", "c"]);
    assert!(matches!(
        conditioned_cka(&act(&dup), &act(&dup), &t, "group", "a", true),
        Err(Error::Degenerate(_))
    ));
    assert!(matches!(
        conditioned_cka(&act(&h), &act(&j), &t, "group", "c", true),
        Err(Error::InsufficientSegment { size: 1, .. })
    ));
    assert!(matches!(
        conditioned_cka(&act(&h), &act(&j), &t, "group", "zz", true),
        Err(Error::InsufficientSegment { size: 0, .. })
    ));
}

#[test]
fn shuffled_segment_has_lower_conditioned_cka() {
    let n = 80;
    let h = random_rows(n, 5, 10);
    let mut j = h.clone();
    let mut rng = seeded(11);
    let mut b_rows: Vec<usize> = (n / 2..n).collect();
    let orig = b_rows.clone();
    b_rows.shuffle(&mut rng);
    for (dst, src) in orig.iter().zip(&b_rows) {
        j[*dst] = h[*src].clone();
    }
    let labels: Vec<&str> = (0..n).map(|i| if i < n / 2 { "A" } else { "B" }).collect();
    let t = table(&labels);
    let a = conditioned_cka(&act(&h), &act(&j), &t, "group", "A", true).unwrap();
    let b = conditioned_cka(&act(&h), &act(&j), &t, "group", "B", true).unwrap();
    assert!(a > b, "{a} vs {b}");
}

#[test]
fn layerwise_matrix() {
    let blocks: Vec<ActivationMatrix> = (0..3).map(|b| act(&random_rows(12, 2 + b, 20 + b as u64))).collect();
    let m = layerwise_cka_matrix(&blocks, &blocks, true).unwrap();
    for i in 0..3 {
        assert!((m[i][i] - 1.0).abs() < 1e-12);
    }
    let other: Vec<Vec<Vec<f64>>> = (0..3).map(|b| random_rows(12, 3, 40 + b)).collect();
    let other_acts: Vec<ActivationMatrix> = other.iter().map(|r| act(r)).collect();
    let m = layerwise_cka_matrix(&blocks, &other_acts, true).unwrap();
    for a in 0..3 {
        let ha = random_rows(12, 2 + a, 20 + a as u64);
        for b in 0..3 {
            assert!((m[a][b] - brute_cka(&ha, &other[b], true)).abs() < 1e-12);
        }
    }
    let single = layerwise_cka_matrix(&blocks[..1], &other_acts[..1], true).unwrap();
    assert_eq!(single, vec![vec![linear_cka(&blocks[0], &other_acts[0], true).unwrap()]]);
}

#[test]
fn medoid_examples() {
    let p = ArrayF::new(vec![3, 1], vec![0.0, 1.0, 10.0]).unwrap();
    assert_eq!(medoid(&p).unwrap(), 1);
    assert_eq!(medoid(&ArrayF::full(&[4, 2], 3.0)).unwrap(), 0);
    assert_eq!(medoid(&ArrayF::full(&[1, 2], 3.0)).unwrap(), 0);
    assert!(matches!(medoid(&ArrayF::zeros(&[0, 2])), Err(Error::EmptyInput(_))));
}

#[test]
fn group_distances() {
    let t = table(&["a", "a", "a", "b", "b", "b"]);
    let same = act(&vec![vec![1.0, 1.0]; 6]);
    let s = group_distance_stats(&same, &t, "group").unwrap();
    assert_eq!(s.mean_intra, Some(0.0));
    assert_eq!(s.mean_inter, Some(0.0));

    let mut rng = seeded(3);
    let rows: Vec<Vec<f64>> = (0..6)
        .map(|i| {
            let c = if i < 3 { -5.0 } else { 5.0 };
            vec![c + rng.random_range(-0.5..0.5), c + rng.random_range(-0.5..0.5)]
        })
        .collect();
    let s = group_distance_stats(&act(&rows), &t, "group").unwrap();
    assert!(s.mean_inter.unwrap() > s.mean_intra.unwrap());
    assert_eq!(s.segments.len(), 2);
    assert_eq!(s.segments[0].size, 3);
    assert!(matches!(group_distance_stats(&act(&rows), &t, "age"), Err(Error::Contract(_))));
}

#[test]
fn table_marks_undefined_segments() {
    let t = table(&["a", "a", "a", "b"]);
    let blocks = vec![act(&random_rows(4, 2, 1))];
    let entries = cka_table(&blocks, &blocks, &t, true).unwrap();
    assert_eq!(entries.len(), 3);
    assert!(entries.iter().any(|e| e.segment == "b" && e.cka.is_none()));
}

fn matrices() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    (3usize..12, 1usize..5, 1usize..5).prop_flat_map(|(n, p, q)| {
        (
            prop::collection::vec(prop::collection::vec(-5.0f64..5.0, p), n),
            prop::collection::vec(prop::collection::vec(-5.0f64..5.0, q), n),
        )
    })
}

proptest! {
    #[test]
    fn symmetric_and_bounded((h, j) in matrices()) {
        let (a, b) = (act(&h), act(&j));
        if let (Ok(x), Ok(y)) = (linear_cka(&a, &b, true), linear_cka(&b, &a, true)) {
            prop_assert!((x - y).abs() < 1e-12);
            prop_assert!((-1e-12..=1.0 + 1e-12).contains(&x));
            prop_assert!((x - brute_cka(&h, &j, true)).abs() < 1e-10);
        }
    }

    #[test]
    fn orthogonal_and_scale_invariant((h, j) in matrices(), seed in 0u64..1000, c in 0.1f64..10.0) {
        let (a, b) = (act(&h), act(&j));
        if let Ok(base) = linear_cka(&a, &b, true) {
            let q = orthogonal(h[0].len(), seed);
            let hq: Vec<Vec<f64>> = matmul(&h, &q).into_iter().map(|r| r.into_iter().map(|v| c * v).collect()).collect();
            let moved = linear_cka(&act(&hq), &b, true).unwrap();
            prop_assert!((moved - base).abs() < 1e-8);
        }
    }
}
