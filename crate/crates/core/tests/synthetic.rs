//! Oracles for the synthetic generator and the sparse file format.

mod common;

use common::{dense_log1p, softmax_probe};
use mbf::data::{gen_synthetic, load_domain, make_folds, parse_domain, save_domain, write_domain, SyntheticConfig};
use proptest::prelude::*;

fn domain_probe_accuracy(shift: f64) -> f64 {
    let cfg = SyntheticConfig {
        num_domains: 4,
        labeled_per_domain: 10,
        unlabeled_per_domain: 400,
        domain_shift: shift,
        seed: 11,
        ..Default::default()
    };
    let ds = gen_synthetic(&cfg).unwrap();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (d, domain) in ds.iter().enumerate() {
        for (i, v) in domain.unlabeled.iter().enumerate() {
            let row = (dense_log1p(v, cfg.feature_dim), d);
            if i % 2 == 0 { train.push(row) } else { test.push(row) }
        }
    }
    softmax_probe(&train, &test, cfg.num_domains)
}

#[test]
fn no_shift_leaves_domains_indistinguishable() {
    let acc = domain_probe_accuracy(0.0);
    assert!((acc - 0.25).abs() < 0.06, "probe accuracy {acc}");
}

#[test]
fn large_shift_makes_domains_separable() {
    let acc = domain_probe_accuracy(5.0);
    assert!(acc > 0.9, "probe accuracy {acc}");
}

#[test]
fn class_signal_transfers_across_domains() {
    let cfg = SyntheticConfig {
        num_domains: 2,
        labeled_per_domain: 600,
        unlabeled_per_domain: 1,
        domain_shift: 0.0,
        seed: 12,
        ..Default::default()
    };
    let ds = gen_synthetic(&cfg).unwrap();
    let rows = |i: usize| -> Vec<(Vec<f64>, usize)> {
        ds[i].labeled
            .iter()
            .map(|s| (dense_log1p(&s.features, cfg.feature_dim), s.label))
            .collect()
    };
    let acc = softmax_probe(&rows(0), &rows(1), cfg.num_classes);
    assert!(acc > 0.8, "cross-domain accuracy {acc}");
}

#[test]
fn generated_files_load_back() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SyntheticConfig {
        labeled_per_domain: 50,
        unlabeled_per_domain: 30,
        ..Default::default()
    };
    for ds in gen_synthetic(&cfg).unwrap() {
        let path = dir.path().join(format!("{}.txt", ds.name));
        save_domain(&ds, &path).unwrap();
        let back = load_domain(&path, cfg.feature_dim).unwrap();
        assert_eq!(back, ds);
    }
}

#[test]
fn two_thousand_samples_make_five_folds_of_400() {
    let cfg = SyntheticConfig {
        num_domains: 1,
        labeled_per_domain: 2000,
        unlabeled_per_domain: 1,
        ..Default::default()
    };
    let ds = gen_synthetic(&cfg).unwrap();
    let plan = make_folds(&ds, 5, 0).unwrap();
    let mut sizes = [0usize; 5];
    for &f in &plan.assignments[0] {
        sizes[f] += 1;
    }
    assert_eq!(sizes, [400; 5]);
}

fn sample_line() -> impl Strategy<Value = String> {
    let label = prop_oneof![Just("-1".to_string()), (1usize..4).prop_map(|l| l.to_string())];
    let entries = prop::collection::btree_map(0usize..50, 1u32..20, 0..6);
    (label, entries).prop_map(|(l, e)| {
        let mut line = l;
        for (i, v) in e {
            line.push_str(&format!(" {i}:{v}"));
        }
        line
    })
}

proptest! {
    #[test]
    fn write_reproduces_parsed_text(lines in prop::collection::vec(sample_line(), 0..20)) {
        // Labeled lines are written before unlabeled ones.
        let (lab, unl): (Vec<&String>, Vec<&String>) = lines.iter().partition(|l| !l.starts_with("-1"));
        let text: String = lines.iter().map(|l| format!("{l}\n")).collect();
        let ds = parse_domain(text.as_bytes(), "p", "p.txt", 50).unwrap();
        let mut out = Vec::new();
        write_domain(&ds, &mut out).unwrap();
        let expected: String = lab.iter().chain(&unl).map(|l| format!("{l}\n")).collect();
        prop_assert_eq!(String::from_utf8(out).unwrap(), expected);
    }
}
