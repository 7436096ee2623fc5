//! Multi-domain bag-of-words corpora.
//!
//! One domain lives in one UTF-8 text file, one sample per line:
//!
//! ```text
//! <label> <index>:<value> <index>:<value> ...
//! ```
//!
//! `label` is a class in `1..=K` for labeled samples and `-1` for unlabeled
//! ones. Indices are 0-based and strictly increasing within a line; values
//! are non-negative raw counts. In memory, labels are 0-based.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Sparse feature vector with strictly increasing indices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SparseVector {
    pub indices: Vec<u32>,
    pub values: Vec<f64>,
}

impl SparseVector {
    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.indices.iter().map(|&i| i as usize).zip(self.values.iter().copied())
    }

    /// Collects the nonzero entries of a dense slice.
    pub fn from_dense(dense: &[f64]) -> Self {
        let mut v = SparseVector::default();
        for (i, &x) in dense.iter().enumerate() {
            if x != 0.0 {
                v.indices.push(i as u32);
                v.values.push(x);
            }
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub features: SparseVector,
    /// 0-based class index.
    pub label: usize,
}

/// One domain's labeled pool `L_i` and unlabeled pool `U_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    pub name: String,
    pub labeled: Vec<LabeledSample>,
    pub unlabeled: Vec<SparseVector>,
    pub feature_dim: usize,
}

impl DomainDataset {
    /// Number of classes implied by the largest label present.
    pub fn max_label(&self) -> Option<usize> {
        self.labeled.iter().map(|s| s.label).max()
    }
}

/// Reads one domain file. The domain is named after the file stem.
pub fn load_domain(path: impl AsRef<Path>, feature_dim: usize) -> Result<DomainDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::file(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    parse_domain(BufReader::new(file), &name, &path.display().to_string(), feature_dim)
}

/// Parses the sparse line format from any reader. `source` is used in error
/// messages.
pub fn parse_domain<R: BufRead>(reader: R, name: &str, source: &str, feature_dim: usize) -> Result<DomainDataset> {
    let mut ds = DomainDataset {
        name: name.to_string(),
        labeled: Vec::new(),
        unlabeled: Vec::new(),
        feature_dim,
    };
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let parse_err = |msg: String| Error::Parse {
            path: source.to_string(),
            line: lineno + 1,
            msg,
        };
        let mut tokens = line.split_whitespace();
        let Some(label_tok) = tokens.next() else {
            continue;
        };
        let label: i64 = label_tok
            .parse()
            .map_err(|_| parse_err(format!("bad label {label_tok:?}")))?;
        if label != -1 && label < 1 {
            return Err(parse_err(format!("label must be -1 or >= 1, got {label}")));
        }

        let mut features = SparseVector::default();
        for tok in tokens {
            let (idx, val) = tok
                .split_once(':')
                .ok_or_else(|| parse_err(format!("expected <index>:<value>, got {tok:?}")))?;
            let idx: u32 = idx.parse().map_err(|_| parse_err(format!("bad index {idx:?}")))?;
            let val: f64 = val.parse().map_err(|_| parse_err(format!("bad value {val:?}")))?;
            if idx as usize >= feature_dim {
                return Err(parse_err(format!(
                    "feature index {idx} out of range for feature_dim {feature_dim}"
                )));
            }
            if features.indices.last().is_some_and(|&prev| idx <= prev) {
                return Err(parse_err(format!("indices must be strictly increasing at {idx}")));
            }
            if !(val >= 0.0) || !val.is_finite() {
                return Err(parse_err(format!("feature value must be a finite count >= 0, got {val}")));
            }
            features.indices.push(idx);
            features.values.push(val);
        }

        if label == -1 {
            ds.unlabeled.push(features);
        } else {
            ds.labeled.push(LabeledSample {
                features,
                label: (label - 1) as usize,
            });
        }
    }
    Ok(ds)
}

fn write_features<W: Write>(w: &mut W, v: &SparseVector) -> std::io::Result<()> {
    for (i, x) in v.iter() {
        write!(w, " {i}:{x}")?;
    }
    writeln!(w)
}

/// Writes labeled samples first, then unlabeled ones.
pub fn write_domain<W: Write>(ds: &DomainDataset, mut w: W) -> Result<()> {
    for s in &ds.labeled {
        write!(w, "{}", s.label + 1)?;
        write_features(&mut w, &s.features)?;
    }
    for v in &ds.unlabeled {
        write!(w, "-1")?;
        write_features(&mut w, v)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_domain(ds: &DomainDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::file(path, e))?;
    write_domain(ds, BufWriter::new(file))
}

/// Optional input transform; raw counts are the default.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureTransform {
    #[default]
    Raw,
    Log1p,
}

/// Stacks sparse rows into a dense `n × feature_dim` matrix.
pub fn densify<'a>(
    rows: impl IntoIterator<Item = &'a SparseVector>,
    feature_dim: usize,
    transform: FeatureTransform,
) -> Tensor {
    let mut data = Vec::new();
    let mut n = 0;
    for v in rows {
        let start = data.len();
        data.resize(start + feature_dim, 0.0);
        for (i, x) in v.iter() {
            data[start + i] = match transform {
                FeatureTransform::Raw => x,
                FeatureTransform::Log1p => x.ln_1p(),
            };
        }
        n += 1;
    }
    Tensor::new(n, feature_dim, data).expect("rows sized to feature_dim")
}

/// Train/validation/test split of one domain plus its unlabeled pool.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainTask {
    pub name: String,
    pub train: Vec<LabeledSample>,
    pub unlabeled: Vec<SparseVector>,
    pub validation: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
}

/// Assignment of every labeled sample to one of `fold_count` folds.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldPlan {
    pub fold_count: usize,
    /// `assignments[d][s]` is the fold of labeled sample `s` in domain `d`.
    pub assignments: Vec<Vec<usize>>,
}

/// Stratified, shuffled k-fold assignment per domain.
///
/// Within a domain, samples are grouped by label, each group is shuffled and
/// the groups are dealt round-robin across folds in sequence. Fold sizes
/// therefore differ by at most one, and so does each class's count per fold.
pub fn make_folds(datasets: &[DomainDataset], k: usize, seed: u64) -> Result<FoldPlan> {
    if k == 0 {
        return Err(Error::Config("fold count must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignments = Vec::with_capacity(datasets.len());
    for ds in datasets {
        if ds.labeled.len() < k {
            return Err(Error::Data(format!(
                "domain `{}` has {} labeled samples, fewer than {k} folds",
                ds.name,
                ds.labeled.len()
            )));
        }
        let classes = ds.max_label().map_or(0, |m| m + 1);
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
        for (i, s) in ds.labeled.iter().enumerate() {
            by_class[s.label].push(i);
        }
        let mut fold_of = vec![0; ds.labeled.len()];
        let mut pos = 0;
        for group in by_class.iter_mut() {
            group.shuffle(&mut rng);
            for &i in group.iter() {
                fold_of[i] = pos % k;
                pos += 1;
            }
        }
        assignments.push(fold_of);
    }
    Ok(FoldPlan {
        fold_count: k,
        assignments,
    })
}

impl FoldPlan {
    /// Which fold validates when `test_fold` is held out. With three or more
    /// folds it is the next fold; otherwise the test fold doubles as
    /// validation.
    pub fn validation_fold(&self, test_fold: usize) -> usize {
        if self.fold_count >= 3 {
            (test_fold + 1) % self.fold_count
        } else {
            test_fold
        }
    }

    /// Splits each domain for the run that holds out `test_fold`. Training
    /// uses every fold that is neither test nor validation; with a single
    /// fold all three splits are the whole labeled set.
    pub fn split(&self, datasets: &[DomainDataset], test_fold: usize) -> Result<Vec<DomainTask>> {
        if test_fold >= self.fold_count {
            return Err(Error::Index {
                what: "test fold",
                index: test_fold,
                limit: self.fold_count,
            });
        }
        if datasets.len() != self.assignments.len() {
            return Err(Error::Data(format!(
                "fold plan covers {} domains, got {}",
                self.assignments.len(),
                datasets.len()
            )));
        }
        let val_fold = self.validation_fold(test_fold);
        datasets
            .iter()
            .zip(&self.assignments)
            .map(|(ds, folds)| {
                if folds.len() != ds.labeled.len() {
                    return Err(Error::Data(format!("fold plan does not match domain `{}`", ds.name)));
                }
                let mut task = DomainTask {
                    name: ds.name.clone(),
                    train: Vec::new(),
                    unlabeled: ds.unlabeled.clone(),
                    validation: Vec::new(),
                    test: Vec::new(),
                };
                for (s, &f) in ds.labeled.iter().zip(folds) {
                    if self.fold_count == 1 {
                        task.train.push(s.clone());
                        task.validation.push(s.clone());
                        task.test.push(s.clone());
                        continue;
                    }
                    if f == test_fold {
                        task.test.push(s.clone());
                    }
                    if f == val_fold {
                        task.validation.push(s.clone());
                    }
                    if f != test_fold && f != val_fold {
                        task.train.push(s.clone());
                    }
                }
                Ok(task)
            })
            .collect()
    }
}

/// Splits labeled samples in file order: the first `n_train` train, the next
/// `n_validation` validate, the rest test.
pub fn holdout_split(ds: &DomainDataset, n_train: usize, n_validation: usize) -> Result<DomainTask> {
    if n_train + n_validation >= ds.labeled.len() {
        return Err(Error::Data(format!(
            "domain `{}` has {} labeled samples; need more than {} for a test split",
            ds.name,
            ds.labeled.len(),
            n_train + n_validation
        )));
    }
    Ok(DomainTask {
        name: ds.name.clone(),
        train: ds.labeled[..n_train].to_vec(),
        validation: ds.labeled[n_train..n_train + n_validation].to_vec(),
        test: ds.labeled[n_train + n_validation..].to_vec(),
        unlabeled: ds.unlabeled.clone(),
    })
}

/// Parameters of the synthetic multi-domain generator.
///
/// Every feature has a background Poisson rate shared by all domains. Each
/// class owns a disjoint block of `signal_features` whose rate is raised by
/// `class_signal` in every domain, so the class signal is domain-invariant.
/// Each domain owns a disjoint block of `nuisance_features` whose rate is
/// raised by `domain_shift × nuisance_rate` for both classes alike, which
/// makes domains separable without carrying class information.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub num_domains: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub labeled_per_domain: usize,
    pub unlabeled_per_domain: usize,
    pub domain_shift: f64,
    pub seed: u64,
    pub signal_features: usize,
    pub class_signal: f64,
    pub nuisance_features: usize,
    pub nuisance_rate: f64,
    pub background_rate: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_domains: 4,
            num_classes: 2,
            feature_dim: 200,
            labeled_per_domain: 1000,
            unlabeled_per_domain: 2000,
            domain_shift: 1.0,
            seed: 0,
            signal_features: 10,
            class_signal: 0.3,
            nuisance_features: 10,
            nuisance_rate: 0.2,
            background_rate: 0.1,
        }
    }
}

/// Generates `num_domains` synthetic domains. Labeled samples cycle through
/// the classes so every domain is class-balanced.
pub fn gen_synthetic(cfg: &SyntheticConfig) -> Result<Vec<DomainDataset>> {
    let (m, k, dim) = (cfg.num_domains, cfg.num_classes, cfg.feature_dim);
    if m == 0 || k == 0 || dim == 0 || cfg.labeled_per_domain == 0 || cfg.unlabeled_per_domain == 0 {
        return Err(Error::Config(format!("synthetic counts must all be >= 1: {cfg:?}")));
    }
    if !(cfg.domain_shift >= 0.0) || !(cfg.class_signal >= 0.0) || !(cfg.nuisance_rate >= 0.0) {
        return Err(Error::Config("domain_shift, class_signal and nuisance_rate must be >= 0".into()));
    }
    if !(cfg.background_rate > 0.0) {
        return Err(Error::Config("background_rate must be > 0".into()));
    }
    if dim < k + m {
        return Err(Error::Config(format!(
            "feature_dim {dim} too small for {k} class blocks and {m} domain blocks"
        )));
    }
    // Blocks shrink to fit when the feature space is small.
    let per_block = dim / (k + m);
    let signal = cfg.signal_features.min(per_block).max(1);
    let nuisance = cfg.nuisance_features.min(per_block).max(1);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut perm: Vec<usize> = (0..dim).collect();
    perm.shuffle(&mut rng);
    let class_blocks: Vec<&[usize]> = (0..k).map(|c| &perm[c * signal..(c + 1) * signal]).collect();
    let offset = k * signal;
    let domain_blocks: Vec<&[usize]> = (0..m)
        .map(|d| &perm[offset + d * nuisance..offset + (d + 1) * nuisance])
        .collect();

    let mut datasets = Vec::with_capacity(m);
    for (d, nuisance_block) in domain_blocks.iter().enumerate() {
        let mut domain_rates = vec![cfg.background_rate; dim];
        for &f in nuisance_block.iter() {
            domain_rates[f] += cfg.domain_shift * cfg.nuisance_rate;
        }
        let class_rates: Vec<Vec<f64>> = class_blocks
            .iter()
            .map(|block| {
                let mut r = domain_rates.clone();
                for &f in block.iter() {
                    r[f] += cfg.class_signal;
                }
                r
            })
            .collect();
        let samplers: Vec<Vec<Poisson<f64>>> = class_rates
            .iter()
            .map(|rates| rates.iter().map(|&l| Poisson::new(l).expect("rate > 0")).collect())
            .collect();
        let draw = |rng: &mut ChaCha8Rng, class: usize| -> SparseVector {
            let dense: Vec<f64> = samplers[class].iter().map(|p| p.sample(rng)).collect();
            SparseVector::from_dense(&dense)
        };

        let labeled = (0..cfg.labeled_per_domain)
            .map(|i| {
                let label = i % k;
                LabeledSample {
                    features: draw(&mut rng, label),
                    label,
                }
            })
            .collect::<Vec<_>>();
        let unlabeled = (0..cfg.unlabeled_per_domain)
            .map(|_| {
                let class = rng.random_range(0..k);
                draw(&mut rng, class)
            })
            .collect();
        let mut labeled = labeled;
        labeled.shuffle(&mut rng);
        datasets.push(DomainDataset {
            name: format!("domain{}", d + 1),
            labeled,
            unlabeled,
            feature_dim: dim,
        });
    }
    Ok(datasets)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str, dim: usize) -> Result<DomainDataset> {
        parse_domain(text.as_bytes(), "t", "t.txt", dim)
    }

    #[test]
    fn parses_labeled_and_unlabeled_lines() {
        let ds = parse("1 0:2 4999:1\n-1 7:3\n", 5000).unwrap();
        assert_eq!(ds.labeled.len(), 1);
        assert_eq!(ds.labeled[0].label, 0);
        assert_eq!(ds.labeled[0].features.nnz(), 2);
        assert_eq!(ds.labeled[0].features.indices, vec![0, 4999]);
        assert_eq!(ds.unlabeled.len(), 1);
        assert_eq!(ds.unlabeled[0].values, vec![3.0]);
    }

    #[test]
    fn empty_input_gives_empty_dataset() {
        let ds = parse("", 10).unwrap();
        assert!(ds.labeled.is_empty() && ds.unlabeled.is_empty());
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let cases = [
            ("1 0:1\n2 3\n", 2),
            ("1 0:1\nx 1:1\n", 2),
            ("0 1:1\n", 1),
            ("1 3:1 2:1\n", 1),
            ("1 2:-1\n", 1),
            ("1 10:1\n", 1),
        ];
        for (text, line) in cases {
            match parse(text, 10) {
                Err(Error::Parse { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
                other => panic!("{text:?}: expected parse error, got {other:?}"),
            }
        }
    }

    #[test]
    fn write_then_parse_round_trips() {
        let text = "2 1:1 3:2.5\n1 0:4\n-1 2:1 9:7\n";
        let ds = parse(text, 10).unwrap();
        let mut out = Vec::new();
        write_domain(&ds, &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), text);
    }

    #[test]
    fn folds_partition_and_balance() {
        let cfg = SyntheticConfig {
            labeled_per_domain: 2000,
            unlabeled_per_domain: 1,
            num_domains: 2,
            feature_dim: 20,
            ..Default::default()
        };
        let data = gen_synthetic(&cfg).unwrap();
        let plan = make_folds(&data, 5, 3).unwrap();
        for (ds, folds) in data.iter().zip(&plan.assignments) {
            let mut sizes = [0usize; 5];
            let mut pos = [0usize; 5];
            for (s, &f) in ds.labeled.iter().zip(folds) {
                sizes[f] += 1;
                pos[f] += usize::from(s.label == 1);
            }
            assert_eq!(sizes, [400; 5]);
            for p in pos {
                // Global ratio is exactly one half.
                assert!((p as i64 - 200).abs() <= 1);
            }
        }
        assert_eq!(plan, make_folds(&data, 5, 3).unwrap());

        let one = make_folds(&data, 1, 0).unwrap();
        let tasks = one.split(&data, 0).unwrap();
        assert_eq!(tasks[0].train.len(), 2000);
        assert_eq!(tasks[0].test.len(), 2000);

        let tasks = plan.split(&data, 4).unwrap();
        assert_eq!(tasks[0].test.len(), 400);
        assert_eq!(tasks[0].validation.len(), 400);
        assert_eq!(tasks[0].train.len(), 1200);
    }

    #[test]
    fn too_few_samples_for_folds() {
        let ds = parse("1 0:1\n2 1:1\n", 4).unwrap();
        assert!(matches!(make_folds(&[ds], 3, 0), Err(Error::Data(_))));
    }

    #[test]
    fn synthetic_is_deterministic() {
        let cfg = SyntheticConfig {
            labeled_per_domain: 50,
            unlabeled_per_domain: 30,
            ..Default::default()
        };
        let a = gen_synthetic(&cfg).unwrap();
        let b = gen_synthetic(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        assert!(a.iter().all(|d| d.labeled.len() == 50 && d.unlabeled.len() == 30));
        assert!(a.iter().flat_map(|d| &d.unlabeled).all(|v| v.values.iter().all(|&x| x >= 0.0)));
    }

    #[test]
    fn densify_places_values() {
        let v = SparseVector {
            indices: vec![1, 3],
            values: vec![2.0, std::f64::consts::E - 1.0],
        };
        let t = densify([&v], 4, FeatureTransform::Raw);
        assert_eq!(t.data(), &[0.0, 2.0, 0.0, std::f64::consts::E - 1.0]);
        let t = densify([&v], 4, FeatureTransform::Log1p);
        assert!((t.get(0, 3) - 1.0).abs() < 1e-15);
    }
}
