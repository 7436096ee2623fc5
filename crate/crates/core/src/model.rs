//! Shared-private multi-domain classifier.
//!
//! The model has four parts: a shared feature extractor applied to every
//! domain, one private extractor per domain, a classifier over the
//! concatenated `[shared, private]` features, and an `M`-way domain
//! discriminator over the shared features alone. All four are rectifier
//! MLPs; the two heads end in a log-softmax.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::FeatureTransform;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Architecture of the extractors. The heads are derived from it: each has
/// one hidden layer as wide as its input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub input_dim: usize,
    pub extractor_hidden: Vec<usize>,
    pub shared_dim: usize,
    pub private_dim: usize,
    /// Dropout applied to extractor outputs during training.
    pub dropout: f64,
    /// Transform applied to raw counts before the first layer.
    pub input_transform: FeatureTransform,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            input_dim: 5000,
            extractor_hidden: vec![1000, 500],
            shared_dim: 128,
            private_dim: 64,
            dropout: 0.4,
            input_transform: FeatureTransform::Raw,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0
            || self.shared_dim == 0
            || self.private_dim == 0
            || self.extractor_hidden.contains(&0)
        {
            return Err(Error::Config(format!("all layer widths must be >= 1: {self:?}")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }

    pub fn shared_spec(&self) -> MlpSpec {
        MlpSpec {
            input_dim: self.input_dim,
            hidden_dims: self.extractor_hidden.clone(),
            output_dim: self.shared_dim,
            dropout_rate: self.dropout,
        }
    }

    pub fn private_spec(&self) -> MlpSpec {
        MlpSpec {
            output_dim: self.private_dim,
            ..self.shared_spec()
        }
    }

    pub fn classifier_spec(&self, num_classes: usize) -> MlpSpec {
        let width = self.shared_dim + self.private_dim;
        MlpSpec {
            input_dim: width,
            hidden_dims: vec![width],
            output_dim: num_classes,
            dropout_rate: 0.0,
        }
    }

    pub fn discriminator_spec(&self, num_domains: usize) -> MlpSpec {
        MlpSpec {
            input_dim: self.shared_dim,
            hidden_dims: vec![self.shared_dim],
            output_dim: num_domains,
            dropout_rate: 0.0,
        }
    }
}

/// Layer widths of one rectifier MLP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub dropout_rate: f64,
}

impl MlpSpec {
    fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden_dims.len() + 2);
        w.push(self.input_dim);
        w.extend(&self.hidden_dims);
        w.push(self.output_dim);
        w
    }
}

/// Affine layer `y = x·W + b` with `W` stored `in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn init(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self {
            weight: Tensor::new(fan_in, fan_out, data).expect("length matches"),
            bias: Tensor::zeros(1, fan_out),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub layers: Vec<Linear>,
    /// Extractors rectify their output; classification heads do not.
    relu_output: bool,
}

impl Mlp {
    fn init(spec: MlpSpec, relu_output: bool, rng: &mut impl Rng) -> Self {
        let widths = spec.widths();
        let layers = widths.windows(2).map(|w| Linear::init(w[0], w[1], rng)).collect();
        Self {
            spec,
            layers,
            relu_output,
        }
    }
}

/// Which part of the model a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Component {
    Shared,
    Private(usize),
    Classifier,
    Discriminator,
}

impl Component {
    /// Parameters updated by the main step (everything except the
    /// discriminator).
    pub fn is_feature_side(self) -> bool {
        !matches!(self, Component::Discriminator)
    }
}

/// A parameter tensor together with its checkpoint name.
#[derive(Debug)]
pub struct NamedParam<'a> {
    pub name: String,
    pub component: Component,
    pub tensor: &'a Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MdtcModel {
    pub arch: ArchConfig,
    pub num_domains: usize,
    pub num_classes: usize,
    pub shared: Mlp,
    pub private: Vec<Mlp>,
    pub classifier: Mlp,
    pub discriminator: Mlp,
}

/// Per-sample outputs of a full forward pass for one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutputs {
    pub class_log_probs: Tensor,
    pub domain_log_probs: Tensor,
    pub shared_features: Tensor,
    pub private_features: Tensor,
}

/// Builds a model with weights drawn from `U(-1/√fan_in, 1/√fan_in)` and
/// zero biases, deterministic in `seed`.
pub fn init_model(arch: &ArchConfig, num_domains: usize, num_classes: usize, seed: u64) -> Result<MdtcModel> {
    arch.validate()?;
    if num_domains < 2 {
        return Err(Error::Config(format!("need at least 2 domains, got {num_domains}")));
    }
    if num_classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {num_classes}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shared = Mlp::init(arch.shared_spec(), true, &mut rng);
    let private = (0..num_domains)
        .map(|_| Mlp::init(arch.private_spec(), true, &mut rng))
        .collect();
    let classifier = Mlp::init(arch.classifier_spec(num_classes), false, &mut rng);
    let discriminator = Mlp::init(arch.discriminator_spec(num_domains), false, &mut rng);
    Ok(MdtcModel {
        arch: arch.clone(),
        num_domains,
        num_classes,
        shared,
        private,
        classifier,
        discriminator,
    })
}

/// Training-time dropout; `Eval` is the identity.
pub enum Mode<'r> {
    Eval,
    Train(&'r mut dyn RngCore),
}

/// Inverted dropout: in training mode each entry is zeroed with probability
/// `rate` and survivors are scaled by `1/(1 − rate)`.
pub fn apply_dropout(tape: &mut Tape<'_>, x: Var, rate: f64, mode: &mut Mode<'_>) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate must lie in [0, 1), got {rate}")));
    }
    let rng = match mode {
        Mode::Train(rng) if rate > 0.0 => rng,
        _ => return Ok(x),
    };
    let (rows, cols) = tape.value(x).shape();
    let keep = 1.0 - rate;
    let scale = 1.0 / keep;
    let mask = (0..rows * cols)
        .map(|_| if rng.random::<f64>() < keep { scale } else { 0.0 })
        .collect();
    tape.mul_const(x, Tensor::new(rows, cols, mask)?)
}

#[derive(Clone, Debug)]
struct BoundMlp {
    layers: Vec<(Var, Var)>,
    relu_output: bool,
}

impl BoundMlp {
    fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let z = tape.matmul(h, w)?;
            h = tape.add_row(z, b)?;
            if i < last || self.relu_output {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }
}

/// Model parameters placed on a tape.
#[derive(Clone, Debug)]
pub struct BoundModel {
    shared: BoundMlp,
    private: Vec<BoundMlp>,
    classifier: BoundMlp,
    discriminator: BoundMlp,
    dropout: f64,
    /// Parameter variables in declaration order.
    pub vars: Vec<Var>,
}

impl BoundModel {
    pub fn num_domains(&self) -> usize {
        self.private.len()
    }

    /// `F_s(x)` followed by dropout.
    pub fn shared_features(&self, tape: &mut Tape<'_>, x: Var, mode: &mut Mode<'_>) -> Result<Var> {
        let h = self.shared.forward(tape, x)?;
        apply_dropout(tape, h, self.dropout, mode)
    }

    /// `F_d^i(x)` followed by dropout.
    pub fn private_features(&self, tape: &mut Tape<'_>, x: Var, domain: usize, mode: &mut Mode<'_>) -> Result<Var> {
        let mlp = self.private.get(domain).ok_or(Error::Index {
            what: "domain",
            index: domain,
            limit: self.private.len(),
        })?;
        let h = mlp.forward(tape, x)?;
        apply_dropout(tape, h, self.dropout, mode)
    }

    /// Class log-probabilities from shared and private features.
    pub fn classify(&self, tape: &mut Tape<'_>, shared: Var, private: Var) -> Result<Var> {
        let joint = tape.concat_cols(shared, private)?;
        let logits = self.classifier.forward(tape, joint)?;
        Ok(tape.log_softmax(logits))
    }

    /// Domain log-probabilities from shared features.
    pub fn discriminate(&self, tape: &mut Tape<'_>, shared: Var) -> Result<Var> {
        let logits = self.discriminator.forward(tape, shared)?;
        Ok(tape.log_softmax(logits))
    }
}

fn push_named<'m>(out: &mut Vec<NamedParam<'m>>, prefix: String, component: Component, mlp: &'m Mlp) {
    for (i, layer) in mlp.layers.iter().enumerate() {
        out.push(NamedParam {
            name: format!("{prefix}.{i}.weight"),
            component,
            tensor: &layer.weight,
        });
        out.push(NamedParam {
            name: format!("{prefix}.{i}.bias"),
            component,
            tensor: &layer.bias,
        });
    }
}

impl MdtcModel {
    /// Parameters in declaration order: shared, private extractors by
    /// domain, classifier, discriminator; weight before bias per layer.
    pub fn named_parameters(&self) -> Vec<NamedParam<'_>> {
        let mut out = Vec::new();
        push_named(&mut out, "shared".into(), Component::Shared, &self.shared);
        for (d, mlp) in self.private.iter().enumerate() {
            push_named(&mut out, format!("private.{d}"), Component::Private(d), mlp);
        }
        push_named(&mut out, "classifier".into(), Component::Classifier, &self.classifier);
        push_named(&mut out, "discriminator".into(), Component::Discriminator, &self.discriminator);
        out
    }

    /// Mutable parameters in the same order as [`named_parameters`](Self::named_parameters).
    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        let mlps = std::iter::once(&mut self.shared)
            .chain(self.private.iter_mut())
            .chain(std::iter::once(&mut self.classifier))
            .chain(std::iter::once(&mut self.discriminator));
        for mlp in mlps {
            for layer in mlp.layers.iter_mut() {
                out.push(&mut layer.weight);
                out.push(&mut layer.bias);
            }
        }
        out
    }

    pub fn components(&self) -> Vec<Component> {
        self.named_parameters().iter().map(|p| p.component).collect()
    }

    /// Places every parameter on `tape` by reference. Parameters whose
    /// component fails `trainable` are recorded as constants.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>, trainable: impl Fn(Component) -> bool) -> BoundModel {
        let mut vars = Vec::new();
        let mut bind_mlp = |mlp: &'a Mlp, component: Component, tape: &mut Tape<'a>| {
            let grad = trainable(component);
            let layers = mlp
                .layers
                .iter()
                .map(|l| {
                    let w = tape.borrowed(&l.weight, grad);
                    let b = tape.borrowed(&l.bias, grad);
                    vars.push(w);
                    vars.push(b);
                    (w, b)
                })
                .collect();
            BoundMlp {
                layers,
                relu_output: mlp.relu_output,
            }
        };
        let shared = bind_mlp(&self.shared, Component::Shared, tape);
        let private = self
            .private
            .iter()
            .enumerate()
            .map(|(d, mlp)| bind_mlp(mlp, Component::Private(d), tape))
            .collect();
        let classifier = bind_mlp(&self.classifier, Component::Classifier, tape);
        let discriminator = bind_mlp(&self.discriminator, Component::Discriminator, tape);
        BoundModel {
            shared,
            private,
            classifier,
            discriminator,
            dropout: self.arch.dropout,
            vars,
        }
    }

    /// Builds a [`BoundModel`] over variables already on a tape, given in
    /// declaration order with this model's shapes.
    pub fn bind_vars(&self, tape: &Tape<'_>, vars: &[Var]) -> Result<BoundModel> {
        let params = self.named_parameters();
        if vars.len() != params.len() {
            return Err(Error::Config(format!("expected {} parameter variables, got {}", params.len(), vars.len())));
        }
        for (p, &v) in params.iter().zip(vars) {
            if tape.value(v).shape() != p.tensor.shape() {
                return Err(Error::Shape {
                    op: "bind_vars",
                    lhs: tape.value(v).shape(),
                    rhs: p.tensor.shape(),
                });
            }
        }
        let mut it = vars.iter().copied();
        let mut take = |mlp: &Mlp| BoundMlp {
            layers: mlp
                .layers
                .iter()
                .map(|_| (it.next().expect("counted"), it.next().expect("counted")))
                .collect(),
            relu_output: mlp.relu_output,
        };
        let shared = take(&self.shared);
        let private = self.private.iter().map(&mut take).collect();
        let classifier = take(&self.classifier);
        let discriminator = take(&self.discriminator);
        Ok(BoundModel {
            shared,
            private,
            classifier,
            discriminator,
            dropout: self.arch.dropout,
            vars: vars.to_vec(),
        })
    }

    fn check_domain(&self, domain: usize) -> Result<()> {
        if domain >= self.num_domains {
            return Err(Error::Index {
                what: "domain",
                index: domain,
                limit: self.num_domains,
            });
        }
        Ok(())
    }

    /// All forward outputs for inputs from `domain`, in evaluation mode.
    pub fn forward(&self, x: &Tensor, domain: usize) -> Result<ForwardOutputs> {
        self.check_domain(domain)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, |_| false);
        let xv = tape.borrowed(x, false);
        let s = bound.shared_features(&mut tape, xv, &mut Mode::Eval)?;
        let p = bound.private_features(&mut tape, xv, domain, &mut Mode::Eval)?;
        let c = bound.classify(&mut tape, s, p)?;
        let d = bound.discriminate(&mut tape, s)?;
        Ok(ForwardOutputs {
            class_log_probs: tape.value(c).clone(),
            domain_log_probs: tape.value(d).clone(),
            shared_features: tape.value(s).clone(),
            private_features: tape.value(p).clone(),
        })
    }

    /// `log P(y | x, domain)`, shape `B × K`.
    pub fn forward_classify(&self, x: &Tensor, domain: usize) -> Result<Tensor> {
        self.check_domain(domain)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, |_| false);
        let xv = tape.borrowed(x, false);
        let s = bound.shared_features(&mut tape, xv, &mut Mode::Eval)?;
        let p = bound.private_features(&mut tape, xv, domain, &mut Mode::Eval)?;
        let c = bound.classify(&mut tape, s, p)?;
        Ok(tape.value(c).clone())
    }

    /// Domain log-probabilities `log D(F_s(x))`, shape `B × M`.
    pub fn forward_discriminate(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, |_| false);
        let xv = tape.borrowed(x, false);
        let s = bound.shared_features(&mut tape, xv, &mut Mode::Eval)?;
        let d = bound.discriminate(&mut tape, s)?;
        Ok(tape.value(d).clone())
    }

    /// `F_s(x)` in evaluation mode.
    pub fn shared_features(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, |_| false);
        let xv = tape.borrowed(x, false);
        let s = bound.shared_features(&mut tape, xv, &mut Mode::Eval)?;
        Ok(tape.value(s).clone())
    }

    pub fn parameter_count(&self) -> usize {
        self.named_parameters().iter().map(|p| p.tensor.len()).sum()
    }
}

// Checkpoint container:
//
//   MBF-CHECKPOINT 1\n
//   <name> <rows> <cols>\n      one line per parameter, declaration order
//   END\n
//   <f64 little-endian values of every parameter, same order, row-major>

const MAGIC: &str = "MBF-CHECKPOINT 1";
const HEADER_END: &str = "END";

impl MdtcModel {
    pub fn save<W: Write>(&self, mut w: W) -> Result<()> {
        let params = self.named_parameters();
        writeln!(w, "{MAGIC}")?;
        for p in &params {
            writeln!(w, "{} {} {}", p.name, p.tensor.rows(), p.tensor.cols())?;
        }
        writeln!(w, "{HEADER_END}")?;
        for p in &params {
            for v in p.tensor.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::file(path, e))?;
        self.save(BufWriter::new(file))
    }

    /// Overwrites this model's parameters from a checkpoint whose header
    /// must list exactly this model's parameter names and shapes.
    pub fn load_parameters<R: Read>(&mut self, r: R) -> Result<()> {
        let mut r = BufReader::new(r);
        let mut line = String::new();
        r.read_line(&mut line)?;
        if line.trim_end() != MAGIC {
            return Err(Error::Checkpoint(format!("bad magic line {:?}", line.trim_end())));
        }
        let mut header = Vec::new();
        loop {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(Error::Checkpoint("header not terminated by END".into()));
            }
            let l = line.trim_end();
            if l == HEADER_END {
                break;
            }
            let parts: Vec<&str> = l.split_whitespace().collect();
            let parsed = match parts.as_slice() {
                [name, rows, cols] => rows
                    .parse::<usize>()
                    .ok()
                    .zip(cols.parse::<usize>().ok())
                    .map(|(r, c)| (name.to_string(), r, c)),
                _ => None,
            };
            header.push(parsed.ok_or_else(|| Error::Checkpoint(format!("bad header line {l:?}")))?);
        }

        let expected: Vec<(String, usize, usize)> = self
            .named_parameters()
            .iter()
            .map(|p| (p.name.clone(), p.tensor.rows(), p.tensor.cols()))
            .collect();
        for (i, exp) in expected.iter().enumerate() {
            match header.get(i) {
                None => {
                    return Err(Error::CheckpointMismatch {
                        name: exp.0.clone(),
                        detail: "missing from checkpoint".into(),
                    })
                }
                Some(got) if got.0 != exp.0 => {
                    return Err(Error::CheckpointMismatch {
                        name: exp.0.clone(),
                        detail: format!("checkpoint has `{}` at this position", got.0),
                    })
                }
                Some(got) if (got.1, got.2) != (exp.1, exp.2) => {
                    return Err(Error::CheckpointMismatch {
                        name: exp.0.clone(),
                        detail: format!("expected {}x{}, checkpoint has {}x{}", exp.1, exp.2, got.1, got.2),
                    })
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = header.get(expected.len()) {
            return Err(Error::CheckpointMismatch {
                name: extra.0.clone(),
                detail: "not present in the model".into(),
            });
        }

        let mut buf = [0u8; 8];
        for t in self.parameters_mut() {
            for v in t.data_mut() {
                r.read_exact(&mut buf)
                    .map_err(|e| Error::Checkpoint(format!("truncated parameter data: {e}")))?;
                *v = f64::from_le_bytes(buf);
            }
        }
        if r.read(&mut buf)? != 0 {
            return Err(Error::Checkpoint("trailing bytes after parameter data".into()));
        }
        Ok(())
    }

    pub fn load_file(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::file(path, e))?;
        self.load_parameters(file)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy_arch() -> ArchConfig {
        ArchConfig {
            input_dim: 10,
            extractor_hidden: vec![8],
            shared_dim: 4,
            private_dim: 2,
            dropout: 0.0,
            input_transform: FeatureTransform::Raw,
        }
    }

    fn toy_input(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(0.0..3.0)).collect()).unwrap()
    }

    #[test]
    fn amazon_dimensions() {
        let arch = ArchConfig::default();
        assert_eq!(arch.classifier_spec(2).input_dim, 192);
        assert_eq!(arch.discriminator_spec(4).input_dim, 128);
        // Building the full model is cheap enough to check the chain once.
        let model = init_model(&arch, 4, 2, 0).unwrap();
        assert_eq!(model.classifier.layers[0].weight.shape(), (192, 192));
        assert_eq!(model.discriminator.layers[0].weight.shape(), (128, 128));
        assert_eq!(model.discriminator.layers[1].weight.shape(), (128, 4));
        assert_eq!(model.shared.layers[0].weight.shape(), (5000, 1000));
        assert_eq!(model.private[3].layers[2].weight.shape(), (500, 64));
    }

    #[test]
    fn toy_dimensions_and_outputs() {
        let model = init_model(&toy_arch(), 2, 2, 3).unwrap();
        assert_eq!(model.classifier.spec.input_dim, 6);
        let x = toy_input(5, 10, 1);
        for d in 0..2 {
            let out = model.forward(&x, d).unwrap();
            assert_eq!(out.class_log_probs.shape(), (5, 2));
            assert_eq!(out.domain_log_probs.shape(), (5, 2));
            assert_eq!(out.shared_features.shape(), (5, 4));
            assert_eq!(out.private_features.shape(), (5, 2));
            for t in [&out.class_log_probs, &out.domain_log_probs] {
                for r in 0..t.rows() {
                    assert!(t.row(r).iter().all(|&v| v <= 0.0));
                    let s: f64 = t.row(r).iter().map(|v| v.exp()).sum();
                    assert!((s - 1.0).abs() < 1e-9);
                }
            }
        }
        assert!(matches!(model.forward_classify(&x, 2), Err(Error::Index { .. })));
    }

    #[test]
    fn init_is_deterministic_and_uniform_bounded() {
        let a = init_model(&toy_arch(), 2, 2, 11).unwrap();
        let b = init_model(&toy_arch(), 2, 2, 11).unwrap();
        assert_eq!(a, b);
        let c = init_model(&toy_arch(), 2, 2, 12).unwrap();
        assert_ne!(a, c);
        let bound = 1.0 / 10f64.sqrt();
        assert!(a.shared.layers[0].weight.data().iter().all(|v| v.abs() <= bound));
        assert!(a.shared.layers[0].bias.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_rejects_bad_config() {
        let mut arch = toy_arch();
        arch.shared_dim = 0;
        assert!(matches!(init_model(&arch, 2, 2, 0), Err(Error::Config(_))));
        assert!(matches!(init_model(&toy_arch(), 1, 2, 0), Err(Error::Config(_))));
        assert!(matches!(init_model(&toy_arch(), 2, 1, 0), Err(Error::Config(_))));
        let mut arch = toy_arch();
        arch.dropout = 1.0;
        assert!(matches!(init_model(&arch, 2, 2, 0), Err(Error::Config(_))));
    }

    #[test]
    fn zero_heads_give_uniform_outputs() {
        let mut model = init_model(&toy_arch(), 3, 2, 5).unwrap();
        let last = model.classifier.layers.len() - 1;
        model.classifier.layers[last].weight = Tensor::zeros(6, 2);
        let last = model.discriminator.layers.len() - 1;
        model.discriminator.layers[last].weight = Tensor::zeros(4, 3);
        let x = toy_input(4, 10, 2);
        let c = model.forward_classify(&x, 0).unwrap();
        assert!(c.data().iter().all(|v| (v - 0.5f64.ln()).abs() < 1e-15));
        let d = model.forward_discriminate(&x).unwrap();
        assert!(d.data().iter().all(|v| (v - (1.0f64 / 3.0).ln()).abs() < 1e-15));
    }

    #[test]
    fn domains_use_distinct_private_extractors() {
        let model = init_model(&toy_arch(), 2, 2, 9).unwrap();
        let x = toy_input(3, 10, 4);
        let a = model.forward_classify(&x, 0).unwrap();
        let b = model.forward_classify(&x, 1).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn dropout_behaviour() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::filled(100, 1000, 1.0);
        let mut tape = Tape::new();
        let v = tape.borrowed(&x, false);

        let y = apply_dropout(&mut tape, v, 0.0, &mut Mode::Train(&mut rng)).unwrap();
        assert_eq!(y, v);
        let y = apply_dropout(&mut tape, v, 0.7, &mut Mode::Eval).unwrap();
        assert_eq!(y, v);
        assert!(apply_dropout(&mut tape, v, 1.0, &mut Mode::Eval).is_err());

        let y = apply_dropout(&mut tape, v, 0.4, &mut Mode::Train(&mut rng)).unwrap();
        let out = tape.value(y);
        let survivors = out.data().iter().filter(|&&v| v != 0.0).count();
        let frac = survivors as f64 / out.len() as f64;
        assert!((frac - 0.6).abs() < 0.01, "survivor fraction {frac}");
        assert!(out.data().iter().all(|&v| v == 0.0 || (v - 1.0 / 0.6).abs() < 1e-12));
    }

    #[test]
    fn bind_marks_frozen_components() {
        let model = init_model(&toy_arch(), 2, 2, 0).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, Component::is_feature_side);
        let comps = model.components();
        assert_eq!(bound.vars.len(), comps.len());
        for (v, c) in bound.vars.iter().zip(comps) {
            assert_eq!(tape.requires_grad(*v), c.is_feature_side());
        }
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let model = init_model(&toy_arch(), 2, 2, 21).unwrap();
        let mut buf = Vec::new();
        model.save(&mut buf).unwrap();
        let header = String::from_utf8_lossy(&buf[..40]);
        assert!(header.starts_with("MBF-CHECKPOINT 1\nshared.0.weight 10 8\n"));

        let mut other = init_model(&toy_arch(), 2, 2, 22).unwrap();
        other.load_parameters(&buf[..]).unwrap();
        assert_eq!(other, model);

        let mut arch = toy_arch();
        arch.input_dim = 12;
        let mut wrong = init_model(&arch, 2, 2, 0).unwrap();
        match wrong.load_parameters(&buf[..]) {
            Err(Error::CheckpointMismatch { name, .. }) => assert_eq!(name, "shared.0.weight"),
            other => panic!("expected mismatch, got {other:?}"),
        }

        let mut three = init_model(&toy_arch(), 3, 2, 0).unwrap();
        match three.load_parameters(&buf[..]) {
            Err(Error::CheckpointMismatch { name, .. }) => assert_eq!(name, "private.2.0.weight"),
            other => panic!("expected mismatch, got {other:?}"),
        }

        let mut again = init_model(&toy_arch(), 2, 2, 0).unwrap();
        assert!(matches!(
            again.load_parameters(&buf[..buf.len() - 3]),
            Err(Error::Checkpoint(_))
        ));
    }
}
