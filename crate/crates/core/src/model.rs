//! Feed-forward encoder with a bias-free `(num_known + 1)`-way linear head.
//!
//! The encoder `g` maps an input to the penultimate feature `h`; the head maps
//! `h` to logits. Gradients are computed by hand in [`ModelParams::backward`].
//!
//! # Checkpoint format
//!
//! Plain UTF-8 text, one record per line, values separated by single spaces.
//! Floats use Rust's shortest round-trip formatting so a load is bit-exact.
//!
//! ```text
//! art-checkpoint v1
//! input_dim <usize>
//! embed_dim <usize>
//! num_known <usize>
//! layers <count>
//! layer <index> <out_dim> <in_dim> <tanh|identity>
//! w <in_dim values>        (repeated out_dim times, row-major)
//! b <out_dim values>
//! head <num_known + 1> <embed_dim>
//! h <embed_dim values>     (repeated num_known + 1 times)
//! ```

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric;

const CHECKPOINT_MAGIC: &str = "art-checkpoint v1";
/// Hidden widths of the default encoder.
pub const DEFAULT_HIDDEN: [usize; 2] = [64, 64];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed in terms of the activation output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }

    fn tag(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }

    fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "tanh" => Some(Activation::Tanh),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }
}

/// Dense layer; `weights` is row-major `out_dim x in_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
            activation,
        }
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.weights[i * self.in_dim..(i + 1) * self.in_dim]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub layers: Vec<DenseLayer>,
    /// Row-major `(num_known + 1) x embed_dim`; the last row is the unknown class.
    pub head: Vec<f64>,
    pub num_known: usize,
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// `activations[0]` is the input; `activations[i + 1]` is the output of layer `i`.
    pub activations: Vec<Vec<f64>>,
    pub pre_activations: Vec<Vec<f64>>,
    /// `h / ||h||`, absent when the penultimate feature is exactly zero.
    pub normalized: Option<Vec<f64>>,
    pub logits: Vec<f64>,
}

impl ForwardTrace {
    /// Penultimate feature `h = g(x)`.
    pub fn embedding(&self) -> &[f64] {
        self.activations.last().expect("trace holds the input")
    }

    pub fn normalized(&self) -> Result<&[f64]> {
        self.normalized.as_deref().ok_or(Error::ZeroNorm)
    }
}

/// Parameter-shaped gradient buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
    pub head: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| (vec![0.0; l.weights.len()], vec![0.0; l.bias.len()]))
                .collect(),
            head: vec![0.0; params.head.len()],
        }
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            w.iter_mut().zip(ow).for_each(|(a, o)| *a += scale * o);
            b.iter_mut().zip(ob).for_each(|(a, o)| *a += scale * o);
        }
        self.head.iter_mut().zip(&other.head).for_each(|(a, o)| *a += scale * o);
    }

    /// Same ordering as [`ModelParams::flatten`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in &self.layers {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out.extend_from_slice(&self.head);
        out
    }
}

impl ModelParams {
    /// Default architecture `input -> 64 -> 64 -> embed_dim`, tanh throughout.
    pub fn init(input_dim: usize, embed_dim: usize, num_known: usize, seed: u64) -> Result<Self> {
        let mut widths = vec![input_dim];
        widths.extend_from_slice(&DEFAULT_HIDDEN);
        widths.push(embed_dim);
        Self::init_with_widths(&widths, num_known, seed)
    }

    /// `widths` lists the input dimension followed by every layer width.
    ///
    /// Weights are LeCun-uniform, `U(-sqrt(3 / fan_in), sqrt(3 / fan_in))`;
    /// biases start at zero.
    pub fn init_with_widths(widths: &[usize], num_known: usize, seed: u64) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) || num_known == 0 {
            return Err(Error::InvalidConfig("model dimensions must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |fan_in: usize, n: usize| -> Vec<f64> {
            let a = (3.0 / fan_in as f64).sqrt();
            (0..n).map(|_| rng.gen_range(-a..a)).collect()
        };
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for pair in widths.windows(2) {
            let (i, o) = (pair[0], pair[1]);
            layers.push(DenseLayer {
                in_dim: i,
                out_dim: o,
                weights: uniform(i, i * o),
                bias: vec![0.0; o],
                activation: Activation::Tanh,
            });
        }
        let embed_dim = *widths.last().unwrap();
        let head = uniform(embed_dim, (num_known + 1) * embed_dim);
        Ok(Self {
            layers,
            head,
            num_known,
        })
    }

    pub fn from_parts(layers: Vec<DenseLayer>, head: Vec<f64>, num_known: usize) -> Result<Self> {
        let params = Self {
            layers,
            head,
            num_known,
        };
        params.validate()?;
        Ok(params)
    }

    fn validate(&self) -> Result<()> {
        let Some(first) = self.layers.first() else {
            return Err(Error::InvalidConfig("model needs at least one layer".into()));
        };
        let mut prev = first.in_dim;
        for l in &self.layers {
            if l.in_dim != prev || l.weights.len() != l.in_dim * l.out_dim || l.bias.len() != l.out_dim {
                return Err(Error::InvalidConfig("inconsistent layer shapes".into()));
            }
            prev = l.out_dim;
        }
        if self.num_known == 0 || self.head.len() != (self.num_known + 1) * prev {
            return Err(Error::InvalidConfig("head must be (num_known + 1) x embed_dim".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn embed_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    pub fn num_outputs(&self) -> usize {
        self.num_known + 1
    }

    pub fn head_row(&self, k: usize) -> &[f64] {
        let d = self.embed_dim();
        &self.head[k * d..(k + 1) * d]
    }

    /// Head applied to an arbitrary embedding-space vector.
    pub fn head_logits(&self, v: &[f64]) -> Vec<f64> {
        (0..self.num_outputs()).map(|k| numeric::dot(self.head_row(k), v)).collect()
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardTrace> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        activations.push(x.to_vec());
        for layer in &self.layers {
            let input = activations.last().unwrap();
            let pre: Vec<f64> = (0..layer.out_dim)
                .map(|i| numeric::dot(layer.row(i), input) + layer.bias[i])
                .collect();
            let act = pre.iter().map(|&p| layer.activation.apply(p)).collect();
            pre_activations.push(pre);
            activations.push(act);
        }
        let h = activations.last().unwrap();
        let logits = self.head_logits(h);
        let normalized = numeric::l2_normalize(h).ok();
        Ok(ForwardTrace {
            activations,
            pre_activations,
            normalized,
            logits,
        })
    }

    /// Backpropagates `d_logits` through the head and encoder.
    pub fn backward(&self, trace: &ForwardTrace, d_logits: &[f64]) -> Result<Gradients> {
        if d_logits.len() != self.num_outputs() {
            return Err(Error::DimensionMismatch {
                expected: self.num_outputs(),
                got: d_logits.len(),
            });
        }
        if trace.activations.len() != self.layers.len() + 1 {
            return Err(Error::InvalidConfig("trace does not match this model".into()));
        }
        let mut grads = Gradients::zeros_like(self);
        let d = self.embed_dim();
        let h = trace.embedding();

        let mut upstream = vec![0.0; d];
        for (k, &g) in d_logits.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let row = self.head_row(k);
            for c in 0..d {
                grads.head[k * d + c] = g * h[c];
                upstream[c] += g * row[c];
            }
        }

        for (li, layer) in self.layers.iter().enumerate().rev() {
            let out = &trace.activations[li + 1];
            let input = &trace.activations[li];
            let delta: Vec<f64> = upstream
                .iter()
                .zip(out)
                .map(|(u, &y)| u * layer.activation.derivative_from_output(y))
                .collect();
            let (dw, db) = &mut grads.layers[li];
            let mut next = vec![0.0; layer.in_dim];
            for (i, &di) in delta.iter().enumerate() {
                db[i] = di;
                let row = layer.row(i);
                for j in 0..layer.in_dim {
                    dw[i * layer.in_dim + j] = di * input[j];
                    next[j] += di * row[j];
                }
            }
            upstream = next;
        }
        Ok(grads)
    }

    /// All parameters in a fixed order: for each layer its weights then bias,
    /// then the head.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out.extend_from_slice(&self.head);
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum::<usize>() + self.head.len()
    }

    pub fn mutate_flat(&mut self, index: usize, f: impl FnOnce(&mut f64)) {
        let mut i = index;
        for l in &mut self.layers {
            if i < l.weights.len() {
                return f(&mut l.weights[i]);
            }
            i -= l.weights.len();
            if i < l.bias.len() {
                return f(&mut l.bias[i]);
            }
            i -= l.bias.len();
        }
        f(&mut self.head[i])
    }

    /// Little-endian bytes of every parameter, for exact equality checks.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.flatten().iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }

    pub fn to_checkpoint_string(&self) -> String {
        let mut s = String::new();
        let join = |vals: &[f64]| vals.iter().map(f64::to_string).collect::<Vec<_>>().join(" ");
        writeln!(s, "{CHECKPOINT_MAGIC}").unwrap();
        writeln!(s, "input_dim {}", self.input_dim()).unwrap();
        writeln!(s, "embed_dim {}", self.embed_dim()).unwrap();
        writeln!(s, "num_known {}", self.num_known).unwrap();
        writeln!(s, "layers {}", self.layers.len()).unwrap();
        for (i, l) in self.layers.iter().enumerate() {
            writeln!(s, "layer {i} {} {} {}", l.out_dim, l.in_dim, l.activation.tag()).unwrap();
            for r in 0..l.out_dim {
                writeln!(s, "w {}", join(l.row(r))).unwrap();
            }
            writeln!(s, "b {}", join(&l.bias)).unwrap();
        }
        writeln!(s, "head {} {}", self.num_outputs(), self.embed_dim()).unwrap();
        for k in 0..self.num_outputs() {
            writeln!(s, "h {}", join(self.head_row(k))).unwrap();
        }
        s
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let mut next = |what: &str| -> Result<Vec<&str>> {
            lines
                .next()
                .map(|l| l.split(' ').filter(|t| !t.is_empty()).collect())
                .ok_or_else(|| Error::parse("checkpoint", format!("unexpected end, expected {what}")))
        };
        if next("magic")?.join(" ") != CHECKPOINT_MAGIC {
            return Err(Error::parse("checkpoint", "missing header"));
        }
        let input_dim = keyed_usize(&next("input_dim")?, "input_dim")?;
        let embed_dim = keyed_usize(&next("embed_dim")?, "embed_dim")?;
        let num_known = keyed_usize(&next("num_known")?, "num_known")?;
        let n_layers = keyed_usize(&next("layers")?, "layers")?;
        let mut layers = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            let head = next("layer")?;
            if head.len() != 5 || head[0] != "layer" || head[1] != i.to_string() {
                return Err(Error::parse("checkpoint", format!("bad layer header {i}")));
            }
            let out_dim = parse_usize(head[2])?;
            let in_dim = parse_usize(head[3])?;
            let activation = Activation::from_tag(head[4])
                .ok_or_else(|| Error::parse("checkpoint", format!("unknown activation {}", head[4])))?;
            let mut weights = Vec::with_capacity(in_dim * out_dim);
            for _ in 0..out_dim {
                weights.extend(values(&next("w")?, "w", in_dim)?);
            }
            let bias = values(&next("b")?, "b", out_dim)?;
            layers.push(DenseLayer {
                in_dim,
                out_dim,
                weights,
                bias,
                activation,
            });
        }
        let hh = next("head")?;
        if hh.len() != 3 || hh[0] != "head" {
            return Err(Error::parse("checkpoint", "bad head header"));
        }
        let (rows, cols) = (parse_usize(hh[1])?, parse_usize(hh[2])?);
        if rows != num_known + 1 || cols != embed_dim {
            return Err(Error::parse("checkpoint", "head shape disagrees with header"));
        }
        let mut head = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            head.extend(values(&next("h")?, "h", cols)?);
        }
        let params = Self::from_parts(layers, head, num_known)?;
        if params.input_dim() != input_dim || params.embed_dim() != embed_dim {
            return Err(Error::parse("checkpoint", "layer shapes disagree with header"));
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_str(&text)
    }
}

fn parse_usize(s: &str) -> Result<usize> {
    s.parse().map_err(|_| Error::parse("checkpoint", format!("expected integer, got `{s}`")))
}

fn keyed_usize(tokens: &[&str], key: &str) -> Result<usize> {
    match tokens {
        [k, v] if *k == key => parse_usize(v),
        _ => Err(Error::parse("checkpoint", format!("expected `{key} <n>`"))),
    }
}

fn values(tokens: &[&str], key: &str, n: usize) -> Result<Vec<f64>> {
    if tokens.first() != Some(&key) || tokens.len() != n + 1 {
        return Err(Error::parse("checkpoint", format!("expected `{key}` with {n} values")));
    }
    tokens[1..]
        .iter()
        .map(|t| t.parse::<f64>().map_err(|e| Error::parse("checkpoint", e.to_string())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_model() -> ModelParams {
        let mut p = ModelParams::init(2, 8, 3, 1).unwrap();
        p.layers.iter_mut().for_each(|l| l.weights.iter_mut().for_each(|w| *w = 0.0));
        p.head.iter_mut().for_each(|w| *w = 0.0);
        p
    }

    fn identity_model() -> ModelParams {
        let mut layer = DenseLayer::zeros(4, 4, Activation::Identity);
        let mut head = vec![0.0; 16];
        for i in 0..4 {
            layer.weights[i * 4 + i] = 1.0;
            head[i * 4 + i] = 1.0;
        }
        ModelParams::from_parts(vec![layer], head, 3).unwrap()
    }

    #[test]
    fn init_shapes_and_determinism() {
        let a = ModelParams::init(2, 8, 3, 42).unwrap();
        let b = ModelParams::init(2, 8, 3, 42).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_eq!(a.num_outputs(), 4);
        assert_eq!(a.head.len(), 4 * 8);
        assert_eq!(a.head_row(3).len(), 8);
        assert_eq!(a.layers.len(), 3);
        assert!(a.layers.iter().all(|l| l.bias.iter().all(|b| *b == 0.0)));
        assert_ne!(a.to_bytes(), ModelParams::init(2, 8, 3, 43).unwrap().to_bytes());
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let t = zero_model().forward(&[1.5, -2.0]).unwrap();
        assert!(t.logits.iter().all(|l| *l == 0.0));
        assert!(t.normalized().is_err());
    }

    #[test]
    fn identity_model_passes_input_through() {
        let x = [0.5, -1.0, 2.0, 3.0];
        assert_eq!(identity_model().forward(&x).unwrap().logits, x.to_vec());
    }

    #[test]
    fn embedding_has_unit_norm() {
        let p = ModelParams::init(2, 8, 3, 5).unwrap();
        for x in [[0.1, 0.2], [-5.0, 3.0], [100.0, -100.0]] {
            let t = p.forward(&x).unwrap();
            assert!((numeric::norm(t.normalized().unwrap()) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn forward_rejects_wrong_dim() {
        let p = ModelParams::init(2, 8, 3, 5).unwrap();
        assert!(matches!(p.forward(&[1.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn forward_is_pure() {
        let p = ModelParams::init(2, 8, 3, 5).unwrap();
        assert_eq!(p.forward(&[0.3, 0.4]).unwrap(), p.forward(&[0.3, 0.4]).unwrap());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let p = ModelParams::init(2, 8, 3, 5).unwrap();
        let t = p.forward(&[0.3, 0.4]).unwrap();
        let g = p.backward(&t, &[0.0; 4]).unwrap();
        assert!(g.flatten().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn linear_head_gradient_equals_input_activation() {
        let p = identity_model();
        let x = [0.5, -1.0, 2.0, 3.0];
        let t = p.forward(&x).unwrap();
        let g = p.backward(&t, &[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(&g.head[0..4], &x);
        assert!(g.head[4..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn backward_rejects_wrong_shape() {
        let p = ModelParams::init(2, 8, 3, 5).unwrap();
        let t = p.forward(&[0.3, 0.4]).unwrap();
        assert!(p.backward(&t, &[0.0; 3]).is_err());
    }

    #[test]
    fn flatten_order_matches_mutate() {
        let mut p = ModelParams::init(2, 4, 2, 9).unwrap();
        let flat = p.flatten();
        assert_eq!(flat.len(), p.num_parameters());
        let last = flat.len() - 1;
        p.mutate_flat(last, |v| *v += 1.0);
        assert_eq!(p.flatten()[last], flat[last] + 1.0);
        p.mutate_flat(0, |v| *v = 7.0);
        assert_eq!(p.layers[0].weights[0], 7.0);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let p = ModelParams::init(2, 8, 3, 11).unwrap();
        let text = p.to_checkpoint_string();
        assert!(text.starts_with("art-checkpoint v1\ninput_dim 2\nembed_dim 8\nnum_known 3\n"));
        let q = ModelParams::from_checkpoint_str(&text).unwrap();
        assert_eq!(p.to_bytes(), q.to_bytes());
        assert_eq!(p, q);
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        assert!(ModelParams::from_checkpoint_str("nope").is_err());
        let p = ModelParams::init(2, 4, 2, 11).unwrap();
        let text = p.to_checkpoint_string();
        let truncated: String = text.lines().take(8).collect::<Vec<_>>().join("\n");
        assert!(ModelParams::from_checkpoint_str(&truncated).is_err());
    }
}
