//! Feed-forward classifier: ReLU hidden layers, softmax output, exact backprop.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

const CHECKPOINT_TAG: &str = "#llp-params v1";

/// Dense layer computing `x · weights + bias`; `weights` is `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weights: Matrix::zeros(fan_in, fan_out),
            bias: vec![0.0; fan_out],
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weights.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weights.cols()
    }
}

/// Layer stack `D → hidden… → C`. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub layers: Vec<Layer>,
}

/// Gradients share the parameter layout.
pub type Gradients = ModelParams;

impl ModelParams {
    /// Uniform(−b, b) weights with `b = sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn init(seed: u64, input_dim: usize, hidden: &[usize], classes: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init_with(&mut rng, input_dim, hidden, classes)
    }

    pub fn init_with<R: Rng + ?Sized>(
        rng: &mut R,
        input_dim: usize,
        hidden: &[usize],
        classes: usize,
    ) -> Result<Self> {
        let mut params = Self::zeros(input_dim, hidden, classes)?;
        for layer in &mut params.layers {
            let bound = (6.0 / (layer.fan_in() + layer.fan_out()) as f64).sqrt();
            for w in layer.weights.as_mut_slice() {
                *w = rng.random_range(-bound..bound);
            }
        }
        Ok(params)
    }

    pub fn zeros(input_dim: usize, hidden: &[usize], classes: usize) -> Result<Self> {
        if input_dim == 0 || classes == 0 || hidden.contains(&0) {
            return Err(Error::Shape(format!(
                "layer sizes must be positive: {input_dim} -> {hidden:?} -> {classes}"
            )));
        }
        let mut sizes = vec![input_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(classes);
        let layers = sizes.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect();
        Ok(Self { layers })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Layer::zeros(l.fan_in(), l.fan_out()))
                .collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("at least one layer").fan_out()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.as_slice().len() + l.bias.len()).sum()
    }

    /// All values flattened: per layer, weights row-major then bias.
    pub fn iter_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.as_slice().iter().chain(&l.bias).copied())
    }

    /// Mutable access to parameter `idx` in [`iter_values`](Self::iter_values) order.
    pub fn value_mut(&mut self, mut idx: usize) -> &mut f64 {
        for l in &mut self.layers {
            let nw = l.weights.as_slice().len();
            if idx < nw {
                return &mut l.weights.as_mut_slice()[idx];
            }
            idx -= nw;
            if idx < l.bias.len() {
                return &mut l.bias[idx];
            }
            idx -= l.bias.len();
        }
        panic!("parameter index out of range");
    }

    /// Applies `f(self_value, other_value)` elementwise in place.
    pub fn zip_apply(&mut self, other: &ModelParams, mut f: impl FnMut(&mut f64, f64)) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, &y) in a.weights.as_mut_slice().iter_mut().zip(b.weights.as_slice()) {
                f(x, y);
            }
            for (x, &y) in a.bias.iter_mut().zip(&b.bias) {
                f(x, y);
            }
        }
    }

    /// `self += other`.
    pub fn add_assign(&mut self, other: &ModelParams) {
        self.zip_apply(other, |a, b| *a += b);
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weights.as_mut_slice().iter_mut().for_each(|w| *w *= s);
            l.bias.iter_mut().for_each(|b| *b *= s);
        }
    }

    fn check_input(&self, batch: &Matrix) -> Result<()> {
        if batch.cols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "batch has {} columns, model expects {}",
                batch.cols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Runs the network and keeps the activations needed for [`ForwardTrace::backward`].
    pub fn forward(&self, batch: &Matrix) -> Result<ForwardTrace<'_>> {
        self.check_input(batch)?;
        let mut activations = Vec::with_capacity(self.layers.len());
        let mut current = batch.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = current.matmul(&layer.weights);
            for r in 0..z.rows() {
                for (v, b) in z.row_mut(r).iter_mut().zip(&layer.bias) {
                    *v += b;
                }
            }
            activations.push(current);
            if i < last {
                z.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
            }
            current = z;
        }
        let probs = softmax_rows(&current);
        Ok(ForwardTrace {
            params: self,
            activations,
            probs,
        })
    }

    /// Class probabilities only.
    pub fn predict(&self, batch: &Matrix) -> Result<Matrix> {
        Ok(self.forward(batch)?.probs)
    }

    /// Input to the final (linear) layer, one row per instance.
    pub fn penultimate(&self, batch: &Matrix) -> Result<Matrix> {
        let mut trace = self.forward(batch)?;
        Ok(trace.activations.pop().expect("at least one layer"))
    }

    pub fn render_checkpoint(&self) -> String {
        let mut out = format!("{CHECKPOINT_TAG} layers={}\n", self.layers.len());
        let fmt_row = |xs: &[f64]| xs.iter().map(|v| format!("{v:e}")).collect::<Vec<_>>().join(" ");
        for l in &self.layers {
            writeln!(out, "layer {} {}", l.fan_in(), l.fan_out()).expect("string write");
            for r in l.weights.iter_rows() {
                writeln!(out, "w {}", fmt_row(r)).expect("string write");
            }
            writeln!(out, "b {}", fmt_row(&l.bias)).expect("string write");
        }
        out
    }

    /// Writes shapes and full-precision values; reading back is bit-exact.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.render_checkpoint()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_checkpoint(path, &text)
    }

    pub fn parse_checkpoint(path: &Path, text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (_, header) = lines.next().ok_or_else(|| Error::parse(path, 1, "empty checkpoint"))?;
        let n_layers: usize = header
            .strip_prefix(CHECKPOINT_TAG)
            .and_then(|r| r.trim().strip_prefix("layers="))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::parse(path, 1, format!("expected `{CHECKPOINT_TAG} layers=<n>`")))?;

        let mut next = |expect: &str| -> Result<(usize, Vec<f64>)> {
            let (no, line) = lines
                .next()
                .ok_or_else(|| Error::parse(path, 0, format!("unexpected end of file, wanted `{expect}`")))?;
            let mut toks = line.split_whitespace();
            if toks.next() != Some(expect) {
                return Err(Error::parse(path, no, format!("expected `{expect}` line")));
            }
            let vals = toks
                .map(|t| t.parse::<f64>().map_err(|_| Error::parse(path, no, format!("bad number {t:?}"))))
                .collect::<Result<Vec<_>>>()?;
            Ok((no, vals))
        };

        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let (no, shape) = next("layer")?;
            if shape.len() != 2 || shape.iter().any(|&s| s < 1.0 || s.fract() != 0.0) {
                return Err(Error::parse(path, no, "layer line needs two positive integers"));
            }
            let (fan_in, fan_out) = (shape[0] as usize, shape[1] as usize);
            let mut weights = Vec::with_capacity(fan_in * fan_out);
            for _ in 0..fan_in {
                let (no, row) = next("w")?;
                if row.len() != fan_out {
                    return Err(Error::parse(path, no, format!("weight row has {} values, expected {fan_out}", row.len())));
                }
                weights.extend(row);
            }
            let (no, bias) = next("b")?;
            if bias.len() != fan_out {
                return Err(Error::parse(path, no, format!("bias has {} values, expected {fan_out}", bias.len())));
            }
            if let Some(prev) = layers.last().map(Layer::fan_out) {
                if prev != fan_in {
                    return Err(Error::parse(path, no, format!("layer input {fan_in} does not chain from {prev}")));
                }
            }
            layers.push(Layer {
                weights: Matrix::from_vec(fan_in, fan_out, weights)?,
                bias,
            });
        }
        if layers.is_empty() {
            return Err(Error::parse(path, 1, "checkpoint has no layers"));
        }
        Ok(Self { layers })
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    out
}

/// Which quantity an upstream gradient is taken with respect to.
#[derive(Debug, Clone, Copy)]
pub enum Upstream<'a> {
    Probabilities(&'a Matrix),
    Logits(&'a Matrix),
}

/// Activations cached by one forward pass.
///
/// The trace borrows the parameters it was computed with, so they cannot be
/// updated while a trace is alive.
#[derive(Debug)]
pub struct ForwardTrace<'p> {
    params: &'p ModelParams,
    /// Input to each layer (`activations[0]` is the batch itself).
    activations: Vec<Matrix>,
    probs: Matrix,
}

impl<'p> ForwardTrace<'p> {
    pub fn probs(&self) -> &Matrix {
        &self.probs
    }

    pub fn into_probs(self) -> Matrix {
        self.probs
    }

    pub fn penultimate(&self) -> &Matrix {
        self.activations.last().expect("at least one layer")
    }

    /// Gradient of a scalar loss with respect to every parameter.
    pub fn backward(&self, upstream: Upstream<'_>) -> Result<Gradients> {
        let n = self.probs.rows();
        let c = self.probs.cols();
        let mut delta = match upstream {
            Upstream::Logits(g) => {
                check_shape(g, n, c)?;
                g.clone()
            }
            Upstream::Probabilities(g) => {
                check_shape(g, n, c)?;
                // softmax Jacobian: dz = p ⊙ (g − ⟨g, p⟩)
                let mut dz = Matrix::zeros(n, c);
                for r in 0..n {
                    let p = self.probs.row(r);
                    let gr = g.row(r);
                    let dot: f64 = p.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &pi), &gi) in dz.row_mut(r).iter_mut().zip(p).zip(gr) {
                        *o = pi * (gi - dot);
                    }
                }
                dz
            }
        };

        let mut grads = self.params.zeros_like();
        for l in (0..self.params.layers.len()).rev() {
            let input = &self.activations[l];
            grads.layers[l].weights = input.t_matmul(&delta);
            grads.layers[l].bias = delta.column_sums();
            if l > 0 {
                let mut back = delta.matmul_t(&self.params.layers[l].weights);
                // input to layer l is relu of the previous pre-activation; relu'(z) = [a > 0]
                for (b, &a) in back.as_mut_slice().iter_mut().zip(input.as_slice()) {
                    if a <= 0.0 {
                        *b = 0.0;
                    }
                }
                delta = back;
            }
        }
        Ok(grads)
    }
}

fn check_shape(g: &Matrix, rows: usize, cols: usize) -> Result<()> {
    if g.rows() != rows || g.cols() != cols {
        return Err(Error::Shape(format!(
            "upstream gradient is {}x{}, outputs are {rows}x{cols}",
            g.rows(),
            g.cols()
        )));
    }
    Ok(())
}
