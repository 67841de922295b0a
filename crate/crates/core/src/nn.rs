//! A dense multilayer perceptron with hand-written reverse-mode gradients
//! and an Adam optimizer.
//!
//! Hidden layers use a leaky rectifier with slope 0.01; the output layer is
//! linear. All parameters live in one flat buffer so the optimizer and the
//! checkpoint format can treat them uniformly. Per layer the buffer holds the
//! weight matrix (`fan_in` rows of `fan_out` values) followed by the bias.

use std::fs::File;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: expected {expected} values, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("backward called without a recorded forward pass")]
    NoTape,
    #[error("network needs at least an input and an output width")]
    BadArchitecture,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone)]
struct Tape {
    batch: usize,
    /// Input to each layer; `inputs[0]` is the network input.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation output of each hidden layer.
    pre: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct Mlp {
    widths: Vec<usize>,
    params: Vec<f64>,
    /// `(weight offset, bias offset)` per layer.
    offsets: Vec<(usize, usize)>,
    tape: Option<Tape>,
}

fn leaky(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

fn leaky_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

impl Mlp {
    /// All parameters zero.
    pub fn zeros(widths: &[usize]) -> Result<Self, NnError> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(NnError::BadArchitecture);
        }
        let mut offsets = Vec::with_capacity(widths.len() - 1);
        let mut total = 0;
        for pair in widths.windows(2) {
            let w = total;
            total += pair[0] * pair[1];
            offsets.push((w, total));
            total += pair[1];
        }
        Ok(Self { widths: widths.to_vec(), params: vec![0.0; total], offsets, tape: None })
    }

    /// Weights and biases drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Result<Self, NnError> {
        let mut net = Self::zeros(widths)?;
        for l in 0..net.num_layers() {
            let bound = 1.0 / (net.widths[l] as f64).sqrt();
            let (w, b) = net.offsets[l];
            let end = b + net.widths[l + 1];
            for p in &mut net.params[w..end] {
                *p = rng.gen_range(-bound..bound);
            }
        }
        Ok(net)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Weight matrix of layer `l`, `fan_in` rows of `fan_out` entries.
    pub fn weight_mut(&mut self, l: usize) -> &mut [f64] {
        let (w, b) = self.offsets[l];
        &mut self.params[w..b]
    }

    pub fn bias_mut(&mut self, l: usize) -> &mut [f64] {
        let (_, b) = self.offsets[l];
        let out = self.widths[l + 1];
        &mut self.params[b..b + out]
    }

    fn layer(&self, l: usize, input: &[f64], batch: usize) -> Vec<f64> {
        let (fan_in, fan_out) = (self.widths[l], self.widths[l + 1]);
        let (w, b) = self.offsets[l];
        let weights = &self.params[w..b];
        let bias = &self.params[b..b + fan_out];
        let mut out = vec![0.0; batch * fan_out];
        for r in 0..batch {
            let row = &mut out[r * fan_out..(r + 1) * fan_out];
            row.copy_from_slice(bias);
            for (i, &x) in input[r * fan_in..(r + 1) * fan_in].iter().enumerate() {
                if x == 0.0 {
                    continue;
                }
                let wrow = &weights[i * fan_out..(i + 1) * fan_out];
                for (o, &wv) in row.iter_mut().zip(wrow) {
                    *o += x * wv;
                }
            }
        }
        out
    }

    fn run(&self, input: &[f64], batch: usize, mut tape: Option<&mut Tape>) -> Result<Vec<f64>, NnError> {
        let expected = batch * self.input_dim();
        if input.len() != expected {
            return Err(NnError::ShapeMismatch { expected, got: input.len() });
        }
        let mut act = input.to_vec();
        for l in 0..self.num_layers() {
            let z = self.layer(l, &act, batch);
            let last = l + 1 == self.num_layers();
            let next = if last { z.clone() } else { z.iter().map(|&v| leaky(v)).collect() };
            if let Some(t) = tape.as_deref_mut() {
                t.inputs.push(std::mem::replace(&mut act, next));
                if !last {
                    t.pre.push(z);
                }
            } else {
                act = next;
            }
        }
        Ok(act)
    }

    /// Inference without recording; `input` holds `batch` rows.
    pub fn predict(&self, input: &[f64], batch: usize) -> Result<Vec<f64>, NnError> {
        self.run(input, batch, None)
    }

    /// Forward pass that records what [`Mlp::backward`] needs.
    pub fn forward(&mut self, input: &[f64], batch: usize) -> Result<Vec<f64>, NnError> {
        let mut tape = Tape { batch, inputs: Vec::new(), pre: Vec::new() };
        let out = self.run(input, batch, Some(&mut tape))?;
        self.tape = Some(tape);
        Ok(out)
    }

    /// Gradient of `sum(output_grad * output)` with respect to every
    /// parameter, in the layout of [`Mlp::params`]. Consumes the tape.
    pub fn backward(&mut self, output_grad: &[f64]) -> Result<Vec<f64>, NnError> {
        let tape = self.tape.take().ok_or(NnError::NoTape)?;
        let batch = tape.batch;
        let expected = batch * self.output_dim();
        if output_grad.len() != expected {
            self.tape = Some(tape);
            return Err(NnError::ShapeMismatch { expected, got: output_grad.len() });
        }
        let mut grads = vec![0.0; self.params.len()];
        let mut delta = output_grad.to_vec();
        for l in (0..self.num_layers()).rev() {
            let (fan_in, fan_out) = (self.widths[l], self.widths[l + 1]);
            let (w, b) = self.offsets[l];
            let input = &tape.inputs[l];
            {
                let (gw, gb) = grads[w..b + fan_out].split_at_mut(b - w);
                for r in 0..batch {
                    let d = &delta[r * fan_out..(r + 1) * fan_out];
                    for (g, &dv) in gb.iter_mut().zip(d) {
                        *g += dv;
                    }
                    for (i, &x) in input[r * fan_in..(r + 1) * fan_in].iter().enumerate() {
                        if x == 0.0 {
                            continue;
                        }
                        for (g, &dv) in gw[i * fan_out..(i + 1) * fan_out].iter_mut().zip(d) {
                            *g += x * dv;
                        }
                    }
                }
            }
            if l == 0 {
                break;
            }
            let weights = &self.params[w..b];
            let pre = &tape.pre[l - 1];
            let mut next = vec![0.0; batch * fan_in];
            for r in 0..batch {
                let d = &delta[r * fan_out..(r + 1) * fan_out];
                for i in 0..fan_in {
                    let wrow = &weights[i * fan_out..(i + 1) * fan_out];
                    let s: f64 = wrow.iter().zip(d).map(|(a, b)| a * b).sum();
                    next[r * fan_in + i] = s * leaky_grad(pre[r * fan_in + i]);
                }
            }
            delta = next;
        }
        Ok(grads)
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    /// Writes a one-line JSON header followed by the parameters as
    /// little-endian `f64`.
    pub fn save_checkpoint<W: Write>(&self, mut w: W, seed: u64, step: u64) -> Result<(), NnError> {
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.to_string(),
            widths: self.widths.clone(),
            seed,
            step,
            param_count: self.params.len(),
        };
        let line = serde_json::to_string(&header).map_err(|e| NnError::Checkpoint(e.to_string()))?;
        w.write_all(line.as_bytes())?;
        w.write_all(b"\n")?;
        for p in &self.params {
            w.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load_checkpoint<R: Read>(r: R) -> Result<(Self, CheckpointHeader), NnError> {
        let mut reader = BufReader::new(r);
        let mut line = String::new();
        reader.read_line(&mut line)?;
        let header: CheckpointHeader =
            serde_json::from_str(line.trim_end()).map_err(|e| NnError::Checkpoint(e.to_string()))?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(NnError::Checkpoint(format!("unknown format {}", header.format)));
        }
        let mut net = Self::zeros(&header.widths)?;
        if net.params.len() != header.param_count {
            return Err(NnError::Checkpoint("parameter count disagrees with widths".into()));
        }
        let mut buf = [0u8; 8];
        for p in net.params.iter_mut() {
            reader.read_exact(&mut buf)?;
            *p = f64::from_le_bytes(buf);
        }
        if reader.read(&mut buf)? != 0 {
            return Err(NnError::Checkpoint("trailing bytes".into()));
        }
        Ok((net, header))
    }

    pub fn save_to(&self, path: &Path, seed: u64, step: u64) -> Result<(), NnError> {
        let mut f = io::BufWriter::new(File::create(path)?);
        self.save_checkpoint(&mut f, seed, step)?;
        f.flush()?;
        Ok(())
    }

    pub fn load_from(path: &Path) -> Result<(Self, CheckpointHeader), NnError> {
        Self::load_checkpoint(File::open(path)?)
    }
}

pub const CHECKPOINT_FORMAT: &str = "gfn-mlp-f64le-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub widths: Vec<usize>,
    pub seed: u64,
    pub step: u64,
    pub param_count: usize,
}

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(num_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<(), NnError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(NnError::ShapeMismatch { expected: self.m.len(), got: grads.len().min(params.len()) });
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}
