//! Sinusoidal coordinate network with hand-written reverse mode and Adam.
//!
//! Hidden layers compute `sin(ω0·(W·x + b))`; the last layer is linear with
//! an optional softplus. All parameters live in one flat `Vec<f64>` so the
//! optimizer, checkpoints and gradient checks see a single vector.

use std::io::Write;
use std::path::Path;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;

use crate::error::{Error, Result};

pub const DEFAULT_OMEGA0: f64 = 30.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputActivation {
    None,
    Softplus,
}

#[inline]
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SirenNetwork {
    /// `[in, hidden.., out]`
    dims: Vec<usize>,
    /// One per hidden layer.
    omega0: Vec<f64>,
    output: OutputActivation,
    params: Vec<f64>,
    /// Start of each layer's weights (out×in, row-major) followed by bias.
    offsets: Vec<usize>,
    version: u64,
}

/// Activations recorded by [`SirenNetwork::forward`].
#[derive(Debug)]
pub struct Tape {
    version: u64,
    /// Input of every linear layer; `acts[0]` is the network input.
    acts: Vec<Array2<f64>>,
    /// Pre-activation `W·x + b` of every layer.
    pre: Vec<Array2<f64>>,
}

impl Tape {
    pub fn batch_size(&self) -> usize {
        self.acts[0].nrows()
    }
}

fn layer_offsets(dims: &[usize]) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(dims.len());
    let mut at = 0;
    for w in dims.windows(2) {
        offsets.push(at);
        at += w[0] * w[1] + w[1];
    }
    offsets.push(at);
    offsets
}

impl SirenNetwork {
    /// SIREN initialization: first layer weights `U(±1/fan_in)`, later layers
    /// `U(±√(6/fan_in)/ω0)`, biases `U(±1/√fan_in)`.
    pub fn new<R: Rng + ?Sized>(
        dims: &[usize],
        omega0: f64,
        output: OutputActivation,
        rng: &mut R,
    ) -> Result<Self> {
        if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!("invalid layer widths {dims:?}")));
        }
        if !(omega0 > 0.0) {
            return Err(Error::Config("omega0 must be positive".into()));
        }
        let offsets = layer_offsets(dims);
        let mut params = vec![0.0; *offsets.last().unwrap()];
        for l in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let bound = if l == 0 { 1.0 / fan_in as f64 } else { (6.0 / fan_in as f64).sqrt() / omega0 };
            let bias_bound = 1.0 / (fan_in as f64).sqrt();
            let start = offsets[l];
            for p in &mut params[start..start + fan_in * fan_out] {
                *p = rng.gen_range(-bound..=bound);
            }
            for p in &mut params[start + fan_in * fan_out..offsets[l + 1]] {
                *p = rng.gen_range(-bias_bound..=bias_bound);
            }
        }
        Ok(Self { dims: dims.to_vec(), omega0: vec![omega0; dims.len() - 2], output, params, offsets, version: 0 })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn omega0(&self) -> &[f64] {
        &self.omega0
    }

    pub fn output_activation(&self) -> OutputActivation {
        self.output
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Mutable access bumps the version, invalidating outstanding tapes.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.version += 1;
        &mut self.params
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Zero the last layer so the network starts from a constant
    /// pre-activation of 0.
    pub fn zero_output_layer(&mut self) {
        let l = self.num_layers() - 1;
        let (a, b) = (self.offsets[l], self.offsets[l + 1]);
        self.params_mut()[a..b].fill(0.0);
    }

    /// Mutable first-layer weights, `(out × in)` row-major.
    pub fn input_weights_mut(&mut self) -> &mut [f64] {
        let n = self.dims[0] * self.dims[1];
        self.version += 1;
        &mut self.params[..n]
    }

    /// Weights `(out × in)` and bias of layer `l`.
    pub fn layer(&self, l: usize) -> (ArrayView2<'_, f64>, ArrayView1<'_, f64>) {
        let (fi, fo) = (self.dims[l], self.dims[l + 1]);
        let start = self.offsets[l];
        let w = ArrayView2::from_shape((fo, fi), &self.params[start..start + fi * fo]).expect("layer shape");
        let b = ArrayView1::from(&self.params[start + fi * fo..self.offsets[l + 1]]);
        (w, b)
    }

    /// Mutable view of the last layer bias.
    pub fn output_bias_mut(&mut self) -> &mut [f64] {
        let l = self.num_layers() - 1;
        let start = self.offsets[l] + self.dims[l] * self.dims[l + 1];
        let end = self.offsets[l + 1];
        self.version += 1;
        &mut self.params[start..end]
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Contract(format!(
                "input has {} columns, network expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    fn affine(&self, l: usize, input: &ArrayView2<f64>) -> Array2<f64> {
        let (w, b) = self.layer(l);
        let mut z = Array2::zeros((input.nrows(), w.nrows()));
        for mut row in z.rows_mut() {
            row.assign(&b);
        }
        general_mat_mul(1.0, input, &w.t(), 1.0, &mut z);
        z
    }

    fn finish(&self, mut z: Array2<f64>) -> Array2<f64> {
        if self.output == OutputActivation::Softplus {
            z.mapv_inplace(softplus);
        }
        z
    }

    /// Forward pass without recording.
    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        let last = self.num_layers() - 1;
        let mut a = self.affine(0, &x);
        for l in 0..last {
            let w0 = self.omega0[l];
            a.mapv_inplace(|v| (w0 * v).sin());
            a = self.affine(l + 1, &a.view());
        }
        Ok(self.finish(a))
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, Tape)> {
        self.check_input(&x)?;
        let last = self.num_layers() - 1;
        let mut acts = Vec::with_capacity(self.num_layers());
        let mut pre = Vec::with_capacity(self.num_layers());
        acts.push(x.to_owned());
        for l in 0..=last {
            let z = self.affine(l, &acts[l].view());
            if l < last {
                let w0 = self.omega0[l];
                acts.push(z.mapv(|v| (w0 * v).sin()));
            }
            pre.push(z);
        }
        let out = self.finish(pre[last].clone());
        Ok((out, Tape { version: self.version, acts, pre }))
    }

    /// Accumulate parameter gradients of `Σ cotangent ⊙ output` into `grad`
    /// and return the gradient with respect to the inputs.
    pub fn backward_into(&self, tape: &Tape, cotangent: ArrayView2<f64>, grad: &mut [f64]) -> Result<Array2<f64>> {
        if tape.version != self.version {
            return Err(Error::Contract("tape was recorded before the last parameter update".into()));
        }
        if grad.len() != self.params.len() {
            return Err(Error::Contract("gradient buffer has the wrong length".into()));
        }
        let last = self.num_layers() - 1;
        if cotangent.dim() != tape.pre[last].dim() {
            return Err(Error::Contract("cotangent shape does not match the recorded output".into()));
        }
        let mut delta = cotangent.to_owned();
        if self.output == OutputActivation::Softplus {
            delta.zip_mut_with(&tape.pre[last], |d, &z| *d *= sigmoid(z));
        }
        for l in (0..=last).rev() {
            let (fi, fo) = (self.dims[l], self.dims[l + 1]);
            let start = self.offsets[l];
            let (gw, gb) = grad[start..self.offsets[l + 1]].split_at_mut(fi * fo);
            let mut gw = ArrayViewMut2::from_shape((fo, fi), gw).expect("grad shape");
            general_mat_mul(1.0, &delta.t(), &tape.acts[l], 1.0, &mut gw);
            for (g, s) in gb.iter_mut().zip(delta.sum_axis(Axis(0)).iter()) {
                *g += s;
            }
            let (w, _) = self.layer(l);
            let mut dx = Array2::zeros((delta.nrows(), fi));
            general_mat_mul(1.0, &delta, &w, 0.0, &mut dx);
            if l == 0 {
                return Ok(dx);
            }
            let w0 = self.omega0[l - 1];
            dx.zip_mut_with(&tape.pre[l - 1], |d, &z| *d *= w0 * (w0 * z).cos());
            delta = dx;
        }
        unreachable!("loop returns at layer 0")
    }

    /// Parameter and input gradients of `Σ cotangent ⊙ output`.
    pub fn backward(&self, tape: &Tape, cotangent: ArrayView2<f64>) -> Result<(Vec<f64>, Array2<f64>)> {
        let mut grad = vec![0.0; self.params.len()];
        let dx = self.backward_into(tape, cotangent, &mut grad)?;
        Ok((grad, dx))
    }

    // Checkpoint layout (little-endian):
    //   "SIR1", u32 layer count L, u32 dims[L + 1], f64 omega0[L − 1],
    //   u8 output activation (0 none, 1 softplus), f64 params[..]
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(16 + 8 * self.params.len());
        buf.extend_from_slice(b"SIR1");
        buf.extend_from_slice(&(self.num_layers() as u32).to_le_bytes());
        for &d in &self.dims {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &w in &self.omega0 {
            buf.extend_from_slice(&w.to_le_bytes());
        }
        buf.push(match self.output {
            OutputActivation::None => 0,
            OutputActivation::Softplus => 1,
        });
        for &p in &self.params {
            buf.extend_from_slice(&p.to_le_bytes());
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("network checkpoint: {m}"));
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated"))?;
            pos += n;
            Ok(s)
        };
        if take(4)? != b"SIR1" {
            return Err(bad("bad magic"));
        }
        let layers = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        if layers == 0 || layers > 64 {
            return Err(bad("implausible layer count"));
        }
        let mut dims = Vec::with_capacity(layers + 1);
        for _ in 0..=layers {
            dims.push(u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize);
        }
        let mut omega0 = Vec::with_capacity(layers - 1);
        for _ in 0..layers - 1 {
            omega0.push(f64::from_le_bytes(take(8)?.try_into().unwrap()));
        }
        let output = match take(1)?[0] {
            0 => OutputActivation::None,
            1 => OutputActivation::Softplus,
            c => return Err(bad(&format!("unknown output activation {c}"))),
        };
        let offsets = layer_offsets(&dims);
        let n = *offsets.last().unwrap();
        let mut params = Vec::with_capacity(n);
        for _ in 0..n {
            params.push(f64::from_le_bytes(take(8)?.try_into().unwrap()));
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self { dims, omega0, output, params, offsets, version: 0 })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(num_params: usize) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; num_params], v: vec![0.0; num_params], t: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Apply one update. A gradient containing NaN or ±∞ is rejected and
    /// leaves both parameters and moments untouched.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Contract("optimizer state does not match parameter count".into()));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient);
        }
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] -= lr * mhat / (vhat.sqrt() + self.eps);
        }
        Ok(())
    }
}
