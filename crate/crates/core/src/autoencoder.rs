//! Dense autoencoder producing the latent codes `H`.
//!
//! Encoder sizes are `[input, hidden.., latent]`; the decoder mirrors them.
//! Hidden layers use a rectifier, the latent and output layers are linear.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Real};
use crate::optim::Adam;
use crate::rng::{stream, Stream};
use crate::subspace::BasisSet;

/// Default hidden widths between the input and the latent layer.
pub const DEFAULT_HIDDEN: [usize; 3] = [500, 500, 2000];

#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    /// `fan_in × fan_out`.
    pub weight: Matrix<T>,
    /// `1 × fan_out`.
    pub bias: Matrix<T>,
}

impl<T: Real> Layer<T> {
    fn uniform(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = Matrix::from_fn(fan_in, fan_out, |_, _| T::of(rng.random_range(-bound..bound)));
        let bias = Matrix::from_fn(1, fan_out, |_, _| T::of(rng.random_range(-bound..bound)));
        Layer { weight, bias }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AutoencoderParams<T> {
    sizes: Vec<usize>,
    encoder: Vec<Layer<T>>,
    decoder: Vec<Layer<T>>,
}

/// Tape handles for every parameter, in declaration order.
#[derive(Clone, Debug)]
pub struct AutoencoderVars {
    pub encoder: Vec<(Var, Var)>,
    pub decoder: Vec<(Var, Var)>,
}

impl AutoencoderVars {
    pub fn all(&self) -> impl Iterator<Item = Var> + '_ {
        self.encoder
            .iter()
            .chain(&self.decoder)
            .flat_map(|&(w, b)| [w, b])
    }
}

impl<T: Real> AutoencoderParams<T> {
    /// Randomly initialized network with encoder sizes
    /// `[input, hidden.., latent]`.
    pub fn init(input: usize, hidden: &[usize], latent: usize, seed: u64) -> Result<Self> {
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        sizes.push(latent);
        if sizes.iter().any(|&s| s == 0) {
            return Err(Error::Config("layer sizes must be positive".into()));
        }
        let mut rng = stream(seed, Stream::Init);
        let encoder = sizes
            .windows(2)
            .map(|w| Layer::uniform(&mut rng, w[0], w[1]))
            .collect();
        let decoder = sizes
            .windows(2)
            .rev()
            .map(|w| Layer::uniform(&mut rng, w[1], w[0]))
            .collect();
        Ok(AutoencoderParams {
            sizes,
            encoder,
            decoder,
        })
    }

    /// Network from explicit layers; shapes must chain.
    pub fn from_layers(encoder: Vec<Layer<T>>, decoder: Vec<Layer<T>>) -> Result<Self> {
        if encoder.is_empty() || decoder.len() != encoder.len() {
            return Err(Error::Config("encoder and decoder need the same, non-zero depth".into()));
        }
        let mut sizes = vec![encoder[0].weight.rows()];
        for l in &encoder {
            if l.weight.rows() != *sizes.last().unwrap() || l.bias.shape() != (1, l.weight.cols()) {
                return Err(Error::Config("encoder layer shapes do not chain".into()));
            }
            sizes.push(l.weight.cols());
        }
        for (l, w) in decoder.iter().zip(sizes.windows(2).rev()) {
            if l.weight.shape() != (w[1], w[0]) || l.bias.shape() != (1, w[0]) {
                return Err(Error::Config("decoder does not mirror the encoder".into()));
            }
        }
        Ok(AutoencoderParams {
            sizes,
            encoder,
            decoder,
        })
    }

    /// Encoder sizes `[input, hidden.., latent]`.
    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn latent_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn encoder(&self) -> &[Layer<T>] {
        &self.encoder
    }

    pub fn decoder(&self) -> &[Layer<T>] {
        &self.decoder
    }

    /// Parameters in declaration order: encoder (weight, bias)..., decoder
    /// (weight, bias)...
    pub fn tensors(&self) -> impl Iterator<Item = &Matrix<T>> {
        self.encoder
            .iter()
            .chain(&self.decoder)
            .flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Matrix<T>> {
        self.encoder
            .iter_mut()
            .chain(self.decoder.iter_mut())
            .flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn cast<U: Real>(&self) -> AutoencoderParams<U> {
        let cl = |l: &Layer<T>| Layer {
            weight: l.weight.cast(),
            bias: l.bias.cast(),
        };
        AutoencoderParams {
            sizes: self.sizes.clone(),
            encoder: self.encoder.iter().map(cl).collect(),
            decoder: self.decoder.iter().map(cl).collect(),
        }
    }

    /// Records every parameter as a leaf.
    pub fn register(&self, tape: &mut Tape<T>, requires_grad: bool) -> AutoencoderVars {
        let mut reg = |layers: &[Layer<T>]| {
            layers
                .iter()
                .map(|l| {
                    (
                        tape.leaf(l.weight.clone(), requires_grad),
                        tape.leaf(l.bias.clone(), requires_grad),
                    )
                })
                .collect()
        };
        let encoder = reg(&self.encoder);
        let decoder = reg(&self.decoder);
        AutoencoderVars { encoder, decoder }
    }

    pub fn encode(&self, patches: &Matrix<T>) -> Result<Matrix<T>> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let x = tape.constant(patches.clone());
        let h = encode_on(&mut tape, &vars, x)?;
        Ok(tape.value(h).clone())
    }

    pub fn reconstruct(&self, patches: &Matrix<T>) -> Result<Matrix<T>> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let x = tape.constant(patches.clone());
        let h = encode_on(&mut tape, &vars, x)?;
        let xh = decode_on(&mut tape, &vars, h)?;
        Ok(tape.value(xh).clone())
    }
}

fn dense_stack<T: Real>(tape: &mut Tape<T>, layers: &[(Var, Var)], input: Var) -> Result<Var> {
    let mut cur = input;
    for (i, &(w, b)) in layers.iter().enumerate() {
        let z = tape.matmul(cur, w)?;
        let z = tape.add(z, b)?;
        cur = if i + 1 < layers.len() { tape.relu(z) } else { z };
    }
    Ok(cur)
}

/// Latent codes `H` for the rows of `x`.
pub fn encode_on<T: Real>(tape: &mut Tape<T>, vars: &AutoencoderVars, x: Var) -> Result<Var> {
    dense_stack(tape, &vars.encoder, x)
}

/// Reconstruction `X̂` from latent codes.
pub fn decode_on<T: Real>(tape: &mut Tape<T>, vars: &AutoencoderVars, h: Var) -> Result<Var> {
    dense_stack(tape, &vars.decoder, h)
}

/// `(1 / 2n) Σ_i ‖x_i − x̂_i‖²`.
pub fn reconstruction_loss_on<T: Real>(tape: &mut Tape<T>, x: Var, x_hat: Var) -> Result<Var> {
    let diff = tape.sub(x, x_hat)?;
    let sq = tape.frobenius_sq(diff);
    Ok(tape.scale(sq, T::of(0.5 / x.shape().0.max(1) as f64)))
}

/// Value-only reconstruction loss.
pub fn reconstruction_loss<T: Real>(x: &Matrix<T>, x_hat: &Matrix<T>) -> Result<f64> {
    if x.shape() != x_hat.shape() {
        return Err(Error::Dimension {
            op: "reconstruction_loss",
            lhs: x.shape(),
            rhs: x_hat.shape(),
        });
    }
    let s: f64 = x
        .data()
        .iter()
        .zip(x_hat.data())
        .map(|(&a, &b)| (a.as_f64() - b.as_f64()).powi(2))
        .sum();
    Ok(s / (2.0 * x.rows().max(1) as f64))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub hidden: Vec<usize>,
    pub latent: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Rows per gradient step; `None` means full batch.
    pub batch_size: Option<usize>,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            hidden: DEFAULT_HIDDEN.to_vec(),
            latent: 20,
            epochs: 200,
            lr: 1e-3,
            batch_size: Some(256),
            seed: 0,
        }
    }
}

/// Loss history of a pretraining run: full-data `L_R` before training, the
/// row-weighted mean of the batch losses of each epoch, and full-data `L_R`
/// after the last epoch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PretrainHistory {
    pub losses: Vec<f64>,
    pub final_loss: f64,
}

/// Fits a fresh autoencoder to `patches` by minimizing the reconstruction loss.
pub fn pretrain(
    patches: &Matrix<f32>,
    config: &PretrainConfig,
) -> Result<(AutoencoderParams<f32>, PretrainHistory)> {
    if config.epochs == 0 {
        return Err(Error::Config("pretraining needs at least one epoch".into()));
    }
    if patches.rows() == 0 {
        return Err(Error::contract("no samples to pretrain on"));
    }
    let mut params =
        AutoencoderParams::<f32>::init(patches.cols(), &config.hidden, config.latent, config.seed)?;
    let mut opt = Adam::new(config.lr, params.tensors().map(Matrix::shape));
    let mut rng = stream(config.seed, Stream::Shuffle);
    let n = patches.rows();
    let batch = config.batch_size.unwrap_or(n).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();

    let mut history = PretrainHistory::default();
    history
        .losses
        .push(reconstruction_loss(patches, &params.reconstruct(patches)?)?);

    for epoch in 1..=config.epochs {
        if batch < n {
            order.shuffle(&mut rng);
        }
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch) {
            let xb = if batch < n {
                patches.select_rows(chunk)
            } else {
                patches.clone()
            };
            let mut tape = Tape::new();
            let vars = params.register(&mut tape, true);
            let x = tape.constant(xb);
            let h = encode_on(&mut tape, &vars, x)?;
            let xh = decode_on(&mut tape, &vars, h)?;
            let loss = reconstruction_loss_on(&mut tape, x, xh)?;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    detail: format!("reconstruction loss {value}"),
                });
            }
            epoch_loss += value as f64 * chunk.len() as f64 / n as f64;
            let var_list: Vec<Var> = vars.all().collect();
            let grads = tape.backward(loss)?;
            let g: Vec<&Matrix<f32>> = var_list
                .iter()
                .map(|&v| grads.get(v).expect("parameter gradient"))
                .collect();
            opt.update(params.tensors_mut(), &g);
        }
        history.losses.push(epoch_loss);
    }
    history.final_loss = reconstruction_loss(patches, &params.reconstruct(patches)?)?;
    if !history.final_loss.is_finite() {
        return Err(Error::Divergence {
            epoch: config.epochs,
            detail: format!("reconstruction loss {}", history.final_loss),
        });
    }
    Ok((params, history))
}

pub const AE_MAGIC: &str = "SCDSC-AE 1";
pub const BASES_MAGIC: &str = "SCDSC-D 1";

/// Autoencoder parameters, optionally followed by the subspace bases.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub autoencoder: AutoencoderParams<f32>,
    pub bases: Option<BasisSet>,
}

fn push_f32(out: &mut Vec<u8>, m: &Matrix<f32>) {
    for v in m.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn line(&mut self) -> Result<&'a str> {
        let rest = &self.bytes[self.pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Checkpoint("unterminated header line".into()))?;
        self.pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| Error::Checkpoint("header is not UTF-8".into()))
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix<f32>> {
        let len = rows * cols * 4;
        if self.bytes.len() - self.pos < len {
            return Err(Error::Checkpoint("truncated parameter payload".into()));
        }
        let data = self.bytes[self.pos..self.pos + len]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        self.pos += len;
        Matrix::from_vec(rows, cols, data)
    }

    fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

fn parse_fields(line: &str, key: &str) -> Result<Vec<String>> {
    let mut parts = line.split(' ');
    if parts.next() != Some(key) {
        return Err(Error::Checkpoint(format!("expected `{key} ...`, found {line:?}")));
    }
    Ok(parts.map(str::to_string).collect())
}

fn parse_usize(s: &str) -> Result<usize> {
    s.parse()
        .map_err(|_| Error::Checkpoint(format!("invalid integer {s:?}")))
}

impl Checkpoint {
    /// Layout:
    ///
    /// ```text
    /// SCDSC-AE 1\n
    /// layers <input> <hidden>.. <latent>\n
    /// f32 LE payload: encoder (weight, bias)..., decoder (weight, bias)...
    /// [SCDSC-D 1\n
    ///  bases <d> <k> <r> <theta>\n
    ///  f32 LE payload: D, d × (k·r) row-major]
    /// ```
    pub fn to_bytes(&self) -> Vec<u8> {
        let ae = &self.autoencoder;
        let sizes: Vec<String> = ae.sizes().iter().map(|s| s.to_string()).collect();
        let mut out = format!("{AE_MAGIC}\nlayers {}\n", sizes.join(" ")).into_bytes();
        for m in ae.tensors() {
            push_f32(&mut out, m);
        }
        if let Some(b) = &self.bases {
            out.extend_from_slice(
                format!(
                    "{BASES_MAGIC}\nbases {} {} {} {}\n",
                    b.latent_dim(),
                    b.subspaces(),
                    b.rank(),
                    b.theta()
                )
                .as_bytes(),
            );
            push_f32(&mut out, b.matrix());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.line()? != AE_MAGIC {
            return Err(Error::Checkpoint("missing autoencoder section header".into()));
        }
        let sizes = parse_fields(cur.line()?, "layers")?
            .iter()
            .map(|s| parse_usize(s))
            .collect::<Result<Vec<_>>>()?;
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Checkpoint("need at least two positive layer sizes".into()));
        }
        let mut encoder = Vec::new();
        for w in sizes.windows(2) {
            let weight = cur.matrix(w[0], w[1])?;
            let bias = cur.matrix(1, w[1])?;
            encoder.push(Layer { weight, bias });
        }
        let mut decoder = Vec::new();
        for w in sizes.windows(2).rev() {
            let weight = cur.matrix(w[1], w[0])?;
            let bias = cur.matrix(1, w[0])?;
            decoder.push(Layer { weight, bias });
        }
        let autoencoder = AutoencoderParams::from_layers(encoder, decoder)?;

        let bases = if cur.at_end() {
            None
        } else {
            if cur.line()? != BASES_MAGIC {
                return Err(Error::Checkpoint("unexpected trailing section".into()));
            }
            let f = parse_fields(cur.line()?, "bases")?;
            if f.len() != 4 {
                return Err(Error::Checkpoint("bases line needs d k r theta".into()));
            }
            let (d, k, r) = (parse_usize(&f[0])?, parse_usize(&f[1])?, parse_usize(&f[2])?);
            let theta: f64 = f[3]
                .parse()
                .map_err(|_| Error::Checkpoint(format!("invalid theta {:?}", f[3])))?;
            let m = cur.matrix(d, k * r)?;
            Some(BasisSet::new(m, k, r, theta).map_err(|e| Error::Checkpoint(e.to_string()))?)
        };
        if !cur.at_end() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Checkpoint { autoencoder, bases })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
