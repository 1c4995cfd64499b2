//! End-to-end clustering: mini-clusters, pretraining, basis initialization and
//! joint training.

use std::fmt;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;

use crate::autodiff::{Tape, Var, WindowIndex};
use crate::autoencoder::{
    decode_on, encode_on, pretrain, reconstruction_loss_on, AutoencoderParams, Checkpoint,
    PretrainConfig, PretrainHistory, DEFAULT_HIDDEN,
};
use crate::constraints::{
    kl_divergence, local_loss_on, mini_cluster_mean, mini_cluster_mean_on, nonlocal_loss_on,
    refine, spatial_smooth, window_index,
};
use crate::data::{extract_patches, HsiCube};
use crate::error::{Error, Result};
use crate::finch::{finch_hierarchy, select_partition, Metric, MiniClusterPartition, PartitionHierarchy};
use crate::linalg::Matrix;
use crate::metrics::{write_map, Scores, DEFAULT_PALETTE};
use crate::optim::Adam;
use crate::rng::{stream, Stream};
use crate::subspace::{
    argmax_rows, dissimilarity_loss_on, init_bases, kmeans, soft_assign, soft_assign_on, BasisSet,
    DEFAULT_RANK, DEFAULT_THETA,
};

/// Merging rounds computed before selecting the mini-cluster level.
const FINCH_MAX_ITERS: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchMode {
    Full,
    Mini(usize),
}

impl fmt::Display for BatchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BatchMode::Full => write!(f, "full"),
            BatchMode::Mini(n) => write!(f, "mini:{n}"),
        }
    }
}

impl FromStr for BatchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "full" {
            return Ok(BatchMode::Full);
        }
        match s.strip_prefix("mini:").map(str::parse::<usize>) {
            Some(Ok(n)) if n > 0 => Ok(BatchMode::Mini(n)),
            _ => Err(Error::Config(format!("batch mode must be `full` or `mini:<size>`, got {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    /// Number of clusters `k`.
    pub clusters: usize,
    /// Joint-training learning rate.
    pub lr: f64,
    pub epochs: usize,
    pub beta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub window: usize,
    pub rank: usize,
    pub theta: f64,
    pub patch_edge: usize,
    pub finch_edge: usize,
    pub finch_iteration: usize,
    pub finch_metric: Metric,
    pub hidden: Vec<usize>,
    /// Latent width; `None` means `clusters · rank`.
    pub latent: Option<usize>,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub pretrain_batch: Option<usize>,
    pub kmeans_restarts: usize,
    pub batch: BatchMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            clusters: 2,
            lr: 1e-4,
            epochs: 400,
            beta: 1e-3,
            beta1: 3.0,
            beta2: 1.0,
            window: 3,
            rank: DEFAULT_RANK,
            theta: DEFAULT_THETA,
            patch_edge: 7,
            finch_edge: 17,
            finch_iteration: 2,
            finch_metric: Metric::Cosine,
            hidden: DEFAULT_HIDDEN.to_vec(),
            latent: None,
            pretrain_epochs: 200,
            pretrain_lr: 1e-3,
            pretrain_batch: Some(256),
            kmeans_restarts: 10,
            batch: BatchMode::Full,
        }
    }
}

impl TrainConfig {
    pub fn latent_dim(&self) -> usize {
        self.latent.unwrap_or(self.clusters * self.rank)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.clusters < 1 {
            return bad("need at least one cluster".into());
        }
        for (name, v) in [("beta", self.beta), ("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite non-negative number, got {v}"));
            }
        }
        if self.epochs < 1 || self.pretrain_epochs < 1 {
            return bad("epochs must be at least 1".into());
        }
        if !(self.lr >= 0.0 && self.pretrain_lr >= 0.0) {
            return bad("learning rates must be non-negative".into());
        }
        if self.rank < 1 || self.rank > self.latent_dim() {
            return bad(format!("rank {} must lie in 1..={}", self.rank, self.latent_dim()));
        }
        if self.patch_edge % 2 == 0 || self.finch_edge % 2 == 0 {
            return bad("patch edges must be odd".into());
        }
        if !crate::constraints::WINDOW_EDGES.contains(&self.window) {
            return bad(format!("window must be 3, 5 or 7, got {}", self.window));
        }
        if self.finch_iteration < 1 {
            return bad("finch iteration is 1-based".into());
        }
        if self.hidden.contains(&0) {
            return bad("hidden widths must be positive".into());
        }
        Ok(())
    }

    /// `key=value` lines, one per field.
    pub fn to_text(&self) -> String {
        let hidden: Vec<String> = self.hidden.iter().map(|h| h.to_string()).collect();
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("seed", self.seed.to_string());
        kv("clusters", self.clusters.to_string());
        kv("lr", self.lr.to_string());
        kv("epochs", self.epochs.to_string());
        kv("beta", self.beta.to_string());
        kv("beta1", self.beta1.to_string());
        kv("beta2", self.beta2.to_string());
        kv("window", self.window.to_string());
        kv("rank", self.rank.to_string());
        kv("theta", self.theta.to_string());
        kv("patch_edge", self.patch_edge.to_string());
        kv("finch_edge", self.finch_edge.to_string());
        kv("finch_iteration", self.finch_iteration.to_string());
        kv("finch_metric", self.finch_metric.to_string());
        kv("hidden", hidden.join(","));
        kv("latent", self.latent_dim().to_string());
        kv("pretrain_epochs", self.pretrain_epochs.to_string());
        kv("pretrain_lr", self.pretrain_lr.to_string());
        kv(
            "pretrain_batch",
            self.pretrain_batch.map_or("full".into(), |b| b.to_string()),
        );
        kv("kmeans_restarts", self.kmeans_restarts.to_string());
        kv("batch", self.batch.to_string());
        s
    }

    /// Applies `key=value` lines on top of `self`. Blank lines and lines
    /// starting with `#` are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for line in text.lines().map(str::trim) {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got {line:?}")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("invalid value {v:?} for {key}")))
        }
        match key {
            "seed" => self.seed = p(key, value)?,
            "clusters" => self.clusters = p(key, value)?,
            "lr" => self.lr = p(key, value)?,
            "epochs" => self.epochs = p(key, value)?,
            "beta" => self.beta = p(key, value)?,
            "beta1" => self.beta1 = p(key, value)?,
            "beta2" => self.beta2 = p(key, value)?,
            "window" => self.window = p(key, value)?,
            "rank" => self.rank = p(key, value)?,
            "theta" => self.theta = p(key, value)?,
            "patch_edge" => self.patch_edge = p(key, value)?,
            "finch_edge" => self.finch_edge = p(key, value)?,
            "finch_iteration" => self.finch_iteration = p(key, value)?,
            "finch_metric" => self.finch_metric = value.parse()?,
            "hidden" => {
                self.hidden = value
                    .split(',')
                    .filter(|s| !s.is_empty())
                    .map(|s| p(key, s.trim()))
                    .collect::<Result<_>>()?
            }
            "latent" => self.latent = Some(p(key, value)?),
            "pretrain_epochs" => self.pretrain_epochs = p(key, value)?,
            "pretrain_lr" => self.pretrain_lr = p(key, value)?,
            "pretrain_batch" => {
                self.pretrain_batch = if value == "full" { None } else { Some(p(key, value)?) }
            }
            "kmeans_restarts" => self.kmeans_restarts = p(key, value)?,
            "batch" => self.batch = value.parse()?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }
}

/// Loss terms of one step; `total` is the value actually optimized.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub reconstruction: f64,
    pub dissimilarity: f64,
    pub nonlocal: f64,
    pub local: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn weighted_sum(&self, cfg: &TrainConfig) -> f64 {
        self.reconstruction
            + cfg.beta * self.dissimilarity
            + cfg.beta1 * self.nonlocal
            + cfg.beta2 * self.local
    }

    /// Whether `total` equals the weighted sum of the terms to within `tol`
    /// relative to `max(1, |total|)`.
    pub fn is_consistent(&self, cfg: &TrainConfig, tol: f64) -> bool {
        (self.total - self.weighted_sum(cfg)).abs() <= tol * self.total.abs().max(1.0)
    }

    fn add_scaled(&mut self, other: &LossBreakdown, w: f64) {
        self.reconstruction += w * other.reconstruction;
        self.dissimilarity += w * other.dissimilarity;
        self.nonlocal += w * other.nonlocal;
        self.local += w * other.local;
        self.total += w * other.total;
    }
}

/// Inputs of joint training that stay fixed across epochs.
#[derive(Clone, Debug)]
pub struct TrainData {
    /// Training patches, one row per masked pixel.
    pub x: Matrix<f32>,
    /// Mini-cluster id of each row.
    pub index: Arc<[usize]>,
    pub groups: usize,
    pub window: Arc<WindowIndex>,
}

/// Detached targets for one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    /// Refined mini-cluster assignment `M̃`, `groups × k`.
    pub refined: Matrix<f32>,
    /// Smoothed assignment `F`, `n × k`.
    pub smoothed: Matrix<f32>,
}

/// Trainable state of the joint phase.
#[derive(Clone, Debug)]
pub struct RunState {
    pub epoch: usize,
    pub losses: LossBreakdown,
    pub labels: Vec<usize>,
    pub autoencoder: AutoencoderParams<f32>,
    pub bases: BasisSet,
    optimizer: Adam<f32>,
    shuffle: rand_chacha::ChaCha8Rng,
}

impl RunState {
    pub fn new(autoencoder: AutoencoderParams<f32>, bases: BasisSet, cfg: &TrainConfig) -> Self {
        let shapes: Vec<_> = autoencoder
            .tensors()
            .map(Matrix::shape)
            .chain([bases.matrix().shape()])
            .collect();
        RunState {
            epoch: 0,
            losses: LossBreakdown::default(),
            labels: Vec::new(),
            autoencoder,
            bases,
            optimizer: Adam::new(cfg.lr, shapes),
            shuffle: stream(cfg.seed, Stream::JointShuffle),
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            autoencoder: self.autoencoder.clone(),
            bases: Some(self.bases.clone()),
        }
    }

    /// Soft assignment of every training row under the current parameters.
    pub fn assign(&self, x: &Matrix<f32>) -> Result<Matrix<f32>> {
        let h = self.autoencoder.encode(x)?;
        Ok(soft_assign(&h, &self.bases)?.into_matrix())
    }
}

/// No-gradient pass producing this epoch's targets and the current assignment.
pub fn compute_targets(state: &RunState, data: &TrainData) -> Result<(Targets, Matrix<f32>)> {
    let s = state.assign(&data.x)?;
    let partition = MiniClusterPartition::from_labels(&data.index, 0);
    let refined = refine(&mini_cluster_mean(&s, &partition)?)?;
    let smoothed = spatial_smooth(&s, &data.window)?;
    Ok((Targets { refined, smoothed }, s))
}

/// One optimization pass over the data. Returns the losses of the forward
/// passes evaluated before each update, averaged over batches weighted by
/// batch size.
pub fn train_epoch(
    state: &mut RunState,
    data: &TrainData,
    targets: &Targets,
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    let n = data.x.rows();
    let epoch = state.epoch + 1;
    let batches: Vec<Vec<usize>> = match cfg.batch {
        BatchMode::Full => vec![(0..n).collect()],
        BatchMode::Mini(size) => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut state.shuffle);
            order.chunks(size).map(<[usize]>::to_vec).collect()
        }
    };
    let mut epoch_losses = LossBreakdown::default();
    for rows in &batches {
        let full = rows.len() == n;
        let losses = step(state, data, targets, cfg, rows, full, epoch)?;
        epoch_losses.add_scaled(&losses, rows.len() as f64 / n as f64);
    }
    state.epoch = epoch;
    state.losses = epoch_losses;
    Ok(epoch_losses)
}

fn step(
    state: &mut RunState,
    data: &TrainData,
    targets: &Targets,
    cfg: &TrainConfig,
    rows: &[usize],
    full: bool,
    epoch: usize,
) -> Result<LossBreakdown> {
    let k = state.bases.subspaces();
    let r = state.bases.rank();
    let mut tape = Tape::<f32>::new();
    let vars = state.autoencoder.register(&mut tape, true);
    let d = tape.leaf(state.bases.matrix().clone(), true);
    let (xb, smoothed) = if full {
        (data.x.clone(), targets.smoothed.clone())
    } else {
        (data.x.select_rows(rows), targets.smoothed.select_rows(rows))
    };
    let x = tape.constant(xb);
    let h = encode_on(&mut tape, &vars, x)?;
    let xh = decode_on(&mut tape, &vars, h)?;
    let l_r = reconstruction_loss_on(&mut tape, x, xh)?;
    let s = soft_assign_on(&mut tape, h, d, r, state.bases.theta())?;
    let l_d = dissimilarity_loss_on(&mut tape, d, k, r)?;

    // Mini-cluster means over the rows present, renumbered locally.
    let (local_index, present) = if full {
        (data.index.clone(), (0..data.groups).collect::<Vec<_>>())
    } else {
        let mut remap = vec![usize::MAX; data.groups];
        let mut present = Vec::new();
        let idx: Vec<usize> = rows
            .iter()
            .map(|&i| {
                let g = data.index[i];
                if remap[g] == usize::MAX {
                    remap[g] = present.len();
                    present.push(g);
                }
                remap[g]
            })
            .collect();
        (idx.into(), present)
    };
    let refined = if full {
        targets.refined.clone()
    } else {
        targets.refined.select_rows(&present)
    };

    let mut total = tape.scale(l_d, cfg.beta as f32);
    total = tape.add(l_r, total)?;
    let nonlocal = if cfg.beta1 > 0.0 {
        let m = mini_cluster_mean_on(&mut tape, s, local_index, present.len())?;
        let l_nl = nonlocal_loss_on(&mut tape, m, &refined)?;
        let w = tape.scale(l_nl, cfg.beta1 as f32);
        total = tape.add(total, w)?;
        tape.scalar(l_nl) as f64
    } else {
        let part = MiniClusterPartition::from_labels(&local_index, 0);
        kl_divergence(&refined, &mini_cluster_mean(tape.value(s), &part)?)?
    };
    let local = if cfg.beta2 > 0.0 {
        let l_l = local_loss_on(&mut tape, s, &smoothed)?;
        let w = tape.scale(l_l, cfg.beta2 as f32);
        total = tape.add(total, w)?;
        tape.scalar(l_l) as f64
    } else {
        kl_divergence(&smoothed, tape.value(s))?
    };
    let losses = LossBreakdown {
        reconstruction: tape.scalar(l_r) as f64,
        dissimilarity: tape.scalar(l_d) as f64,
        nonlocal,
        local,
        total: tape.scalar(total) as f64,
    };
    if !losses.total.is_finite() {
        return Err(Error::Divergence {
            epoch,
            detail: format!("total loss {}", losses.total),
        });
    }
    let params: Vec<Var> = vars.all().chain([d]).collect();
    let grads = tape.backward(total)?;
    let g: Vec<&Matrix<f32>> = params
        .iter()
        .map(|&v| grads.get(v).expect("parameter gradient"))
        .collect();
    if let Some(bad) = g.iter().position(|m| !m.is_finite()) {
        return Err(Error::Divergence {
            epoch,
            detail: format!("non-finite gradient in parameter {bad}"),
        });
    }
    let tensors = state
        .autoencoder
        .tensors_mut()
        .chain(std::iter::once(state.bases.matrix_mut()));
    state.optimizer.update(tensors, &g);
    Ok(losses)
}

/// Output of steps 1–3, shared by every joint-training variant on the same
/// cube and seed.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub data: TrainData,
    pub coords: Vec<(usize, usize)>,
    pub hierarchy: PartitionHierarchy,
    pub partition: MiniClusterPartition,
    pub autoencoder: AutoencoderParams<f32>,
    pub pretrain: PretrainHistory,
    pub kmeans_labels: Vec<usize>,
    pub bases: BasisSet,
    /// Ground truth of the masked pixels.
    pub truth: Vec<usize>,
}

/// Mini-cluster generation, pretraining and basis initialization.
pub fn prepare(cube: &HsiCube, cfg: &TrainConfig) -> Result<Prepared> {
    cfg.validate()?;
    let truth: Vec<usize> = match cube.labels() {
        Some(_) => cube.masked_labels().iter().map(|&l| l as usize).collect(),
        None => return Err(Error::contract("clustering needs a labeled task mask")),
    };
    if truth.len() < cfg.clusters {
        return Err(Error::contract(format!(
            "{} labeled pixels cannot form {} clusters",
            truth.len(),
            cfg.clusters
        )));
    }

    let big = extract_patches(cube, cfg.finch_edge)?;
    let hierarchy = finch_hierarchy(&big.patches, cfg.finch_metric, FINCH_MAX_ITERS.max(cfg.finch_iteration))?;
    drop(big);
    let partition = select_partition(&hierarchy, cfg.finch_iteration)?;

    let small = extract_patches(cube, cfg.patch_edge)?;
    let pcfg = PretrainConfig {
        hidden: cfg.hidden.clone(),
        latent: cfg.latent_dim(),
        epochs: cfg.pretrain_epochs,
        lr: cfg.pretrain_lr,
        batch_size: cfg.pretrain_batch,
        seed: cfg.seed,
    };
    let (autoencoder, pretrain_history) = pretrain(&small.patches, &pcfg)?;

    let h = autoencoder.encode(&small.patches)?;
    let km = kmeans(&h, cfg.clusters, cfg.seed, cfg.kmeans_restarts)?;
    let bases = init_bases(&h, &km.labels, cfg.clusters, cfg.rank, cfg.theta, cfg.seed)?;

    let window = Arc::new(window_index(&small.coords, cube.width(), cube.height(), cfg.window)?);
    Ok(Prepared {
        data: TrainData {
            x: small.patches,
            index: partition.index().into(),
            groups: partition.len(),
            window,
        },
        coords: small.coords,
        hierarchy,
        partition,
        autoencoder,
        pretrain: pretrain_history,
        kmeans_labels: km.labels,
        bases,
        truth,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub losses: LossBreakdown,
    /// Scores of the assignment the epoch started from.
    pub scores: Scores,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    /// Cluster id in `0..k` for each masked pixel, raster order.
    pub labels: Vec<usize>,
    pub scores: Scores,
    pub history: Vec<EpochRecord>,
    pub checkpoint: Checkpoint,
}

/// Joint training from prepared inputs; the smoothing window follows `cfg`.
pub fn joint_train(prepared: &Prepared, cfg: &TrainConfig, width: usize, height: usize) -> Result<RunOutcome> {
    joint_train_logged(prepared, cfg, width, height, None)
}

fn joint_train_logged(
    prepared: &Prepared,
    cfg: &TrainConfig,
    width: usize,
    height: usize,
    run_dir: Option<&Path>,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let mut data = prepared.data.clone();
    data.window = Arc::new(window_index(&prepared.coords, width, height, cfg.window)?);
    let mut state = RunState::new(prepared.autoencoder.clone(), prepared.bases.clone(), cfg);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut csv = String::from("epoch,L_R,L_D,L_NL,L_L,total,OA,NMI,Kappa\n");

    for _ in 0..cfg.epochs {
        let (targets, s) = compute_targets(&state, &data)?;
        state.labels = argmax_rows(&s);
        let scores = Scores::compute(&state.labels, &prepared.truth)?;
        let losses = match train_epoch(&mut state, &data, &targets, cfg) {
            Ok(l) => l,
            Err(e) => {
                if let Some(dir) = run_dir {
                    state.checkpoint().save(dir.join("last_good.ckpt"))?;
                    write_text(&dir.join("metrics.csv"), &csv)?;
                }
                return Err(e);
            }
        };
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{}",
            state.epoch,
            losses.reconstruction,
            losses.dissimilarity,
            losses.nonlocal,
            losses.local,
            losses.total,
            scores.oa,
            scores.nmi,
            scores.kappa
        );
        history.push(EpochRecord {
            epoch: state.epoch,
            losses,
            scores,
        });
    }
    let s = state.assign(&data.x)?;
    let labels = argmax_rows(&s);
    let scores = Scores::compute(&labels, &prepared.truth)?;
    if let Some(dir) = run_dir {
        write_text(&dir.join("metrics.csv"), &csv)?;
    }
    Ok(RunOutcome {
        labels,
        scores,
        history,
        checkpoint: state.checkpoint(),
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Files written into a run directory.
pub mod layout {
    pub const CONFIG: &str = "config.txt";
    pub const METRICS: &str = "metrics.csv";
    pub const PRETRAINED: &str = "pretrained.ckpt";
    pub const FINAL: &str = "final.ckpt";
    pub const LAST_GOOD: &str = "last_good.ckpt";
    pub const LABELS: &str = "labels.u16";
    pub const MINICLUSTERS: &str = "miniclusters.u32";
    pub const FINCH: &str = "finch.txt";
    pub const MAP: &str = "map.ppm";
}

/// Full pipeline. With `run_dir`, the directory is created and filled with the
/// resolved configuration, per-epoch metrics, checkpoints, labels and map.
pub fn run_pipeline(cube: &HsiCube, cfg: &TrainConfig, run_dir: Option<&Path>) -> Result<RunOutcome> {
    cfg.validate()?;
    let dir: Option<PathBuf> = run_dir.map(Path::to_path_buf);
    if let Some(d) = &dir {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        write_text(&d.join(layout::CONFIG), &cfg.to_text())?;
    }
    let prepared = prepare(cube, cfg)?;
    if let Some(d) = &dir {
        Checkpoint {
            autoencoder: prepared.autoencoder.clone(),
            bases: None,
        }
        .save(d.join(layout::PRETRAINED))?;
        write_text(&d.join(layout::FINCH), &prepared.hierarchy.summary())?;
        let mc: Vec<u8> = prepared
            .partition
            .index()
            .iter()
            .flat_map(|&g| (g as u32).to_le_bytes())
            .collect();
        write_bytes(&d.join(layout::MINICLUSTERS), &mc)?;
    }
    let outcome = joint_train_logged(&prepared, cfg, cube.width(), cube.height(), dir.as_deref())?;
    if let Some(d) = &dir {
        outcome.checkpoint.save(d.join(layout::FINAL))?;
        write_bytes(&d.join(layout::LABELS), &labels_to_bytes(&outcome.labels))?;
        let ids: Vec<u16> = crate::metrics::apply_matching(&outcome.labels, &prepared.truth)?
            .into_iter()
            .zip(&outcome.labels)
            .map(|(m, &raw)| if m == usize::MAX { (raw + 1) as u16 } else { m as u16 })
            .collect();
        if ids.iter().all(|&i| (i as usize) <= DEFAULT_PALETTE.len()) {
            write_map(d.join(layout::MAP), &ids, cube, &DEFAULT_PALETTE)?;
        }
    }
    Ok(outcome)
}

/// Cluster ids `0..k` stored as `1..=k`, little-endian `u16`.
pub fn labels_to_bytes(labels: &[usize]) -> Vec<u8> {
    labels.iter().flat_map(|&l| (l as u16 + 1).to_le_bytes()).collect()
}

pub fn labels_from_bytes(bytes: &[u8]) -> Result<Vec<u16>> {
    if bytes.len() % 2 != 0 {
        return Err(Error::Truncated {
            expected: bytes.len() + 1,
            found: bytes.len(),
        });
    }
    Ok(bytes.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect())
}
