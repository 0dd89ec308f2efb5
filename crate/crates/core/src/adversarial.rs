//! Distribution alignment by adversarial training.
//!
//! A discriminator `D` (two hidden leaky-ReLU layers, input dropout) learns
//! to tell mapped sources `W·v` from targets `t`; the linear generator `W`
//! is then updated to fool it. Gradients are derived by hand.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::map::AlignmentMap;
use crate::similarity::SimilarityTable;
use crate::space::{top_n_indices, EmbeddingSpace};
use crate::Rng;

/// Discriminator probabilities are clipped to `[PROB_FLOOR, 1 − PROB_FLOOR]`.
pub const PROB_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdvConfig {
    pub batch_size: usize,
    pub iterations: usize,
    pub lr: f64,
    pub lr_decay: f64,
    /// The learning rate is multiplied by `lr_decay` once per this many
    /// iterations.
    pub decay_period: usize,
    pub label_smoothing: f64,
    pub ortho_beta: f64,
    pub seed: u64,
    pub hidden: usize,
    pub leaky_slope: f64,
    pub input_dropout: f64,
    /// Iterations between evaluations of the selection criterion.
    pub eval_every: usize,
    /// Number of most frequent sources used by the selection criterion.
    pub valid_top: usize,
    pub csls_k: usize,
}

impl Default for AdvConfig {
    fn default() -> Self {
        Self {
            batch_size: 1024,
            iterations: 100_000,
            lr: 0.1,
            lr_decay: 0.98,
            decay_period: 2000,
            label_smoothing: 0.2,
            ortho_beta: 0.01,
            seed: 0,
            hidden: 2048,
            leaky_slope: 0.2,
            input_dropout: 0.1,
            eval_every: 1000,
            valid_top: 10_000,
            csls_k: 10,
        }
    }
}

impl AdvConfig {
    /// Smaller network and batches for a single-core run on a few hundred
    /// points; the other fields keep their defaults.
    pub fn desk_scale(seed: u64) -> Self {
        Self {
            batch_size: 32,
            iterations: 5000,
            hidden: 128,
            eval_every: 500,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must lie in (0, 1]");
        }
        if self.decay_period == 0 || self.eval_every == 0 {
            return bad("decay_period and eval_every must be positive");
        }
        if !(0.0..0.5).contains(&self.label_smoothing) {
            return bad("label_smoothing must lie in [0, 0.5)");
        }
        if !(self.ortho_beta >= 0.0 && self.ortho_beta.is_finite()) {
            return bad("ortho_beta must be >= 0");
        }
        if self.hidden == 0 {
            return bad("hidden width must be at least 1");
        }
        if !(0.0..1.0).contains(&self.input_dropout) {
            return bad("input_dropout must lie in [0, 1)");
        }
        if self.valid_top == 0 || self.csls_k == 0 {
            return bad("valid_top and csls_k must be positive");
        }
        Ok(())
    }

    /// Learning rate in effect at `iteration`.
    pub fn lr_at(&self, iteration: usize) -> f64 {
        self.lr * self.lr_decay.powi((iteration / self.decay_period) as i32)
    }
}

/// `d2 → h → h → 1` classifier giving `P(x is a mapped source)`.
///
/// Also used as the container for its own gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
    pub w3: DVector<f64>,
    pub b3: f64,
    pub slope: f64,
    pub dropout: f64,
}

impl Discriminator {
    pub fn zeros(d2: usize, hidden: usize, slope: f64, dropout: f64) -> Self {
        Self {
            w1: DMatrix::zeros(hidden, d2),
            b1: DVector::zeros(hidden),
            w2: DMatrix::zeros(hidden, hidden),
            b2: DVector::zeros(hidden),
            w3: DVector::zeros(hidden),
            b3: 0.0,
            slope,
            dropout,
        }
    }

    /// Entries uniform in `±1/√fan_in`.
    pub fn random(d2: usize, hidden: usize, slope: f64, dropout: f64, rng: &mut Rng) -> Self {
        let mut d = Self::zeros(d2, hidden, slope, dropout);
        let fill = |xs: &mut [f64], fan_in: usize, rng: &mut Rng| {
            let a = 1.0 / (fan_in as f64).sqrt();
            xs.iter_mut().for_each(|x| *x = rng.random_range(-a..a));
        };
        fill(d.w1.as_mut_slice(), d2, rng);
        fill(d.b1.as_mut_slice(), d2, rng);
        fill(d.w2.as_mut_slice(), hidden, rng);
        fill(d.b2.as_mut_slice(), hidden, rng);
        fill(d.w3.as_mut_slice(), hidden, rng);
        fill(std::slice::from_mut(&mut d.b3), hidden, rng);
        d
    }

    pub fn hidden(&self) -> usize {
        self.b1.len()
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    /// Every parameter block, in a fixed order.
    pub fn params(&self) -> [&[f64]; 6] {
        [
            self.w1.as_slice(),
            self.b1.as_slice(),
            self.w2.as_slice(),
            self.b2.as_slice(),
            self.w3.as_slice(),
            std::slice::from_ref(&self.b3),
        ]
    }

    pub fn params_mut(&mut self) -> [&mut [f64]; 6] {
        [
            self.w1.as_mut_slice(),
            self.b1.as_mut_slice(),
            self.w2.as_mut_slice(),
            self.b2.as_mut_slice(),
            self.w3.as_mut_slice(),
            std::slice::from_mut(&mut self.b3),
        ]
    }

    fn sgd(&mut self, grads: &Discriminator, lr: f64) {
        for (p, g) in self.params_mut().into_iter().zip(grads.params()) {
            p.iter_mut().zip(g).for_each(|(p, g)| *p -= lr * g);
        }
    }

    fn is_finite(&self) -> bool {
        self.params().iter().all(|b| b.iter().all(|x| x.is_finite()))
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Activations kept for the backward pass. Rows are batch items.
struct Forward {
    input: DMatrix<f64>,
    /// Inverted-dropout scale per input entry (0 or `1/(1 − rate)`).
    mask: Option<DMatrix<f64>>,
    z1: DMatrix<f64>,
    a1: DMatrix<f64>,
    z2: DMatrix<f64>,
    a2: DMatrix<f64>,
    logits: DVector<f64>,
}

fn leaky(z: &DMatrix<f64>, slope: f64) -> DMatrix<f64> {
    z.map(|x| if x > 0.0 { x } else { slope * x })
}

fn leaky_grad(upstream: &mut DMatrix<f64>, z: &DMatrix<f64>, slope: f64) {
    upstream.zip_apply(z, |g, z| {
        if z <= 0.0 {
            *g *= slope
        }
    });
}

fn add_bias(m: &mut DMatrix<f64>, b: &DVector<f64>) {
    for mut row in m.row_iter_mut() {
        row += b.transpose();
    }
}

fn forward(d: &Discriminator, x: &DMatrix<f64>, dropout_rng: Option<&mut Rng>) -> Result<Forward> {
    if x.ncols() != d.input_dim() {
        return Err(Error::Dimension {
            expected: d.input_dim(),
            got: x.ncols(),
        });
    }
    let (input, mask) = match dropout_rng {
        Some(rng) if d.dropout > 0.0 => {
            let keep = 1.0 - d.dropout;
            let mask = DMatrix::from_fn(x.nrows(), x.ncols(), |_, _| {
                if rng.random::<f64>() < d.dropout {
                    0.0
                } else {
                    1.0 / keep
                }
            });
            (x.component_mul(&mask), Some(mask))
        }
        _ => (x.clone(), None),
    };
    let mut z1 = &input * d.w1.transpose();
    add_bias(&mut z1, &d.b1);
    let a1 = leaky(&z1, d.slope);
    let mut z2 = &a1 * d.w2.transpose();
    add_bias(&mut z2, &d.b2);
    let a2 = leaky(&z2, d.slope);
    let logits = (&a2 * &d.w3).add_scalar(d.b3);
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("discriminator produced a non-finite logit".into()));
    }
    Ok(Forward {
        input,
        mask,
        z1,
        a1,
        z2,
        a2,
        logits,
    })
}

/// Backpropagates `dlogits` into parameter gradients and the gradient with
/// respect to the (pre-dropout) input.
fn backward(d: &Discriminator, f: &Forward, dlogits: &DVector<f64>) -> (Discriminator, DMatrix<f64>) {
    let mut g = Discriminator::zeros(d.input_dim(), d.hidden(), d.slope, d.dropout);
    g.w3 = f.a2.transpose() * dlogits;
    g.b3 = dlogits.sum();
    let mut dz2 = dlogits * d.w3.transpose();
    leaky_grad(&mut dz2, &f.z2, d.slope);
    g.w2 = dz2.transpose() * &f.a1;
    g.b2 = dz2.row_sum().transpose();
    let mut dz1 = &dz2 * &d.w2;
    leaky_grad(&mut dz1, &f.z1, d.slope);
    g.w1 = dz1.transpose() * &f.input;
    g.b1 = dz1.row_sum().transpose();
    let mut dx = &dz1 * &d.w1;
    if let Some(mask) = &f.mask {
        dx.component_mul_assign(mask);
    }
    (g, dx)
}

/// Mean smoothed binary cross-entropy of `logits` against soft label `y`,
/// and its gradient with respect to each logit. Clipped probabilities pass
/// no gradient.
fn bce(logits: &DVector<f64>, y: f64) -> (f64, DVector<f64>) {
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let grad = logits.map(|z| {
        let p = sigmoid(z);
        let pc = p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
        loss -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
        if pc == p {
            (p - y) / n
        } else {
            0.0
        }
    });
    (loss / n, grad)
}

/// `P(x is a mapped source)`, clipped to the probability floor. Dropout is
/// applied only in training mode.
pub fn disc_forward(d: &Discriminator, x: &[f64], train_mode: bool, rng: &mut Rng) -> Result<f64> {
    let xm = DMatrix::from_row_slice(1, x.len(), x);
    let f = forward(d, &xm, train_mode.then_some(rng))?;
    Ok(sigmoid(f.logits[0]).clamp(PROB_FLOOR, 1.0 - PROB_FLOOR))
}

fn check_batches(map: &AlignmentMap, v: &DMatrix<f64>, t: &DMatrix<f64>) -> Result<()> {
    if v.nrows() == 0 || t.nrows() == 0 {
        return Err(Error::Contract("empty batch".into()));
    }
    if v.ncols() != map.d1() {
        return Err(Error::Dimension {
            expected: map.d1(),
            got: v.ncols(),
        });
    }
    if t.ncols() != map.d2() {
        return Err(Error::Dimension {
            expected: map.d2(),
            got: t.ncols(),
        });
    }
    Ok(())
}

/// Discriminator objective: mapped sources carry label `1 − s`, targets `s`.
///
/// Batches hold one vector per row. With `dropout_rng` set the input dropout
/// is active.
pub fn disc_loss(
    d: &Discriminator,
    map: &AlignmentMap,
    v_batch: &DMatrix<f64>,
    t_batch: &DMatrix<f64>,
    smoothing: f64,
    mut dropout_rng: Option<&mut Rng>,
) -> Result<(f64, Discriminator)> {
    check_batches(map, v_batch, t_batch)?;
    let mapped = v_batch * map.matrix().transpose();
    let fs = forward(d, &mapped, dropout_rng.as_deref_mut())?;
    let ft = forward(d, t_batch, dropout_rng)?;
    let (ls, gs) = bce(&fs.logits, 1.0 - smoothing);
    let (lt, gt) = bce(&ft.logits, smoothing);
    let (mut grads, _) = backward(d, &fs, &gs);
    let (grads_t, _) = backward(d, &ft, &gt);
    grads.sgd(&grads_t, -1.0);
    Ok((ls + lt, grads))
}

/// Generator objective: the labels of [`disc_loss`] swapped. Returns the
/// gradient with respect to the map; the discriminator is held fixed.
pub fn gen_loss(
    d: &Discriminator,
    map: &AlignmentMap,
    v_batch: &DMatrix<f64>,
    t_batch: &DMatrix<f64>,
    smoothing: f64,
    mut dropout_rng: Option<&mut Rng>,
) -> Result<(f64, DMatrix<f64>)> {
    check_batches(map, v_batch, t_batch)?;
    let mapped = v_batch * map.matrix().transpose();
    let fs = forward(d, &mapped, dropout_rng.as_deref_mut())?;
    let ft = forward(d, t_batch, dropout_rng)?;
    let (ls, gs) = bce(&fs.logits, smoothing);
    let (lt, _) = bce(&ft.logits, 1.0 - smoothing);
    let (_, dmapped) = backward(d, &fs, &gs);
    Ok((ls + lt, dmapped.transpose() * v_batch))
}

/// `W ← (1 + β)·W − β·(W·Wᵀ)·W`, a step toward orthonormal rows.
pub fn orthogonalize_step(map: &AlignmentMap, beta: f64) -> Result<AlignmentMap> {
    if !(beta >= 0.0) {
        return Err(Error::Contract(format!("beta {beta} must be >= 0")));
    }
    if beta == 0.0 {
        return Ok(map.clone());
    }
    let w = map.matrix();
    let next = w * (1.0 + beta) - (w * w.transpose() * w) * beta;
    Ok(AlignmentMap::from_parts(next, false))
}

/// Fraction of a balanced evaluation set the discriminator classifies
/// correctly (mapped sources as 1, targets as 0), without dropout.
pub fn disc_accuracy(
    d: &Discriminator,
    map: &AlignmentMap,
    v_batch: &DMatrix<f64>,
    t_batch: &DMatrix<f64>,
) -> Result<f64> {
    check_batches(map, v_batch, t_batch)?;
    let mapped = v_batch * map.matrix().transpose();
    let fs = forward(d, &mapped, None)?;
    let ft = forward(d, t_batch, None)?;
    let correct = fs.logits.iter().filter(|&&z| z > 0.0).count()
        + ft.logits.iter().filter(|&&z| z <= 0.0).count();
    Ok(correct as f64 / (fs.logits.len() + ft.logits.len()) as f64)
}

/// Unsupervised selection criterion: mean CSLS between the `top` most
/// frequent mapped sources and their best CSLS target.
pub fn validation_criterion(
    map: &AlignmentMap,
    source: &EmbeddingSpace,
    target: &EmbeddingSpace,
    top: usize,
    k: usize,
) -> Result<f64> {
    let frequent = source.select(&top_n_indices(source, top));
    let mapped = map.apply_space(&frequent)?;
    if mapped.is_empty() || target.is_empty() {
        return Err(Error::Contract("validation needs nonempty spaces".into()));
    }
    let k = k.min(mapped.len()).min(target.len());
    let table = SimilarityTable::csls(&mapped, target, k)?;
    let total: f64 = (0..table.rows())
        .map(|r| table.row(r).iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .sum();
    Ok(total / table.rows() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub iteration: usize,
    pub loss_d: f64,
    pub loss_w: f64,
    /// Selection criterion, present on evaluation iterations.
    pub validation: Option<f64>,
}

pub fn write_history_csv<W: Write>(history: &[HistoryRecord], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["iteration", "loss_d", "loss_w", "validation"])?;
    for h in history {
        out.write_record([
            h.iteration.to_string(),
            h.loss_d.to_string(),
            h.loss_w.to_string(),
            h.validation.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn save_history_csv(history: &[HistoryRecord], path: &Path) -> Result<()> {
    write_history_csv(history, std::fs::File::create(path)?)
}

#[derive(Debug, Clone)]
pub struct AdversarialResult {
    pub map: AlignmentMap,
    pub discriminator: Discriminator,
    pub history: Vec<HistoryRecord>,
    /// Checkpoint with the best selection criterion.
    pub best_map: AlignmentMap,
    pub best_validation: f64,
}

/// Entries uniform in `±1/√d1`.
pub fn initial_map(d2: usize, d1: usize, rng: &mut Rng) -> AlignmentMap {
    let a = 1.0 / (d1 as f64).sqrt();
    let m = DMatrix::from_fn(d2, d1, |_, _| rng.random_range(-a..a));
    AlignmentMap::from_parts(m, false)
}

fn sample_rows(full: &DMatrix<f64>, n: usize, rng: &mut Rng) -> DMatrix<f64> {
    let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..full.nrows())).collect();
    DMatrix::from_fn(n, full.ncols(), |r, c| full[(idx[r], c)])
}

fn rows_matrix(space: &EmbeddingSpace) -> DMatrix<f64> {
    DMatrix::from_row_slice(space.len(), space.dim(), space.as_slice())
}

/// Alternates one discriminator step and one generator step per iteration
/// on fresh uniformly sampled batches, with plain SGD.
pub fn train_adversarial(
    source: &EmbeddingSpace,
    target: &EmbeddingSpace,
    cfg: &AdvConfig,
) -> Result<AdversarialResult> {
    cfg.validate()?;
    if source.is_empty() || target.is_empty() {
        return Err(Error::Config("adversarial training needs nonempty spaces".into()));
    }
    let (d1, d2) = (source.dim(), target.dim());
    let mut rng = Rng::seed_from_u64(cfg.seed);
    let mut map = initial_map(d2, d1, &mut rng);
    let mut disc = Discriminator::random(d2, cfg.hidden, cfg.leaky_slope, cfg.input_dropout, &mut rng);
    let vs = rows_matrix(source);
    let ts = rows_matrix(target);

    let criterion = |m: &AlignmentMap| validation_criterion(m, source, target, cfg.valid_top, cfg.csls_k);
    // Only trained checkpoints compete; the untrained map is kept solely
    // when there are no iterations.
    let mut best_map = map.clone();
    let mut best_validation = if cfg.iterations == 0 { criterion(&map)? } else { f64::NEG_INFINITY };
    let mut history = Vec::with_capacity(cfg.iterations);

    for it in 0..cfg.iterations {
        let lr = cfg.lr_at(it);

        let vb = sample_rows(&vs, cfg.batch_size, &mut rng);
        let tb = sample_rows(&ts, cfg.batch_size, &mut rng);
        let (loss_d, grads) = disc_loss(&disc, &map, &vb, &tb, cfg.label_smoothing, Some(&mut rng))?;
        disc.sgd(&grads, lr);
        if !disc.is_finite() {
            return Err(Error::Numeric(format!("discriminator diverged at iteration {it}")));
        }

        let vb = sample_rows(&vs, cfg.batch_size, &mut rng);
        let tb = sample_rows(&ts, cfg.batch_size, &mut rng);
        let (loss_w, grad_w) = gen_loss(&disc, &map, &vb, &tb, cfg.label_smoothing, None)?;
        let mut w = map.into_matrix();
        w -= grad_w * lr;
        map = AlignmentMap::from_parts(w, false);
        if cfg.ortho_beta > 0.0 {
            map = orthogonalize_step(&map, cfg.ortho_beta)?;
        }
        if map.matrix().iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("map diverged at iteration {it}")));
        }

        let validation = if (it + 1) % cfg.eval_every == 0 || it + 1 == cfg.iterations {
            let v = criterion(&map)?;
            if v > best_validation {
                best_validation = v;
                best_map = map.clone();
            }
            Some(v)
        } else {
            None
        };
        history.push(HistoryRecord {
            iteration: it + 1,
            loss_d,
            loss_w,
            validation,
        });
    }

    Ok(AdversarialResult {
        map,
        discriminator: disc,
        history,
        best_map,
        best_validation,
    })
}
