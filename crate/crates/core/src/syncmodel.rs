//! Parameter-level lip-sync model: twin window encoders for lip motion
//! and audio features, trained with a binary cross-entropy loss on the
//! cosine similarity of their embeddings.

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{self, Adam, Binding, ParamStore};
use crate::scalar::Scalar;

pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyncConfig {
    /// Embedding dimension shared by both encoders.
    pub d_sync: usize,
    /// Window length in frames.
    pub window: usize,
    /// Hidden channel count inside each tower.
    pub hidden: usize,
}

impl Default for SyncConfig {
    fn default() -> Self {
        SyncConfig { d_sync: 64, window: 5, hidden: 32 }
    }
}

impl SyncConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_sync == 0 || self.hidden == 0 {
            return Err(Error::Invalid("d_sync and hidden must be positive".into()));
        }
        if self.window < 3 {
            return Err(Error::Invalid(format!(
                "window must be at least 3 frames, got {}",
                self.window
            )));
        }
        Ok(())
    }
}

struct TowerIds {
    dw1: nn::ParamId,
    pw1: nn::ParamId,
    b1: nn::ParamId,
    dw2: nn::ParamId,
    pw2: nn::ParamId,
    b2: nn::ParamId,
    out: nn::ParamId,
}

struct TowerVars {
    dw1: Var,
    pw1: Var,
    b1: Var,
    dw2: Var,
    pw2: Var,
    b2: Var,
    out: Var,
}

impl TowerIds {
    fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        in_dim: usize,
        cfg: &SyncConfig,
        rng: &mut R,
    ) -> Self {
        TowerIds {
            dw1: store.add(format!("{prefix}_dw1"), nn::delta_kernel(3, in_dim)),
            pw1: store.add(format!("{prefix}_pw1"), nn::xavier(rng, in_dim, cfg.hidden)),
            b1: store.add(format!("{prefix}_b1"), nn::zeros(1, cfg.hidden)),
            dw2: store.add(format!("{prefix}_dw2"), nn::delta_kernel(3, cfg.hidden)),
            pw2: store.add(format!("{prefix}_pw2"), nn::xavier(rng, cfg.hidden, cfg.hidden)),
            b2: store.add(format!("{prefix}_b2"), nn::zeros(1, cfg.hidden)),
            out: store.add(format!("{prefix}_out"), nn::xavier(rng, cfg.hidden, cfg.d_sync)),
        }
    }

    fn bind(&self, b: &Binding) -> TowerVars {
        TowerVars {
            dw1: b.var(self.dw1),
            pw1: b.var(self.pw1),
            b1: b.var(self.b1),
            dw2: b.var(self.dw2),
            pw2: b.var(self.pw2),
            b2: b.var(self.b2),
            out: b.var(self.out),
        }
    }

    fn leaves<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>) -> TowerVars {
        TowerVars {
            dw1: tape.leaf(store.get(self.dw1).clone()),
            pw1: tape.leaf(store.get(self.pw1).clone()),
            b1: tape.leaf(store.get(self.b1).clone()),
            dw2: tape.leaf(store.get(self.dw2).clone()),
            pw2: tape.leaf(store.get(self.pw2).clone()),
            b2: tape.leaf(store.get(self.b2).clone()),
            out: tape.leaf(store.get(self.out).clone()),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct SyncManifest {
    config: SyncConfig,
    lip_dim: usize,
    audio_dim: usize,
}

/// Twin encoders mapping a lip-motion window and an audio window to unit
/// vectors in a shared embedding space.
pub struct SyncEncoders<T: Scalar> {
    cfg: SyncConfig,
    lip_dim: usize,
    audio_dim: usize,
    store: ParamStore<T>,
    motion: TowerIds,
    audio: TowerIds,
}

impl<T: Scalar> SyncEncoders<T> {
    pub fn new(cfg: SyncConfig, lip_dim: usize, audio_dim: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if lip_dim == 0 || audio_dim == 0 {
            return Err(Error::Invalid("encoder input dims must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let motion = TowerIds::new(&mut store, "m", lip_dim, &cfg, &mut rng);
        let audio = TowerIds::new(&mut store, "a", audio_dim, &cfg, &mut rng);
        Ok(SyncEncoders { cfg, lip_dim, audio_dim, store, motion, audio })
    }

    pub fn config(&self) -> &SyncConfig {
        &self.cfg
    }

    pub fn window(&self) -> usize {
        self.cfg.window
    }

    pub fn lip_dim(&self) -> usize {
        self.lip_dim
    }

    pub fn audio_dim(&self) -> usize {
        self.audio_dim
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    fn tower_forward(tape: &mut Tape<T>, x: Var, p: &TowerVars) -> Var {
        let h = tape.dw_conv(x, p.dw1, 1);
        let h = tape.matmul(h, p.pw1);
        let h = tape.row_add(h, p.b1);
        let h = tape.tanh(h);
        let h = tape.dw_conv(h, p.dw2, 1);
        let h = tape.matmul(h, p.pw2);
        let h = tape.row_add(h, p.b2);
        let h = tape.tanh(h);
        let pooled = tape.mean_rows(h);
        let emb = tape.matmul(pooled, p.out);
        tape.normalize_rows(emb)
    }

    fn check_window(&self, rows: usize, cols: usize, expect_cols: usize, what: &str) -> Result<()> {
        if rows != self.cfg.window || cols != expect_cols {
            return Err(Error::Shape(format!(
                "{what} window must be {} x {expect_cols}, got {rows} x {cols}",
                self.cfg.window
            )));
        }
        Ok(())
    }

    /// Unit-norm embedding of a lip-motion window (window x K_lip).
    pub fn embed_motion(&self, win: &Array2<T>) -> Result<Array2<T>> {
        self.check_window(win.nrows(), win.ncols(), self.lip_dim, "motion")?;
        let mut tape = Tape::new();
        let x = tape.leaf(win.clone());
        let p = self.motion.leaves(&mut tape, &self.store);
        let e = Self::tower_forward(&mut tape, x, &p);
        Ok(tape.value(e).clone())
    }

    /// Unit-norm embedding of an audio window (window x D_a).
    pub fn embed_audio(&self, win: &Array2<T>) -> Result<Array2<T>> {
        self.check_window(win.nrows(), win.ncols(), self.audio_dim, "audio")?;
        let mut tape = Tape::new();
        let x = tape.leaf(win.clone());
        let p = self.audio.leaves(&mut tape, &self.store);
        let e = Self::tower_forward(&mut tape, x, &p);
        Ok(tape.value(e).clone())
    }

    pub fn cosine(&self, lip: &Array2<T>, audio: &Array2<T>) -> Result<T> {
        let em = self.embed_motion(lip)?;
        let ea = self.embed_audio(audio)?;
        Ok(em.iter().zip(ea.iter()).map(|(&a, &b)| a * b).sum())
    }

    /// BCE on p = (cos + 1) / 2 clamped away from {0, 1}.
    pub fn sync_loss(&self, lip: &Array2<T>, audio: &Array2<T>, positive: bool) -> Result<T> {
        let cos = self.cosine(lip, audio)?;
        Ok(bce_from_cos(cos, positive))
    }

    /// Graph version of the loss with both towers trainable; used by
    /// [`train_sync`] and for gradient checking.
    pub fn sync_loss_graph(
        &self,
        tape: &mut Tape<T>,
        binding: &Binding,
        lip: &Array2<T>,
        audio: &Array2<T>,
        positive: bool,
    ) -> Var {
        let lx = tape.leaf(lip.clone());
        let ax = tape.leaf(audio.clone());
        let mp = self.motion.bind(binding);
        let ap = self.audio.bind(binding);
        let em = Self::tower_forward(tape, lx, &mp);
        let ea = Self::tower_forward(tape, ax, &ap);
        self.bce_graph(tape, em, ea, positive)
    }

    /// Loss with the motion window already living on an external graph and
    /// both encoders frozen; gradients flow only into `lip_win`. The audio
    /// embedding enters as a constant.
    pub fn sync_loss_motion_graph(
        &self,
        tape: &mut Tape<T>,
        lip_win: Var,
        audio_win: &Array2<T>,
        positive: bool,
    ) -> Var {
        let mp = self.motion.leaves(tape, &self.store);
        let em = Self::tower_forward(tape, lip_win, &mp);
        let ea_val = self
            .embed_audio(audio_win)
            .expect("audio window shape checked by caller");
        let ea = tape.leaf(ea_val);
        self.bce_graph(tape, em, ea, positive)
    }

    fn bce_graph(&self, tape: &mut Tape<T>, em: Var, ea: Var, positive: bool) -> Var {
        let prod = tape.mul(em, ea);
        let cos = tape.sum_all(prod);
        let half = T::from_f64(0.5);
        let scaled = tape.scale(cos, half);
        let p = tape.add_scalar(scaled, half);
        let p = tape.clamp(p, T::from_f64(PROB_EPS), T::from_f64(1.0 - PROB_EPS));
        let inner = if positive {
            p
        } else {
            let neg = tape.scale(p, -T::one());
            tape.add_scalar(neg, T::one())
        };
        let lnp = tape.ln(inner);
        tape.scale(lnp, -T::one())
    }

    /// Mean cosine similarity over all full sliding windows of an aligned
    /// lip/audio pair.
    pub fn sync_confidence(&self, lip: &Array2<T>, audio: &Array2<T>) -> Result<T> {
        if lip.nrows() != audio.nrows() {
            return Err(Error::Shape(format!(
                "lip frames {} != audio frames {}",
                lip.nrows(),
                audio.nrows()
            )));
        }
        let w = self.cfg.window;
        if lip.nrows() < w {
            return Err(Error::Invalid(format!(
                "sequence of {} frames is shorter than the {w}-frame window",
                lip.nrows()
            )));
        }
        let mut sum = T::zero();
        let n = lip.nrows() - w + 1;
        for s0 in 0..n {
            let lw = lip.slice(s![s0..s0 + w, ..]).to_owned();
            let aw = audio.slice(s![s0..s0 + w, ..]).to_owned();
            sum += self.cosine(&lw, &aw)?;
        }
        Ok(sum / T::from_f64(n as f64))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let manifest = SyncManifest {
            config: self.cfg,
            lip_dim: self.lip_dim,
            audio_dim: self.audio_dim,
        };
        crate::io::write_json(&dir.join("sync.json"), &manifest)?;
        self.store.save(&dir.join("tensors"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: SyncManifest = crate::io::read_json(&dir.join("sync.json"))?;
        let mut model = Self::new(manifest.config, manifest.lip_dim, manifest.audio_dim, 0)?;
        model.store.load(&dir.join("tensors"))?;
        if model.store.has_non_finite() {
            return Err(Error::NonFinite("loaded sync weights contain NaN/Inf".into()));
        }
        Ok(model)
    }
}

pub fn bce_from_cos<T: Scalar>(cos: T, positive: bool) -> T {
    let half = T::from_f64(0.5);
    let p = (cos * half + half)
        .max(T::from_f64(PROB_EPS))
        .min(T::from_f64(1.0 - PROB_EPS));
    if positive {
        -p.ln()
    } else {
        -(T::one() - p).ln()
    }
}

/// Rank-based AUC: fraction of (positive, negative) score pairs ordered
/// correctly, ties counted half.
pub fn auc<T: Scalar>(pos: &[T], neg: &[T]) -> f64 {
    if pos.is_empty() || neg.is_empty() {
        return 0.5;
    }
    let mut hits = 0.0f64;
    for &p in pos {
        for &n in neg {
            if p > n {
                hits += 1.0;
            } else if p == n {
                hits += 0.5;
            }
        }
    }
    hits / (pos.len() * neg.len()) as f64
}

/// A lip/audio sequence pair used for sync training.
pub struct SyncItem<T: Scalar> {
    pub lip: Array2<T>,
    pub audio: Array2<T>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TrainSyncOpts {
    pub lr: f64,
    pub batch: usize,
    pub max_epochs: usize,
    /// Stop after this many epochs without validation-AUC improvement.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainSyncOpts {
    fn default() -> Self {
        TrainSyncOpts { lr: 1e-3, batch: 32, max_epochs: 40, patience: 5, seed: 0 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSyncReport {
    pub epochs_run: usize,
    pub val_auc: f64,
    pub final_train_loss: f64,
}

const NEG_SHIFT_MIN: usize = 5;
const NEG_SHIFT_MAX: usize = 25;

struct WindowPair<T: Scalar> {
    lip: Array2<T>,
    audio: Array2<T>,
    positive: bool,
}

/// Build positive (aligned) and negative (shifted or cross-sequence)
/// window pairs from a set of sequences, 1:1.
fn build_pairs<T: Scalar, R: Rng>(
    items: &[&SyncItem<T>],
    window: usize,
    rng: &mut R,
) -> Vec<WindowPair<T>> {
    let mut pairs = Vec::new();
    for (i, item) in items.iter().enumerate() {
        let frames = item.lip.nrows();
        if frames < window {
            continue;
        }
        let mut start = 0;
        while start + window <= frames {
            let lip = item.lip.slice(s![start..start + window, ..]).to_owned();
            let audio = item.audio.slice(s![start..start + window, ..]).to_owned();
            pairs.push(WindowPair { lip: lip.clone(), audio, positive: true });

            // negative: alternate between an in-sequence temporal shift
            // and an unrelated sequence's audio
            let cross = items.len() > 1 && rng.gen_bool(0.5);
            let neg_audio = if cross {
                let mut j = rng.gen_range(0..items.len());
                if j == i {
                    j = (j + 1) % items.len();
                }
                let other = &items[j];
                if other.audio.nrows() >= window {
                    let s0 = rng.gen_range(0..=other.audio.nrows() - window);
                    Some(other.audio.slice(s![s0..s0 + window, ..]).to_owned())
                } else {
                    None
                }
            } else {
                shifted_window(&item.audio, start, window, rng)
            };
            if let Some(a) = neg_audio {
                pairs.push(WindowPair { lip, audio: a, positive: false });
            }
            start += window;
        }
    }
    pairs
}

fn shifted_window<T: Scalar, R: Rng>(
    audio: &Array2<T>,
    start: usize,
    window: usize,
    rng: &mut R,
) -> Option<Array2<T>> {
    let frames = audio.nrows();
    let shift = rng.gen_range(NEG_SHIFT_MIN..=NEG_SHIFT_MAX) as isize;
    let sign = if rng.gen_bool(0.5) { 1 } else { -1 };
    for dir in [sign, -sign] {
        let s0 = start as isize + dir * shift;
        if s0 >= 0 && (s0 as usize) + window <= frames {
            let s0 = s0 as usize;
            return Some(audio.slice(s![s0..s0 + window, ..]).to_owned());
        }
    }
    None
}

/// Train twin sync encoders. Validation sequences are held out whole (no
/// window of a validation sequence is seen in training); stops early once
/// the validation AUC plateaus.
pub fn train_sync<T: Scalar>(
    items: &[SyncItem<T>],
    cfg: SyncConfig,
    opts: &TrainSyncOpts,
) -> Result<(SyncEncoders<T>, TrainSyncReport)> {
    if items.is_empty() {
        return Err(Error::Corpus("no sequences for sync training".into()));
    }
    let lip_dim = items[0].lip.ncols();
    let audio_dim = items[0].audio.ncols();
    for (i, it) in items.iter().enumerate() {
        if it.lip.ncols() != lip_dim || it.audio.ncols() != audio_dim {
            return Err(Error::Shape(format!("sequence {i} has inconsistent dims")));
        }
        if it.lip.nrows() != it.audio.nrows() {
            return Err(Error::Shape(format!("sequence {i}: lip/audio frame mismatch")));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut model = SyncEncoders::new(cfg, lip_dim, audio_dim, rng.gen())?;

    // hold out ~20% of sequences (at least one, unless there is only one)
    let n_val = if items.len() > 1 { (items.len() / 5).max(1) } else { 0 };
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut rng);
    let (val_idx, train_idx) = order.split_at(n_val);
    let train_items: Vec<&SyncItem<T>> = train_idx.iter().map(|&i| &items[i]).collect();
    let val_items: Vec<&SyncItem<T>> = val_idx.iter().map(|&i| &items[i]).collect();

    let mut opt = Adam::new(&model.store, opts.lr, Some(1.0));
    let mut best_auc = f64::NEG_INFINITY;
    let mut since_best = 0usize;
    let mut last_loss = f64::NAN;
    let mut epochs_run = 0usize;

    for _epoch in 0..opts.max_epochs {
        epochs_run += 1;
        let mut pairs = build_pairs(&train_items, model.cfg.window, &mut rng);
        pairs.shuffle(&mut rng);

        let mut epoch_loss = 0.0f64;
        let mut n_batches = 0usize;
        for chunk in pairs.chunks(opts.batch.max(1)) {
            let mut tape = Tape::new();
            let binding = model.store.bind(&mut tape);
            let mut total: Option<Var> = None;
            for pair in chunk {
                let l = model.sync_loss_graph(&mut tape, &binding, &pair.lip, &pair.audio, pair.positive);
                total = Some(match total {
                    Some(acc) => tape.add(acc, l),
                    None => l,
                });
            }
            let total = total.expect("chunks are nonempty");
            let mean = tape.scale(total, T::from_f64(1.0 / chunk.len() as f64));
            let grads = tape.backward(mean);
            let param_grads = nn::collect_grads(&model.store, &binding, &grads);
            epoch_loss += tape.value(mean)[[0, 0]].as_f64();
            n_batches += 1;
            opt.apply(&mut model.store, param_grads);
        }
        last_loss = epoch_loss / n_batches.max(1) as f64;
        if !last_loss.is_finite() {
            return Err(Error::NonFinite("sync training loss diverged".into()));
        }

        let eval_items = if val_items.is_empty() { &train_items } else { &val_items };
        let val_auc = eval_auc(&model, eval_items, &mut rng)?;
        if val_auc > best_auc + 1e-3 {
            best_auc = val_auc;
            since_best = 0;
        } else {
            since_best += 1;
        }
        if best_auc >= 0.99 || since_best >= opts.patience {
            break;
        }
    }

    Ok((
        model,
        TrainSyncReport { epochs_run, val_auc: best_auc, final_train_loss: last_loss },
    ))
}

fn eval_auc<T: Scalar, R: Rng>(
    model: &SyncEncoders<T>,
    items: &[&SyncItem<T>],
    rng: &mut R,
) -> Result<f64> {
    let pairs = build_pairs(items, model.cfg.window, rng);
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for p in &pairs {
        let c = model.cosine(&p.lip, &p.audio)?;
        if p.positive {
            pos.push(c);
        } else {
            neg.push(c);
        }
    }
    Ok(auc(&pos, &neg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn model() -> SyncEncoders<f64> {
        let cfg = SyncConfig { d_sync: 8, window: 5, hidden: 6 };
        SyncEncoders::new(cfg, 3, 4, 42).unwrap()
    }

    #[test]
    fn embeddings_are_unit_norm() {
        let m = model();
        let lip = Array2::from_shape_fn((5, 3), |(i, j)| (i as f64 - j as f64) * 0.3);
        let audio = Array2::from_shape_fn((5, 4), |(i, j)| (i * j) as f64 * 0.1 + 0.2);
        for e in [m.embed_motion(&lip).unwrap(), m.embed_audio(&audio).unwrap()] {
            let norm: f64 = e.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn orthogonal_embeddings_give_ln2() {
        // cos = 0 -> p = 1/2 -> BCE = ln 2 for either label
        assert!((bce_from_cos(0.0f64, true) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((bce_from_cos(0.0f64, false) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn bce_limits_are_clamped() {
        // perfectly aligned positive -> -ln(1 - eps), tiny but finite
        let l = bce_from_cos(1.0f64, true);
        assert!(l > 0.0 && l < 1e-6);
        // perfectly aligned negative -> -ln(eps), large but finite
        let l = bce_from_cos(1.0f64, false);
        assert!(l.is_finite() && l > 10.0);
    }

    #[test]
    fn loss_prefers_correct_label() {
        let m = model();
        let lip = Array2::from_shape_fn((5, 3), |(i, j)| ((i + j) as f64).sin());
        let audio = Array2::from_shape_fn((5, 4), |(i, j)| ((i * 2 + j) as f64).cos());
        let cos = m.cosine(&lip, &audio).unwrap();
        let lp = m.sync_loss(&lip, &audio, true).unwrap();
        let ln = m.sync_loss(&lip, &audio, false).unwrap();
        if cos > 0.0 {
            assert!(lp < ln);
        } else {
            assert!(ln < lp);
        }
    }

    #[test]
    fn graph_loss_matches_eval_loss() {
        let m = model();
        let lip = Array2::from_shape_fn((5, 3), |(i, j)| (i as f64 * 0.4 - j as f64 * 0.2).tanh());
        let audio = Array2::from_shape_fn((5, 4), |(i, j)| ((i + 2 * j) as f64 * 0.15).sin());
        let direct = m.sync_loss(&lip, &audio, true).unwrap();
        let mut tape = Tape::new();
        let lv = tape.leaf(lip.clone());
        let g = m.sync_loss_motion_graph(&mut tape, lv, &audio, true);
        assert!((tape.value(g)[[0, 0]] - direct).abs() < 1e-12);
    }

    /// Finite-difference check of the gradient flowing through the frozen
    /// encoders into the motion window.
    #[test]
    fn motion_graph_gradcheck() {
        let m = model();
        let lip = Array2::from_shape_fn((5, 3), |(i, j)| ((i * 3 + j) as f64 * 0.21).sin());
        let audio = Array2::from_shape_fn((5, 4), |(i, j)| ((i + j) as f64 * 0.17).cos());

        let mut tape = Tape::new();
        let lv = tape.leaf(lip.clone());
        let loss = m.sync_loss_motion_graph(&mut tape, lv, &audio, false);
        let grads = tape.backward(loss);
        let g = grads.get(lv, (5, 3));

        let h = 1e-6;
        for &(i, j) in &[(0usize, 0usize), (2, 1), (4, 2)] {
            let mut lp = lip.clone();
            lp[[i, j]] += h;
            let mut lm = lip.clone();
            lm[[i, j]] -= h;
            let fd = (m.sync_loss(&lp, &audio, false).unwrap()
                - m.sync_loss(&lm, &audio, false).unwrap())
                / (2.0 * h);
            let denom = fd.abs().max(1e-8);
            assert!(
                (g[[i, j]] - fd).abs() / denom < 1e-3,
                "grad {} vs fd {} at ({i},{j})",
                g[[i, j]],
                fd
            );
        }
    }

    #[test]
    fn auc_examples() {
        // perfect separation
        assert_eq!(auc(&[0.9, 0.8], &[0.1, 0.2]), 1.0);
        // fully inverted
        assert_eq!(auc(&[0.1], &[0.9]), 0.0);
        // all tied
        assert_eq!(auc(&[0.5, 0.5], &[0.5]), 0.5);
        // mixed: pos {0.7, 0.3}, neg {0.5} -> one win, one loss
        assert_eq!(auc(&[0.7, 0.3], &[0.5]), 0.5);
    }

    #[test]
    fn training_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let items: Vec<SyncItem<f64>> = (0..4)
            .map(|_| {
                let audio = Array2::from_shape_fn((60, 4), |_| rng.gen_range(-1.0..1.0));
                let lip = audio.slice(s![.., 0..3]).to_owned();
                SyncItem { lip, audio }
            })
            .collect();
        let cfg = SyncConfig { d_sync: 8, window: 5, hidden: 6 };
        let opts = TrainSyncOpts { max_epochs: 2, batch: 16, ..Default::default() };
        let (m1, r1) = train_sync(&items, cfg, &opts).unwrap();
        let (m2, r2) = train_sync(&items, cfg, &opts).unwrap();
        assert_eq!(r1.epochs_run, r2.epochs_run);
        assert_eq!(r1.val_auc, r2.val_auc);
        for id in m1.store.ids() {
            assert_eq!(m1.store.get(id), m2.store.get(id));
        }
    }

    #[test]
    fn learns_direct_correspondence() {
        // lip is a fixed linear readout of the audio; sync should separate
        // aligned from shifted pairs well above chance
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let map = Array2::from_shape_fn((4, 3), |_| rng.gen_range(-1.0..1.0));
        let items: Vec<SyncItem<f64>> = (0..6)
            .map(|_| {
                let audio = Array2::from_shape_fn((120, 4), |_| rng.gen_range(-1.0..1.0));
                let lip = audio.dot(&map);
                SyncItem { lip, audio }
            })
            .collect();
        let cfg = SyncConfig { d_sync: 8, window: 5, hidden: 8 };
        let opts = TrainSyncOpts { max_epochs: 30, batch: 24, lr: 3e-3, ..Default::default() };
        let (_, report) = train_sync(&items, cfg, &opts).unwrap();
        assert!(report.val_auc > 0.8, "val AUC {}", report.val_auc);
    }

    #[test]
    fn sync_confidence_window_mean() {
        let m = model();
        // 6 frames, window 5 -> mean over 2 windows; check against manual
        let lip = Array2::from_shape_fn((6, 3), |(i, j)| ((i + j) as f64 * 0.3).sin());
        let audio = Array2::from_shape_fn((6, 4), |(i, j)| ((i * j) as f64 * 0.2).cos());
        let c0 = m
            .cosine(
                &lip.slice(s![0..5, ..]).to_owned(),
                &audio.slice(s![0..5, ..]).to_owned(),
            )
            .unwrap();
        let c1 = m
            .cosine(
                &lip.slice(s![1..6, ..]).to_owned(),
                &audio.slice(s![1..6, ..]).to_owned(),
            )
            .unwrap();
        let conf = m.sync_confidence(&lip, &audio).unwrap();
        assert!((conf - (c0 + c1) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn save_load_round_trip() {
        let m = model();
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        let loaded = SyncEncoders::<f64>::load(dir.path()).unwrap();
        let lip = Array2::from_shape_fn((5, 3), |(i, j)| (i as f64 + j as f64) * 0.1);
        let audio = Array2::from_shape_fn((5, 4), |(i, j)| (i as f64 - j as f64) * 0.1);
        assert_eq!(
            m.cosine(&lip, &audio).unwrap(),
            loaded.cosine(&lip, &audio).unwrap()
        );
    }

    #[test]
    fn shape_errors() {
        let m = model();
        assert!(m.embed_motion(&array![[0.0, 0.0, 0.0]]).is_err()); // wrong window
        let bad = Array2::<f64>::zeros((5, 2));
        assert!(m.embed_motion(&bad).is_err()); // wrong dim
        assert!(SyncConfig { d_sync: 0, window: 5, hidden: 4 }.validate().is_err());
        assert!(SyncConfig { d_sync: 4, window: 2, hidden: 4 }.validate().is_err());
    }
}
