//! The spatio-temporal denoising network eps_theta(Z_t, t, A):
//! region-aware spatial attention over the lip/eye/global subspaces,
//! multi-scale dilated depthwise temporal convolution, dual-path audio
//! cross-attention with a causal mask, and FiLM timestep conditioning.

use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{self, Binding, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::types::SubspacePartition;

/// Architecture hyperparameters. `residual` adds skip connections around
/// the temporal and fusion blocks; disabling it reproduces the plain
/// four-stage composition used by the property suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub d_model: usize,
    pub n_heads: usize,
    /// Local convolution window of the fusion block (odd).
    pub local_window: usize,
    /// Relative-position bias radius for all attention blocks.
    pub rel_radius: usize,
    pub audio_dim: usize,
    pub residual: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            d_model: 128,
            n_heads: 4,
            local_window: 5,
            rel_radius: 16,
            audio_dim: 32,
            residual: true,
        }
    }
}

impl DenoiserConfig {
    /// Channels given to each region before concatenation: d_model / 3
    /// rounded down to a multiple of n_heads.
    pub fn region_channels(&self) -> usize {
        let raw = self.d_model / 3;
        (raw / self.n_heads) * self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.audio_dim == 0 {
            return Err(Error::Invalid("d_model, n_heads, audio_dim must be positive".into()));
        }
        if self.local_window % 2 == 0 {
            return Err(Error::Invalid(format!(
                "local_window must be odd, got {}",
                self.local_window
            )));
        }
        if self.region_channels() == 0 {
            return Err(Error::Invalid(format!(
                "d_model {} too small for 3 regions x {} heads",
                self.d_model, self.n_heads
            )));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Invalid(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

struct RegionIds {
    embed_w: ParamId,
    embed_b: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    rel: ParamId,
}

struct Ids {
    regions: Vec<RegionIds>,
    fuse_w: ParamId,
    dw: Vec<ParamId>,
    pw: ParamId,
    pw_b: ParamId,
    local: ParamId,
    cross_q: ParamId,
    cross_k: ParamId,
    cross_v: ParamId,
    cross_o: ParamId,
    cross_rel: ParamId,
    out_fuse_w: ParamId,
    out_fuse_b: ParamId,
    film_w1: ParamId,
    film_b1: ParamId,
    film_gamma_w: ParamId,
    film_gamma_b: ParamId,
    film_beta_w: ParamId,
    film_beta_b: ParamId,
    proj_w: ParamId,
    proj_b: ParamId,
}

/// Denoiser parameters plus the partition they are tied to.
pub struct Denoiser<T: Scalar> {
    cfg: DenoiserConfig,
    partition: SubspacePartition,
    store: ParamStore<T>,
    ids: Ids,
}

/// Region order used for attention and concatenation.
fn region_columns(partition: &SubspacePartition) -> [(&'static str, &[usize]); 3] {
    [
        ("eye", partition.eye.as_slice()),
        ("lip", partition.lip.as_slice()),
        ("global", partition.global_.as_slice()),
    ]
}

impl<T: Scalar> Denoiser<T> {
    pub fn new(cfg: DenoiserConfig, partition: SubspacePartition, seed: u64) -> Result<Self> {
        cfg.validate()?;
        partition.validate()?;
        if partition.lip.is_empty() || partition.eye.is_empty() || partition.global_.is_empty() {
            return Err(Error::Invalid("denoiser needs all three regions non-empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = cfg.d_model;
        let dr = cfg.region_channels();
        let rel_w = 2 * cfg.rel_radius + 1;

        let regions = region_columns(&partition)
            .iter()
            .map(|(name, cols)| RegionIds {
                embed_w: store.add(format!("attn_{name}_embed_w"), nn::xavier(&mut rng, cols.len(), dr)),
                embed_b: store.add(format!("attn_{name}_embed_b"), nn::zeros(1, dr)),
                wq: store.add(format!("attn_{name}_wq"), nn::xavier(&mut rng, dr, dr)),
                wk: store.add(format!("attn_{name}_wk"), nn::xavier(&mut rng, dr, dr)),
                wv: store.add(format!("attn_{name}_wv"), nn::xavier(&mut rng, dr, dr)),
                wo: store.add(format!("attn_{name}_wo"), nn::xavier(&mut rng, dr, dr)),
                rel: store.add(format!("attn_{name}_rel"), nn::zeros(cfg.n_heads, rel_w)),
            })
            .collect();

        // Temporal branch kernels start as pass-through deltas so the
        // network begins near identity in time.
        let dw = (0..3)
            .map(|i| {
                let mut k = nn::delta_kernel::<T>(3, d);
                k += &nn::xavier::<T, _>(&mut rng, 3, d).mapv(|v| v * T::from_f64(0.05));
                store.add(format!("temp_dw{i}"), k)
            })
            .collect();
        let mut pw0 = Array2::zeros((3 * d, d));
        for i in 0..3 {
            for c in 0..d {
                pw0[[i * d + c, c]] = T::from_f64(1.0 / 3.0);
            }
        }
        pw0 += &nn::xavier::<T, _>(&mut rng, 3 * d, d).mapv(|v| v * T::from_f64(0.05));

        let ids = Ids {
            regions,
            fuse_w: store.add("fuse_w", nn::xavier(&mut rng, 3 * dr, d)),
            dw,
            pw: store.add("temp_pw", pw0),
            pw_b: store.add("temp_pw_b", nn::zeros(1, d)),
            local: store.add("fusion_local", {
                let mut k = nn::delta_kernel::<T>(cfg.local_window, d);
                k += &nn::xavier::<T, _>(&mut rng, cfg.local_window, d).mapv(|v| v * T::from_f64(0.05));
                k
            }),
            cross_q: store.add("cross_wq", nn::xavier(&mut rng, d, d)),
            cross_k: store.add("cross_wk", nn::xavier(&mut rng, cfg.audio_dim, d)),
            cross_v: store.add("cross_wv", nn::xavier(&mut rng, cfg.audio_dim, d)),
            cross_o: store.add("cross_wo", nn::xavier(&mut rng, d, d)),
            cross_rel: store.add("cross_rel", nn::zeros(cfg.n_heads, rel_w)),
            out_fuse_w: store.add("fusion_w_o", {
                let mut w = Array2::zeros((2 * d, d));
                for c in 0..d {
                    w[[c, c]] = T::from_f64(0.5);
                    w[[d + c, c]] = T::from_f64(0.5);
                }
                w += &nn::xavier::<T, _>(&mut rng, 2 * d, d).mapv(|v| v * T::from_f64(0.05));
                w
            }),
            out_fuse_b: store.add("fusion_b_o", nn::zeros(1, d)),
            film_w1: store.add("film_w1", nn::xavier(&mut rng, d, d)),
            film_b1: store.add("film_b1", nn::zeros(1, d)),
            film_gamma_w: store.add("film_gamma_w", nn::xavier::<T, _>(&mut rng, d, d).mapv(|v| v * T::from_f64(0.1))),
            film_gamma_b: store.add("film_gamma_b", nn::ones(1, d)),
            film_beta_w: store.add("film_beta_w", nn::xavier::<T, _>(&mut rng, d, d).mapv(|v| v * T::from_f64(0.1))),
            film_beta_b: store.add("film_beta_b", nn::zeros(1, d)),
            proj_w: store.add("proj_w", nn::xavier(&mut rng, d, partition.n_dims)),
            proj_b: store.add("proj_b", nn::zeros(1, partition.n_dims)),
        };

        Ok(Denoiser { cfg, partition, store, ids })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn partition(&self) -> &SubspacePartition {
        &self.partition
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn n_dims(&self) -> usize {
        self.partition.n_dims
    }

    /// Sinusoidal embedding of the diffusion timestep.
    pub fn timestep_embedding(&self, t: usize) -> Array2<T> {
        let d = self.cfg.d_model;
        let mut emb = Array2::zeros((1, d));
        for i in 0..d / 2 {
            let freq = (10_000f64).powf(-2.0 * i as f64 / d as f64);
            let x = t as f64 * freq;
            emb[[0, 2 * i]] = T::from_f64(x.sin());
            emb[[0, 2 * i + 1]] = T::from_f64(x.cos());
        }
        emb
    }

    fn multihead(
        &self,
        tape: &mut Tape<T>,
        q_src: Var,
        kv_src: Var,
        wq: Var,
        wk: Var,
        wv: Var,
        wo: Var,
        rel: Var,
        causal: bool,
    ) -> Var {
        let d_attn = tape.shape(wq).1;
        let heads = self.cfg.n_heads;
        let dh = d_attn / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let q = tape.matmul(q_src, wq);
        let k = tape.matmul(kv_src, wk);
        let v = tape.matmul(kv_src, wv);
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols: Vec<usize> = (h * dh..(h + 1) * dh).collect();
            let qh = tape.select_cols(q, &cols);
            let kh = tape.select_cols(k, &cols);
            let vh = tape.select_cols(v, &cols);
            let scores = tape.matmul_nt(qh, kh);
            let scores = tape.scale(scores, scale);
            let bias = tape.slice_rows(rel, h, 1);
            let scores = tape.rel_bias(scores, bias, self.cfg.rel_radius);
            // Band the attention to the bias radius so the per-row support is
            // independent of sequence length: models trained on short windows
            // can sample longer sequences without the softmax mass diluting.
            let attn = tape.softmax_rows_banded(scores, causal, Some(self.cfg.rel_radius));
            outs.push(tape.matmul(attn, vh));
        }
        let cat = tape.concat_cols(&outs);
        tape.matmul(cat, wo)
    }

    /// Region-aware spatial attention: per-region frame-wise self-attention
    /// over the region's columns, concatenated and fused.
    pub fn region_attention(&self, tape: &mut Tape<T>, z: Var, b: &Binding) -> Var {
        let mut parts = Vec::with_capacity(3);
        for (ids, (_, cols)) in self.ids.regions.iter().zip(region_columns(&self.partition)) {
            let x = tape.select_cols(z, cols);
            let embedded = tape.matmul(x, b.var(ids.embed_w));
            let embedded = tape.row_add(embedded, b.var(ids.embed_b));
            parts.push(self.multihead(
                tape,
                embedded,
                embedded,
                b.var(ids.wq),
                b.var(ids.wk),
                b.var(ids.wv),
                b.var(ids.wo),
                b.var(ids.rel),
                false,
            ));
        }
        let cat = tape.concat_cols(&parts);
        tape.matmul(cat, b.var(self.ids.fuse_w))
    }

    /// Three dilated depthwise branches aggregated by a pointwise conv.
    pub fn multiscale_temporal(&self, tape: &mut Tape<T>, f_spatial: Var, b: &Binding) -> Var {
        let branches: Vec<Var> = self
            .ids
            .dw
            .iter()
            .enumerate()
            .map(|(i, &w)| tape.dw_conv(f_spatial, b.var(w), 1 << i))
            .collect();
        let cat = tape.concat_cols(&branches);
        let pw = tape.matmul(cat, b.var(self.ids.pw));
        let pw = tape.row_add(pw, b.var(self.ids.pw_b));
        if self.cfg.residual {
            tape.add(pw, f_spatial)
        } else {
            pw
        }
    }

    /// Dual-path fusion: local temporal conv plus causal cross-attention
    /// into the audio features; `audio = None` is the null condition with
    /// an all-zeros context.
    pub fn audio_cross_fusion(
        &self,
        tape: &mut Tape<T>,
        f_temp: Var,
        audio: Option<Var>,
        b: &Binding,
    ) -> Var {
        let frames = tape.shape(f_temp).0;
        let local = tape.dw_conv(f_temp, b.var(self.ids.local), 1);
        let context = match audio {
            Some(a) => {
                assert_eq!(
                    tape.shape(a).0,
                    frames,
                    "audio frames must match feature frames"
                );
                self.multihead(
                    tape,
                    f_temp,
                    a,
                    b.var(self.ids.cross_q),
                    b.var(self.ids.cross_k),
                    b.var(self.ids.cross_v),
                    b.var(self.ids.cross_o),
                    b.var(self.ids.cross_rel),
                    true,
                )
            }
            None => tape.zeros(frames, self.cfg.d_model),
        };
        let cat = tape.concat_cols(&[local, context]);
        let fused = tape.matmul(cat, b.var(self.ids.out_fuse_w));
        let fused = tape.row_add(fused, b.var(self.ids.out_fuse_b));
        if self.cfg.residual {
            tape.add(fused, f_temp)
        } else {
            fused
        }
    }

    /// F_out = gamma(t) * F_final + beta(t), per channel.
    pub fn film_modulate(&self, tape: &mut Tape<T>, f_final: Var, t: usize, b: &Binding) -> Var {
        let emb = tape.leaf(self.timestep_embedding(t));
        let h = tape.matmul(emb, b.var(self.ids.film_w1));
        let h = tape.row_add(h, b.var(self.ids.film_b1));
        let h = tape.tanh(h);
        let gamma = tape.matmul(h, b.var(self.ids.film_gamma_w));
        let gamma = tape.row_add(gamma, b.var(self.ids.film_gamma_b));
        let beta = tape.matmul(h, b.var(self.ids.film_beta_w));
        let beta = tape.row_add(beta, b.var(self.ids.film_beta_b));
        let out = tape.row_mul(f_final, gamma);
        tape.row_add(out, beta)
    }

    /// FiLM scale/shift for a given timestep, for inspection in tests.
    pub fn film_coefficients(&self, t: usize) -> (Array2<T>, Array2<T>) {
        let mut tape = Tape::new();
        let b = self.store.bind(&mut tape);
        let emb = tape.leaf(self.timestep_embedding(t));
        let h = tape.matmul(emb, b.var(self.ids.film_w1));
        let h = tape.row_add(h, b.var(self.ids.film_b1));
        let h = tape.tanh(h);
        let gamma = tape.matmul(h, b.var(self.ids.film_gamma_w));
        let gamma = tape.row_add(gamma, b.var(self.ids.film_gamma_b));
        let beta = tape.matmul(h, b.var(self.ids.film_beta_w));
        let beta = tape.row_add(beta, b.var(self.ids.film_beta_b));
        (tape.value(gamma).clone(), tape.value(beta).clone())
    }

    /// Full graph: z_t (frames x N) -> predicted noise (frames x N).
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        z: Var,
        t: usize,
        audio: Option<Var>,
        b: &Binding,
    ) -> Var {
        assert_eq!(tape.shape(z).1, self.partition.n_dims, "z width must be N");
        let f_spatial = self.region_attention(tape, z, b);
        let f_temp = self.multiscale_temporal(tape, f_spatial, b);
        let f_final = self.audio_cross_fusion(tape, f_temp, audio, b);
        let f_out = self.film_modulate(tape, f_final, t, b);
        let proj = tape.matmul(f_out, b.var(self.ids.proj_w));
        tape.row_add(proj, b.var(self.ids.proj_b))
    }

    /// Inference-only forward pass.
    pub fn predict_noise(
        &self,
        z_t: &Array2<T>,
        t: usize,
        audio: Option<&Array2<T>>,
    ) -> Result<Array2<T>> {
        if z_t.ncols() != self.partition.n_dims {
            return Err(Error::Shape(format!(
                "z_t has {} dims, partition has {}",
                z_t.ncols(),
                self.partition.n_dims
            )));
        }
        if let Some(a) = audio {
            if a.nrows() != z_t.nrows() {
                return Err(Error::Shape(format!(
                    "audio frames {} != z frames {}",
                    a.nrows(),
                    z_t.nrows()
                )));
            }
            if a.ncols() != self.cfg.audio_dim {
                return Err(Error::Shape(format!(
                    "audio dim {} != configured {}",
                    a.ncols(),
                    self.cfg.audio_dim
                )));
            }
        }
        let mut tape = Tape::new();
        let binding = self.store.bind(&mut tape);
        let z = tape.leaf(z_t.clone());
        let a = audio.map(|a| tape.leaf(a.clone()));
        let out = self.forward(&mut tape, z, t, a, &binding);
        Ok(tape.value(out).clone())
    }

    /// Checkpoint: tensors plus a JSON manifest with the architecture and
    /// partition (hash included for quick mismatch detection).
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        self.store.save(&dir.join("tensors"))?;
        let manifest = CheckpointManifest {
            config: self.cfg.clone(),
            partition: self.partition.clone(),
            partition_hash: self.partition.content_hash(),
        };
        crate::io::write_json(&dir.join("manifest.json"), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: CheckpointManifest = crate::io::read_json(&dir.join("manifest.json"))?;
        if manifest.partition.content_hash() != manifest.partition_hash {
            return Err(Error::format(
                dir.join("manifest.json").display().to_string(),
                "partition hash mismatch",
            ));
        }
        let mut model = Denoiser::new(manifest.config, manifest.partition, 0)?;
        model.store.load(&dir.join("tensors"))?;
        if model.store.has_non_finite() {
            return Err(Error::NonFinite(format!(
                "checkpoint {} contains non-finite weights",
                dir.display()
            )));
        }
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    config: DenoiserConfig,
    partition: SubspacePartition,
    partition_hash: String,
}
