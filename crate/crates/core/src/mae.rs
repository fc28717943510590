//! Toy masked autoencoder: patchify, random masking, tokenizer + encoder +
//! decoder, and the mean-squared reconstruction loss over masked patches.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::tensor::{Tape, Tensor, Var};

/// An image split into non-overlapping square patches.
#[derive(Debug, Clone)]
pub struct PatchGrid {
    /// n × (V·V·C), channel-last within each patch row.
    pub patches: Tensor,
    /// Patch layout (rows, cols); n = grid.0 * grid.1.
    pub grid: (usize, usize),
    pub patch: usize,
    pub channels: usize,
}

impl PatchGrid {
    pub fn n_patches(&self) -> usize {
        self.grid.0 * self.grid.1
    }
}

/// Split an H×W×C image into V×V patches in row-major grid order.
pub fn patchify(image: &Tensor, v: usize) -> Result<PatchGrid> {
    let shape = image.shape();
    if shape.len() != 3 {
        return Err(Error::Shape {
            op: "patchify",
            lhs: shape.to_vec(),
            rhs: vec![],
        });
    }
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    if v == 0 || h % v != 0 || w % v != 0 {
        let valid: Vec<usize> = (1..=h.min(w)).filter(|d| h % d == 0 && w % d == 0).collect();
        return Err(Error::contract(format!(
            "patchify: image {h}x{w} not divisible by patch side {v}; valid sides: {valid:?}"
        )));
    }
    let (hp, wp) = (h / v, w / v);
    let dim = v * v * c;
    let mut patches = Vec::with_capacity(hp * wp * dim);
    for gy in 0..hp {
        for gx in 0..wp {
            for py in 0..v {
                for px in 0..v {
                    let y = gy * v + py;
                    let x = gx * v + px;
                    for ch in 0..c {
                        patches.push(image.data()[(y * w + x) * c + ch]);
                    }
                }
            }
        }
    }
    Ok(PatchGrid {
        patches: Tensor::new(vec![hp * wp, dim], patches)?,
        grid: (hp, wp),
        patch: v,
        channels: c,
    })
}

/// Inverse of [`patchify`]; exact round trip.
pub fn unpatchify(grid: &PatchGrid) -> Result<Tensor> {
    let (hp, wp) = grid.grid;
    let (v, c) = (grid.patch, grid.channels);
    let (h, w) = (hp * v, wp * v);
    let mut out = vec![0.0f32; h * w * c];
    let dim = v * v * c;
    for k in 0..hp * wp {
        let (gy, gx) = (k / wp, k % wp);
        let row = &grid.patches.data()[k * dim..(k + 1) * dim];
        for py in 0..v {
            for px in 0..v {
                let y = gy * v + py;
                let x = gx * v + px;
                for ch in 0..c {
                    out[(y * w + x) * c + ch] = row[(py * v + px) * c + ch];
                }
            }
        }
    }
    Tensor::new(vec![h, w, c], out)
}

/// Which patch indices are masked vs visible.
#[derive(Debug, Clone)]
pub struct MaskSpec {
    pub masked_idx: Vec<usize>,
    pub visible_idx: Vec<usize>,
    pub rate: f32,
}

impl MaskSpec {
    pub fn n_masked(&self) -> usize {
        self.masked_idx.len()
    }

    pub fn n_visible(&self) -> usize {
        self.visible_idx.len()
    }
}

/// Uniformly choose `floor(n*r)` distinct patch indices to mask.
pub fn sample_mask(n: usize, r: f32, rng: &mut ChaCha8Rng) -> Result<MaskSpec> {
    if n == 0 {
        return Err(Error::contract("sample_mask: n must be >= 1"));
    }
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::contract(format!("sample_mask: rate {r} outside [0,1]")));
    }
    let m = ((n as f64) * (r as f64)).floor() as usize;
    if m >= n && r < 1.0 {
        return Err(Error::contract("sample_mask: mask would cover all tokens"));
    }
    if m == n {
        return Err(Error::contract(
            "sample_mask: r=1 leaves no visible tokens for the encoder",
        ));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut masked: Vec<usize> = idx[..m].to_vec();
    let mut visible: Vec<usize> = idx[m..].to_vec();
    masked.sort_unstable();
    visible.sort_unstable();
    Ok(MaskSpec {
        masked_idx: masked,
        visible_idx: visible,
        rate: r,
    })
}

/// Architecture hyperparameters, stored in the checkpoint sidecar.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub patch: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub decoder_depth: usize,
    pub hidden_mult: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_h: 16,
            image_w: 16,
            channels: 1,
            patch: 4,
            embed_dim: 64,
            depth: 2,
            decoder_depth: 1,
            hidden_mult: 2,
        }
    }
}

impl ModelConfig {
    pub fn n_patches(&self) -> usize {
        (self.image_h / self.patch) * (self.image_w / self.patch)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.image_h % self.patch != 0 || self.image_w % self.patch != 0 {
            return Err(Error::contract(format!(
                "model: image {}x{} not divisible by patch {}",
                self.image_h, self.image_w, self.patch
            )));
        }
        if self.embed_dim == 0 || self.depth == 0 || self.decoder_depth == 0 || self.hidden_mult == 0
        {
            return Err(Error::contract("model: dims must be positive"));
        }
        Ok(())
    }
}

/// Tokenizer + encoder + decoder with named parameters.
///
/// Blocks are layer-norm-free: residual single-head attention followed by a
/// residual two-layer MLP. Positional encodings are fixed sinusoidal.
#[derive(Debug, Clone)]
pub struct MaeModel {
    pub cfg: ModelConfig,
    pub params: BTreeMap<String, Tensor>,
    pos: Tensor,
}

/// Tape handles for every parameter, created once per step.
pub type ParamVars = BTreeMap<String, Var>;

fn sinusoidal_positions(n: usize, e: usize) -> Tensor {
    let mut data = vec![0.0f32; n * e];
    for p in 0..n {
        for i in 0..e {
            let pair = (i / 2) as f64;
            let freq = 1.0 / 10000f64.powf(2.0 * pair / e as f64);
            let angle = p as f64 * freq;
            data[p * e + i] = if i % 2 == 0 {
                angle.sin() as f32
            } else {
                angle.cos() as f32
            };
        }
    }
    Tensor::new(vec![n, e], data).expect("positive dims")
}

impl MaeModel {
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, 0.02).expect("valid std");
        let e = cfg.embed_dim;
        let h = e * cfg.hidden_mult;
        let p = cfg.patch_dim();

        let mut params = BTreeMap::new();
        let mat = |rng: &mut ChaCha8Rng, rows: usize, cols: usize| {
            let data: Vec<f32> = (0..rows * cols).map(|_| normal.sample(rng)).collect();
            Tensor::new(vec![rows, cols], data).expect("positive dims")
        };

        params.insert("tok.w".into(), mat(&mut rng, p, e));
        params.insert("tok.b".into(), Tensor::zeros(vec![1, e]));
        for (count, prefix) in [(cfg.depth, "enc"), (cfg.decoder_depth, "dec")] {
            for i in 0..count {
                for name in ["wq", "wk", "wv", "wo"] {
                    params.insert(format!("{prefix}{i}.attn.{name}"), mat(&mut rng, e, e));
                }
                params.insert(format!("{prefix}{i}.mlp.w1"), mat(&mut rng, e, h));
                params.insert(format!("{prefix}{i}.mlp.b1"), Tensor::zeros(vec![1, h]));
                params.insert(format!("{prefix}{i}.mlp.w2"), mat(&mut rng, h, e));
                params.insert(format!("{prefix}{i}.mlp.b2"), Tensor::zeros(vec![1, e]));
            }
        }
        params.insert("mask_token".into(), mat(&mut rng, 1, e));
        params.insert("out.w".into(), mat(&mut rng, e, p));
        params.insert("out.b".into(), Tensor::zeros(vec![1, p]));

        let pos = sinusoidal_positions(cfg.n_patches(), e);
        Ok(MaeModel { cfg, params, pos })
    }

    /// Register every parameter on `tape`; `trainable` controls requires_grad.
    pub fn vars(&self, tape: &Tape, trainable: bool) -> ParamVars {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), trainable)))
            .collect()
    }

    fn block(&self, tape: &Tape, vars: &ParamVars, prefix: &str, x: Var) -> Result<Var> {
        let e = self.cfg.embed_dim;
        let q = tape.matmul(x, vars[&format!("{prefix}.attn.wq")])?;
        let k = tape.matmul(x, vars[&format!("{prefix}.attn.wk")])?;
        let v = tape.matmul(x, vars[&format!("{prefix}.attn.wv")])?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (e as f32).sqrt());
        let attn = tape.row_softmax(scores, None)?;
        let mixed = tape.matmul(attn, v)?;
        let mixed = tape.matmul(mixed, vars[&format!("{prefix}.attn.wo")])?;
        let x = tape.add(x, mixed)?;

        let h1 = tape.matmul(x, vars[&format!("{prefix}.mlp.w1")])?;
        let h1 = add_bias(tape, h1, vars[&format!("{prefix}.mlp.b1")])?;
        let h1 = tape.relu(h1);
        let h2 = tape.matmul(h1, vars[&format!("{prefix}.mlp.w2")])?;
        let h2 = add_bias(tape, h2, vars[&format!("{prefix}.mlp.b2")])?;
        tape.add(x, h2)
    }

    /// Tokenize and encode the visible patches of one image.
    /// Returns T_v × E features, T_v = n − m.
    pub fn encode(
        &self,
        tape: &Tape,
        vars: &ParamVars,
        grid: &PatchGrid,
        visible_idx: &[usize],
    ) -> Result<Var> {
        if grid.n_patches() != self.cfg.n_patches() || grid.patches.shape()[1] != self.cfg.patch_dim()
        {
            return Err(Error::Shape {
                op: "encode",
                lhs: grid.patches.shape().to_vec(),
                rhs: vec![self.cfg.n_patches(), self.cfg.patch_dim()],
            });
        }
        let visible = tape.constant(grid.patches.gather_rows(visible_idx)?);
        let tokens = tape.matmul(visible, vars["tok.w"])?;
        let tokens = add_bias(tape, tokens, vars["tok.b"])?;
        let pos = tape.constant(self.pos.gather_rows(visible_idx)?);
        let mut x = tape.add(tokens, pos)?;
        for i in 0..self.cfg.depth {
            x = self.block(tape, vars, &format!("enc{i}"), x)?;
        }
        Ok(x)
    }

    /// Reconstruct the masked patches from visible-token features.
    /// Returns m × (V²C) rows aligned with `mask.masked_idx`.
    pub fn decode(
        &self,
        tape: &Tape,
        vars: &ParamVars,
        features: Var,
        mask: &MaskSpec,
    ) -> Result<Var> {
        let m = mask.n_masked();
        if m == 0 {
            return Err(Error::contract("decode: no masked patches to reconstruct"));
        }
        let n = self.cfg.n_patches();
        let mask_rows = tape.gather_rows(vars["mask_token"], &vec![0; m])?;
        let stacked = tape.concat_rows(&[features, mask_rows])?;

        // Row p of the full sequence comes from the visible stack or the mask
        // stack depending on position.
        let mut source = vec![0usize; n];
        for (i, &p) in mask.visible_idx.iter().enumerate() {
            source[p] = i;
        }
        for (i, &p) in mask.masked_idx.iter().enumerate() {
            source[p] = mask.n_visible() + i;
        }
        let full = tape.gather_rows(stacked, &source)?;
        let mut x = tape.add(full, tape.constant(self.pos.clone()))?;
        for i in 0..self.cfg.decoder_depth {
            x = self.block(tape, vars, &format!("dec{i}"), x)?;
        }
        let y = tape.matmul(x, vars["out.w"])?;
        let y = add_bias(tape, y, vars["out.b"])?;
        tape.gather_rows(y, &mask.masked_idx)
    }

    /// Inference-only forward pass: reconstructed masked patches (None when
    /// the mask is empty) and the visible-token encoder features.
    pub fn forward(&self, grid: &PatchGrid, mask: &MaskSpec) -> Result<(Option<Tensor>, Tensor)> {
        let tape = Tape::new();
        let vars = self.vars(&tape, false);
        let features = self.encode(&tape, &vars, grid, &mask.visible_idx)?;
        let y_m = if mask.n_masked() > 0 {
            Some(tape.value(self.decode(&tape, &vars, features, mask)?))
        } else {
            None
        };
        Ok((y_m, tape.value(features)))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        io::write_param_dir(dir, &self.params)?;
        let sidecar = serde_json::to_string_pretty(&self.cfg)?;
        std::fs::write(dir.join("arch.json"), sidecar)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let sidecar = std::fs::read_to_string(dir.join("arch.json"))?;
        let cfg: ModelConfig = serde_json::from_str(&sidecar)?;
        cfg.validate()?;
        let params = io::read_param_dir(dir)?;
        let pos = sinusoidal_positions(cfg.n_patches(), cfg.embed_dim);
        let model = MaeModel { cfg, params, pos };
        model.check_params()?;
        Ok(model)
    }

    fn check_params(&self) -> Result<()> {
        let reference = MaeModel::init(self.cfg.clone(), 0)?;
        for (name, t) in &reference.params {
            match self.params.get(name) {
                Some(have) if have.shape() == t.shape() => {}
                Some(have) => {
                    return Err(Error::Shape {
                        op: "checkpoint",
                        lhs: have.shape().to_vec(),
                        rhs: t.shape().to_vec(),
                    })
                }
                None => {
                    return Err(Error::Format(format!("checkpoint missing parameter {name}")))
                }
            }
        }
        Ok(())
    }
}

/// Broadcast-add a 1×E bias to every row of a T×E matrix.
pub fn add_bias(tape: &Tape, x: Var, bias: Var) -> Result<Var> {
    let rows = tape.value(x).shape()[0];
    let ones = tape.constant(Tensor::full(vec![rows, 1], 1.0));
    let expanded = tape.matmul(ones, bias)?;
    tape.add(x, expanded)
}

/// Mean squared error over masked patches: ||Y_m − X_m||² / (m·V²·C).
pub fn loss_ssl(tape: &Tape, y_m: Var, x_m: &Tensor) -> Result<Var> {
    let y_shape = tape.value(y_m).shape().to_vec();
    if y_shape != x_m.shape() {
        return Err(Error::Shape {
            op: "loss_ssl",
            lhs: y_shape,
            rhs: x_m.shape().to_vec(),
        });
    }
    if x_m.shape()[0] == 0 || x_m.numel() == 0 {
        return Err(Error::contract("loss_ssl: undefined for an empty mask"));
    }
    let target = tape.constant(x_m.clone());
    let diff = tape.sub(y_m, target)?;
    let sq = tape.square(diff);
    Ok(tape.mean(sq))
}
