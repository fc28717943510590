//! Latent replay buffer: cluster pooled encoder features with k-means, keep
//! only the token features of images nearest each cluster center, persist
//! them, and serve teacher batches for distillation.
//!
//! Privacy is structural: the buffer schema can only hold token features and
//! tiny integer metadata, never pixels, so its size depends on the token
//! grid and embedding width alone.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bke::{Role, TokenBatch};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"RDLB";
const VERSION: u8 = 1;

#[derive(Debug, Clone)]
pub struct ClusterModel {
    /// k×E center matrix.
    pub centers: Tensor,
    /// Per-point center index.
    pub assignments: Vec<usize>,
    /// Sum of squared distances to assigned centers, final iteration.
    pub inertia: f64,
    /// Inertia after each assignment pass, for monotonicity checks.
    pub inertia_history: Vec<f64>,
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum()
}

fn row(features: &Tensor, i: usize) -> &[f32] {
    let e = features.shape()[1];
    &features.data()[i * e..(i + 1) * e]
}

/// Number of independently seeded Lloyd's runs; the lowest-inertia run
/// wins. Restarts wash out bad initializations (e.g. two diagonal corners
/// of a square) that a single k-means++ draw can fall into.
const KMEANS_RESTARTS: usize = 10;

/// Lloyd's algorithm with k-means++ seeding and [`KMEANS_RESTARTS`]
/// restarts. An empty cluster is reseeded to the point farthest from its
/// assigned center. Deterministic per seed.
pub fn kmeans(features: &Tensor, k: usize, max_iters: usize, seed: u64) -> Result<ClusterModel> {
    let shape = features.shape();
    if shape.len() != 2 {
        return Err(Error::Shape {
            op: "kmeans",
            lhs: shape.to_vec(),
            rhs: vec![],
        });
    }
    let (n, _) = (shape[0], shape[1]);
    if k == 0 || k > n {
        return Err(Error::config(
            "/buffer/alpha",
            format!("kmeans needs 1 <= k <= N, got k={k} with N={n}"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<ClusterModel> = None;
    for _ in 0..KMEANS_RESTARTS {
        let run = kmeans_once(features, k, max_iters, &mut rng)?;
        if best.as_ref().map_or(true, |b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn kmeans_once(
    features: &Tensor,
    k: usize,
    max_iters: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ClusterModel> {
    let (n, e) = (features.shape()[0], features.shape()[1]);

    // k-means++ seeding: first center uniform, then proportional to the
    // squared distance from the nearest chosen center.
    let mut centers: Vec<Vec<f32>> = Vec::with_capacity(k);
    centers.push(row(features, rng.gen_range(0..n)).to_vec());
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(row(features, i), &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            // All remaining mass at existing centers; fall back to uniform.
            rng.gen_range(0..n)
        } else {
            let target = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if acc >= target {
                    pick = i;
                    break;
                }
            }
            pick
        };
        let c = row(features, next).to_vec();
        for i in 0..n {
            d2[i] = d2[i].min(sq_dist(row(features, i), &c));
        }
        centers.push(c);
    }

    let mut assignments = vec![0usize; n];
    let mut inertia_history = Vec::new();
    for _ in 0..max_iters.max(1) {
        // Assignment pass.
        let mut inertia = 0.0f64;
        let mut changed = false;
        for i in 0..n {
            let p = row(features, i);
            let (best, best_d) = centers
                .iter()
                .enumerate()
                .map(|(c, center)| (c, sq_dist(p, center)))
                .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
                .expect("k >= 1");
            if assignments[i] != best {
                changed = true;
            }
            assignments[i] = best;
            inertia += best_d;
        }
        inertia_history.push(inertia);
        if !changed && inertia_history.len() > 1 {
            break;
        }

        // Update pass; empty clusters grab the globally farthest point.
        let mut sums = vec![vec![0.0f64; e]; k];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[assignments[i]] += 1;
            for (s, &v) in sums[assignments[i]].iter_mut().zip(row(features, i)) {
                *s += v as f64;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for (dst, &s) in centers[c].iter_mut().zip(&sums[c]) {
                    *dst = (s / counts[c] as f64) as f32;
                }
            } else {
                let farthest = (0..n)
                    .max_by(|&a, &b| {
                        sq_dist(row(features, a), &centers[assignments[a]])
                            .total_cmp(&sq_dist(row(features, b), &centers[assignments[b]]))
                    })
                    .expect("nonempty features");
                centers[c] = row(features, farthest).to_vec();
            }
        }
    }

    let inertia = *inertia_history.last().expect("at least one pass");
    Ok(ClusterModel {
        centers: Tensor::new(vec![k, e], centers.into_iter().flatten().collect())?,
        assignments,
        inertia,
        inertia_history,
    })
}

/// One stored replay exemplar: the full token features of one source image.
#[derive(Debug, Clone, PartialEq)]
pub struct BufferEntry {
    /// T×E token features.
    pub feature: Tensor,
    pub source_stage: u16,
    pub cluster_id: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBuffer {
    entries: Vec<BufferEntry>,
    tokens: usize,
    embed_dim: usize,
}

impl MemoryBuffer {
    pub fn entries(&self) -> &[BufferEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }
}

fn round_count(n: usize, ratio: f32) -> usize {
    (n as f64 * ratio as f64).round() as usize
}

/// Cluster the pooled per-image features and keep, per cluster, the
/// round(beta/alpha) members nearest its center; a global trim/fill step
/// makes the total exactly round(N*beta). Stored entries are the selected
/// images' full token features, bitwise.
pub fn sample_buffer(
    per_image: &[Tensor],
    pooled: &Tensor,
    alpha: f32,
    beta: f32,
    source_stage: u16,
    seed: u64,
) -> Result<MemoryBuffer> {
    let n = per_image.len();
    if n == 0 || pooled.shape().len() != 2 || pooled.shape()[0] != n {
        return Err(Error::contract(format!(
            "sample_buffer: pooled shape {:?} does not match {n} images",
            pooled.shape()
        )));
    }
    if !(0.0..=1.0).contains(&beta) || beta <= 0.0 {
        return Err(Error::config("/buffer/beta", format!("beta {beta} outside (0,1]")));
    }
    if alpha <= 0.0 {
        return Err(Error::config("/buffer/alpha", format!("alpha {alpha} must be > 0")));
    }
    let k = round_count(n, alpha);
    let target = round_count(n, beta);
    if k < 1 {
        return Err(Error::config(
            "/buffer/alpha",
            format!("round(N*alpha) = {k}; need at least 1 cluster"),
        ));
    }
    if target < k {
        return Err(Error::config(
            "/buffer/beta",
            format!("round(N*beta) = {target} < {k} clusters; beta must be >= alpha"),
        ));
    }
    let token_shape = per_image[0].shape().to_vec();
    for img in per_image {
        if img.shape() != token_shape {
            return Err(Error::Shape {
                op: "sample_buffer",
                lhs: token_shape,
                rhs: img.shape().to_vec(),
            });
        }
    }

    let model = kmeans(pooled, k, 100, seed)?;
    let quota = (beta as f64 / alpha as f64).round() as usize;

    // Members per cluster ordered by distance to their center, nearest first.
    let mut by_cluster: Vec<Vec<(f64, usize)>> = vec![Vec::new(); k];
    for i in 0..n {
        let c = model.assignments[i];
        by_cluster[c].push((sq_dist(row(pooled, i), row(&model.centers, c)), i));
    }
    for members in &mut by_cluster {
        members.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    }

    let mut selected: Vec<(f64, usize, usize)> = Vec::new(); // (dist, image, cluster)
    let mut leftovers: Vec<(f64, usize, usize)> = Vec::new();
    for (c, members) in by_cluster.iter().enumerate() {
        for (rank, &(d, i)) in members.iter().enumerate() {
            if rank < quota.max(1) {
                selected.push((d, i, c));
            } else {
                leftovers.push((d, i, c));
            }
        }
    }

    // Trim farthest-first, never emptying a cluster that has a member; then
    // fill with the globally nearest unselected features.
    while selected.len() > target {
        let mut cluster_counts = vec![0usize; k];
        for &(_, _, c) in &selected {
            cluster_counts[c] += 1;
        }
        let victim = selected
            .iter()
            .enumerate()
            .filter(|(_, &(_, _, c))| cluster_counts[c] > 1)
            .max_by(|a, b| a.1 .0.total_cmp(&b.1 .0))
            .or_else(|| selected.iter().enumerate().max_by(|a, b| a.1 .0.total_cmp(&b.1 .0)))
            .map(|(idx, _)| idx)
            .expect("nonempty selection");
        selected.swap_remove(victim);
    }
    leftovers.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut fill = leftovers.into_iter();
    while selected.len() < target {
        let Some(next) = fill.next() else {
            return Err(Error::config(
                "/buffer/beta",
                format!("round(N*beta) = {target} exceeds dataset size {n}"),
            ));
        };
        selected.push(next);
    }

    selected.sort_by(|a, b| a.2.cmp(&b.2).then(a.0.total_cmp(&b.0)).then(a.1.cmp(&b.1)));
    let entries = selected
        .into_iter()
        .map(|(_, i, c)| BufferEntry {
            feature: per_image[i].clone(),
            source_stage,
            cluster_id: c as u32,
        })
        .collect();
    Ok(MemoryBuffer {
        entries,
        tokens: token_shape[0],
        embed_dim: token_shape[1],
    })
}

/// Persist the buffer. Each entry carries its own CRC32; the file ends with
/// a whole-file CRC32 over everything before it.
pub fn save(buffer: &MemoryBuffer, path: &Path) -> Result<()> {
    if buffer.is_empty() {
        return Err(Error::State("refusing to save an empty replay buffer".into()));
    }
    let mut bytes = Vec::new();
    bytes.extend_from_slice(MAGIC);
    bytes.push(VERSION);
    bytes.extend_from_slice(&(buffer.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&(buffer.tokens as u32).to_le_bytes());
    bytes.extend_from_slice(&(buffer.embed_dim as u32).to_le_bytes());
    for entry in &buffer.entries {
        let start = bytes.len();
        bytes.extend_from_slice(&entry.cluster_id.to_le_bytes());
        bytes.extend_from_slice(&entry.source_stage.to_le_bytes());
        for &v in entry.feature.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let crc = crc32fast::hash(&bytes[start..]);
        bytes.extend_from_slice(&crc.to_le_bytes());
    }
    let crc = crc32fast::hash(&bytes);
    bytes.extend_from_slice(&crc.to_le_bytes());
    let mut file = fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<MemoryBuffer> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 17 + 4 {
        return Err(Error::Integrity("buffer file truncated".into()));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::Format(format!(
            "bad buffer magic {:?}, expected {:?}",
            &bytes[0..4],
            MAGIC
        )));
    }
    if bytes[4] != VERSION {
        return Err(Error::Format(format!(
            "unsupported buffer version {}, expected {VERSION}",
            bytes[4]
        )));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let count = u32_at(5) as usize;
    let tokens = u32_at(9) as usize;
    let embed_dim = u32_at(13) as usize;
    let entry_len = 4 + 2 + tokens * embed_dim * 4 + 4;
    let expect_len = 17 + count * entry_len + 4;
    if bytes.len() != expect_len {
        return Err(Error::Integrity(format!(
            "buffer file is {} bytes, expected {expect_len}",
            bytes.len()
        )));
    }
    let file_crc = u32_at(bytes.len() - 4);
    if crc32fast::hash(&bytes[..bytes.len() - 4]) != file_crc {
        return Err(Error::Integrity("buffer file checksum mismatch".into()));
    }
    let mut entries = Vec::with_capacity(count);
    let mut offset = 17;
    for idx in 0..count {
        let start = offset;
        let cluster_id = u32_at(offset);
        offset += 4;
        let source_stage = u16::from_le_bytes(bytes[offset..offset + 2].try_into().unwrap());
        offset += 2;
        let mut data = Vec::with_capacity(tokens * embed_dim);
        for _ in 0..tokens * embed_dim {
            data.push(f32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap()));
            offset += 4;
        }
        let crc = u32_at(offset);
        offset += 4;
        if crc32fast::hash(&bytes[start..offset - 4]) != crc {
            return Err(Error::Integrity(format!("buffer entry {idx} checksum mismatch")));
        }
        entries.push(BufferEntry {
            feature: Tensor::new(vec![tokens, embed_dim], data)?,
            source_stage,
            cluster_id,
        });
    }
    Ok(MemoryBuffer {
        entries,
        tokens,
        embed_dim,
    })
}

/// Draw a teacher batch: without replacement when the buffer is large
/// enough, with replacement otherwise. Deterministic per seed.
pub fn replay_batch(buffer: &MemoryBuffer, batch_size: usize, seed: u64) -> Result<TokenBatch> {
    if buffer.is_empty() {
        return Err(Error::State("replay from an empty buffer".into()));
    }
    if batch_size == 0 {
        return Err(Error::contract("replay_batch: batch_size must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<usize> = if batch_size <= buffer.len() {
        let mut idx: Vec<usize> = (0..buffer.len()).collect();
        idx.shuffle(&mut rng);
        idx.truncate(batch_size);
        idx
    } else {
        (0..batch_size).map(|_| rng.gen_range(0..buffer.len())).collect()
    };
    let samples = picks
        .into_iter()
        .map(|i| buffer.entries[i].feature.clone())
        .collect();
    TokenBatch::new(samples, Role::Teacher)
}
