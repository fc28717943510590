//! Synthetic dual-window dataset generation and image ingestion.
//!
//! Each image index owns one latent intensity field on a [-1000, 1000]
//! scale; the field is rendered twice under two window settings (center /
//! width), producing two domains that share semantics but differ sharply in
//! appearance. Class identity is encoded by the number of bright blobs, so
//! even a linear probe on pooled pixels can recover it.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Intensity window: values in [center - width/2, center + width/2] map
/// linearly onto [0, 1]; everything outside clamps.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct WindowSpec {
    pub center: f32,
    pub width: f32,
}

impl WindowSpec {
    /// Narrow soft-tissue-like window: background crushed to black.
    pub fn domain1_default() -> Self {
        WindowSpec {
            center: 40.0,
            width: 400.0,
        }
    }

    /// Wide air-range-like window: background texture stays visible.
    pub fn domain2_default() -> Self {
        WindowSpec {
            center: -600.0,
            width: 1500.0,
        }
    }
}

pub fn window_transform(latent: &Tensor, w: &WindowSpec) -> Result<Tensor> {
    if w.width <= 0.0 {
        return Err(Error::config(
            "/data/window/width",
            format!("window width {} must be > 0", w.width),
        ));
    }
    let lo = w.center - w.width / 2.0;
    Ok(Tensor::new(
        latent.shape().to_vec(),
        latent
            .data()
            .iter()
            .map(|&x| ((x - lo) / w.width).clamp(0.0, 1.0))
            .collect(),
    )?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthDatasetSpec {
    pub n_images: usize,
    pub height: usize,
    pub width: usize,
    pub n_classes: usize,
    pub domain1: WindowSpec,
    pub domain2: WindowSpec,
    pub seed: u64,
}

impl SynthDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_images == 0 {
            return Err(Error::config("/data/n_images", "need at least one image"));
        }
        if self.n_classes < 2 {
            return Err(Error::config("/data/n_classes", "need at least two classes"));
        }
        if self.n_images < self.n_classes {
            return Err(Error::config(
                "/data/n_images",
                format!("{} images cannot cover {} classes", self.n_images, self.n_classes),
            ));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::config("/data/height", "image sides must be positive"));
        }
        if self.domain1.width <= 0.0 || self.domain2.width <= 0.0 {
            return Err(Error::config("/data/window/width", "window width must be > 0"));
        }
        Ok(())
    }
}

/// Latent field for one image: textured background around -700 with
/// class-dependent count of bright blobs near +50.
fn latent_field(spec: &SynthDatasetSpec, class: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let (h, w) = (spec.height, spec.width);
    let mut field: Vec<f32> = (0..h * w)
        .map(|_| -700.0 + rng.gen_range(-120.0..120.0))
        .collect();
    // Class c carries 2 + 3c blobs; more blobs -> brighter pooled image.
    let blobs = 2 + 3 * class;
    for _ in 0..blobs {
        let cy = rng.gen_range(0.0..h as f32);
        let cx = rng.gen_range(0.0..w as f32);
        let radius = rng.gen_range(1.5..2.5f32);
        for y in 0..h {
            for x in 0..w {
                let d2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
                let bump = 750.0 * (-d2 / (2.0 * radius * radius)).exp();
                let v = &mut field[y * w + x];
                *v = (*v + bump).min(80.0);
            }
        }
    }
    Tensor::new(vec![h, w], field).expect("sized to h*w")
}

/// One manifest row.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestRow {
    pub path: String,
    pub label: usize,
    pub domain: u32,
}

/// Render the dataset to `out_dir`: PGM images plus `manifest.csv` with
/// columns (path, label, domain). Refuses a non-empty directory unless
/// `force` is set. Deterministic per spec seed.
pub fn generate_synth(spec: &SynthDatasetSpec, out_dir: &Path, force: bool) -> Result<()> {
    spec.validate()?;
    if out_dir.exists() && out_dir.read_dir()?.next().is_some() {
        if !force {
            return Err(Error::State(format!(
                "output directory {} is not empty (use --force to overwrite)",
                out_dir.display()
            )));
        }
        fs::remove_dir_all(out_dir)?;
    }
    fs::create_dir_all(out_dir.join("images"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut rows = Vec::with_capacity(spec.n_images * 2);
    for i in 0..spec.n_images {
        let class = i % spec.n_classes;
        let latent = latent_field(spec, class, &mut rng);
        for (domain, window) in [(1u32, &spec.domain1), (2u32, &spec.domain2)] {
            let img = window_transform(&latent, window)?;
            let rel = format!("images/d{domain}_{i:05}.pgm");
            write_pgm(&img, &out_dir.join(&rel))?;
            rows.push(ManifestRow {
                path: rel,
                label: class,
                domain,
            });
        }
    }

    let mut writer = csv::Writer::from_path(out_dir.join("manifest.csv"))?;
    for r in &rows {
        writer.serialize(r)?;
    }
    writer.flush()?;
    Ok(())
}

/// Write an 8-bit binary PGM (P5). Input must already lie in [0, 1].
pub fn write_pgm(img: &Tensor, path: &Path) -> Result<()> {
    let shape = img.shape();
    if shape.len() != 2 {
        return Err(Error::Shape {
            op: "write_pgm",
            lhs: shape.to_vec(),
            rhs: vec![],
        });
    }
    let (h, w) = (shape[0], shape[1]);
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    for &v in img.data() {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Numeric(format!("pgm pixel {v} outside [0,1]")));
        }
        bytes.push((v * 255.0).round() as u8);
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(())
}

struct PgmCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> PgmCursor<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.pos,
            msg: msg.into(),
        }
    }

    fn skip_whitespace(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self) -> Result<usize> {
        self.skip_whitespace();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(|b| b.is_ascii_digit()) {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.err("expected an ASCII decimal number"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("digits are utf8")
            .parse()
            .map_err(|e| self.err(format!("bad number: {e}")))
    }
}

/// Read an 8-bit binary PGM into an H×W tensor normalized to [0, 1].
pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let mut cur = PgmCursor {
        bytes: &bytes,
        pos: 0,
    };
    if bytes.len() < 2 || &bytes[0..2] != b"P5" {
        return Err(cur.err(format!(
            "expected magic \"P5\", found {:?}",
            String::from_utf8_lossy(&bytes[..bytes.len().min(2)])
        )));
    }
    cur.pos = 2;
    let w = cur.number()?;
    let h = cur.number()?;
    let maxval = cur.number()?;
    if maxval == 0 || maxval > 255 {
        return Err(cur.err(format!("maxval {maxval} outside 1..=255")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if !bytes.get(cur.pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(cur.err("expected single whitespace before raster"));
    }
    cur.pos += 1;
    if bytes.len() - cur.pos != h * w {
        return Err(Error::Parse {
            offset: cur.pos,
            msg: format!(
                "raster holds {} bytes, expected {}",
                bytes.len() - cur.pos,
                h * w
            ),
        });
    }
    let data = bytes[cur.pos..]
        .iter()
        .map(|&b| b as f32 / maxval as f32)
        .collect();
    Tensor::new(vec![h, w], data)
}

/// In-memory labeled dataset; images are H×W tensors in [0, 1].
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub domains: Vec<u32>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.labels.iter().copied().max().map_or(0, |m| m + 1)
    }

    pub fn filter_domain(&self, domain: u32) -> Dataset {
        let keep: Vec<usize> = (0..self.len())
            .filter(|&i| self.domains[i] == domain)
            .collect();
        Dataset {
            images: keep.iter().map(|&i| self.images[i].clone()).collect(),
            labels: keep.iter().map(|&i| self.labels[i]).collect(),
            domains: keep.iter().map(|&i| self.domains[i]).collect(),
        }
    }
}

/// Load a dataset directory (manifest.csv + PGM files), validating image
/// dimensions against `(height, width)` when given.
pub fn ingest(dir: &Path, expect: Option<(usize, usize)>) -> Result<Dataset> {
    let manifest = dir.join("manifest.csv");
    let mut reader = csv::Reader::from_path(&manifest)?;
    let mut out = Dataset {
        images: Vec::new(),
        labels: Vec::new(),
        domains: Vec::new(),
    };
    for row in reader.deserialize::<ManifestRow>() {
        let row = row?;
        let img = read_pgm(&dir.join(&row.path))?;
        if let Some((h, w)) = expect {
            if img.shape() != [h, w] {
                return Err(Error::Shape {
                    op: "ingest",
                    lhs: img.shape().to_vec(),
                    rhs: vec![h, w],
                });
            }
        }
        out.images.push(img);
        out.labels.push(row.label);
        out.domains.push(row.domain);
    }
    if out.is_empty() {
        return Err(Error::State(format!("{} lists no images", manifest.display())));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn small_spec(seed: u64) -> SynthDatasetSpec {
        SynthDatasetSpec {
            n_images: 60,
            height: 16,
            width: 16,
            n_classes: 2,
            domain1: WindowSpec::domain1_default(),
            domain2: WindowSpec::domain2_default(),
            seed,
        }
    }

    #[test]
    fn window_midpoint_and_clamps() {
        let w = WindowSpec {
            center: 40.0,
            width: 400.0,
        };
        let latent = Tensor::new(vec![1, 4], vec![40.0, -160.0, 240.0, 140.0]).unwrap();
        let out = window_transform(&latent, &w).unwrap();
        assert_eq!(out.data(), &[0.5, 0.0, 1.0, 0.75]);
        let below = Tensor::new(vec![1, 1], vec![-5000.0]).unwrap();
        assert_eq!(window_transform(&below, &w).unwrap().data(), &[0.0]);
    }

    #[test]
    fn window_rejects_nonpositive_width() {
        let latent = Tensor::zeros(vec![2, 2]);
        let w = WindowSpec {
            center: 0.0,
            width: 0.0,
        };
        assert!(window_transform(&latent, &w).is_err());
    }

    #[test]
    fn pgm_round_trip_and_endpoints() {
        let img = Tensor::new(vec![2, 3], vec![0.0, 1.0, 0.5, 0.25, 0.75, 1.0]).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("x.pgm");
        write_pgm(&img, &path).unwrap();
        let back = read_pgm(&path).unwrap();
        assert_eq!(back.shape(), &[2, 3]);
        assert_eq!(back.data()[0], 0.0);
        assert_eq!(back.data()[1], 1.0); // maxval pixel -> exactly 1.0
        for (a, b) in img.data().iter().zip(back.data()) {
            // Quantization error bound, with slack for f32 rounding.
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn pgm_rejects_ascii_variant() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("x.pgm");
        fs::write(&path, b"P2\n2 2\n255\n0 0 0 0\n").unwrap();
        let err = read_pgm(&path).unwrap_err().to_string();
        assert!(err.contains("P5"), "{err}");
    }

    #[test]
    fn pgm_truncation_reports_offset() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("x.pgm");
        fs::write(&path, b"P5\n4 4\n255\n0123").unwrap();
        match read_pgm(&path) {
            Err(Error::Parse { offset, msg }) => {
                assert_eq!(offset, 11);
                assert!(msg.contains("expected 16"), "{msg}");
            }
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn generate_is_deterministic_and_counts_match() {
        let dir_a = tempdir().unwrap();
        let dir_b = tempdir().unwrap();
        let spec = small_spec(5);
        generate_synth(&spec, dir_a.path(), false).unwrap();
        generate_synth(&spec, dir_b.path(), false).unwrap();
        let manifest_a = fs::read(dir_a.path().join("manifest.csv")).unwrap();
        let manifest_b = fs::read(dir_b.path().join("manifest.csv")).unwrap();
        assert_eq!(manifest_a, manifest_b);
        let ds = ingest(dir_a.path(), Some((16, 16))).unwrap();
        assert_eq!(ds.len(), 120); // 2 domains x 60
        assert_eq!(ds.n_classes(), 2);
        // Spot-check one image is bitwise identical across the two runs.
        let img_a = fs::read(dir_a.path().join("images/d1_00007.pgm")).unwrap();
        let img_b = fs::read(dir_b.path().join("images/d1_00007.pgm")).unwrap();
        assert_eq!(img_a, img_b);
    }

    #[test]
    fn generate_refuses_nonempty_dir_without_force() {
        let dir = tempdir().unwrap();
        fs::write(dir.path().join("stale"), b"x").unwrap();
        let spec = small_spec(1);
        assert!(matches!(
            generate_synth(&spec, dir.path(), false),
            Err(Error::State(_))
        ));
        generate_synth(&spec, dir.path(), true).unwrap();
        assert!(!dir.path().join("stale").exists());
    }

    #[test]
    fn domains_share_labels_but_not_histograms() {
        let dir = tempdir().unwrap();
        generate_synth(&small_spec(3), dir.path(), false).unwrap();
        let ds = ingest(dir.path(), None).unwrap();
        let d1 = ds.filter_domain(1);
        let d2 = ds.filter_domain(2);
        assert_eq!(d1.labels, d2.labels);

        // Wasserstein-1 between the two pixel histograms.
        let bins = 64usize;
        let hist = |d: &Dataset| {
            let mut h = vec![0.0f64; bins];
            let mut total = 0.0;
            for img in &d.images {
                for &v in img.data() {
                    let b = ((v * bins as f32) as usize).min(bins - 1);
                    h[b] += 1.0;
                    total += 1.0;
                }
            }
            h.iter().map(|x| x / total).collect::<Vec<_>>()
        };
        let (h1, h2) = (hist(&d1), hist(&d2));
        let mut cdf_gap = 0.0f64;
        let mut w1 = 0.0f64;
        for b in 0..bins {
            cdf_gap += h1[b] - h2[b];
            w1 += cdf_gap.abs() / bins as f64;
        }
        assert!(w1 > 0.05, "W1 = {w1}");
    }

    #[test]
    fn linear_probe_on_pooled_pixels_separates_classes() {
        let mut spec = small_spec(11);
        spec.n_images = 120;
        let dir = tempdir().unwrap();
        generate_synth(&spec, dir.path(), false).unwrap();
        let d1 = ingest(dir.path(), None).unwrap().filter_domain(1);
        let pooled: Vec<f32> = d1.images.iter().map(|img| img.mean().item()).collect();
        let (train, test): (Vec<usize>, Vec<usize>) =
            (0..d1.len()).partition(|&i| i % 2 == 0);
        let class_mean = |c: usize| {
            let vals: Vec<f32> = train
                .iter()
                .filter(|&&i| d1.labels[i] == c)
                .map(|&i| pooled[i])
                .collect();
            vals.iter().sum::<f32>() / vals.len() as f32
        };
        let (m0, m1) = (class_mean(0), class_mean(1));
        let threshold = (m0 + m1) / 2.0;
        let positive_is_high = m1 > m0;
        let correct = test
            .iter()
            .filter(|&&i| {
                let pred = if (pooled[i] > threshold) == positive_is_high {
                    1
                } else {
                    0
                };
                pred == d1.labels[i]
            })
            .count();
        let acc = correct as f64 / test.len() as f64;
        assert!(acc > 0.8, "probe accuracy {acc}");
    }

    #[test]
    fn ingest_validates_dimensions() {
        let dir = tempdir().unwrap();
        generate_synth(&small_spec(2), dir.path(), false).unwrap();
        assert!(matches!(
            ingest(dir.path(), Some((8, 8))),
            Err(Error::Shape { .. })
        ));
    }
}
