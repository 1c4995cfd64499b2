//! Hyperspectral cubes: the HSIC container, patch extraction and synthetic
//! scenes.
//!
//! # HSIC container
//!
//! ```text
//! HSIC 1\n
//! width W\n
//! height H\n
//! bands B\n
//! labels present|absent\n
//! \n
//! W·H·B little-endian f32, band-interleaved-by-pixel, pixels row-major
//! W·H little-endian u16 labels (only when present; 0 = unlabeled)
//! ```

use std::collections::VecDeque;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{orthonormalize_columns, Matrix};
use crate::rng::{stream, Stream};

pub const HSIC_MAGIC: &str = "HSIC 1";

/// Range of the per-pixel subspace coefficients drawn by [`synth_scene`].
pub const SYNTH_COEFF_RANGE: (f64, f64) = (0.0, 1.0);

/// A `width × height × bands` raster with an optional label raster.
#[derive(Clone, Debug, PartialEq)]
pub struct HsiCube {
    width: usize,
    height: usize,
    bands: usize,
    raster: Vec<f32>,
    labels: Option<Vec<u16>>,
}

impl HsiCube {
    pub fn new(
        width: usize,
        height: usize,
        bands: usize,
        raster: Vec<f32>,
        labels: Option<Vec<u16>>,
    ) -> Result<Self> {
        if width == 0 || height == 0 || bands == 0 {
            return Err(Error::contract("cube dimensions must be positive"));
        }
        let pixels = width * height;
        if raster.len() != pixels * bands {
            return Err(Error::Dimension {
                op: "HsiCube::new",
                lhs: (pixels, bands),
                rhs: (raster.len(), 1),
            });
        }
        if let Some(l) = &labels {
            if l.len() != pixels {
                return Err(Error::Dimension {
                    op: "HsiCube::new labels",
                    lhs: (height, width),
                    rhs: (l.len(), 1),
                });
            }
        }
        if let Some(bad) = raster.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(bad));
        }
        Ok(HsiCube {
            width,
            height,
            bands,
            raster,
            labels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn raster(&self) -> &[f32] {
        &self.raster
    }

    pub fn labels(&self) -> Option<&[u16]> {
        self.labels.as_deref()
    }

    /// Spectrum of the pixel at `(row, col)`.
    pub fn spectrum(&self, row: usize, col: usize) -> &[f32] {
        let p = row * self.width + col;
        &self.raster[p * self.bands..(p + 1) * self.bands]
    }

    /// Task mask: true iff the pixel carries a label > 0. A cube without a
    /// label raster has an empty task area.
    pub fn mask(&self) -> Vec<bool> {
        match &self.labels {
            Some(l) => l.iter().map(|&v| v > 0).collect(),
            None => vec![false; self.pixels()],
        }
    }

    /// Raster indices of masked pixels, in raster order.
    pub fn masked_pixels(&self) -> Vec<usize> {
        self.mask()
            .iter()
            .enumerate()
            .filter_map(|(p, &m)| m.then_some(p))
            .collect()
    }

    /// Labels of the masked pixels, in raster order.
    pub fn masked_labels(&self) -> Vec<u16> {
        match &self.labels {
            Some(l) => l.iter().copied().filter(|&v| v > 0).collect(),
            None => Vec::new(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_from(mut reader: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        reader
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io("<reader>", e))?;
        Self::from_bytes(&bytes)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = format!(
            "{HSIC_MAGIC}\nwidth {}\nheight {}\nbands {}\nlabels {}\n\n",
            self.width,
            self.height,
            self.bands,
            if self.labels.is_some() { "present" } else { "absent" }
        );
        let extra = self.labels.as_ref().map_or(0, |l| l.len() * 2);
        let mut out = Vec::with_capacity(header.len() + self.raster.len() * 4 + extra);
        out.extend_from_slice(header.as_bytes());
        for v in &self.raster {
            out.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(l) = &self.labels {
            for v in l {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut next_line = || -> Result<&str> {
            let rest = &bytes[pos..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| Error::MalformedHeader("unterminated header line".into()))?;
            pos += end + 1;
            std::str::from_utf8(&rest[..end])
                .map_err(|_| Error::MalformedHeader("header is not UTF-8".into()))
        };

        let magic = next_line()?;
        if magic != HSIC_MAGIC {
            return Err(Error::MalformedHeader(format!("bad magic line {magic:?}")));
        }
        let mut field = |name: &str| -> Result<String> {
            let line = next_line()?;
            let mut parts = line.splitn(2, ' ');
            match (parts.next(), parts.next()) {
                (Some(k), Some(v)) if k == name => Ok(v.to_string()),
                _ => Err(Error::MalformedHeader(format!(
                    "expected `{name} <value>`, found {line:?}"
                ))),
            }
        };
        let dim = |v: String, name: &str| -> Result<usize> {
            match v.parse::<usize>() {
                Ok(x) if x > 0 => Ok(x),
                _ => Err(Error::MalformedHeader(format!("invalid {name} {v:?}"))),
            }
        };
        let width = dim(field("width")?, "width")?;
        let height = dim(field("height")?, "height")?;
        let bands = dim(field("bands")?, "bands")?;
        let has_labels = match field("labels")?.as_str() {
            "present" => true,
            "absent" => false,
            other => {
                return Err(Error::MalformedHeader(format!(
                    "labels must be present or absent, found {other:?}"
                )))
            }
        };
        if !next_line()?.is_empty() {
            return Err(Error::MalformedHeader("missing blank line after header".into()));
        }

        let pixels = width
            .checked_mul(height)
            .ok_or_else(|| Error::MalformedHeader("dimensions overflow".into()))?;
        let raster_bytes = pixels
            .checked_mul(bands)
            .and_then(|v| v.checked_mul(4))
            .ok_or_else(|| Error::MalformedHeader("dimensions overflow".into()))?;
        let label_bytes = if has_labels { pixels * 2 } else { 0 };
        let payload = &bytes[pos..];
        let expected = raster_bytes + label_bytes;
        if payload.len() < expected {
            return Err(Error::Truncated {
                expected,
                found: payload.len(),
            });
        }
        if payload.len() > expected {
            return Err(Error::MalformedHeader(format!(
                "{} trailing bytes after payload",
                payload.len() - expected
            )));
        }
        let raster: Vec<f32> = payload[..raster_bytes]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let labels = has_labels.then(|| {
            payload[raster_bytes..]
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes([c[0], c[1]]))
                .collect()
        });
        Self::new(width, height, bands, raster, labels)
    }
}

/// Flattened, band-standardized `a × a × b` patches, one per masked pixel.
#[derive(Clone, Debug)]
pub struct PatchSet {
    pub edge: usize,
    pub bands: usize,
    /// `n × (a·a·b)`; row layout is window-row, window-col, band.
    pub patches: Matrix<f32>,
    /// `(row, col)` of each patch center.
    pub coords: Vec<(usize, usize)>,
    pub band_mean: Vec<f64>,
    pub band_std: Vec<f64>,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn features(&self) -> usize {
        self.edge * self.edge * self.bands
    }
}

/// Reflect-101 mirror index (`-1 → 1`, `n → n - 2`).
#[inline]
pub fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i as usize
}

/// Per-band mean and (population) standard deviation over the masked pixels.
/// Constant bands get a divisor of 1.
pub fn band_statistics(cube: &HsiCube) -> (Vec<f64>, Vec<f64>) {
    let b = cube.bands();
    let masked = cube.masked_pixels();
    let mut mean = vec![0.0; b];
    let mut std = vec![1.0; b];
    if masked.is_empty() {
        return (mean, std);
    }
    for &p in &masked {
        for (m, &v) in mean.iter_mut().zip(&cube.raster()[p * b..(p + 1) * b]) {
            *m += v as f64;
        }
    }
    let n = masked.len() as f64;
    for m in mean.iter_mut() {
        *m /= n;
    }
    let mut var = vec![0.0; b];
    for &p in &masked {
        for ((acc, &v), m) in var.iter_mut().zip(&cube.raster()[p * b..(p + 1) * b]).zip(&mean) {
            let d = v as f64 - m;
            *acc += d * d;
        }
    }
    for (s, v) in std.iter_mut().zip(&var) {
        let sd = (v / n).sqrt();
        *s = if sd > 1e-12 { sd } else { 1.0 };
    }
    (mean, std)
}

/// One standardized patch of edge `a` per masked pixel, mirror-padded at the
/// borders.
pub fn extract_patches(cube: &HsiCube, edge: usize) -> Result<PatchSet> {
    if edge % 2 == 0 {
        return Err(Error::contract(format!("patch edge must be odd, got {edge}")));
    }
    let half = edge / 2;
    if half >= cube.width() || half >= cube.height() {
        return Err(Error::contract(format!(
            "patch edge {edge} too large for a {}x{} cube",
            cube.width(),
            cube.height()
        )));
    }
    let (mean, std) = band_statistics(cube);
    let b = cube.bands();
    let (w, h) = (cube.width(), cube.height());
    let standardized: Vec<f32> = cube
        .raster()
        .chunks_exact(b)
        .flat_map(|px| {
            px.iter()
                .zip(mean.iter().zip(&std))
                .map(|(&v, (m, s))| ((v as f64 - m) / s) as f32)
                .collect::<Vec<_>>()
        })
        .collect();

    let masked = cube.masked_pixels();
    let features = edge * edge * b;
    let mut data = Vec::with_capacity(masked.len() * features);
    let mut coords = Vec::with_capacity(masked.len());
    for &p in &masked {
        let (row, col) = (p / w, p % w);
        coords.push((row, col));
        for dr in -(half as isize)..=(half as isize) {
            let r = mirror(row as isize + dr, h);
            for dc in -(half as isize)..=(half as isize) {
                let c = mirror(col as isize + dc, w);
                let q = r * w + c;
                data.extend_from_slice(&standardized[q * b..(q + 1) * b]);
            }
        }
    }
    Ok(PatchSet {
        edge,
        bands: b,
        patches: Matrix::from_vec(masked.len(), features, data)?,
        coords,
        band_mean: mean,
        band_std: std,
    })
}

/// Parameters of a synthetic union-of-subspaces scene.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub bands: usize,
    pub classes: usize,
    pub subspace_dim: usize,
    pub noise: f64,
}

/// Labels of a Voronoi partition of the pixel grid (nearest site, ties to the
/// lowest site index); values are `1..=k`.
fn voronoi_labels(width: usize, height: usize, sites: &[(usize, usize)]) -> Vec<u16> {
    let mut labels = vec![0u16; width * height];
    for r in 0..height {
        for c in 0..width {
            let mut best = (usize::MAX, 0usize);
            for (j, &(sr, sc)) in sites.iter().enumerate() {
                let d = r.abs_diff(sr).pow(2) + c.abs_diff(sc).pow(2);
                if d < best.0 {
                    best = (d, j);
                }
            }
            labels[r * width + c] = best.1 as u16 + 1;
        }
    }
    labels
}

/// Whether every label value occupies exactly one 4-connected component.
pub fn regions_are_4_connected(width: usize, height: usize, labels: &[u16]) -> bool {
    let mut seen = vec![false; labels.len()];
    let mut components = std::collections::HashMap::<u16, usize>::new();
    for start in 0..labels.len() {
        if seen[start] {
            continue;
        }
        let lab = labels[start];
        *components.entry(lab).or_default() += 1;
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(p) = queue.pop_front() {
            let (r, c) = (p / width, p % width);
            let mut visit = |q: usize| {
                if !seen[q] && labels[q] == lab {
                    seen[q] = true;
                    queue.push_back(q);
                }
            };
            if r > 0 {
                visit(p - width);
            }
            if r + 1 < height {
                visit(p + width);
            }
            if c > 0 {
                visit(p - 1);
            }
            if c + 1 < width {
                visit(p + 1);
            }
        }
    }
    components.values().all(|&n| n == 1)
}

/// Random `rows × cols` matrix with orthonormal columns.
pub(crate) fn random_orthonormal(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix<f64> {
    loop {
        let mut m = Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng));
        if orthonormalize_columns(&mut m, 1e-8).is_empty() {
            return m;
        }
    }
}

/// Synthetic scene: `k` contiguous Voronoi regions, class `j` pixels drawn as
/// `U_j c + ε` with `U_j` a random `b × q` orthonormal frame, `c` uniform on
/// [`SYNTH_COEFF_RANGE`] and `ε ~ N(0, σ²)`. Every pixel is labeled.
pub fn synth_scene(spec: &SceneSpec) -> Result<HsiCube> {
    let SceneSpec {
        seed,
        width,
        height,
        bands,
        classes,
        subspace_dim,
        noise,
    } = *spec;
    if classes < 2 {
        return Err(Error::contract("synthetic scene needs at least 2 classes"));
    }
    if subspace_dim == 0 || subspace_dim >= bands {
        return Err(Error::contract(format!(
            "subspace dimension q = {subspace_dim} must satisfy 0 < q < b = {bands}"
        )));
    }
    if width == 0 || height == 0 || width * height < classes * 4 {
        return Err(Error::contract("scene too small for the requested class count"));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::contract("noise deviation must be finite and non-negative"));
    }
    if classes > u16::MAX as usize {
        return Err(Error::contract("too many classes for 16-bit labels"));
    }
    let mut rng = stream(seed, Stream::Synth);

    let pixels = width * height;
    let min_size = (pixels / (4 * classes)).max(1);
    let mut labels = None;
    for _attempt in 0..10_000 {
        let sites: Vec<(usize, usize)> = sample(&mut rng, pixels, classes)
            .iter()
            .map(|p| (p / width, p % width))
            .collect();
        let cand = voronoi_labels(width, height, &sites);
        let mut sizes = vec![0usize; classes];
        for &l in &cand {
            sizes[l as usize - 1] += 1;
        }
        if sizes.iter().all(|&s| s >= min_size) && regions_are_4_connected(width, height, &cand) {
            labels = Some(cand);
            break;
        }
    }
    let labels = labels.ok_or_else(|| {
        Error::Degenerate("could not place well-formed Voronoi regions".into())
    })?;

    let frames: Vec<Matrix<f64>> = (0..classes)
        .map(|_| random_orthonormal(&mut rng, bands, subspace_dim))
        .collect();
    let (lo, hi) = SYNTH_COEFF_RANGE;
    let mut raster = Vec::with_capacity(pixels * bands);
    let mut coeff = vec![0.0; subspace_dim];
    for &l in &labels {
        let u = &frames[l as usize - 1];
        for c in coeff.iter_mut() {
            *c = rng.random_range(lo..hi);
        }
        for band in 0..bands {
            let mut v: f64 = (0..subspace_dim).map(|t| u[(band, t)] * coeff[t]).sum();
            if noise > 0.0 {
                let e: f64 = StandardNormal.sample(&mut rng);
                v += noise * e;
            }
            raster.push(v as f32);
        }
    }
    HsiCube::new(width, height, bands, raster, Some(labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> HsiCube {
        let raster: Vec<f32> = (0..12).map(|v| v as f32).collect();
        HsiCube::new(2, 2, 3, raster, Some(vec![1, 1, 0, 2])).unwrap()
    }

    #[test]
    fn mask_is_label_indicator() {
        let cube = tiny();
        assert_eq!(cube.mask(), vec![true, true, false, true]);
        assert_eq!(cube.masked_pixels().len(), 3);
        let back = HsiCube::from_bytes(&cube.to_bytes()).unwrap();
        assert_eq!(back, cube);
    }

    #[test]
    fn header_reports_band_count() {
        let cube = HsiCube::new(1, 1, 144, vec![0.5; 144], None).unwrap();
        let back = HsiCube::from_bytes(&cube.to_bytes()).unwrap();
        assert_eq!(back.bands(), 144);
        assert!(back.labels().is_none());
    }

    #[test]
    fn short_payload_is_truncation() {
        let bytes = tiny().to_bytes();
        let err = HsiCube::from_bytes(&bytes[..bytes.len() - 9]).unwrap_err();
        assert!(matches!(err, Error::Truncated { .. }), "{err}");
    }

    #[test]
    fn bad_headers_are_rejected() {
        for bad in [
            "HSIC 2\nwidth 1\nheight 1\nbands 1\nlabels absent\n\n",
            "HSIC 1\nwidth 0\nheight 1\nbands 1\nlabels absent\n\n",
            "HSIC 1\nheight 1\nwidth 1\nbands 1\nlabels absent\n\n",
            "HSIC 1\nwidth 1\nheight 1\nbands 1\nlabels maybe\n\n",
            "HSIC 1\nwidth 1\nheight 1\nbands 1\nlabels absent\n",
        ] {
            let mut bytes = bad.as_bytes().to_vec();
            bytes.extend_from_slice(&1.0f32.to_le_bytes());
            assert!(
                matches!(HsiCube::from_bytes(&bytes), Err(Error::MalformedHeader(_))),
                "{bad:?}"
            );
        }
    }

    #[test]
    fn non_finite_payload_is_rejected() {
        let mut cube_bytes = HsiCube::new(1, 2, 1, vec![1.0, 2.0], None).unwrap().to_bytes();
        let n = cube_bytes.len();
        cube_bytes[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(HsiCube::from_bytes(&cube_bytes), Err(Error::NonFinite(1))));
    }

    #[test]
    fn even_patch_edge_is_rejected() {
        assert!(matches!(extract_patches(&tiny(), 2), Err(Error::Contract(_))));
    }

    #[test]
    fn constant_cube_gives_zero_patches() {
        let cube = HsiCube::new(4, 4, 2, vec![3.5; 32], Some(vec![1; 16])).unwrap();
        let ps = extract_patches(&cube, 3).unwrap();
        assert_eq!(ps.len(), 16);
        assert!(ps.patches.data().iter().all(|&v| v == 0.0));
        assert_eq!(ps.band_std, vec![1.0, 1.0]);
    }

    #[test]
    fn unit_patch_is_standardized_center_spectrum() {
        let cube = tiny();
        let ps = extract_patches(&cube, 1).unwrap();
        assert_eq!(ps.coords, vec![(0, 0), (0, 1), (1, 1)]);
        for (i, &(r, c)) in ps.coords.iter().enumerate() {
            for (band, &v) in cube.spectrum(r, c).iter().enumerate() {
                let z = (v as f64 - ps.band_mean[band]) / ps.band_std[band];
                assert!((ps.patches[(i, band)] as f64 - z).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn mirror_reflects_without_repeating_edge() {
        assert_eq!(mirror(-1, 5), 1);
        assert_eq!(mirror(-2, 5), 2);
        assert_eq!(mirror(5, 5), 3);
        assert_eq!(mirror(6, 5), 2);
        assert_eq!(mirror(3, 5), 3);
    }

    #[test]
    fn synth_rejects_bad_subspace_dimension() {
        let spec = SceneSpec {
            seed: 1,
            width: 10,
            height: 10,
            bands: 24,
            classes: 3,
            subspace_dim: 30,
            noise: 0.0,
        };
        assert!(matches!(synth_scene(&spec), Err(Error::Contract(_))));
        let spec = SceneSpec { classes: 1, subspace_dim: 3, ..spec };
        assert!(matches!(synth_scene(&spec), Err(Error::Contract(_))));
    }
}
