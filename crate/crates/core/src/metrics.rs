//! Clustering scores against ground truth and cluster map export.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::data::HsiCube;
use crate::error::{Error, Result};

/// Counts of (predicted id, true id) pairs. Rows follow the sorted distinct
/// predicted ids, columns the sorted distinct true ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContingencyTable {
    pred_ids: Vec<usize>,
    true_ids: Vec<usize>,
    counts: Vec<u64>,
}

impl ContingencyTable {
    pub fn new(pred: &[usize], truth: &[usize]) -> Result<Self> {
        if pred.len() != truth.len() {
            return Err(Error::Dimension {
                op: "contingency",
                lhs: (pred.len(), 1),
                rhs: (truth.len(), 1),
            });
        }
        let ids = |xs: &[usize]| -> BTreeMap<usize, usize> {
            let mut m: BTreeMap<usize, usize> = xs.iter().map(|&x| (x, 0)).collect();
            for (i, v) in m.values_mut().enumerate() {
                *v = i;
            }
            m
        };
        let (pm, tm) = (ids(pred), ids(truth));
        let mut counts = vec![0u64; pm.len() * tm.len()];
        for (p, t) in pred.iter().zip(truth) {
            counts[pm[p] * tm.len() + tm[t]] += 1;
        }
        Ok(ContingencyTable {
            pred_ids: pm.into_keys().collect(),
            true_ids: tm.into_keys().collect(),
            counts,
        })
    }

    /// Table built directly from counts, rows predicted and columns true, with
    /// ids `0..rows` and `0..cols`.
    pub fn from_counts(counts: &[&[u64]]) -> Result<Self> {
        let cols = counts.first().map_or(0, |r| r.len());
        if counts.iter().any(|r| r.len() != cols) {
            return Err(Error::contract("ragged contingency rows"));
        }
        Ok(ContingencyTable {
            pred_ids: (0..counts.len()).collect(),
            true_ids: (0..cols).collect(),
            counts: counts.iter().flat_map(|r| r.iter().copied()).collect(),
        })
    }

    pub fn pred_ids(&self) -> &[usize] {
        &self.pred_ids
    }

    pub fn true_ids(&self) -> &[usize] {
        &self.true_ids
    }

    pub fn get(&self, p: usize, t: usize) -> u64 {
        self.counts[p * self.true_ids.len() + t]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        (0..self.pred_ids.len())
            .map(|p| (0..self.true_ids.len()).map(|t| self.get(p, t)).sum())
            .collect()
    }

    pub fn col_sums(&self) -> Vec<u64> {
        (0..self.true_ids.len())
            .map(|t| (0..self.pred_ids.len()).map(|p| self.get(p, t)).sum())
            .collect()
    }

    /// One-to-one row→column matching maximizing the matched count. Rows left
    /// over when there are more predicted ids than true ids map to `None`.
    pub fn best_matching(&self) -> Vec<Option<usize>> {
        let (rows, cols) = (self.pred_ids.len(), self.true_ids.len());
        let n = rows.max(cols);
        let cost: Vec<Vec<i64>> = (0..n)
            .map(|p| {
                (0..n)
                    .map(|t| if p < rows && t < cols { -(self.get(p, t) as i64) } else { 0 })
                    .collect()
            })
            .collect();
        hungarian(&cost)
            .into_iter()
            .take(rows)
            .map(|t| (t < cols).then_some(t))
            .collect()
    }

    pub fn matched_count(&self, matching: &[Option<usize>]) -> u64 {
        matching
            .iter()
            .enumerate()
            .filter_map(|(p, t)| t.map(|t| self.get(p, t)))
            .sum()
    }

    /// Natural-log normalized mutual information `2I / (H_pred + H_true)`.
    pub fn nmi(&self) -> f64 {
        let n = self.total() as f64;
        if n == 0.0 {
            return 0.0;
        }
        let entropy = |sums: &[u64]| -> f64 {
            sums.iter()
                .filter(|&&c| c > 0)
                .map(|&c| {
                    let p = c as f64 / n;
                    -p * p.ln()
                })
                .sum()
        };
        let (rs, cs) = (self.row_sums(), self.col_sums());
        let (hp, ht) = (entropy(&rs), entropy(&cs));
        if hp + ht == 0.0 {
            // Both partitions are a single cluster, hence identical.
            return 1.0;
        }
        let mut mi = 0.0;
        for p in 0..rs.len() {
            for t in 0..cs.len() {
                let c = self.get(p, t);
                if c > 0 {
                    let c = c as f64;
                    mi += c / n * (c * n / (rs[p] as f64 * cs[t] as f64)).ln();
                }
            }
        }
        (2.0 * mi / (hp + ht)).clamp(0.0, 1.0)
    }
}

/// Minimum-cost perfect assignment on a square cost matrix (Kuhn–Munkres with
/// potentials). Returns the column assigned to each row.
pub fn hungarian(cost: &[Vec<i64>]) -> Vec<usize> {
    let n = cost.len();
    const INF: i64 = i64::MAX / 4;
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut col0 = 0;
        let mut minv = vec![INF; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col0] = true;
            let r0 = owner[col0];
            let mut delta = INF;
            let mut col1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[r0 - 1][j - 1] - u[r0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = col0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        col1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            col0 = col1;
            if owner[col0] == 0 {
                break;
            }
        }
        loop {
            let prev = way[col0];
            owner[col0] = owner[prev];
            col0 = prev;
            if col0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0usize; n];
    for j in 1..=n {
        if owner[j] > 0 {
            out[owner[j] - 1] = j - 1;
        }
    }
    out
}

/// Overall accuracy under the best one-to-one relabeling of `pred`.
pub fn overall_accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let table = ContingencyTable::new(pred, truth)?;
    let n = table.total();
    if n == 0 {
        return Ok(0.0);
    }
    Ok(table.matched_count(&table.best_matching()) as f64 / n as f64)
}

pub fn nmi(pred: &[usize], truth: &[usize]) -> Result<f64> {
    Ok(ContingencyTable::new(pred, truth)?.nmi())
}

/// Cohen's kappa of predictions already expressed in the truth's label ids.
pub fn kappa(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let table = ContingencyTable::new(pred, truth)?;
    let n = table.total() as f64;
    if n == 0.0 {
        return Ok(0.0);
    }
    let agree = pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64;
    let po = agree / n;
    let rs = table.row_sums();
    let cs = table.col_sums();
    let mut pe = 0.0;
    for (pi, &pid) in table.pred_ids().iter().enumerate() {
        if let Ok(ti) = table.true_ids().binary_search(&pid) {
            pe += rs[pi] as f64 * cs[ti] as f64;
        }
    }
    pe /= n * n;
    if pe >= 1.0 {
        return Ok(if po == 1.0 { 1.0 } else { 0.0 });
    }
    Ok((po - pe) / (1.0 - pe))
}

/// `pred` relabeled to the truth id it is matched with; unmatched clusters get
/// `usize::MAX`.
pub fn apply_matching(pred: &[usize], truth: &[usize]) -> Result<Vec<usize>> {
    let table = ContingencyTable::new(pred, truth)?;
    let matching = table.best_matching();
    let map: BTreeMap<usize, usize> = table
        .pred_ids()
        .iter()
        .zip(&matching)
        .map(|(&p, t)| (p, t.map_or(usize::MAX, |t| table.true_ids()[t])))
        .collect();
    Ok(pred.iter().map(|p| map[p]).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scores {
    pub oa: f64,
    pub nmi: f64,
    pub kappa: f64,
    /// `(true id, fraction of its pixels labeled correctly after matching)`.
    pub per_class: Vec<(usize, f64)>,
}

impl Scores {
    pub fn compute(pred: &[usize], truth: &[usize]) -> Result<Self> {
        let matched = apply_matching(pred, truth)?;
        let table = ContingencyTable::new(pred, truth)?;
        let n = table.total().max(1) as f64;
        let correct = matched.iter().zip(truth).filter(|(p, t)| p == t).count();
        let mut per_class = Vec::new();
        for &c in table.true_ids() {
            let (hit, all) = matched
                .iter()
                .zip(truth)
                .filter(|(_, &t)| t == c)
                .fold((0usize, 0usize), |(h, a), (p, _)| (h + (*p == c) as usize, a + 1));
            per_class.push((c, hit as f64 / all as f64));
        }
        Ok(Scores {
            oa: correct as f64 / n,
            nmi: table.nmi(),
            kappa: kappa(&matched, truth)?,
            per_class,
        })
    }

    pub fn report(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "OA     {:.4}", self.oa);
        let _ = writeln!(s, "NMI    {:.4}", self.nmi);
        let _ = writeln!(s, "Kappa  {:.4}", self.kappa);
        for (c, acc) in &self.per_class {
            let _ = writeln!(s, "class {c:>3}  {acc:.4}");
        }
        s
    }
}

/// Colors for class ids `1..=16`.
pub const DEFAULT_PALETTE: [[u8; 3]; 16] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [220, 190, 255],
    [170, 110, 40],
    [255, 250, 200],
    [128, 0, 0],
    [170, 255, 195],
];

/// Binary pixmap of the cube's grid. `labels` holds one id in `1..` per masked
/// pixel in raster order, drawn as `palette[id - 1]`; unmasked pixels are
/// black.
pub fn export_map(labels: &[u16], cube: &HsiCube, palette: &[[u8; 3]]) -> Result<Vec<u8>> {
    let mask = cube.mask();
    let masked = mask.iter().filter(|&&m| m).count();
    if labels.len() != masked {
        return Err(Error::Dimension {
            op: "export_map",
            lhs: (labels.len(), 1),
            rhs: (masked, 1),
        });
    }
    let top = labels.iter().copied().max().unwrap_or(0) as usize;
    if top > palette.len() {
        return Err(Error::Config(format!(
            "palette has {} colors but labels reach {top}",
            palette.len()
        )));
    }
    if labels.contains(&0) {
        return Err(Error::contract("map labels start at 1"));
    }
    let mut out = format!("P6\n{} {}\n255\n", cube.width(), cube.height()).into_bytes();
    let mut next = labels.iter();
    for &m in &mask {
        let rgb = if m {
            palette[*next.next().expect("counted") as usize - 1]
        } else {
            [0, 0, 0]
        };
        out.extend_from_slice(&rgb);
    }
    Ok(out)
}

pub fn write_map(path: impl AsRef<Path>, labels: &[u16], cube: &HsiCube, palette: &[[u8; 3]]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, export_map(labels, cube, palette)?).map_err(|e| Error::io(path, e))
}

/// Parses a binary pixmap with maxval 255 into `(width, height, pixels)`.
pub fn parse_ppm(bytes: &[u8]) -> Result<(usize, usize, Vec<[u8; 3]>)> {
    let bad = |m: &str| Error::MalformedHeader(format!("pixmap: {m}"));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("short header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?);
    }
    pos += 1;
    if fields[0] != "P6" || fields[3] != "255" {
        return Err(bad("expected P6 with maxval 255"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("height"))?;
    let body = bytes.get(pos..).unwrap_or(&[]);
    if body.len() != 3 * w * h {
        return Err(Error::Truncated {
            expected: 3 * w * h,
            found: body.len(),
        });
    }
    Ok((w, h, body.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()))
}
