//! Hyperspectral cubes, label maps, training splits and synthetic scenes.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{precondition, Error, Result};
use crate::tensor::Tensor;

/// A `bands x rows x cols` reflectance cube, band-major.
#[derive(Debug, Clone, PartialEq)]
pub struct HsiCube {
    values: Tensor,
}

impl HsiCube {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 3 {
            return Err(Error::InvalidAxis {
                op: "HsiCube",
                axis: 2,
                rank: values.rank(),
            });
        }
        Ok(Self { values })
    }

    pub fn from_vec(bands: usize, rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(Tensor::from_vec(&[bands, rows, cols], data)?)
    }

    pub fn bands(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn rows(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn cols(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn into_values(self) -> Tensor {
        self.values
    }

    /// Spectrum of pixel `(i, j)`.
    pub fn spectrum(&self, i: usize, j: usize) -> Vec<f64> {
        let plane = self.rows() * self.cols();
        let p = i * self.cols() + j;
        (0..self.bands()).map(|b| self.values.data()[b * plane + p]).collect()
    }

    /// Per-band min-max scaling to `[0, 1]`; constant bands become zeros.
    pub fn normalize(&self) -> HsiCube {
        let plane = self.rows() * self.cols();
        let mut data = self.values.data().to_vec();
        for band in data.chunks_mut(plane) {
            let lo = band.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = band.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let span = hi - lo;
            for v in band.iter_mut() {
                *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
            }
        }
        HsiCube {
            values: Tensor::from_vec(self.values.shape(), data).expect("same shape"),
        }
    }

    /// Network input `[n, 1, B, h, w]` stacking the windows with top-left corners `origins`.
    pub fn crops(&self, origins: &[(usize, usize)], h: usize, w: usize) -> Result<Tensor> {
        let (rows, cols, bands) = (self.rows(), self.cols(), self.bands());
        if origins.is_empty() || h == 0 || w == 0 {
            return Err(precondition("crops: need at least one non-empty window"));
        }
        let src = self.values.data();
        let mut out = Vec::with_capacity(origins.len() * bands * h * w);
        for &(top, left) in origins {
            if top + h > rows || left + w > cols {
                return Err(precondition(format!(
                    "crop {h}x{w} at ({top}, {left}) exceeds {rows}x{cols}"
                )));
            }
            for b in 0..bands {
                for i in top..top + h {
                    let start = (b * rows + i) * cols + left;
                    out.extend_from_slice(&src[start..start + w]);
                }
            }
        }
        Tensor::from_vec(&[origins.len(), 1, bands, h, w], out)
    }

    /// The whole cube as a single-sample network input.
    pub fn as_input(&self) -> Tensor {
        let s = self.values.shape();
        self.values
            .clone()
            .reshaped(&[1, 1, s[0], s[1], s[2]])
            .expect("same length")
    }
}

/// Per-pixel class ids (`0` = unlabeled, `1..=c` = class) plus class names.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    rows: usize,
    cols: usize,
    ids: Vec<u16>,
    class_names: Vec<String>,
}

impl LabelMap {
    pub fn new(rows: usize, cols: usize, ids: Vec<u16>, class_names: Vec<String>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::ZeroExtent(vec![rows, cols]));
        }
        if ids.len() != rows * cols {
            return Err(Error::LengthMismatch {
                shape: vec![rows, cols],
                got: ids.len(),
            });
        }
        if let Some(&bad) = ids.iter().find(|&&id| id as usize > class_names.len()) {
            return Err(Error::LabelOutOfRange {
                label: bad as u32,
                classes: class_names.len(),
            });
        }
        Ok(Self {
            rows,
            cols,
            ids,
            class_names,
        })
    }

    /// Names `class 1 .. class c`.
    pub fn default_names(classes: usize) -> Vec<String> {
        (1..=classes).map(|k| format!("class {k}")).collect()
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn ids(&self) -> &[u16] {
        &self.ids
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Pixel count of each class `1..=c`, at index `class - 1`.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for &id in &self.ids {
            if id > 0 {
                counts[id as usize - 1] += 1;
            }
        }
        counts
    }

    /// Fails with the first declared class that has no pixels.
    pub fn check_nonempty_classes(&self) -> Result<()> {
        match self.class_counts().iter().position(|&n| n == 0) {
            Some(k) => Err(Error::EmptyClass(k as u16 + 1)),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SplitCell {
    Unlabeled,
    Train,
    Test,
}

/// Train/test assignment of every pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitMask {
    rows: usize,
    cols: usize,
    cells: Vec<SplitCell>,
}

impl SplitMask {
    pub fn new(rows: usize, cols: usize, cells: Vec<SplitCell>) -> Result<Self> {
        if cells.len() != rows * cols {
            return Err(Error::LengthMismatch {
                shape: vec![rows, cols],
                got: cells.len(),
            });
        }
        Ok(Self { rows, cols, cells })
    }

    /// Every labeled pixel marked `cell`.
    pub fn uniform(labels: &LabelMap, cell: SplitCell) -> Self {
        let cells = labels
            .ids()
            .iter()
            .map(|&id| if id == 0 { SplitCell::Unlabeled } else { cell })
            .collect();
        Self {
            rows: labels.rows(),
            cols: labels.cols(),
            cells,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn cells(&self) -> &[SplitCell] {
        &self.cells
    }

    /// Requires matching extents and `train ∪ test` to be exactly the labeled pixels.
    pub fn check_against(&self, labels: &LabelMap) -> Result<()> {
        if (self.rows, self.cols) != (labels.rows(), labels.cols()) {
            return Err(Error::ShapeMismatch {
                op: "split",
                left: vec![self.rows, self.cols],
                right: vec![labels.rows(), labels.cols()],
            });
        }
        let bad = self
            .cells
            .iter()
            .zip(labels.ids())
            .position(|(&c, &id)| (c == SplitCell::Unlabeled) != (id == 0));
        match bad {
            Some(p) => Err(precondition(format!(
                "split disagrees with labels at pixel ({}, {})",
                p / self.cols,
                p % self.cols
            ))),
            None => Ok(()),
        }
    }

    /// Labels kept only where the split says `cell`; `0` elsewhere.
    pub fn mask_labels(&self, labels: &LabelMap, cell: SplitCell) -> Vec<u16> {
        self.cells
            .iter()
            .zip(labels.ids())
            .map(|(&c, &id)| if c == cell { id } else { 0 })
            .collect()
    }

    /// Count of `cell` pixels per class `1..=c`.
    pub fn class_counts(&self, labels: &LabelMap, cell: SplitCell) -> Vec<usize> {
        let mut counts = vec![0; labels.num_classes()];
        for (&c, &id) in self.cells.iter().zip(labels.ids()) {
            if c == cell && id > 0 {
                counts[id as usize - 1] += 1;
            }
        }
        counts
    }
}

/// Training-sample selection rule.
#[derive(Debug, Clone, PartialEq)]
pub enum SplitStrategy {
    /// `n` pixels per class. Classes smaller than `n` get `max(1, ceil(0.2 * N_c))`
    /// unless `overrides` names an exact count for that class id.
    PerClass { n: usize, overrides: BTreeMap<u16, usize> },
    /// `ceil(f * N_c)` pixels per class.
    Fraction(f64),
}

/// Share of a class used for training when it has fewer pixels than requested.
pub const SMALL_CLASS_SHARE: f64 = 0.2;

/// Training counts for the four small Indian Pines classes
/// (Alfalfa, Grass-pasture-mowed, Oats, Stone-steel-towers) under 200 per class.
pub const INDIAN_PINES_OVERRIDES: [(u16, usize); 4] = [(1, 10), (7, 6), (9, 10), (16, 9)];

impl SplitStrategy {
    pub fn per_class(n: usize) -> Self {
        SplitStrategy::PerClass {
            n,
            overrides: BTreeMap::new(),
        }
    }

    pub fn indian_pines() -> Self {
        SplitStrategy::PerClass {
            n: 200,
            overrides: INDIAN_PINES_OVERRIDES.into_iter().collect(),
        }
    }

    /// Training pixels for class `class` with `available` labeled pixels.
    pub fn train_count(&self, class: u16, available: usize) -> usize {
        let want = match self {
            SplitStrategy::PerClass { n, overrides } => match overrides.get(&class) {
                Some(&k) => k,
                None if available < *n => (libm::ceil(SMALL_CLASS_SHARE * available as f64) as usize).max(1),
                None => *n,
            },
            // Guard against products like 0.07 * 100 = 7.000000000000001.
            SplitStrategy::Fraction(f) => libm::ceil(f * available as f64 - 1e-9) as usize,
        };
        want.min(available)
    }

    fn validate(&self) -> Result<()> {
        match self {
            SplitStrategy::PerClass { n: 0, .. } => Err(precondition("per-class count must be >= 1")),
            SplitStrategy::Fraction(f) if !(*f > 0.0 && *f <= 1.0) => {
                Err(precondition(format!("fraction must be in (0, 1], got {f}")))
            }
            _ => Ok(()),
        }
    }
}

/// Stratified random split: selected pixels are `Train`, other labeled pixels `Test`.
pub fn sample_split(labels: &LabelMap, strategy: &SplitStrategy, seed: u64) -> Result<SplitMask> {
    strategy.validate()?;
    labels.check_nonempty_classes()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cells = labels
        .ids()
        .iter()
        .map(|&id| if id == 0 { SplitCell::Unlabeled } else { SplitCell::Test })
        .collect::<Vec<_>>();
    for class in 1..=labels.num_classes() as u16 {
        let mut pixels: Vec<usize> = (0..cells.len()).filter(|&p| labels.ids()[p] == class).collect();
        let k = strategy.train_count(class, pixels.len());
        let (chosen, _) = pixels.partial_shuffle(&mut rng, k);
        for &p in chosen.iter() {
            cells[p] = SplitCell::Train;
        }
    }
    SplitMask::new(labels.rows(), labels.cols(), cells)
}

/// Parameters of a synthetic scene.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub classes: usize,
    pub rows: usize,
    pub cols: usize,
    pub bands: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: 3,
            rows: 32,
            cols: 32,
            bands: 20,
            noise: 0.02,
            seed: 0,
        }
    }
}

const BUMPS: usize = 3;

/// Smooth random spectra, one per class: a baseline plus Gaussian bumps.
pub fn synth_signatures<R: Rng + ?Sized>(classes: usize, bands: usize, rng: &mut R) -> Vec<Vec<f64>> {
    (0..classes)
        .map(|_| {
            let bumps: Vec<(f64, f64, f64)> = (0..BUMPS)
                .map(|_| {
                    let center = rng.random_range(0.0..bands as f64);
                    let width = 1.0 + rng.random_range(0.1..0.3) * bands as f64;
                    let height = rng.random_range(0.2..1.0);
                    (center, width, height)
                })
                .collect();
            (0..bands)
                .map(|b| {
                    let x = b as f64;
                    0.1 + bumps
                        .iter()
                        .map(|&(c, w, a)| a * libm::exp(-(x - c) * (x - c) / (2.0 * w * w)))
                        .sum::<f64>()
                })
                .collect()
        })
        .collect()
}

/// Voronoi partition with two seeds per class; every class owns at least its seed pixels.
pub fn voronoi_labels<R: Rng + ?Sized>(classes: usize, rows: usize, cols: usize, rng: &mut R) -> Result<Vec<u16>> {
    let pixels = rows * cols;
    if pixels < classes {
        return Err(precondition(format!(
            "{rows}x{cols} is too small for {classes} classes"
        )));
    }
    let seeds_per_class = if pixels >= 2 * classes { 2 } else { 1 };
    let mut all: Vec<usize> = (0..pixels).collect();
    let (seeds, _) = all.partial_shuffle(rng, seeds_per_class * classes);
    let seeds: Vec<(f64, f64, u16)> = seeds
        .iter()
        .enumerate()
        .map(|(k, &p)| ((p / cols) as f64, (p % cols) as f64, (k % classes) as u16 + 1))
        .collect();
    Ok((0..pixels)
        .map(|p| {
            let (i, j) = ((p / cols) as f64, (p % cols) as f64);
            let mut best = (f64::INFINITY, 0u16);
            for &(si, sj, class) in &seeds {
                let d = (i - si) * (i - si) + (j - sj) * (j - sj);
                if d < best.0 {
                    best = (d, class);
                }
            }
            best.1
        })
        .collect())
}

/// Renders `signatures[id - 1] + N(0, noise)` at every pixel, then normalizes.
pub fn render_scene<R: Rng + ?Sized>(
    ids: &[u16],
    rows: usize,
    cols: usize,
    signatures: &[Vec<f64>],
    noise: f64,
    rng: &mut R,
) -> Result<HsiCube> {
    let bands = signatures.first().map_or(0, Vec::len);
    if !(noise >= 0.0) || !noise.is_finite() {
        return Err(precondition("noise must be finite and >= 0"));
    }
    let normal = Normal::new(0.0, noise).map_err(|_| precondition("invalid noise"))?;
    let plane = rows * cols;
    let mut data = vec![0.0; bands * plane];
    for (p, &id) in ids.iter().enumerate() {
        let sig = &signatures[id as usize - 1];
        for b in 0..bands {
            let n = if noise > 0.0 { normal.sample(rng) } else { 0.0 };
            data[b * plane + p] = sig[b] + n;
        }
    }
    Ok(HsiCube::from_vec(bands, rows, cols, data)?.normalize())
}

/// A normalized synthetic cube with every pixel labeled.
pub fn synth_scene(spec: &SynthSpec) -> Result<(HsiCube, LabelMap)> {
    if spec.classes < 2 {
        return Err(precondition(format!("need at least 2 classes, got {}", spec.classes)));
    }
    if spec.classes > u16::MAX as usize {
        return Err(precondition("too many classes"));
    }
    if spec.bands == 0 || spec.rows == 0 || spec.cols == 0 {
        return Err(Error::ZeroExtent(vec![spec.bands, spec.rows, spec.cols]));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let signatures = synth_signatures(spec.classes, spec.bands, &mut rng);
    let ids = voronoi_labels(spec.classes, spec.rows, spec.cols, &mut rng)?;
    let cube = render_scene(&ids, spec.rows, spec.cols, &signatures, spec.noise, &mut rng)?;
    let labels = LabelMap::new(spec.rows, spec.cols, ids, LabelMap::default_names(spec.classes))?;
    Ok((cube, labels))
}

/// Overall accuracy of a nearest-class-mean classifier fit and scored on every
/// labeled pixel. A cheap separability oracle for generated scenes.
pub fn nearest_centroid_oa(cube: &HsiCube, labels: &LabelMap) -> Result<f64> {
    if (cube.rows(), cube.cols()) != (labels.rows(), labels.cols()) {
        return Err(Error::ShapeMismatch {
            op: "nearest_centroid_oa",
            left: vec![cube.rows(), cube.cols()],
            right: vec![labels.rows(), labels.cols()],
        });
    }
    let (bands, plane, c) = (cube.bands(), cube.rows() * cube.cols(), labels.num_classes());
    let data = cube.values().data();
    let mut sums = vec![vec![0.0; bands]; c];
    let mut counts = vec![0usize; c];
    for (p, &id) in labels.ids().iter().enumerate() {
        if id == 0 {
            continue;
        }
        let k = id as usize - 1;
        counts[k] += 1;
        for b in 0..bands {
            sums[k][b] += data[b * plane + p];
        }
    }
    let centroids: Vec<Option<Vec<f64>>> = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &n)| (n > 0).then(|| s.into_iter().map(|v| v / n as f64).collect()))
        .collect();
    let (mut hits, mut total) = (0usize, 0usize);
    for (p, &id) in labels.ids().iter().enumerate() {
        if id == 0 {
            continue;
        }
        let mut best = (f64::INFINITY, 0);
        for (k, cen) in centroids.iter().enumerate() {
            if let Some(cen) = cen {
                let d: f64 = (0..bands)
                    .map(|b| {
                        let e = data[b * plane + p] - cen[b];
                        e * e
                    })
                    .sum();
                if d < best.0 {
                    best = (d, k + 1);
                }
            }
        }
        total += 1;
        hits += (best.1 == id as usize) as usize;
    }
    if total == 0 {
        return Err(precondition("no labeled pixels"));
    }
    Ok(hits as f64 / total as f64)
}
