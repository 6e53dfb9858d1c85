//! Domain-tagged embedding datasets: the text file format, the P-way Q-shot
//! minority subsampling, and a seeded synthetic domain-shift generator.
//!
//! File layout (UTF-8):
//!
//! ```text
//! #fkt v1 n=<rows> d=<dim> c=<classes> domain=<source|target>
//! <label|->\t<v_0> <v_1> ... <v_{d-1}>
//! ```
//!
//! Values are written with the shortest representation that parses back to
//! the same `f64`, so a write/read cycle is lossless.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::index;

use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Domain {
    Source,
    Target,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Source => "source",
            Domain::Target => "target",
        })
    }
}

impl FromStr for Domain {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            other => Err(format!("unknown domain `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDataset {
    domain: Domain,
    embeddings: Array2<f64>,
    labels: Vec<Option<usize>>,
    class_count: usize,
}

impl EmbeddingDataset {
    pub fn new(
        domain: Domain,
        embeddings: Array2<f64>,
        labels: Vec<Option<usize>>,
        class_count: usize,
    ) -> Result<Self> {
        let (n, d) = embeddings.dim();
        if n == 0 {
            return Err(Error::invalid("dataset has no rows"));
        }
        if d == 0 {
            return Err(Error::invalid("embedding dimension must be at least 1"));
        }
        if class_count < 2 {
            return Err(Error::invalid("class count must be at least 2"));
        }
        if labels.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: labels.len(),
            });
        }
        if let Some((i, _)) = embeddings
            .rows()
            .into_iter()
            .enumerate()
            .find(|(_, r)| r.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::NonFinite(format!("embedding row {i}")));
        }
        for (i, l) in labels.iter().enumerate() {
            match l {
                Some(c) if *c >= class_count => {
                    return Err(Error::invalid(format!(
                        "row {i}: label {c} outside [0, {class_count})"
                    )))
                }
                None if domain == Domain::Source => {
                    return Err(Error::invalid(format!("source row {i} is unlabeled")))
                }
                _ => {}
            }
        }
        Ok(Self {
            domain,
            embeddings,
            labels,
            class_count,
        })
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn embeddings(&self) -> ArrayView2<'_, f64> {
        self.embeddings.view()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.embeddings.row(i)
    }

    pub fn labels(&self) -> &[Option<usize>] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> Option<usize> {
        self.labels[i]
    }

    /// All labels, if every row is labeled.
    pub fn dense_labels(&self) -> Option<Vec<usize>> {
        self.labels.iter().copied().collect()
    }

    pub fn is_fully_labeled(&self) -> bool {
        self.labels.iter().all(Option::is_some)
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn len(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn rows_of_class(&self, class: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| **l == Some(class))
            .map(|(i, _)| i)
            .collect()
    }

    /// New dataset holding the given rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        let embeddings = self.embeddings.select(Axis(0), rows);
        let labels = rows.iter().map(|&i| self.labels[i]).collect();
        Self::new(self.domain, embeddings, labels, self.class_count)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.len() * (self.dim() * 20 + 4));
        let _ = writeln!(
            out,
            "#fkt v1 n={} d={} c={} domain={}",
            self.len(),
            self.dim(),
            self.class_count,
            self.domain
        );
        for (row, label) in self.embeddings.rows().into_iter().zip(&self.labels) {
            match label {
                Some(c) => {
                    let _ = write!(out, "{c}");
                }
                None => out.push('-'),
            }
            out.push('\t');
            write_values(&mut out, row);
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

pub(crate) fn write_values(out: &mut String, row: ArrayView1<'_, f64>) {
    for (j, v) in row.iter().enumerate() {
        if j > 0 {
            out.push(' ');
        }
        let _ = write!(out, "{v}");
    }
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<EmbeddingDataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_dataset(&text, path)
}

struct Header {
    n: usize,
    d: usize,
    c: usize,
    domain: Domain,
}

fn parse_header(line: &str) -> std::result::Result<Header, String> {
    let mut parts = line.split_whitespace();
    if parts.next() != Some("#fkt") {
        return Err("header must start with `#fkt`".into());
    }
    if parts.next() != Some("v1") {
        return Err("unsupported format version (expected v1)".into());
    }
    let (mut n, mut d, mut c, mut domain) = (None, None, None, None);
    for kv in parts {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| format!("malformed header field `{kv}`"))?;
        let bad = |e: std::num::ParseIntError| format!("header field `{k}`: {e}");
        match k {
            "n" => n = Some(v.parse::<usize>().map_err(bad)?),
            "d" => d = Some(v.parse::<usize>().map_err(bad)?),
            "c" => c = Some(v.parse::<usize>().map_err(bad)?),
            "domain" => domain = Some(v.parse::<Domain>()?),
            other => return Err(format!("unknown header field `{other}`")),
        }
    }
    let missing = |f: &str| format!("header is missing `{f}=`");
    Ok(Header {
        n: n.ok_or_else(|| missing("n"))?,
        d: d.ok_or_else(|| missing("d"))?,
        c: c.ok_or_else(|| missing("c"))?,
        domain: domain.ok_or_else(|| missing("domain"))?,
    })
}

pub fn parse_dataset(text: &str, path: &Path) -> Result<EmbeddingDataset> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, first) = lines
        .next()
        .ok_or_else(|| err(1, "empty file".to_string()))?;
    let header = parse_header(first).map_err(|m| err(1, m))?;
    if header.n == 0 {
        return Err(err(1, "n must be at least 1".into()));
    }
    if header.d == 0 {
        return Err(err(1, "d must be at least 1".into()));
    }
    if header.c < 2 {
        return Err(err(1, "c must be at least 2".into()));
    }

    let mut values = Vec::with_capacity(header.n * header.d);
    let mut labels = Vec::with_capacity(header.n);
    let mut last_line = 1;
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        last_line = lineno;
        if labels.len() == header.n {
            return Err(err(lineno, format!("more than n={} rows", header.n)));
        }
        let (label, rest) = line
            .split_once('\t')
            .ok_or_else(|| err(lineno, "expected `<label>\\t<values>`".into()))?;
        let label = match label.trim() {
            "-" => None,
            s => {
                let c: usize = s
                    .parse()
                    .map_err(|e| err(lineno, format!("bad label `{s}`: {e}")))?;
                if c >= header.c {
                    return Err(err(lineno, format!("label {c} >= c={}", header.c)));
                }
                Some(c)
            }
        };
        let before = values.len();
        for tok in rest.split_whitespace() {
            let v: f64 = tok
                .parse()
                .map_err(|e| err(lineno, format!("bad value `{tok}`: {e}")))?;
            if !v.is_finite() {
                return Err(err(lineno, format!("non-finite value `{tok}`")));
            }
            values.push(v);
        }
        let width = values.len() - before;
        if width != header.d {
            return Err(err(
                lineno,
                format!("row has {width} values, expected d={}", header.d),
            ));
        }
        labels.push(label);
    }
    if labels.len() != header.n {
        return Err(err(
            last_line,
            format!("expected n={} rows, found {}", header.n, labels.len()),
        ));
    }
    if header.domain == Domain::Source {
        if let Some(i) = labels.iter().position(Option::is_none) {
            return Err(err(i + 2, "source rows must be labeled".into()));
        }
    }
    let embeddings =
        Array2::from_shape_vec((header.n, header.d), values).expect("row widths checked above");
    EmbeddingDataset::new(header.domain, embeddings, labels, header.c)
}

/// Which classes are few-shot and how many source rows they keep.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSpec {
    minority: Vec<usize>,
    shots: usize,
    class_count: usize,
}

impl SplitSpec {
    pub fn new(minority: Vec<usize>, shots: usize, class_count: usize) -> Result<Self> {
        if shots == 0 {
            return Err(Error::invalid("shots must be at least 1"));
        }
        let mut seen = vec![false; class_count];
        for &c in &minority {
            if c >= class_count {
                return Err(Error::invalid(format!(
                    "minority class {c} outside [0, {class_count})"
                )));
            }
            if std::mem::replace(&mut seen[c], true) {
                return Err(Error::invalid(format!("minority class {c} listed twice")));
            }
        }
        Ok(Self {
            minority,
            shots,
            class_count,
        })
    }

    pub fn minority_classes(&self) -> &[usize] {
        &self.minority
    }

    pub fn majority_classes(&self) -> Vec<usize> {
        (0..self.class_count)
            .filter(|c| !self.minority.contains(c))
            .collect()
    }

    pub fn is_minority(&self, class: usize) -> bool {
        self.minority.contains(&class)
    }

    pub fn shots(&self) -> usize {
        self.shots
    }

    pub fn ways(&self) -> usize {
        self.minority.len()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    /// Per-class membership mask.
    pub fn minority_mask(&self) -> Vec<bool> {
        (0..self.class_count).map(|c| self.is_minority(c)).collect()
    }
}

/// Row indices (into the input dataset) chosen by [`apply_split`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub majority_rows: Vec<usize>,
    pub minority_rows: Vec<usize>,
    pub dropped_rows: Vec<usize>,
}

impl Split {
    /// Kept rows in ascending order.
    pub fn kept_rows(&self) -> Vec<usize> {
        let mut rows: Vec<usize> = self
            .majority_rows
            .iter()
            .chain(&self.minority_rows)
            .copied()
            .collect();
        rows.sort_unstable();
        rows
    }
}

pub fn apply_split(ds: &EmbeddingDataset, spec: &SplitSpec, seed: u64) -> Result<Split> {
    if ds.domain() != Domain::Source {
        return Err(Error::invalid("split is only defined for source datasets"));
    }
    if ds.class_count() != spec.class_count() {
        return Err(Error::DimensionMismatch {
            expected: spec.class_count(),
            found: ds.class_count(),
        });
    }
    let mut rng = rng::stream(seed, Stream::Split);
    let mut minority_rows = Vec::new();
    let mut dropped_rows = Vec::new();
    for &c in spec.minority_classes() {
        let rows = ds.rows_of_class(c);
        if rows.is_empty() {
            return Err(Error::EmptyMinorityClass(c));
        }
        let keep = spec.shots().min(rows.len());
        let mut picked: Vec<usize> = index::sample(&mut rng, rows.len(), keep).into_vec();
        picked.sort_unstable();
        let mut chosen = vec![false; rows.len()];
        for &p in &picked {
            chosen[p] = true;
        }
        for (k, &r) in rows.iter().enumerate() {
            if chosen[k] {
                minority_rows.push(r);
            } else {
                dropped_rows.push(r);
            }
        }
    }
    let majority_rows = (0..ds.len())
        .filter(|&i| ds.label(i).is_some_and(|c| !spec.is_minority(c)))
        .collect();
    minority_rows.sort_unstable();
    dropped_rows.sort_unstable();
    Ok(Split {
        majority_rows,
        minority_rows,
        dropped_rows,
    })
}

/// Parameters of the synthetic covariate-shift task.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTaskSpec {
    pub class_count: usize,
    pub dim: usize,
    pub per_class_source: usize,
    pub per_class_target: usize,
    pub minority: Vec<usize>,
    /// `None` keeps every source row of the minority classes.
    pub shots: Option<usize>,
    /// Rotation angle (radians) of the orthogonal source-to-target map.
    pub angle: f64,
    pub translation: f64,
    pub noise: f64,
    pub separation: f64,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            class_count: 8,
            dim: 32,
            per_class_source: 150,
            per_class_target: 150,
            minority: vec![0, 1, 2],
            shots: Some(1),
            angle: 0.3,
            translation: 1.0,
            noise: 0.3,
            separation: 4.0,
            seed: 0,
        }
    }
}

impl SyntheticTaskSpec {
    fn validate(&self) -> Result<()> {
        if self.class_count < 2 {
            return Err(Error::invalid("synthetic task needs at least 2 classes"));
        }
        if self.dim < 2 {
            return Err(Error::invalid("synthetic task needs dim >= 2"));
        }
        if self.per_class_source == 0 || self.per_class_target == 0 {
            return Err(Error::invalid("per-class counts must be positive"));
        }
        if self.shots == Some(0) {
            return Err(Error::invalid("shots must be positive"));
        }
        for (name, v) in [
            ("angle", self.angle),
            ("translation", self.translation),
            ("noise", self.noise),
            ("separation", self.separation),
        ] {
            if !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be finite")));
            }
        }
        if self.noise < 0.0 || self.separation < 0.0 || self.translation < 0.0 {
            return Err(Error::invalid(
                "noise, separation and translation must be nonnegative",
            ));
        }
        Ok(())
    }
}

fn random_unit(dim: usize, rng: &mut rng::FktRng) -> Array1<f64> {
    loop {
        let v: Array1<f64> = (0..dim).map(|_| rng::standard_normal(rng)).collect();
        let n = linalg::norm(v.as_slice().expect("contiguous"));
        if n > 1e-12 {
            return v / n;
        }
    }
}

/// Haar-ish random orthogonal matrix by Gram-Schmidt on Gaussian columns.
fn random_orthogonal(dim: usize, rng: &mut rng::FktRng) -> Array2<f64> {
    let mut q = Array2::<f64>::zeros((dim, dim));
    let mut k = 0;
    while k < dim {
        let mut v: Array1<f64> = (0..dim).map(|_| rng::standard_normal(rng)).collect();
        for j in 0..k {
            let col = q.column(j);
            let p = v.dot(&col);
            v.scaled_add(-p, &col);
        }
        let n = v.dot(&v).sqrt();
        if n < 1e-8 {
            continue;
        }
        q.column_mut(k).assign(&(v / n));
        k += 1;
    }
    q
}

/// `U R(angle) U^T` where `R` rotates consecutive coordinate pairs.
fn mixing_transform(dim: usize, angle: f64, rng: &mut rng::FktRng) -> Array2<f64> {
    let u = random_orthogonal(dim, rng);
    let mut r = Array2::<f64>::eye(dim);
    let (s, c) = angle.sin_cos();
    for p in 0..dim / 2 {
        let (i, j) = (2 * p, 2 * p + 1);
        r[[i, i]] = c;
        r[[i, j]] = -s;
        r[[j, i]] = s;
        r[[j, j]] = c;
    }
    u.dot(&r).dot(&u.t())
}

/// Source clusters are isotropic unit Gaussians around `separation * u_c`
/// for random unit directions `u_c`. Target rows are source-distributed
/// points mapped through a fixed orthogonal transform, translated, and
/// perturbed with Gaussian noise.
pub fn generate_synthetic(
    spec: &SyntheticTaskSpec,
) -> Result<(EmbeddingDataset, EmbeddingDataset)> {
    spec.validate()?;
    let (c, d) = (spec.class_count, spec.dim);
    let mut rng = rng::stream(spec.seed, Stream::Synthetic);
    let centers: Vec<Array1<f64>> = (0..c)
        .map(|_| random_unit(d, &mut rng) * spec.separation)
        .collect();
    let transform = mixing_transform(d, spec.angle, &mut rng);
    let shift = random_unit(d, &mut rng) * spec.translation;

    let draw = |center: &Array1<f64>, rng: &mut rng::FktRng| -> Array1<f64> {
        center.mapv(|m| m + rng::standard_normal(rng))
    };

    let mut src = Array2::<f64>::zeros((c * spec.per_class_source, d));
    let mut src_labels = Vec::with_capacity(src.nrows());
    for (k, center) in centers.iter().enumerate() {
        for i in 0..spec.per_class_source {
            src.row_mut(k * spec.per_class_source + i)
                .assign(&draw(center, &mut rng));
            src_labels.push(Some(k));
        }
    }

    let mut tgt = Array2::<f64>::zeros((c * spec.per_class_target, d));
    let mut tgt_labels = Vec::with_capacity(tgt.nrows());
    for (k, center) in centers.iter().enumerate() {
        for i in 0..spec.per_class_target {
            let x = draw(center, &mut rng);
            let mut y = transform.dot(&x) + &shift;
            if spec.noise > 0.0 {
                y.mapv_inplace(|v| v + spec.noise * rng::standard_normal(&mut rng));
            }
            tgt.row_mut(k * spec.per_class_target + i).assign(&y);
            tgt_labels.push(Some(k));
        }
    }

    let source = EmbeddingDataset::new(Domain::Source, src, src_labels, c)?;
    let target = EmbeddingDataset::new(Domain::Target, tgt, tgt_labels, c)?;
    let source = match spec.shots {
        Some(shots) if !spec.minority.is_empty() => {
            let split = SplitSpec::new(spec.minority.clone(), shots, c)?;
            let kept = apply_split(&source, &split, spec.seed)?.kept_rows();
            source.select(&kept)?
        }
        _ => source,
    };
    Ok((source, target))
}

/// Path helper used in error messages for in-memory parses.
pub fn memory_path() -> PathBuf {
    PathBuf::from("<memory>")
}
