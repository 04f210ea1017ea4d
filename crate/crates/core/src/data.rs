//! Labeled sample sets, synthetic domain-shift generators, group-aware
//! splitting and CSV ingestion.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::{derive_seed, seeded, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn code(self) -> &'static str {
        match self {
            Domain::Source => "s",
            Domain::Target => "t",
        }
    }
}

/// Features plus optional integer labels, one domain tag and per-row group ids.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub features: Matrix,
    pub labels: Option<Vec<usize>>,
    pub domain: Domain,
    pub groups: Vec<u64>,
}

impl LabeledSet {
    pub fn new(
        features: Matrix,
        labels: Option<Vec<usize>>,
        domain: Domain,
        groups: Vec<u64>,
    ) -> Result<Self> {
        let n = features.rows();
        if groups.len() != n {
            return Err(Error::shape(
                "LabeledSet",
                format!("{n} group ids"),
                groups.len(),
            ));
        }
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::shape("LabeledSet", format!("{n} labels"), l.len()));
            }
        }
        Ok(Self {
            features,
            labels,
            domain,
            groups,
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_features(&self) -> usize {
        self.features.cols()
    }

    /// One past the largest label, or 0 when unlabeled.
    pub fn n_classes(&self) -> usize {
        self.labels
            .as_ref()
            .and_then(|l| l.iter().max().map(|m| m + 1))
            .unwrap_or(0)
    }

    pub fn labels_or_err(&self) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::Protocol(format!("{:?} set has no labels", self.domain)))
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledSet {
        LabeledSet {
            features: self.features.select_rows(indices),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            domain: self.domain,
            groups: indices.iter().map(|&i| self.groups[i]).collect(),
        }
    }

    pub fn without_labels(&self) -> LabeledSet {
        LabeledSet {
            labels: None,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Generator {
    Blobs,
    Moons,
}

/// Parameters of a synthetic source/target pair. The target is a fresh
/// draw from the source distribution, rotated about the origin and then
/// translated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShiftSpec {
    pub generator: Generator,
    pub n_classes: usize,
    pub n_per_class: usize,
    pub rotation_deg: f64,
    pub translation: Vec<f64>,
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for ShiftSpec {
    fn default() -> Self {
        Self {
            generator: Generator::Blobs,
            n_classes: 4,
            n_per_class: 100,
            rotation_deg: 30.0,
            translation: vec![0.0, 0.0],
            noise_sd: 1.0,
            seed: 0,
        }
    }
}

/// Radius of the circle carrying the blob centres.
pub const BLOB_RADIUS: f64 = 4.0;

impl ShiftSpec {
    pub fn validate(&self) -> Result<()> {
        match self.generator {
            Generator::Blobs if self.n_classes < 2 => {
                return Err(Error::invalid("n_classes", "blobs need at least 2 classes"))
            }
            Generator::Moons if self.n_classes != 2 => {
                return Err(Error::invalid(
                    "n_classes",
                    "moons always have exactly 2 classes",
                ))
            }
            _ => {}
        }
        if self.n_per_class == 0 {
            return Err(Error::invalid("n_per_class", "must be at least 1"));
        }
        if self.translation.len() != 2 {
            return Err(Error::invalid(
                "translation",
                format!("needs 2 components, got {}", self.translation.len()),
            ));
        }
        if !(self.noise_sd > 0.0 && self.noise_sd.is_finite()) {
            return Err(Error::invalid(
                "noise_sd",
                format!("must be positive, got {}", self.noise_sd),
            ));
        }
        if !self.rotation_deg.is_finite() || self.translation.iter().any(|t| !t.is_finite()) {
            return Err(Error::invalid("rotation/translation", "must be finite"));
        }
        Ok(())
    }

    /// Centre of class `c` for the blob generator.
    pub fn blob_center(&self, c: usize) -> [f64; 2] {
        let angle = 2.0 * std::f64::consts::PI * c as f64 / self.n_classes as f64;
        [BLOB_RADIUS * angle.cos(), BLOB_RADIUS * angle.sin()]
    }

    fn draw(&self, rng: &mut Rng) -> (Vec<f64>, Vec<usize>) {
        let n = self.n_classes * self.n_per_class;
        let mut data = Vec::with_capacity(2 * n);
        let mut labels = Vec::with_capacity(n);
        for c in 0..self.n_classes {
            for _ in 0..self.n_per_class {
                let base = match self.generator {
                    Generator::Blobs => self.blob_center(c),
                    Generator::Moons => {
                        let t = rng.random_range(0.0..std::f64::consts::PI);
                        if c == 0 {
                            [t.cos(), t.sin()]
                        } else {
                            [1.0 - t.cos(), 0.5 - t.sin()]
                        }
                    }
                };
                for b in base {
                    let eps: f64 = StandardNormal.sample(rng);
                    data.push(b + self.noise_sd * eps);
                }
                labels.push(c);
            }
        }
        (data, labels)
    }
}

/// Group ids covering consecutive rows, each group holding 2–4 rows
/// (a single row only when the set has one row).
fn assign_groups(n: usize, rng: &mut Rng) -> Vec<u64> {
    let mut groups = Vec::with_capacity(n);
    let mut id = 0u64;
    let mut remaining = n;
    while remaining > 0 {
        let size = if remaining <= 4 {
            remaining
        } else {
            loop {
                let s = rng.random_range(2..=4usize);
                if remaining - s != 1 {
                    break s;
                }
            }
        };
        groups.extend(std::iter::repeat_n(id, size));
        id += 1;
        remaining -= size;
    }
    groups
}

pub fn generate_shift_pair(spec: &ShiftSpec) -> Result<(LabeledSet, LabeledSet)> {
    spec.validate()?;
    let n = spec.n_classes * spec.n_per_class;

    let (src, src_labels) = spec.draw(&mut seeded(derive_seed(spec.seed, "source")));
    let (mut tgt, tgt_labels) = spec.draw(&mut seeded(derive_seed(spec.seed, "target")));
    let (sin, cos) = spec.rotation_deg.to_radians().sin_cos();
    for p in tgt.chunks_exact_mut(2) {
        let (x, y) = (p[0], p[1]);
        p[0] = cos * x - sin * y + spec.translation[0];
        p[1] = sin * x + cos * y + spec.translation[1];
    }

    let mut group_rng = seeded(derive_seed(spec.seed, "groups"));
    let source = LabeledSet::new(
        Matrix::new(n, 2, src)?,
        Some(src_labels),
        Domain::Source,
        assign_groups(n, &mut group_rng),
    )?;
    let target = LabeledSet::new(
        Matrix::new(n, 2, tgt)?,
        Some(tgt_labels),
        Domain::Target,
        assign_groups(n, &mut group_rng),
    )?;
    Ok((source, target))
}

/// Disjoint train / validation / test index lists into one set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
    pub group_respecting: bool,
}

impl SplitPlan {
    /// Validation reuses the training rows. Allowed, but any validation
    /// score it produces is optimistic.
    pub fn is_degenerate(&self) -> bool {
        !self.train.is_empty() && self.validation == self.train
    }

    /// Checks disjointness, index range, and group atomicity when required.
    /// A degenerate plan is checked as if the validation list were absent.
    pub fn validate_for(&self, set: &LabeledSet) -> Result<()> {
        let mut owner: HashMap<usize, usize> = HashMap::new();
        for (k, part) in [&self.train, &self.validation, &self.test]
            .into_iter()
            .enumerate()
        {
            if k == 1 && self.is_degenerate() {
                continue;
            }
            for &i in part {
                if i >= set.len() {
                    return Err(Error::Protocol(format!(
                        "split index {i} out of range for {} rows",
                        set.len()
                    )));
                }
                if owner.insert(i, k).is_some() {
                    return Err(Error::Protocol(format!("row {i} appears more than once")));
                }
            }
        }
        if self.group_respecting {
            let mut group_owner: HashMap<u64, usize> = HashMap::new();
            for (&i, &k) in &owner {
                if let Some(prev) = group_owner.insert(set.groups[i], k) {
                    if prev != k {
                        return Err(Error::Protocol(format!(
                            "group {} spans two splits",
                            set.groups[i]
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Randomised split into (train, validation, test) fractions. With
/// `group_respecting`, groups are kept whole; otherwise every row is its
/// own unit. Achieved sizes deviate from `n·fraction` by at most the
/// largest unit size.
pub fn split(
    set: &LabeledSet,
    fractions: [f64; 3],
    group_respecting: bool,
    seed: u64,
) -> Result<SplitPlan> {
    if fractions.iter().any(|f| f.is_nan() || *f <= 0.0)
        || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(Error::invalid(
            "fractions",
            format!("must be positive and sum to 1, got {fractions:?}"),
        ));
    }
    let n = set.len();
    // Units in order of first appearance.
    let mut units: Vec<Vec<usize>> = Vec::new();
    if group_respecting {
        let mut index: HashMap<u64, usize> = HashMap::new();
        for (i, &g) in set.groups.iter().enumerate() {
            let u = *index.entry(g).or_insert_with(|| {
                units.push(Vec::new());
                units.len() - 1
            });
            units[u].push(i);
        }
    } else {
        units = (0..n).map(|i| vec![i]).collect();
    }
    let largest = units.iter().map(Vec::len).max().unwrap_or(0);
    let max_capacity = n as f64 * fractions.iter().cloned().fold(0.0, f64::max);
    if largest as f64 > max_capacity {
        return Err(Error::InfeasibleSplit(format!(
            "a group of {largest} rows exceeds the largest split capacity {max_capacity:.1}"
        )));
    }

    let mut rng = seeded(seed);
    units.shuffle(&mut rng);

    // A unit goes to the split whose cumulative target contains its midpoint.
    let bounds = [
        n as f64 * fractions[0],
        n as f64 * (fractions[0] + fractions[1]),
    ];
    let mut parts: [Vec<usize>; 3] = Default::default();
    let mut pos = 0usize;
    for unit in units {
        let mid = pos as f64 + unit.len() as f64 / 2.0;
        let k = bounds.iter().position(|&b| mid < b).unwrap_or(2);
        pos += unit.len();
        parts[k].extend(unit);
    }
    for (k, part) in parts.iter_mut().enumerate() {
        if part.is_empty() {
            return Err(Error::InfeasibleSplit(format!(
                "split {} is empty; groups are too coarse for fractions {fractions:?}",
                ["train", "validation", "test"][k]
            )));
        }
        part.sort_unstable();
    }
    let [train, validation, test] = parts;
    Ok(SplitPlan {
        train,
        validation,
        test,
        group_respecting,
    })
}

const LABEL_COL: &str = "label";
const DOMAIN_COL: &str = "domain";
const GROUP_COL: &str = "group";

/// Writes `f0,…,f{m-1},label,domain,group` with features at 17 significant digits.
pub fn write_csv<W: Write>(set: &LabeledSet, out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    let csv_err = |e: csv::Error| Error::Io(e.to_string());
    let mut header: Vec<String> = (0..set.n_features()).map(|j| format!("f{j}")).collect();
    header.extend([LABEL_COL, DOMAIN_COL, GROUP_COL].map(String::from));
    w.write_record(&header).map_err(csv_err)?;
    for i in 0..set.len() {
        let mut rec: Vec<String> = set
            .features
            .row(i)
            .iter()
            .map(|v| format!("{v:.16e}"))
            .collect();
        rec.push(
            set.labels
                .as_ref()
                .map(|l| l[i].to_string())
                .unwrap_or_default(),
        );
        rec.push(set.domain.code().to_string());
        rec.push(set.groups[i].to_string());
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(input: R) -> Result<LabeledSet> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(input);
    let header = r
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            reason: e.to_string(),
        })?
        .clone();
    let names: Vec<&str> = header.iter().collect();
    let m = names.len().saturating_sub(3);
    let expected: Vec<String> = (0..m)
        .map(|j| format!("f{j}"))
        .chain([LABEL_COL, DOMAIN_COL, GROUP_COL].map(String::from))
        .collect();
    if names.len() < 3 || names != expected.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(Error::Parse {
            line: 1,
            reason: format!(
                "malformed header `{}`; expected `{}`",
                names.join(","),
                expected.join(",")
            ),
        });
    }

    let mut data = Vec::new();
    let mut labels: Vec<Option<usize>> = Vec::new();
    let mut groups = Vec::new();
    let mut domain: Option<Domain> = None;
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            reason: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let perr = |reason: String| Error::Parse { line, reason };
        for (j, cell) in rec.iter().take(m).enumerate() {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| perr(format!("non-numeric feature f{j} `{cell}`")))?;
            if !v.is_finite() {
                return Err(perr(format!("non-finite feature f{j}")));
            }
            data.push(v);
        }
        let d = match rec[m + 1].trim() {
            "s" => Domain::Source,
            "t" => Domain::Target,
            other => return Err(perr(format!("domain must be `s` or `t`, got `{other}`"))),
        };
        if *domain.get_or_insert(d) != d {
            return Err(perr("a file may hold only one domain".into()));
        }
        let label = match rec[m].trim() {
            "" if d == Domain::Source => return Err(perr("source rows need a label".into())),
            "" => None,
            cell => Some(
                cell.parse::<usize>()
                    .map_err(|_| perr(format!("invalid label `{cell}`")))?,
            ),
        };
        if labels
            .first()
            .is_some_and(|first: &Option<usize>| first.is_some() != label.is_some())
        {
            return Err(perr("labels must be all present or all blank".into()));
        }
        labels.push(label);
        let g = rec[m + 2].trim();
        groups.push(
            g.parse::<u64>()
                .map_err(|_| perr(format!("invalid group `{g}`")))?,
        );
    }
    let n = groups.len();
    let labels = if labels.iter().all(Option::is_some) {
        Some(labels.into_iter().flatten().collect())
    } else {
        None
    };
    LabeledSet::new(
        Matrix::new(n, m, data)?,
        labels,
        domain.unwrap_or(Domain::Source),
        groups,
    )
}

pub fn save_csv(set: &LabeledSet, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_csv(set, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<LabeledSet> {
    let path = path.as_ref();
    let file =
        std::fs::File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    read_csv(std::io::BufReader::new(file))
}
