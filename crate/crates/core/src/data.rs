//! Bag datasets: text formats, synthetic generation, folds, scaling.
//!
//! The native format is line oriented:
//!
//! ```text
//! #bagds v1 D=<int> K=<int>
//! bag <id> <label> <M>
//! <D floats>      (M lines)
//! ```

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{AsmilError, Result};
use crate::model::Bag;
use crate::tensor::DenseMatrix;

pub const BAGDS_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BagDataset {
    pub dim: usize,
    pub n_classes: usize,
    pub bags: Vec<Bag>,
}

impl BagDataset {
    pub fn new(dim: usize, n_classes: usize, bags: Vec<Bag>) -> Result<Self> {
        for bag in &bags {
            if bag.dim() != dim {
                return Err(AsmilError::Schema(format!(
                    "bag `{}` has {} features, dataset has {dim}",
                    bag.id,
                    bag.dim()
                )));
            }
            if bag.label >= n_classes {
                return Err(AsmilError::Schema(format!(
                    "bag `{}` has label {}, dataset has {n_classes} classes",
                    bag.id, bag.label
                )));
            }
        }
        Ok(Self {
            dim,
            n_classes,
            bags,
        })
    }

    /// Builds a dataset from bags alone; `K` is at least 2.
    pub fn infer(bags: Vec<Bag>) -> Result<Self> {
        let first = bags
            .first()
            .ok_or_else(|| AsmilError::Schema("dataset contains no bags".into()))?;
        let dim = first.dim();
        let k = bags.iter().map(|b| b.label + 1).max().unwrap_or(2).max(2);
        Self::new(dim, k, bags)
    }

    pub fn labels(&self) -> Vec<usize> {
        self.bags.iter().map(|b| b.label).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for b in &self.bags {
            counts[b.label] += 1;
        }
        counts
    }

    pub fn subset(&self, indices: &[usize]) -> Vec<Bag> {
        indices.iter().map(|&i| self.bags[i].clone()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetFormat {
    /// The native `#bagds` text format.
    Bagds,
    /// `label,bag_id,f1,...,fD` per instance.
    BagCsv,
    /// `instance:bag:label idx:value ...` with 1-based sparse indices.
    SvmlightBag,
    /// The C4.5 `.data` layout of the MUSK distributions.
    Musk,
}

impl FromStr for DatasetFormat {
    type Err = AsmilError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bagds" => Ok(Self::Bagds),
            "bagcsv" | "bag-csv" => Ok(Self::BagCsv),
            "svmlight-bag" | "svmlight" => Ok(Self::SvmlightBag),
            "musk" | "c45" => Ok(Self::Musk),
            other => Err(AsmilError::config(
                "format",
                format!("unknown dataset format `{other}`"),
            )),
        }
    }
}

fn parse_err(line: usize, reason: impl Into<String>) -> AsmilError {
    AsmilError::Parse {
        line,
        reason: reason.into(),
    }
}

fn parse_float(tok: &str, line: usize) -> Result<f64> {
    let v: f64 = tok
        .parse()
        .map_err(|_| parse_err(line, format!("`{tok}` is not a number")))?;
    if !v.is_finite() {
        return Err(parse_err(line, format!("non-finite value `{tok}`")));
    }
    Ok(v)
}

fn parse_usize(tok: &str, what: &str, line: usize) -> Result<usize> {
    tok.parse().map_err(|_| {
        parse_err(
            line,
            format!("{what} `{tok}` is not a non-negative integer"),
        )
    })
}

fn header_field(tok: Option<&str>, key: &str) -> Result<usize> {
    let tok = tok.ok_or_else(|| parse_err(1, format!("header lacks {key}=")))?;
    let value = tok
        .strip_prefix(key)
        .and_then(|t| t.strip_prefix('='))
        .ok_or_else(|| parse_err(1, format!("expected {key}=<int>, found `{tok}`")))?;
    parse_usize(value, key, 1)
}

pub fn parse_bagds(text: &str) -> Result<BagDataset> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, header) = lines.next().ok_or_else(|| parse_err(1, "empty file"))?;
    let mut tokens = header.split_whitespace();
    if tokens.next() != Some("#bagds") {
        return Err(parse_err(1, "missing `#bagds` header"));
    }
    match tokens.next() {
        Some(v) if v == format!("v{BAGDS_VERSION}") => {}
        Some(v) => return Err(parse_err(1, format!("unsupported version `{v}`"))),
        None => return Err(parse_err(1, "header lacks a version")),
    }
    let dim = header_field(tokens.next(), "D")?;
    let k = header_field(tokens.next(), "K")?;
    if dim == 0 || k == 0 {
        return Err(parse_err(1, "D and K must be positive"));
    }
    let mut bags = Vec::new();
    while let Some((n, line)) = lines.next() {
        let mut last_line = n;
        if line.trim().is_empty() {
            continue;
        }
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() != 4 || tok[0] != "bag" {
            return Err(parse_err(n, "expected `bag <id> <label> <M>`"));
        }
        let label = parse_usize(tok[2], "label", n)?;
        if label >= k {
            return Err(AsmilError::Schema(format!(
                "line {n}: label {label} out of range for K={k}"
            )));
        }
        let m = parse_usize(tok[3], "instance count", n)?;
        if m == 0 {
            return Err(parse_err(n, "bag has no instances"));
        }
        let mut data = Vec::with_capacity(m * dim);
        for _ in 0..m {
            let (row_no, row) = lines
                .next()
                .ok_or_else(|| parse_err(last_line + 1, format!("bag `{}` ends early", tok[1])))?;
            last_line = row_no;
            let before = data.len();
            for v in row.split_whitespace() {
                data.push(parse_float(v, row_no)?);
            }
            if data.len() - before != dim {
                return Err(AsmilError::Schema(format!(
                    "line {row_no}: {} values, header declares D={dim}",
                    data.len() - before
                )));
            }
        }
        bags.push(Bag::new(tok[1], DenseMatrix::new(m, dim, data)?, label)?);
    }
    BagDataset::new(dim, k, bags)
}

pub fn format_bagds(ds: &BagDataset) -> Result<String> {
    let mut out = String::new();
    writeln!(
        out,
        "#bagds v{BAGDS_VERSION} D={} K={}",
        ds.dim, ds.n_classes
    )
    .expect("string write");
    for bag in &ds.bags {
        if bag.id.is_empty() || bag.id.chars().any(char::is_whitespace) {
            return Err(AsmilError::Schema(format!(
                "bag id `{}` must be a single token",
                bag.id
            )));
        }
        writeln!(out, "bag {} {} {}", bag.id, bag.label, bag.n_instances()).expect("string write");
        for r in 0..bag.n_instances() {
            let row: Vec<String> = bag.features.row(r).iter().map(f64::to_string).collect();
            writeln!(out, "{}", row.join(" ")).expect("string write");
        }
    }
    Ok(out)
}

pub fn write_bagds(ds: &BagDataset, path: &Path) -> Result<()> {
    std::fs::write(path, format_bagds(ds)?)?;
    Ok(())
}

/// Collects instance rows into bags keyed by id, keeping first-seen order.
/// A bag is positive if any of its instances is.
struct BagBuilder {
    order: Vec<String>,
    rows: HashMap<String, (Vec<Vec<f64>>, usize)>,
}

impl BagBuilder {
    fn new() -> Self {
        Self {
            order: Vec::new(),
            rows: HashMap::new(),
        }
    }

    fn push(&mut self, id: &str, label: usize, features: Vec<f64>) {
        let entry = self.rows.entry(id.to_string()).or_insert_with(|| {
            self.order.push(id.to_string());
            (Vec::new(), 0)
        });
        entry.0.push(features);
        entry.1 = entry.1.max(label);
    }

    fn finish(mut self, dim: Option<usize>) -> Result<Vec<Bag>> {
        let mut bags = Vec::with_capacity(self.order.len());
        for id in &self.order {
            let (mut rows, label) = self.rows.remove(id).expect("id recorded");
            if let Some(d) = dim {
                for r in &mut rows {
                    r.resize(d, 0.0);
                }
            }
            let features = DenseMatrix::from_rows(&rows)
                .map_err(|e| AsmilError::Schema(format!("bag `{id}`: {e}")))?;
            bags.push(Bag::new(id.clone(), features, label)?);
        }
        Ok(bags)
    }
}

pub fn parse_bag_csv(text: &str) -> Result<BagDataset> {
    let mut builder = BagBuilder::new();
    let mut dim = None;
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < 3 {
            return Err(parse_err(n, "expected `label,bag_id,features...`"));
        }
        let label = parse_label(fields[0], n)?;
        let features = fields[2..]
            .iter()
            .map(|f| parse_float(f, n))
            .collect::<Result<Vec<f64>>>()?;
        match dim {
            None => dim = Some(features.len()),
            Some(d) if d != features.len() => {
                return Err(AsmilError::Schema(format!(
                    "line {n}: {} features, earlier rows have {d}",
                    features.len()
                )))
            }
            _ => {}
        }
        builder.push(fields[1], label, features);
    }
    BagDataset::infer(builder.finish(None)?)
}

/// Accepts `0`/`1`, `-1`/`+1` and C4.5-style `1.`.
fn parse_label(tok: &str, line: usize) -> Result<usize> {
    let v = parse_float(tok.trim_end_matches('.'), line)?;
    if v.fract() != 0.0 {
        return Err(parse_err(line, format!("label `{tok}` is not an integer")));
    }
    if v < 0.0 {
        return Ok(0);
    }
    Ok(v as usize)
}

pub fn parse_svmlight_bag(text: &str) -> Result<BagDataset> {
    let mut builder = BagBuilder::new();
    let mut dim = 0;
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut tok = line.split_whitespace();
        let head: Vec<&str> = tok.next().expect("non-empty line").split(':').collect();
        if head.len() != 3 {
            return Err(parse_err(n, "expected `instance:bag:label` as first field"));
        }
        let label = parse_label(head[2], n)?;
        let mut features = Vec::new();
        for pair in tok {
            let (idx, val) = pair
                .split_once(':')
                .ok_or_else(|| parse_err(n, format!("expected `index:value`, found `{pair}`")))?;
            let idx = parse_usize(idx, "feature index", n)?;
            if idx == 0 {
                return Err(parse_err(n, "feature indices start at 1"));
            }
            if features.len() < idx {
                features.resize(idx, 0.0);
            }
            features[idx - 1] = parse_float(val, n)?;
        }
        dim = dim.max(features.len());
        builder.push(head[1], label, features);
    }
    if dim == 0 {
        return Err(AsmilError::Schema("no features found".into()));
    }
    BagDataset::infer(builder.finish(Some(dim))?)
}

/// `molecule,conformation,f1..fD,class` with the class written as `0.`/`1.`.
pub fn parse_musk(text: &str) -> Result<BagDataset> {
    let mut builder = BagBuilder::new();
    let mut dim = None;
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < 4 {
            return Err(parse_err(
                n,
                "expected `molecule,conformation,features...,class`",
            ));
        }
        let label = parse_label(fields[fields.len() - 1], n)?;
        let features = fields[2..fields.len() - 1]
            .iter()
            .map(|f| parse_float(f, n))
            .collect::<Result<Vec<f64>>>()?;
        match dim {
            None => dim = Some(features.len()),
            Some(d) if d != features.len() => {
                return Err(AsmilError::Schema(format!(
                    "line {n}: {} features, earlier rows have {d}",
                    features.len()
                )))
            }
            _ => {}
        }
        builder.push(fields[0], label, features);
    }
    BagDataset::infer(builder.finish(None)?)
}

pub fn parse_dataset(text: &str, format: DatasetFormat) -> Result<BagDataset> {
    match format {
        DatasetFormat::Bagds => parse_bagds(text),
        DatasetFormat::BagCsv => parse_bag_csv(text),
        DatasetFormat::SvmlightBag => parse_svmlight_bag(text),
        DatasetFormat::Musk => parse_musk(text),
    }
}

pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<BagDataset> {
    let text = std::fs::read_to_string(path)?;
    parse_dataset(&text, format)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticBagSpec {
    pub n_bags: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    pub dim: usize,
    /// Fraction of positive-bag instances drawn from the signal distribution.
    pub witness_rate: f64,
    /// Distance witnesses are moved along the signal direction.
    pub signal_shift: f64,
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for SyntheticBagSpec {
    fn default() -> Self {
        Self {
            n_bags: 60,
            min_instances: 8,
            max_instances: 16,
            dim: 8,
            witness_rate: 0.2,
            signal_shift: 2.0,
            noise_scale: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticBagSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_bags == 0 {
            return Err(AsmilError::config("n_bags", "must be at least 1"));
        }
        if self.dim == 0 {
            return Err(AsmilError::config("dim", "must be at least 1"));
        }
        if self.min_instances == 0 || self.min_instances > self.max_instances {
            return Err(AsmilError::config(
                "min_instances",
                "need 1 <= min_instances <= max_instances",
            ));
        }
        if !(self.witness_rate > 0.0 && self.witness_rate <= 1.0) {
            return Err(AsmilError::config("witness_rate", "must lie in (0, 1]"));
        }
        if !(self.noise_scale >= 0.0) || !self.signal_shift.is_finite() {
            return Err(AsmilError::config(
                "noise_scale",
                "must be finite and non-negative",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub dataset: BagDataset,
    /// Per bag, which instances are witnesses.
    pub instance_labels: Vec<Vec<bool>>,
    /// Unit signal direction.
    pub direction: Vec<f64>,
}

/// Negative bags are pure noise; in positive bags each instance is a
/// witness with probability `witness_rate` (at least one per bag), shifted
/// by `signal_shift` along a fixed random unit direction.
pub fn generate_synthetic(spec: &SyntheticBagSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut direction: Vec<f64> = (0..spec.dim)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
    direction.iter_mut().for_each(|v| *v /= norm);
    let mut labels: Vec<usize> = (0..spec.n_bags).map(|i| i % 2).collect();
    labels.shuffle(&mut rng);
    let mut bags = Vec::with_capacity(spec.n_bags);
    let mut instance_labels = Vec::with_capacity(spec.n_bags);
    for (b, &label) in labels.iter().enumerate() {
        let m = rng.random_range(spec.min_instances..=spec.max_instances);
        let mut witness = vec![false; m];
        if label == 1 {
            for w in witness.iter_mut() {
                *w = rng.random::<f64>() < spec.witness_rate;
            }
            if !witness.iter().any(|&w| w) {
                witness[rng.random_range(0..m)] = true;
            }
        }
        let mut data = Vec::with_capacity(m * spec.dim);
        for &is_witness in &witness {
            for u in &direction {
                let noise: f64 = StandardNormal.sample(&mut rng);
                let shift = if is_witness {
                    spec.signal_shift * u
                } else {
                    0.0
                };
                data.push(spec.noise_scale * noise + shift);
            }
        }
        let features = DenseMatrix::new(m, spec.dim, data)?;
        bags.push(Bag::new(format!("syn_{b:04}"), features, label)?);
        instance_labels.push(witness);
    }
    Ok(SyntheticData {
        dataset: BagDataset::new(spec.dim, 2, bags)?,
        instance_labels,
        direction,
    })
}

/// Test-fold index of every bag.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CvSplit {
    pub folds: usize,
    pub assignment: Vec<usize>,
    pub warnings: Vec<String>,
}

impl CvSplit {
    /// `(train, test)` bag indices for fold `k`.
    pub fn fold(&self, k: usize) -> (Vec<usize>, Vec<usize>) {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (i, &f) in self.assignment.iter().enumerate() {
            if f == k {
                test.push(i);
            } else {
                train.push(i);
            }
        }
        (train, test)
    }
}

/// Stratified folds: each class is shuffled and dealt round-robin, the deal
/// continuing where the previous class stopped so fold sizes stay within one.
/// Classes with fewer bags than folds are pooled and dealt last.
pub fn cv_split(labels: &[usize], folds: usize, seed: u64) -> Result<CvSplit> {
    if folds < 2 || folds > labels.len() {
        return Err(AsmilError::domain(format!(
            "need 2 <= folds <= {} bags, got {folds}",
            labels.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut warnings = Vec::new();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut pooled = Vec::new();
    for c in 0..n_classes {
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if members.is_empty() {
            continue;
        }
        if members.len() < folds {
            warnings.push(format!(
                "class {c} has {} bags for {folds} folds; it is not stratified",
                members.len()
            ));
            pooled.extend(members);
        } else {
            groups.push(members);
        }
    }
    if !pooled.is_empty() {
        groups.push(pooled);
    }
    let mut assignment = vec![0; labels.len()];
    let mut next = 0;
    for mut group in groups {
        group.shuffle(&mut rng);
        for i in group {
            assignment[i] = next;
            next = (next + 1) % folds;
        }
    }
    Ok(CvSplit {
        folds,
        assignment,
        warnings,
    })
}

/// Per-feature z-scoring fitted on training instances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(bags: &[Bag]) -> Result<Self> {
        let dim = bags
            .first()
            .ok_or_else(|| AsmilError::domain("cannot fit a scaler on no bags"))?
            .dim();
        let mut sum = vec![0.0; dim];
        let mut count = 0usize;
        for bag in bags {
            if bag.dim() != dim {
                return Err(AsmilError::shape("bags disagree on feature dimension"));
            }
            for r in 0..bag.n_instances() {
                for (s, v) in sum.iter_mut().zip(bag.features.row(r)) {
                    *s += v;
                }
            }
            count += bag.n_instances();
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut var = vec![0.0; dim];
        for bag in bags {
            for r in 0..bag.n_instances() {
                for ((acc, v), mu) in var.iter_mut().zip(bag.features.row(r)).zip(&mean) {
                    *acc += (v - mu) * (v - mu);
                }
            }
        }
        let scale = var
            .iter()
            .map(|v| {
                let sd = (v / count as f64).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, scale })
    }

    pub fn apply(&self, bag: &Bag) -> Result<Bag> {
        if bag.dim() != self.mean.len() {
            return Err(AsmilError::shape(format!(
                "scaler fitted on {} features, bag `{}` has {}",
                self.mean.len(),
                bag.id,
                bag.dim()
            )));
        }
        let mut features = bag.features.clone();
        for r in 0..features.rows() {
            for ((v, mu), sd) in features
                .row_mut(r)
                .iter_mut()
                .zip(&self.mean)
                .zip(&self.scale)
            {
                *v = (*v - mu) / sd;
            }
        }
        Ok(Bag {
            id: bag.id.clone(),
            features,
            label: bag.label,
        })
    }

    pub fn apply_all(&self, bags: &[Bag]) -> Result<Vec<Bag>> {
        bags.iter().map(|b| self.apply(b)).collect()
    }
}
