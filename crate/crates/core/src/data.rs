//! Dataset schemas, CSV ingestion with validation, split management,
//! synthetic data generation, and dataset analytics.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::hash::Hash;
use std::io;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// The ten physical property categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Size,
    Weight,
    Sentience,
    Phase,
    Rigidity,
    Temperature,
    Opacity,
    Shape,
    Texture,
    Mobility,
}

pub const CATEGORIES: [Category; 10] = [
    Category::Size,
    Category::Weight,
    Category::Sentience,
    Category::Phase,
    Category::Rigidity,
    Category::Temperature,
    Category::Opacity,
    Category::Shape,
    Category::Texture,
    Category::Mobility,
];

impl Category {
    pub fn as_str(&self) -> &'static str {
        match self {
            Category::Size => "size",
            Category::Weight => "weight",
            Category::Sentience => "sentience",
            Category::Phase => "phase",
            Category::Rigidity => "rigidity",
            Category::Temperature => "temperature",
            Category::Opacity => "opacity",
            Category::Shape => "shape",
            Category::Texture => "texture",
            Category::Mobility => "mobility",
        }
    }

    pub fn parse(s: &str) -> Option<Category> {
        CATEGORIES.iter().copied().find(|c| c.as_str() == s)
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "valid" => Some(Split::Valid),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DatasetId {
    #[serde(rename = "pep3k")]
    Pep3k,
    #[serde(rename = "twentyq")]
    TwentyQ,
}

impl DatasetId {
    pub fn as_str(&self) -> &'static str {
        match self {
            DatasetId::Pep3k => "pep3k",
            DatasetId::TwentyQ => "twentyq",
        }
    }

    pub fn parse(s: &str) -> Option<DatasetId> {
        match s {
            "pep3k" => Some(DatasetId::Pep3k),
            "twentyq" => Some(DatasetId::TwentyQ),
            _ => None,
        }
    }
}

impl fmt::Display for DatasetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One item labelled 1-5 for one property category.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PropertyRecord {
    pub item: String,
    pub category: Category,
    pub label: u8,
}

/// One s-v-o triple with a binary plausibility label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlausibilityRecord {
    pub subject: String,
    pub verb: String,
    pub object: String,
    pub label: u8,
    pub split: Split,
    pub dataset: DatasetId,
}

#[derive(Debug)]
pub enum DataError {
    Io(io::Error),
    Csv(csv::Error),
    Row {
        line: u64,
        field: &'static str,
        message: String,
    },
    MissingHeader {
        expected: &'static str,
        got: String,
    },
    LengthMismatch {
        left: usize,
        right: usize,
    },
    TooFewRecords {
        needed: usize,
        got: usize,
    },
    EmptyInput(&'static str),
    InvalidSpec(String),
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Io(e) => write!(f, "io error: {}", e),
            Self::Csv(e) => write!(f, "csv error: {}", e),
            Self::Row {
                line,
                field,
                message,
            } => write!(f, "line {}: field '{}': {}", line, field, message),
            Self::MissingHeader { expected, got } => {
                write!(f, "expected header '{}', got '{}'", expected, got)
            }
            Self::LengthMismatch { left, right } => {
                write!(f, "length mismatch: {} vs {}", left, right)
            }
            Self::TooFewRecords { needed, got } => {
                write!(f, "need at least {} records, got {}", needed, got)
            }
            Self::EmptyInput(what) => write!(f, "empty input: {}", what),
            Self::InvalidSpec(msg) => write!(f, "invalid generation spec: {}", msg),
        }
    }
}

impl std::error::Error for DataError {}

impl From<io::Error> for DataError {
    fn from(e: io::Error) -> Self {
        DataError::Io(e)
    }
}

impl From<csv::Error> for DataError {
    fn from(e: csv::Error) -> Self {
        DataError::Csv(e)
    }
}

fn row_line(record: &csv::StringRecord) -> u64 {
    record.position().map(|p| p.line()).unwrap_or(0)
}

fn clean_token(
    raw: &str,
    line: u64,
    field: &'static str,
) -> Result<String, DataError> {
    let token = raw.trim().to_lowercase();
    if token.is_empty() {
        return Err(DataError::Row {
            line,
            field,
            message: "empty token".to_string(),
        });
    }
    Ok(token)
}

/// Load and validate `item,category,label` rows.
pub fn load_properties(path: &Path) -> Result<Vec<PropertyRecord>, DataError> {
    let mut reader = csv::ReaderBuilder::new().from_path(path)?;
    check_header(&mut reader, "item,category,label")?;
    let mut out = Vec::new();
    let mut seen: HashSet<(String, Category)> = HashSet::new();
    for result in reader.records() {
        let record = result?;
        let line = row_line(&record);
        if record.len() != 3 {
            return Err(DataError::Row {
                line,
                field: "row",
                message: format!("expected 3 fields, got {}", record.len()),
            });
        }
        let item = clean_token(&record[0], line, "item")?;
        let category = Category::parse(record[1].trim()).ok_or_else(|| DataError::Row {
            line,
            field: "category",
            message: format!("unknown category '{}'", record[1].trim()),
        })?;
        let label: u8 = record[2].trim().parse().map_err(|_| DataError::Row {
            line,
            field: "label",
            message: format!("not an integer: '{}'", record[2].trim()),
        })?;
        if !(1..=5).contains(&label) {
            return Err(DataError::Row {
                line,
                field: "label",
                message: format!("label {} out of range 1-5", label),
            });
        }
        if !seen.insert((item.clone(), category)) {
            return Err(DataError::Row {
                line,
                field: "item",
                message: format!("duplicate (item, category): ({}, {})", item, category),
            });
        }
        out.push(PropertyRecord {
            item,
            category,
            label,
        });
    }
    Ok(out)
}

/// Load and validate `subject,verb,object,label,split,dataset` rows.
pub fn load_plausibility(path: &Path) -> Result<Vec<PlausibilityRecord>, DataError> {
    let mut reader = csv::ReaderBuilder::new().from_path(path)?;
    check_header(&mut reader, "subject,verb,object,label,split,dataset")?;
    let mut out = Vec::new();
    for result in reader.records() {
        let record = result?;
        let line = row_line(&record);
        if record.len() != 6 {
            return Err(DataError::Row {
                line,
                field: "row",
                message: format!("expected 6 fields, got {}", record.len()),
            });
        }
        let subject = clean_token(&record[0], line, "subject")?;
        let verb = clean_token(&record[1], line, "verb")?;
        let object = clean_token(&record[2], line, "object")?;
        let label: u8 = record[3].trim().parse().map_err(|_| DataError::Row {
            line,
            field: "label",
            message: format!("not an integer: '{}'", record[3].trim()),
        })?;
        if label > 1 {
            return Err(DataError::Row {
                line,
                field: "label",
                message: format!("label {} is not binary", label),
            });
        }
        let split = Split::parse(record[4].trim()).ok_or_else(|| DataError::Row {
            line,
            field: "split",
            message: format!("unknown split '{}'", record[4].trim()),
        })?;
        let dataset = DatasetId::parse(record[5].trim()).ok_or_else(|| DataError::Row {
            line,
            field: "dataset",
            message: format!("unknown dataset '{}'", record[5].trim()),
        })?;
        out.push(PlausibilityRecord {
            subject,
            verb,
            object,
            label,
            split,
            dataset,
        });
    }
    Ok(out)
}

fn check_header<R: io::Read>(
    reader: &mut csv::Reader<R>,
    expected: &'static str,
) -> Result<(), DataError> {
    let got = reader.headers()?.iter().collect::<Vec<_>>().join(",");
    if got != expected {
        return Err(DataError::MissingHeader {
            expected,
            got,
        });
    }
    Ok(())
}

pub fn save_properties(path: &Path, records: &[PropertyRecord]) -> Result<(), DataError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["item", "category", "label"])?;
    for r in records {
        w.write_record([r.item.as_str(), r.category.as_str(), &r.label.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_plausibility(path: &Path, records: &[PlausibilityRecord]) -> Result<(), DataError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["subject", "verb", "object", "label", "split", "dataset"])?;
    for r in records {
        w.write_record([
            r.subject.as_str(),
            r.verb.as_str(),
            r.object.as_str(),
            &r.label.to_string(),
            r.split.as_str(),
            r.dataset.as_str(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Label agreement between two property sets for one category.
#[derive(Debug, Clone, PartialEq)]
pub struct DivergenceReport {
    pub category: Category,
    pub items_left: usize,
    pub items_right: usize,
    pub overlap: usize,
    /// Overlap as a fraction of the left set's items for this category.
    pub overlap_fraction: f64,
    /// Percent of overlapping items whose labels differ; `None` when the
    /// sets share no items (explicitly not 0%).
    pub divergence_percent: Option<f64>,
}

pub fn label_divergence(
    left: &[PropertyRecord],
    right: &[PropertyRecord],
    category: Category,
) -> Result<DivergenceReport, DataError> {
    let pick = |records: &[PropertyRecord]| -> HashMap<String, u8> {
        records
            .iter()
            .filter(|r| r.category == category)
            .map(|r| (r.item.clone(), r.label))
            .collect()
    };
    let a = pick(left);
    let b = pick(right);
    if a.is_empty() || b.is_empty() {
        return Err(DataError::EmptyInput("label_divergence category records"));
    }
    let mut overlap = 0usize;
    let mut differing = 0usize;
    for (item, la) in &a {
        if let Some(lb) = b.get(item) {
            overlap += 1;
            if la != lb {
                differing += 1;
            }
        }
    }
    let divergence_percent = if overlap == 0 {
        None
    } else {
        Some(100.0 * differing as f64 / overlap as f64)
    };
    Ok(DivergenceReport {
        category,
        items_left: a.len(),
        items_right: b.len(),
        overlap,
        overlap_fraction: overlap as f64 / a.len() as f64,
        divergence_percent,
    })
}

fn entropy_from_counts(counts: &HashMap<u64, usize>, n: f64) -> f64 {
    counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// MI(x, y) / sqrt(H(x) * H(y)); 0 when either marginal entropy is 0.
pub fn normalized_mutual_information<T, U>(x: &[T], y: &[U]) -> Result<f64, DataError>
where
    T: Eq + Hash + Copy,
    U: Eq + Hash + Copy,
{
    if x.len() != y.len() {
        return Err(DataError::LengthMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(DataError::TooFewRecords {
            needed: 2,
            got: x.len(),
        });
    }
    let n = x.len() as f64;
    // Re-key values to dense ids so joint counts can share one map.
    let mut xid: HashMap<T, u64> = HashMap::new();
    let mut yid: HashMap<U, u64> = HashMap::new();
    let mut cx: HashMap<u64, usize> = HashMap::new();
    let mut cy: HashMap<u64, usize> = HashMap::new();
    let mut cxy: HashMap<(u64, u64), usize> = HashMap::new();
    for (a, b) in x.iter().zip(y) {
        let next = xid.len() as u64;
        let ia = *xid.entry(*a).or_insert(next);
        let next = yid.len() as u64;
        let ib = *yid.entry(*b).or_insert(next);
        *cx.entry(ia).or_insert(0) += 1;
        *cy.entry(ib).or_insert(0) += 1;
        *cxy.entry((ia, ib)).or_insert(0) += 1;
    }
    let hx = entropy_from_counts(&cx, n);
    let hy = entropy_from_counts(&cy, n);
    if hx == 0.0 || hy == 0.0 {
        return Ok(0.0);
    }
    let mut mi = 0.0;
    for (&(ia, ib), &c) in &cxy {
        let pxy = c as f64 / n;
        let px = cx[&ia] as f64 / n;
        let py = cy[&ib] as f64 / n;
        mi += pxy * (pxy / (px * py)).ln();
    }
    Ok((mi / (hx * hy).sqrt()).clamp(0.0, 1.0))
}

/// Assignment of test records to five disjoint, exhaustive groups.
#[derive(Debug, Clone)]
pub struct TestPartitioning {
    /// Group index (0-4) per record, parallel to the input slice.
    pub group_of: Vec<usize>,
    pub seed: u64,
}

pub const TEST_GROUPS: usize = 5;

impl TestPartitioning {
    pub fn groups(&self) -> [Vec<usize>; TEST_GROUPS] {
        let mut out: [Vec<usize>; TEST_GROUPS] = Default::default();
        for (idx, &g) in self.group_of.iter().enumerate() {
            out[g].push(idx);
        }
        out
    }
}

/// Seeded shuffle then round-robin assignment into five groups.
pub fn partition_test(n_records: usize, seed: u64) -> Result<TestPartitioning, DataError> {
    if n_records < TEST_GROUPS {
        return Err(DataError::TooFewRecords {
            needed: TEST_GROUPS,
            got: n_records,
        });
    }
    let mut order: Vec<usize> = (0..n_records).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut group_of = vec![0usize; n_records];
    for (pos, &idx) in order.iter().enumerate() {
        group_of[idx] = pos % TEST_GROUPS;
    }
    Ok(TestPartitioning { group_of, seed })
}

/// Sizes and planted-signal strength for synthetic generation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenSpec {
    pub nouns: usize,
    pub verbs: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    /// 0 = labels are pure noise, 1 = labels follow the planted rule exactly.
    pub signal: f64,
    pub datasets: Vec<DatasetId>,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            nouns: 150,
            verbs: 40,
            train: 3000,
            valid: 300,
            test: 1000,
            signal: 0.8,
            datasets: vec![DatasetId::Pep3k],
        }
    }
}

/// Synthetic world: nouns carry property labels, verbs carry a preferred
/// range on one planted category, and a triple is plausible when the
/// object's planted-category label falls in the verb's range. Objects are
/// drawn from the compatible/incompatible side per a fair coin, so labels
/// stay balanced and verb-object co-occurrence carries association signal.
pub fn generate_synthetic(
    seed: u64,
    spec: &GenSpec,
) -> Result<(Vec<PropertyRecord>, Vec<PlausibilityRecord>), DataError> {
    if spec.nouns == 0 || spec.verbs == 0 || spec.train == 0 || spec.test == 0 {
        return Err(DataError::InvalidSpec(
            "nouns, verbs, train, and test must be positive".into(),
        ));
    }
    if !(0.0..=1.0).contains(&spec.signal) {
        return Err(DataError::InvalidSpec(format!(
            "signal {} outside [0, 1]",
            spec.signal
        )));
    }
    if spec.datasets.is_empty() {
        return Err(DataError::InvalidSpec("no datasets requested".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let planted = CATEGORIES[0];

    let nouns: Vec<String> = (0..spec.nouns).map(|i| format!("noun{:03}", i)).collect();
    let verbs: Vec<String> = (0..spec.verbs).map(|i| format!("verb{:02}", i)).collect();

    let mut properties = Vec::with_capacity(spec.nouns * CATEGORIES.len());
    let mut planted_label = vec![0u8; spec.nouns];
    for (i, noun) in nouns.iter().enumerate() {
        for &category in &CATEGORIES {
            let label = rng.gen_range(1..=5u8);
            if category == planted {
                planted_label[i] = label;
            }
            properties.push(PropertyRecord {
                item: noun.clone(),
                category,
                label,
            });
        }
    }

    // Per-verb acceptance threshold on the planted category.
    let mut compatible: Vec<Vec<usize>> = Vec::with_capacity(spec.verbs);
    let mut incompatible: Vec<Vec<usize>> = Vec::with_capacity(spec.verbs);
    for _ in 0..spec.verbs {
        let mut threshold = rng.gen_range(2..=4u8);
        let split_sets = |th: u8| {
            let yes: Vec<usize> = (0..spec.nouns).filter(|&i| planted_label[i] >= th).collect();
            let no: Vec<usize> = (0..spec.nouns).filter(|&i| planted_label[i] < th).collect();
            (yes, no)
        };
        let (mut yes, mut no) = split_sets(threshold);
        // Degenerate noun vocabularies can leave one side empty; walk the
        // threshold until both sides are populated, if possible.
        for candidate in [2u8, 3, 4, 5] {
            if !yes.is_empty() && !no.is_empty() {
                break;
            }
            threshold = candidate;
            let s = split_sets(threshold);
            yes = s.0;
            no = s.1;
        }
        compatible.push(yes);
        incompatible.push(no);
    }

    let mut plausibility = Vec::new();
    for &dataset in &spec.datasets {
        for (split, count) in [
            (Split::Train, spec.train),
            (Split::Valid, spec.valid),
            (Split::Test, spec.test),
        ] {
            for _ in 0..count {
                let v = rng.gen_range(0..spec.verbs);
                let s = rng.gen_range(0..spec.nouns);
                let want_plausible = rng.gen_bool(0.5);
                let side = if want_plausible {
                    &compatible[v]
                } else {
                    &incompatible[v]
                };
                let (o, rule_bit) = if side.is_empty() {
                    let o = rng.gen_range(0..spec.nouns);
                    (o, compatible[v].contains(&o))
                } else {
                    (side[rng.gen_range(0..side.len())], want_plausible)
                };
                let label = if rng.gen::<f64>() < spec.signal {
                    rule_bit
                } else {
                    rng.gen_bool(0.5)
                };
                plausibility.push(PlausibilityRecord {
                    subject: nouns[s].clone(),
                    verb: verbs[v].clone(),
                    object: nouns[o].clone(),
                    label: label as u8,
                    split,
                    dataset,
                });
            }
        }
    }
    Ok((properties, plausibility))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn load_properties_accepts_valid_rows() {
        let f = write_tmp("item,category,label\napple,size,2\nApple,weight,5\n");
        let records = load_properties(f.path()).unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(records[0].item, "apple");
        assert_eq!(records[1].item, "apple"); // lowercased
        assert_eq!(records[1].category, Category::Weight);
    }

    #[test]
    fn load_properties_rejects_out_of_range_label() {
        let f = write_tmp("item,category,label\napple,size,6\n");
        let err = load_properties(f.path()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2") && msg.contains("out of range"), "{}", msg);
    }

    #[test]
    fn load_properties_rejects_unknown_category() {
        let f = write_tmp("item,category,label\napple,luminosity,3\n");
        let err = load_properties(f.path()).unwrap_err();
        assert!(err.to_string().contains("luminosity"));
    }

    #[test]
    fn load_properties_rejects_duplicates() {
        let f = write_tmp("item,category,label\napple,size,2\napple,size,3\n");
        let err = load_properties(f.path()).unwrap_err();
        assert!(err.to_string().contains("duplicate"));
    }

    #[test]
    fn plausibility_round_trip() {
        let records = vec![PlausibilityRecord {
            subject: "man".into(),
            verb: "ate".into(),
            object: "dinner".into(),
            label: 1,
            split: Split::Train,
            dataset: DatasetId::Pep3k,
        }];
        let f = tempfile::NamedTempFile::new().unwrap();
        save_plausibility(f.path(), &records).unwrap();
        let back = load_plausibility(f.path()).unwrap();
        assert_eq!(back, records);
    }

    #[test]
    fn divergence_identity_is_zero_percent() {
        let a = vec![
            PropertyRecord {
                item: "apple".into(),
                category: Category::Size,
                label: 2,
            },
            PropertyRecord {
                item: "rock".into(),
                category: Category::Size,
                label: 3,
            },
        ];
        let report = label_divergence(&a, &a, Category::Size).unwrap();
        assert_eq!(report.divergence_percent, Some(0.0));
        assert_eq!(report.overlap, 2);
        assert_eq!(report.overlap_fraction, 1.0);
    }

    #[test]
    fn divergence_one_of_four() {
        let mk = |labels: [u8; 4]| -> Vec<PropertyRecord> {
            ["a", "b", "c", "d"]
                .iter()
                .zip(labels)
                .map(|(item, label)| PropertyRecord {
                    item: (*item).into(),
                    category: Category::Weight,
                    label,
                })
                .collect()
        };
        let a = mk([1, 2, 3, 4]);
        let b = mk([1, 2, 3, 5]);
        let report = label_divergence(&a, &b, Category::Weight).unwrap();
        assert_eq!(report.divergence_percent, Some(25.0));
    }

    #[test]
    fn divergence_zero_overlap_is_explicit() {
        let a = vec![PropertyRecord {
            item: "apple".into(),
            category: Category::Size,
            label: 2,
        }];
        let b = vec![PropertyRecord {
            item: "rock".into(),
            category: Category::Size,
            label: 2,
        }];
        let report = label_divergence(&a, &b, Category::Size).unwrap();
        assert_eq!(report.divergence_percent, None);
        assert_eq!(report.overlap, 0);
    }

    #[test]
    fn nmi_identity_independence_relabel() {
        let x = [0u8, 1, 0, 1];
        assert!((normalized_mutual_information(&x, &x).unwrap() - 1.0).abs() < 1e-12);

        let y = [0u8, 0, 1, 1];
        assert!(normalized_mutual_information(&x, &y).unwrap().abs() < 1e-12);

        let z = [1u8, 1, 0, 0];
        assert!((normalized_mutual_information(&y, &z).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nmi_zero_entropy_convention_and_length_check() {
        let x = [1u8, 1, 1, 1];
        let y = [0u8, 1, 0, 1];
        assert_eq!(normalized_mutual_information(&x, &y).unwrap(), 0.0);
        assert!(matches!(
            normalized_mutual_information(&x[..3], &y),
            Err(DataError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn partition_sizes_and_determinism() {
        let p = partition_test(100, 9).unwrap();
        let groups = p.groups();
        assert!(groups.iter().all(|g| g.len() == 20));

        let p = partition_test(102, 9).unwrap();
        let mut sizes: Vec<usize> = p.groups().iter().map(|g| g.len()).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![20, 20, 20, 21, 21]);

        let p2 = partition_test(102, 9).unwrap();
        assert_eq!(p.group_of, p2.group_of);

        assert!(matches!(
            partition_test(4, 9),
            Err(DataError::TooFewRecords { .. })
        ));
    }

    #[test]
    fn partition_is_disjoint_and_exhaustive() {
        let p = partition_test(57, 123).unwrap();
        let groups = p.groups();
        let mut seen = HashSet::new();
        for g in &groups {
            for &idx in g {
                assert!(seen.insert(idx));
            }
        }
        assert_eq!(seen.len(), 57);
    }

    #[test]
    fn synthetic_is_pure_function_of_seed_and_spec() {
        let spec = GenSpec {
            nouns: 30,
            verbs: 8,
            train: 200,
            valid: 20,
            test: 50,
            signal: 0.8,
            ..GenSpec::default()
        };
        let a = generate_synthetic(7, &spec).unwrap();
        let b = generate_synthetic(7, &spec).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        let c = generate_synthetic(8, &spec).unwrap();
        assert_ne!(a.1, c.1);
    }

    #[test]
    fn synthetic_signal_one_is_deterministic_rule() {
        let spec = GenSpec {
            nouns: 40,
            verbs: 10,
            train: 400,
            valid: 10,
            test: 100,
            signal: 1.0,
            ..GenSpec::default()
        };
        let (props, plaus) = generate_synthetic(7, &spec).unwrap();
        // label must be a function of (verb, object): no contradictions
        let mut seen: HashMap<(String, String), u8> = HashMap::new();
        for r in &plaus {
            let key = (r.verb.clone(), r.object.clone());
            if let Some(&prev) = seen.get(&key) {
                assert_eq!(prev, r.label, "rule must be deterministic at signal 1");
            } else {
                seen.insert(key, r.label);
            }
        }
        // planted category carries measurable signal
        let size_of: HashMap<&str, u8> = props
            .iter()
            .filter(|p| p.category == Category::Size)
            .map(|p| (p.item.as_str(), p.label))
            .collect();
        let xs: Vec<u8> = plaus.iter().map(|r| size_of[r.object.as_str()]).collect();
        let ys: Vec<u8> = plaus.iter().map(|r| r.label).collect();
        let nmi = normalized_mutual_information(&xs, &ys).unwrap();
        assert!(nmi >= 0.2, "planted NMI {} too weak", nmi);
    }

    #[test]
    fn synthetic_signal_zero_has_no_property_signal() {
        let spec = GenSpec {
            nouns: 40,
            verbs: 10,
            train: 4000,
            valid: 0,
            test: 100,
            signal: 0.0,
            ..GenSpec::default()
        };
        let (props, plaus) = generate_synthetic(7, &spec).unwrap();
        let size_of: HashMap<&str, u8> = props
            .iter()
            .filter(|p| p.category == Category::Size)
            .map(|p| (p.item.as_str(), p.label))
            .collect();
        let xs: Vec<u8> = plaus.iter().map(|r| size_of[r.object.as_str()]).collect();
        let ys: Vec<u8> = plaus.iter().map(|r| r.label).collect();
        let nmi = normalized_mutual_information(&xs, &ys).unwrap();
        assert!(nmi < 0.02, "noise-only NMI {} unexpectedly high", nmi);
    }

    #[test]
    fn synthetic_rejects_bad_spec() {
        let mut spec = GenSpec::default();
        spec.signal = 1.5;
        assert!(matches!(
            generate_synthetic(1, &spec),
            Err(DataError::InvalidSpec(_))
        ));
    }
}
