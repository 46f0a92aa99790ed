//! Selectional preference and selectional association statistics computed
//! from s-v-o corpora.
//!
//! A verb's selectional preference is the KL divergence (in nats) between
//! the noun distribution conditioned on the verb and the marginal noun
//! distribution. A verb-noun pair's selectional association is that pair's
//! share of the preference; the shares sum to 1 over nouns. The base factor
//! of the logarithm cancels between numerator and denominator, and the
//! implementation performs that cancellation analytically, so association
//! values are identical under any log base.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use crate::data::{DataError, PlausibilityRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Relation {
    Subject,
    Object,
}

impl Relation {
    pub fn as_str(&self) -> &'static str {
        match self {
            Relation::Subject => "subject",
            Relation::Object => "object",
        }
    }

    pub fn parse(s: &str) -> Option<Relation> {
        match s {
            "subject" => Some(Relation::Subject),
            "object" => Some(Relation::Object),
            _ => None,
        }
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug)]
pub enum AssociationError {
    EmptyCorpus,
    NegativeAlpha(f64),
    UnknownVerb(String),
    /// S_R(v) = 0: the verb expresses no preference, so association shares
    /// are undefined. Callers substitute a uniform score.
    ZeroPreference(String),
    NoRecords(Relation),
}

impl fmt::Display for AssociationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::EmptyCorpus => write!(f, "empty corpus"),
            Self::NegativeAlpha(a) => write!(f, "smoothing alpha {} is negative", a),
            Self::UnknownVerb(v) => write!(f, "verb '{}' not in the corpus", v),
            Self::ZeroPreference(v) => {
                write!(f, "verb '{}' has zero selectional preference", v)
            }
            Self::NoRecords(rel) => write!(f, "no records for relation {}", rel),
        }
    }
}

impl std::error::Error for AssociationError {}

/// Smoothed verb-noun co-occurrence statistics for one relation.
#[derive(Debug, Clone)]
pub struct RelationCounts {
    pub relation: Relation,
    alpha: f64,
    pair: HashMap<(String, String), u64>,
    verb_total: HashMap<String, u64>,
    noun_total: HashMap<String, u64>,
    total: u64,
    nouns: Vec<String>,
    verbs: Vec<String>,
}

impl RelationCounts {
    pub fn verbs(&self) -> &[String] {
        &self.verbs
    }

    pub fn nouns(&self) -> &[String] {
        &self.nouns
    }

    pub fn contains_verb(&self, verb: &str) -> bool {
        self.verb_total.contains_key(verb)
    }

    /// Smoothed marginal P(c).
    pub fn noun_prob(&self, noun: &str) -> f64 {
        let count = self.noun_total.get(noun).copied().unwrap_or(0);
        let classes = self.nouns.len() as f64;
        (count as f64 + self.alpha) / (self.total as f64 + self.alpha * classes)
    }

    /// Smoothed conditional P(c | v).
    pub fn cond_prob(&self, verb: &str, noun: &str) -> f64 {
        let pair = self
            .pair
            .get(&(verb.to_string(), noun.to_string()))
            .copied()
            .unwrap_or(0);
        let v = self.verb_total.get(verb).copied().unwrap_or(0);
        let classes = self.nouns.len() as f64;
        (pair as f64 + self.alpha) / (v as f64 + self.alpha * classes)
    }

    pub fn pair_count(&self, verb: &str, noun: &str) -> u64 {
        self.pair
            .get(&(verb.to_string(), noun.to_string()))
            .copied()
            .unwrap_or(0)
    }
}

/// Tally verb-noun co-occurrences for one relation with add-alpha smoothing.
pub fn estimate(
    corpus: &[PlausibilityRecord],
    relation: Relation,
    alpha: f64,
) -> Result<RelationCounts, AssociationError> {
    if corpus.is_empty() {
        return Err(AssociationError::EmptyCorpus);
    }
    if alpha < 0.0 {
        return Err(AssociationError::NegativeAlpha(alpha));
    }
    let mut pair: HashMap<(String, String), u64> = HashMap::new();
    let mut verb_total: HashMap<String, u64> = HashMap::new();
    let mut noun_total: HashMap<String, u64> = HashMap::new();
    let mut total = 0u64;
    for record in corpus {
        let noun = match relation {
            Relation::Subject => &record.subject,
            Relation::Object => &record.object,
        };
        *pair.entry((record.verb.clone(), noun.clone())).or_insert(0) += 1;
        *verb_total.entry(record.verb.clone()).or_insert(0) += 1;
        *noun_total.entry(noun.clone()).or_insert(0) += 1;
        total += 1;
    }
    let mut nouns: Vec<String> = noun_total.keys().cloned().collect();
    nouns.sort();
    let mut verbs: Vec<String> = verb_total.keys().cloned().collect();
    verbs.sort();
    Ok(RelationCounts {
        relation,
        alpha,
        pair,
        verb_total,
        noun_total,
        total,
        nouns,
        verbs,
    })
}

/// One preference term: P(c|v) * ln(P(c|v) / P(c)), with 0 * ln 0 = 0.
fn preference_term(p_cond: f64, p_marginal: f64) -> f64 {
    if p_cond == 0.0 {
        0.0
    } else {
        p_cond * (p_cond / p_marginal).ln()
    }
}

/// S_R(v): KL divergence of P(c|v) from P(c), in nats.
pub fn selectional_preference(
    verb: &str,
    counts: &RelationCounts,
) -> Result<f64, AssociationError> {
    if !counts.contains_verb(verb) {
        return Err(AssociationError::UnknownVerb(verb.to_string()));
    }
    let total: f64 = counts
        .nouns
        .iter()
        .map(|c| preference_term(counts.cond_prob(verb, c), counts.noun_prob(c)))
        .sum();
    // KL is analytically non-negative; rounding can leave a tiny negative.
    Ok(total.max(0.0))
}

/// A_R(v, c): the pair's share of the verb's preference. The log base
/// cancels analytically, so the result is base-independent.
pub fn selectional_association(
    verb: &str,
    noun: &str,
    counts: &RelationCounts,
) -> Result<f64, AssociationError> {
    if !counts.contains_verb(verb) {
        return Err(AssociationError::UnknownVerb(verb.to_string()));
    }
    let preference: f64 = counts
        .nouns
        .iter()
        .map(|c| preference_term(counts.cond_prob(verb, c), counts.noun_prob(c)))
        .sum();
    if preference <= 0.0 {
        return Err(AssociationError::ZeroPreference(verb.to_string()));
    }
    let term = preference_term(counts.cond_prob(verb, noun), counts.noun_prob(noun));
    Ok(term / preference)
}

/// A scored verb-noun pair; `score` is the min-max normalized raw score.
#[derive(Debug, Clone, PartialEq)]
pub struct AssociationRecord {
    pub verb: String,
    pub noun: String,
    pub relation: Relation,
    pub raw_score: f64,
    pub score: f64,
}

/// Result of scoring every observed pair of one relation.
#[derive(Debug, Clone)]
pub struct ScoredRelation {
    pub records: Vec<AssociationRecord>,
    /// Pairs whose verb had zero preference; scored 0.5 by convention.
    pub zero_preference_verbs: Vec<String>,
}

/// Score every (verb, noun) pair observed in the corpus for one relation,
/// then min-max normalize per relation. Pairs of zero-preference verbs get
/// score 0.5 and the verb is reported.
pub fn score_relation(
    corpus: &[PlausibilityRecord],
    relation: Relation,
    alpha: f64,
) -> Result<ScoredRelation, AssociationError> {
    let counts = estimate(corpus, relation, alpha)?;
    let mut pairs: Vec<(String, String)> = counts
        .pair
        .keys()
        .cloned()
        .collect();
    pairs.sort();
    let mut records = Vec::with_capacity(pairs.len());
    let mut zero_preference: Vec<String> = Vec::new();
    for (verb, noun) in pairs {
        match selectional_association(&verb, &noun, &counts) {
            Ok(raw) => records.push(AssociationRecord {
                verb,
                noun,
                relation,
                raw_score: raw,
                score: f64::NAN, // filled by normalization below
            }),
            Err(AssociationError::ZeroPreference(v)) => {
                if !zero_preference.contains(&v) {
                    zero_preference.push(v.clone());
                }
                records.push(AssociationRecord {
                    verb,
                    noun,
                    relation,
                    raw_score: 0.0,
                    score: 0.5,
                });
            }
            Err(e) => return Err(e),
        }
    }
    normalize_scores(&mut records);
    Ok(ScoredRelation {
        records,
        zero_preference_verbs: zero_preference,
    })
}

/// Min-max normalize raw scores into [0, 1] per relation; a constant raw
/// score maps to 0.5. Records that already carry a score (the
/// zero-preference convention) are left untouched.
pub fn normalize_scores(records: &mut [AssociationRecord]) {
    for relation in [Relation::Subject, Relation::Object] {
        let raw: Vec<f64> = records
            .iter()
            .filter(|r| r.relation == relation && r.score.is_nan())
            .map(|r| r.raw_score)
            .collect();
        if raw.is_empty() {
            continue;
        }
        let min = raw.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for r in records.iter_mut() {
            if r.relation != relation || !r.score.is_nan() {
                continue;
            }
            r.score = if max == min {
                0.5
            } else {
                (r.raw_score - min) / (max - min)
            };
        }
    }
}

pub fn save_association(path: &Path, records: &[AssociationRecord]) -> Result<(), DataError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["verb", "noun", "relation", "raw_score", "score"])?;
    for r in records {
        w.write_record([
            r.verb.as_str(),
            r.noun.as_str(),
            r.relation.as_str(),
            &format!("{}", r.raw_score),
            &format!("{}", r.score),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_association(path: &Path) -> Result<Vec<AssociationRecord>, DataError> {
    let mut reader = csv::ReaderBuilder::new().from_path(path)?;
    let header = reader.headers()?.iter().collect::<Vec<_>>().join(",");
    if header != "verb,noun,relation,raw_score,score" {
        return Err(DataError::MissingHeader {
            expected: "verb,noun,relation,raw_score,score",
            got: header,
        });
    }
    let mut out = Vec::new();
    for result in reader.records() {
        let record = result?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let parse_f64 = |s: &str, field: &'static str| -> Result<f64, DataError> {
            s.trim().parse().map_err(|_| DataError::Row {
                line,
                field,
                message: format!("not a number: '{}'", s.trim()),
            })
        };
        let relation = Relation::parse(record[2].trim()).ok_or_else(|| DataError::Row {
            line,
            field: "relation",
            message: format!("unknown relation '{}'", record[2].trim()),
        })?;
        let score = parse_f64(&record[4], "score")?;
        if !(0.0..=1.0).contains(&score) {
            return Err(DataError::Row {
                line,
                field: "score",
                message: format!("score {} outside [0, 1]", score),
            });
        }
        out.push(AssociationRecord {
            verb: record[0].trim().to_string(),
            noun: record[1].trim().to_string(),
            relation,
            raw_score: parse_f64(&record[3], "raw_score")?,
            score,
        });
    }
    Ok(out)
}

/// One cell of the joint association grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointCell {
    pub count: usize,
    pub mean_plausibility: f64,
}

/// 5x5 equal-width binning of (subject score, object score) against mean
/// plausibility, plus the triples that could not be scored.
#[derive(Debug, Clone)]
pub struct JointReport {
    pub cells: [[JointCell; 5]; 5],
    pub scored: usize,
    pub rejects: Vec<PlausibilityRecord>,
}

pub const JOINT_BINS: usize = 5;

fn bin_of(score: f64) -> usize {
    ((score * JOINT_BINS as f64) as usize).min(JOINT_BINS - 1)
}

/// Mean plausibility by (SV score bin, OV score bin). Triples missing
/// either score are reported, not silently dropped.
pub fn joint_association_report(
    association: &[AssociationRecord],
    plausibility: &[PlausibilityRecord],
) -> JointReport {
    let mut sv: HashMap<(&str, &str), f64> = HashMap::new();
    let mut ov: HashMap<(&str, &str), f64> = HashMap::new();
    for r in association {
        match r.relation {
            Relation::Subject => sv.insert((r.verb.as_str(), r.noun.as_str()), r.score),
            Relation::Object => ov.insert((r.verb.as_str(), r.noun.as_str()), r.score),
        };
    }
    let mut sums = [[0.0f64; JOINT_BINS]; JOINT_BINS];
    let mut counts = [[0usize; JOINT_BINS]; JOINT_BINS];
    let mut rejects = Vec::new();
    let mut scored = 0usize;
    for record in plausibility {
        let s = sv.get(&(record.verb.as_str(), record.subject.as_str()));
        let o = ov.get(&(record.verb.as_str(), record.object.as_str()));
        match (s, o) {
            (Some(&s), Some(&o)) => {
                let (i, j) = (bin_of(s), bin_of(o));
                sums[i][j] += record.label as f64;
                counts[i][j] += 1;
                scored += 1;
            }
            _ => rejects.push(record.clone()),
        }
    }
    let mut cells = [[JointCell {
        count: 0,
        mean_plausibility: f64::NAN,
    }; JOINT_BINS]; JOINT_BINS];
    for i in 0..JOINT_BINS {
        for j in 0..JOINT_BINS {
            cells[i][j] = JointCell {
                count: counts[i][j],
                mean_plausibility: if counts[i][j] > 0 {
                    sums[i][j] / counts[i][j] as f64
                } else {
                    f64::NAN
                },
            };
        }
    }
    JointReport {
        cells,
        scored,
        rejects,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DatasetId, Split};

    fn record(verb: &str, object: &str) -> PlausibilityRecord {
        PlausibilityRecord {
            subject: "it".into(),
            verb: verb.into(),
            object: object.into(),
            label: 1,
            split: Split::Train,
            dataset: DatasetId::Pep3k,
        }
    }

    /// (eat,apple) x2, (eat,rock) x1, (see,apple) x1, (see,rock) x2
    fn toy_corpus() -> Vec<PlausibilityRecord> {
        vec![
            record("eat", "apple"),
            record("eat", "apple"),
            record("eat", "rock"),
            record("see", "apple"),
            record("see", "rock"),
            record("see", "rock"),
        ]
    }

    #[test]
    fn estimate_hand_tally() {
        let counts = estimate(&toy_corpus(), Relation::Object, 0.0).unwrap();
        assert!((counts.noun_prob("apple") - 0.5).abs() < 1e-15);
        assert!((counts.cond_prob("eat", "apple") - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn estimate_rejects_empty_and_negative_alpha() {
        assert!(matches!(
            estimate(&[], Relation::Object, 0.0),
            Err(AssociationError::EmptyCorpus)
        ));
        assert!(matches!(
            estimate(&toy_corpus(), Relation::Object, -1.0),
            Err(AssociationError::NegativeAlpha(_))
        ));
    }

    #[test]
    fn unseen_pair_with_zero_alpha_contributes_nothing() {
        let mut corpus = toy_corpus();
        corpus.push(record("chew", "apple"));
        let counts = estimate(&corpus, Relation::Object, 0.0).unwrap();
        assert_eq!(counts.cond_prob("chew", "rock"), 0.0);
        let s = selectional_preference("chew", &counts).unwrap();
        assert!(s.is_finite());
    }

    #[test]
    fn large_alpha_approaches_uniform() {
        let counts = estimate(&toy_corpus(), Relation::Object, 1e9).unwrap();
        assert!((counts.cond_prob("eat", "apple") - 0.5).abs() < 1e-6);
        let s = selectional_preference("eat", &counts).unwrap();
        assert!(s < 1e-12);
    }

    #[test]
    fn preference_hand_computation() {
        let counts = estimate(&toy_corpus(), Relation::Object, 0.0).unwrap();
        // (2/3) ln(4/3) + (1/3) ln(2/3)
        let expected = (2.0 / 3.0) * (4.0f64 / 3.0).ln() + (1.0 / 3.0) * (2.0f64 / 3.0).ln();
        let s = selectional_preference("eat", &counts).unwrap();
        assert!((s - expected).abs() < 1e-12);
        assert!((s - 0.05663).abs() < 1e-5);
    }

    #[test]
    fn preference_zero_when_conditional_matches_marginal() {
        // one verb seen with every noun equally often: P(c|v) = P(c)
        let corpus = vec![record("v", "a"), record("v", "b")];
        let counts = estimate(&corpus, Relation::Object, 0.0).unwrap();
        let s = selectional_preference("v", &counts).unwrap();
        assert_eq!(s, 0.0);
    }

    #[test]
    fn preference_unknown_verb_errors() {
        let counts = estimate(&toy_corpus(), Relation::Object, 0.0).unwrap();
        assert!(matches!(
            selectional_preference("fly", &counts),
            Err(AssociationError::UnknownVerb(_))
        ));
    }

    #[test]
    fn association_hand_computation_and_sum() {
        let counts = estimate(&toy_corpus(), Relation::Object, 0.0).unwrap();
        let a_apple = selectional_association("eat", "apple", &counts).unwrap();
        let a_rock = selectional_association("eat", "rock", &counts).unwrap();
        assert!((a_apple - 3.3866).abs() < 1e-4, "a_apple = {}", a_apple);
        assert!((a_rock + 2.3866).abs() < 1e-4, "a_rock = {}", a_rock);
        assert!((a_apple + a_rock - 1.0).abs() < 1e-12);
    }

    #[test]
    fn association_zero_preference_is_explicit() {
        let corpus = vec![record("v", "a"), record("v", "b")];
        let counts = estimate(&corpus, Relation::Object, 0.0).unwrap();
        assert!(matches!(
            selectional_association("v", "a", &counts),
            Err(AssociationError::ZeroPreference(_))
        ));
    }

    #[test]
    fn preference_invariant_under_corpus_duplication() {
        let corpus = toy_corpus();
        let doubled: Vec<PlausibilityRecord> = corpus
            .iter()
            .chain(corpus.iter())
            .cloned()
            .collect();
        let c1 = estimate(&corpus, Relation::Object, 0.0).unwrap();
        let c2 = estimate(&doubled, Relation::Object, 0.0).unwrap();
        for verb in ["eat", "see"] {
            let s1 = selectional_preference(verb, &c1).unwrap();
            let s2 = selectional_preference(verb, &c2).unwrap();
            assert!((s1 - s2).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_min_max_and_degenerate() {
        let mut records = vec![
            AssociationRecord {
                verb: "eat".into(),
                noun: "apple".into(),
                relation: Relation::Object,
                raw_score: 3.3866,
                score: f64::NAN,
            },
            AssociationRecord {
                verb: "eat".into(),
                noun: "rock".into(),
                relation: Relation::Object,
                raw_score: -2.3866,
                score: f64::NAN,
            },
        ];
        normalize_scores(&mut records);
        assert_eq!(records[0].score, 1.0);
        assert_eq!(records[1].score, 0.0);

        let mut constant = vec![
            AssociationRecord {
                verb: "v".into(),
                noun: "a".into(),
                relation: Relation::Subject,
                raw_score: 0.7,
                score: f64::NAN,
            },
            AssociationRecord {
                verb: "v".into(),
                noun: "b".into(),
                relation: Relation::Subject,
                raw_score: 0.7,
                score: f64::NAN,
            },
        ];
        normalize_scores(&mut constant);
        assert!(constant.iter().all(|r| r.score == 0.5));
    }

    #[test]
    fn score_relation_flags_zero_preference_and_keeps_pairs() {
        // "blur" occurs with both nouns proportionally to the marginal:
        // its conditional equals the marginal, so S_R = 0.
        let corpus = vec![
            record("blur", "a"),
            record("blur", "b"),
            record("et", "a"),
            record("et", "a"),
            record("et", "b"),
            record("vu", "b"),
            record("vu", "b"),
            record("vu", "a"),
        ];
        let scored = score_relation(&corpus, Relation::Object, 0.0).unwrap();
        assert!(scored.zero_preference_verbs.contains(&"blur".to_string()));
        let blur: Vec<_> = scored
            .records
            .iter()
            .filter(|r| r.verb == "blur")
            .collect();
        assert_eq!(blur.len(), 2);
        assert!(blur.iter().all(|r| r.score == 0.5));
        assert!(scored.records.iter().all(|r| (0.0..=1.0).contains(&r.score)));
    }

    #[test]
    fn joint_report_partitions_and_plants() {
        // plausibility = 1 iff both scores > 0.5
        let mut association = Vec::new();
        let mut plausibility = Vec::new();
        let grid = [0.1, 0.3, 0.5, 0.7, 0.9];
        for (i, &s) in grid.iter().enumerate() {
            for (j, &o) in grid.iter().enumerate() {
                let verb = format!("v{}{}", i, j);
                association.push(AssociationRecord {
                    verb: verb.clone(),
                    noun: "subj".into(),
                    relation: Relation::Subject,
                    raw_score: s,
                    score: s,
                });
                association.push(AssociationRecord {
                    verb: verb.clone(),
                    noun: "obj".into(),
                    relation: Relation::Object,
                    raw_score: o,
                    score: o,
                });
                plausibility.push(PlausibilityRecord {
                    subject: "subj".into(),
                    verb,
                    object: "obj".into(),
                    label: ((s > 0.5) && (o > 0.5)) as u8,
                    split: Split::Test,
                    dataset: DatasetId::Pep3k,
                });
            }
        }
        // one triple with no scores at all
        plausibility.push(record("mystery", "thing"));

        let report = joint_association_report(&association, &plausibility);
        assert_eq!(report.scored, 25);
        assert_eq!(report.rejects.len(), 1);
        let total: usize = report
            .cells
            .iter()
            .flatten()
            .map(|c| c.count)
            .sum();
        assert_eq!(total, report.scored);
        assert_eq!(report.cells[4][4].mean_plausibility, 1.0);
        assert_eq!(report.cells[0][0].mean_plausibility, 0.0);
    }

    #[test]
    fn association_csv_round_trip() {
        let scored = score_relation(&toy_corpus(), Relation::Object, 0.0).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        save_association(f.path(), &scored.records).unwrap();
        let back = load_association(f.path()).unwrap();
        assert_eq!(back.len(), scored.records.len());
        for (a, b) in back.iter().zip(&scored.records) {
            assert_eq!(a.verb, b.verb);
            assert_eq!(a.score, b.score);
        }
    }
}
