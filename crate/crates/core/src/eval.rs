//! Accuracy, per-category breakdowns, system comparison and attention dumps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use thiserror::Error;

use crate::corpus::{ClozeExample, EntityId};
use crate::features::FeatureGroup;
use crate::par;
use crate::reader::{self, ReaderError, ReaderModel};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("prediction and gold key sets differ ({0})")]
    KeyMismatch(String),
    #[error("unknown category token {0:?}")]
    UnknownCategoryToken(String),
    #[error("bad label line {0:?}")]
    BadLabelLine(String),
    #[error("reports cover different category sets")]
    CategorySetMismatch,
    #[error(transparent)]
    Reader(#[from] ReaderError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Hand-analysis categories, in reporting order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CategoryLabel {
    ExactMatch,
    Paraphrasing,
    PartialClue,
    MultipleSentences,
    CoreferenceError,
    AmbiguousHard,
}

impl CategoryLabel {
    pub const ALL: [CategoryLabel; 6] = [
        CategoryLabel::ExactMatch,
        CategoryLabel::Paraphrasing,
        CategoryLabel::PartialClue,
        CategoryLabel::MultipleSentences,
        CategoryLabel::CoreferenceError,
        CategoryLabel::AmbiguousHard,
    ];

    /// Token used in label files.
    pub fn token(self) -> &'static str {
        match self {
            CategoryLabel::ExactMatch => "exact-match",
            CategoryLabel::Paraphrasing => "paraphrasing",
            CategoryLabel::PartialClue => "partial-clue",
            CategoryLabel::MultipleSentences => "multiple-sentences",
            CategoryLabel::CoreferenceError => "coref-error",
            CategoryLabel::AmbiguousHard => "ambiguous-hard",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            CategoryLabel::ExactMatch => "Exact match",
            CategoryLabel::Paraphrasing => "Paraphrasing",
            CategoryLabel::PartialClue => "Partial clue",
            CategoryLabel::MultipleSentences => "Multiple sentences",
            CategoryLabel::CoreferenceError => "Coreference errors",
            CategoryLabel::AmbiguousHard => "Ambiguous / hard",
        }
    }
}

impl std::str::FromStr for CategoryLabel {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, EvalError> {
        CategoryLabel::ALL
            .into_iter()
            .find(|c| c.token() == s)
            .ok_or_else(|| EvalError::UnknownCategoryToken(s.to_string()))
    }
}

/// `example_id<TAB>category` lines.
pub fn parse_label_file(text: &str) -> Result<BTreeMap<String, CategoryLabel>, EvalError> {
    let mut labels = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (id, cat) = line.split_once('\t').ok_or_else(|| EvalError::BadLabelLine(line.to_string()))?;
        labels.insert(id.to_string(), cat.trim().parse()?);
    }
    Ok(labels)
}

pub fn render_label_file(labels: &BTreeMap<String, CategoryLabel>) -> String {
    labels.iter().map(|(id, c)| format!("{id}\t{}\n", c.token())).collect()
}

fn check_keys(predictions: &BTreeMap<String, EntityId>, gold: &BTreeMap<String, EntityId>) -> Result<(), EvalError> {
    if predictions.len() != gold.len() || !predictions.keys().zip(gold.keys()).all(|(a, b)| a == b) {
        let missing = gold.keys().find(|k| !predictions.contains_key(*k));
        let extra = predictions.keys().find(|k| !gold.contains_key(*k));
        return Err(EvalError::KeyMismatch(format!("first missing {missing:?}, first extra {extra:?}")));
    }
    Ok(())
}

/// Fraction of examples whose prediction equals the gold answer.
pub fn accuracy(predictions: &BTreeMap<String, EntityId>, gold: &BTreeMap<String, EntityId>) -> Result<f64, EvalError> {
    check_keys(predictions, gold)?;
    if gold.is_empty() {
        return Ok(0.0);
    }
    let hits = gold.iter().filter(|(k, g)| predictions[*k] == **g).count();
    Ok(hits as f64 / gold.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CategoryStats {
    pub total: usize,
    pub correct: usize,
}

impl CategoryStats {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }

    /// `13 (100.0%)`
    pub fn cell(&self) -> String {
        format!("{} ({}%)", self.correct, format_percent(self.correct, self.total))
    }
}

/// Percentage with one decimal. The ratio is rounded half-up to hundredths
/// of a percent first and then to tenths, so 32/41 renders as 78.1.
pub fn format_percent(correct: usize, total: usize) -> String {
    if total == 0 {
        return "0.0".to_string();
    }
    let (c, t) = (correct as u128, total as u128);
    let hundredths = (c * 20_000 + t) / (2 * t);
    let tenths = (hundredths + 5) / 10;
    format!("{}.{}", tenths / 10, tenths % 10)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub overall: CategoryStats,
    pub per_category: BTreeMap<CategoryLabel, CategoryStats>,
    pub unlabeled_count: usize,
}

impl EvalReport {
    pub fn total_accuracy(&self) -> f64 {
        self.overall.accuracy()
    }

    /// Table with one row per present category and a final `All` row.
    pub fn render(&self) -> String {
        let mut s = format!("{:<20}{:>14}\n", "Category", "Correct");
        for (c, st) in &self.per_category {
            let _ = writeln!(s, "{:<20}{:>14}", c.display_name(), st.cell());
        }
        if self.unlabeled_count > 0 {
            let _ = writeln!(s, "{:<20}{:>14}", "(unlabeled)", self.unlabeled_count);
        }
        let _ = writeln!(s, "{:<20}{:>14}", "All", self.overall.cell());
        s
    }
}

pub fn per_category_report(
    predictions: &BTreeMap<String, EntityId>,
    gold: &BTreeMap<String, EntityId>,
    labels: &BTreeMap<String, CategoryLabel>,
) -> Result<EvalReport, EvalError> {
    check_keys(predictions, gold)?;
    let mut report = EvalReport::default();
    for (id, g) in gold {
        let hit = predictions[id] == *g;
        report.overall.total += 1;
        report.overall.correct += hit as usize;
        match labels.get(id) {
            Some(c) => {
                let st = report.per_category.entry(*c).or_default();
                st.total += 1;
                st.correct += hit as usize;
            }
            None => report.unlabeled_count += 1,
        }
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub label: String,
    pub a: CategoryStats,
    pub b: CategoryStats,
}

impl ComparisonRow {
    /// Accuracy difference `b - a`, in percentage points.
    pub fn delta_points(&self) -> f64 {
        100.0 * (self.b.accuracy() - self.a.accuracy())
    }

    pub fn render(&self) -> String {
        format!("{:<20}{:>14}{:>14}", self.label, self.a.cell(), self.b.cell())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub names: (String, String),
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    pub fn render(&self) -> String {
        let mut s = format!("{:<20}{:>14}{:>14}\n", "Category", self.names.0, self.names.1);
        for r in &self.rows {
            s.push_str(&r.render());
            s.push('\n');
        }
        s
    }
}

/// Side-by-side per-category table of two reports.
pub fn compare_systems(
    a: &EvalReport,
    b: &EvalReport,
    names: (&str, &str),
) -> Result<Comparison, EvalError> {
    if !a.per_category.keys().eq(b.per_category.keys()) {
        return Err(EvalError::CategorySetMismatch);
    }
    let mut rows: Vec<ComparisonRow> = a
        .per_category
        .iter()
        .map(|(c, sa)| ComparisonRow { label: c.display_name().to_string(), a: *sa, b: b.per_category[c] })
        .collect();
    rows.push(ComparisonRow { label: "All".into(), a: a.overall, b: b.overall });
    Ok(Comparison { names: (names.0.to_string(), names.1.to_string()), rows })
}

/// Dev accuracy of the full ranker and of each single-group ablation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AblationReport {
    pub full_accuracy: f64,
    pub rows: Vec<(FeatureGroup, f64)>,
}

impl AblationReport {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("# ranker: pairwise max-margin linear model (stands in for boosted trees)\n");
        s.push_str("group\tdev_accuracy\n");
        let _ = writeln!(s, "full\t{:.4}", self.full_accuracy);
        for (g, acc) in &self.rows {
            let _ = writeln!(s, "-{}\t{:.4}", g.name(), acc);
        }
        s
    }

    /// Group whose removal costs the most accuracy, with the drop.
    pub fn largest_drop(&self) -> Option<(FeatureGroup, f64)> {
        self.rows
            .iter()
            .map(|(g, acc)| (*g, self.full_accuracy - acc))
            .fold(None, |best, cur| match best {
                Some(b) if b.1 >= cur.1 => Some(b),
                _ => Some(cur),
            })
    }
}

/// Write `example_id<TAB>position<TAB>token<TAB>alpha` rows for every
/// example; padding never appears because only real positions are encoded.
pub fn dump_attention(model: &ReaderModel, examples: &[ClozeExample], out: &mut impl Write) -> Result<(), EvalError> {
    let traces = par::map(examples, |ex| reader::predict_reader(model, ex));
    writeln!(out, "example_id\tposition\ttoken\talpha")?;
    for (ex, trace) in examples.iter().zip(traces) {
        let (_, trace) = trace?;
        for (i, (tok, a)) in ex.passage.iter().zip(&trace.alpha).enumerate() {
            writeln!(out, "{}\t{i}\t{tok}\t{a:.9}", ex.source_id)?;
        }
    }
    Ok(())
}
