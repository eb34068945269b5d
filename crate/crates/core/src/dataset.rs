//! Label-free tabular preprocessing and balanced case sampling.
//!
//! Feature transforms operate on [`FeatureTable`], which has no label
//! column at all; only [`balance_sample`] ever looks at labels.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::{MapAccess, Visitor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DatasetError {
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
    #[error("label column `{0}` cannot be excluded")]
    ExcludeLabel(String),
    #[error("column `{0}` has no values")]
    EmptyColumn(String),
    #[error("column `{column}` is already percentile-encoded")]
    AlreadyEncoded { column: String },
    #[error("row {row} has {found} values, expected {expected}")]
    RowWidth { row: usize, found: usize, expected: usize },
    #[error("{rows} rows but {labels} labels")]
    LabelCount { rows: usize, labels: usize },
    #[error("both classes must be present")]
    MissingClass,
    #[error("requested {requested} cases per class but the minority class has {available}")]
    NotEnoughCases { requested: usize, available: usize },
    #[error("duplicate case id `{0}`")]
    DuplicateId(String),
}

/// Binary outcome label; `Good` (1) is a good credit profile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Label {
    Bad,
    Good,
}

impl Label {
    pub fn complement(self) -> Label {
        match self {
            Label::Bad => Label::Good,
            Label::Good => Label::Bad,
        }
    }
}

impl TryFrom<u8> for Label {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        match v {
            0 => Ok(Label::Bad),
            1 => Ok(Label::Good),
            other => Err(format!("label must be 0 or 1, got {other}")),
        }
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        match l {
            Label::Bad => 0,
            Label::Good => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Numeric,
    Categorical,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub kind: ColumnKind,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Number(f64),
    Text(String),
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cell::Number(v) => write!(f, "{v}"),
            Cell::Text(s) => f.write_str(s),
        }
    }
}

/// Feature columns only. The label never lives here.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    columns: Vec<Column>,
    rows: Vec<Vec<Cell>>,
}

impl FeatureTable {
    pub fn new(columns: Vec<Column>, rows: Vec<Vec<Cell>>) -> Result<Self, DatasetError> {
        for (i, row) in rows.iter().enumerate() {
            if row.len() != columns.len() {
                return Err(DatasetError::RowWidth { row: i, found: row.len(), expected: columns.len() });
            }
        }
        Ok(Self { columns, rows })
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn rows(&self) -> &[Vec<Cell>] {
        &self.rows
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn exclude(self, names: &[String]) -> Result<Self, DatasetError> {
        let mut drop = Vec::with_capacity(names.len());
        for n in names {
            drop.push(self.column_index(n).ok_or_else(|| DatasetError::UnknownColumn(n.clone()))?);
        }
        let keep: Vec<usize> = (0..self.columns.len()).filter(|i| !drop.contains(i)).collect();
        let columns = keep.iter().map(|&i| self.columns[i].clone()).collect();
        let rows = self
            .rows
            .into_iter()
            .map(|mut row| {
                let mut out = Vec::with_capacity(keep.len());
                for &i in &keep {
                    out.push(core::mem::replace(&mut row[i], Cell::Text(String::new())));
                }
                out
            })
            .collect();
        Ok(Self { columns, rows })
    }

    /// Replace every numeric value by its inclusive nearest-rank percentile,
    /// rendered as ordinal text ("65th percentile").
    pub fn percentile_encode(mut self) -> Result<Self, DatasetError> {
        let n = self.rows.len();
        for (c, column) in self.columns.iter().enumerate() {
            if column.kind != ColumnKind::Numeric {
                continue;
            }
            if n == 0 {
                return Err(DatasetError::EmptyColumn(column.name.clone()));
            }
            let mut values = Vec::with_capacity(n);
            for row in &self.rows {
                match row[c] {
                    Cell::Number(v) => values.push(v),
                    Cell::Text(_) => return Err(DatasetError::AlreadyEncoded { column: column.name.clone() }),
                }
            }
            let mut sorted = values.clone();
            sorted.sort_by(f64::total_cmp);
            for (row, v) in self.rows.iter_mut().zip(values) {
                let at_or_below = sorted.partition_point(|u| *u <= v);
                row[c] = Cell::Text(percentile_text(nearest_rank_percentile(at_or_below, n)));
            }
        }
        Ok(self)
    }
}

/// `round(100 * count / n)`, halves rounded up.
pub fn nearest_rank_percentile(count: usize, n: usize) -> u32 {
    ((200 * count + n) / (2 * n)) as u32
}

pub fn ordinal(n: u32) -> String {
    let suffix = match (n % 10, n % 100) {
        (_, 11..=13) => "th",
        (1, _) => "st",
        (2, _) => "nd",
        (3, _) => "rd",
        _ => "th",
    };
    format!("{n}{suffix}")
}

pub fn percentile_text(p: u32) -> String {
    format!("{} percentile", ordinal(p))
}

/// A feature table plus its binary labels, kept in a separate vector.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTable {
    features: FeatureTable,
    label_column: String,
    labels: Vec<Label>,
    ids: Option<Vec<String>>,
}

impl RawTable {
    pub fn new(features: FeatureTable, label_column: impl Into<String>, labels: Vec<Label>) -> Result<Self, DatasetError> {
        if features.rows.len() != labels.len() {
            return Err(DatasetError::LabelCount { rows: features.rows.len(), labels: labels.len() });
        }
        Ok(Self { features, label_column: label_column.into(), labels, ids: None })
    }

    /// Use explicit case ids instead of the positional default.
    pub fn with_ids(mut self, ids: Vec<String>) -> Result<Self, DatasetError> {
        if ids.len() != self.labels.len() {
            return Err(DatasetError::LabelCount { rows: ids.len(), labels: self.labels.len() });
        }
        let mut seen = alloc::collections::BTreeSet::new();
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(DatasetError::DuplicateId(id.clone()));
            }
        }
        self.ids = Some(ids);
        Ok(self)
    }

    pub fn features(&self) -> &FeatureTable {
        &self.features
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn label_column(&self) -> &str {
        &self.label_column
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn map_features(self, f: impl FnOnce(FeatureTable) -> Result<FeatureTable, DatasetError>) -> Result<Self, DatasetError> {
        Ok(Self { features: f(self.features)?, ..self })
    }

    pub fn exclude_features(self, names: &[String]) -> Result<Self, DatasetError> {
        if let Some(n) = names.iter().find(|n| **n == self.label_column) {
            return Err(DatasetError::ExcludeLabel(n.clone()));
        }
        self.map_features(|f| f.exclude(names))
    }

    pub fn percentile_encode(self) -> Result<Self, DatasetError> {
        self.map_features(FeatureTable::percentile_encode)
    }

    pub fn into_cases(self) -> Vec<CaseRecord> {
        let columns = self.features.columns;
        let ids = self.ids;
        self.features
            .rows
            .into_iter()
            .zip(self.labels)
            .enumerate()
            .map(|(i, (row, label))| CaseRecord {
                id: match &ids {
                    Some(ids) => ids[i].clone(),
                    None => format!("case-{:04}", i + 1),
                },
                attributes: Attributes(columns.iter().zip(row).map(|(c, v)| (c.name.clone(), v.to_string())).collect()),
                label,
            })
            .collect()
    }
}

/// Ordered attribute mapping; serialized as a JSON object in stored order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Attributes(pub Vec<(String, String)>);

impl Attributes {
    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl<K: Into<String>, V: Into<String>> FromIterator<(K, V)> for Attributes {
    fn from_iter<I: IntoIterator<Item = (K, V)>>(iter: I) -> Self {
        Attributes(iter.into_iter().map(|(k, v)| (k.into(), v.into())).collect())
    }
}

impl Serialize for Attributes {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(self.0.len()))?;
        for (k, v) in &self.0 {
            map.serialize_entry(k, v)?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for Attributes {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct OrderedVisitor;
        impl<'de> Visitor<'de> for OrderedVisitor {
            type Value = Attributes;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("an object of attribute name to text value")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut access: A) -> Result<Attributes, A::Error> {
                let mut out = Vec::new();
                while let Some((k, v)) = access.next_entry::<String, String>()? {
                    out.push((k, v));
                }
                Ok(Attributes(out))
            }
        }
        deserializer.deserialize_map(OrderedVisitor)
    }
}

/// One customer profile: rendered attributes `X` and label `L`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub id: String,
    pub attributes: Attributes,
    pub label: Label,
}

/// `"name: value; name: value"` in stored order. This is the text put in
/// place of `{X}` in every prompt.
pub fn render_attributes(case: &CaseRecord) -> String {
    let mut out = String::new();
    for (i, (k, v)) in case.attributes.iter().enumerate() {
        if i > 0 {
            out.push_str("; ");
        }
        out.push_str(k);
        out.push_str(": ");
        out.push_str(v);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleSize {
    /// Every minority case plus as many majority cases.
    All,
    PerClass(usize),
}

/// Draw a class-balanced subset. Majority cases are sampled uniformly and
/// the output is shuffled, both from a ChaCha8 stream seeded with `seed`.
pub fn balance_sample(cases: &[CaseRecord], seed: u64, per_class: SampleSize) -> Result<Vec<CaseRecord>, DatasetError> {
    let mut by_label: BTreeMap<Label, Vec<&CaseRecord>> = BTreeMap::new();
    for c in cases {
        by_label.entry(c.label).or_default().push(c);
    }
    let (Some(bad), Some(good)) = (by_label.get(&Label::Bad), by_label.get(&Label::Good)) else {
        return Err(DatasetError::MissingClass);
    };
    let minority = bad.len().min(good.len());
    let k = match per_class {
        SampleSize::All => minority,
        SampleSize::PerClass(k) if k > minority => {
            return Err(DatasetError::NotEnoughCases { requested: k, available: minority })
        }
        SampleSize::PerClass(k) => k,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(2 * k);
    for group in [bad, good] {
        if group.len() == k {
            out.extend(group.iter().map(|c| (*c).clone()));
        } else {
            let mut picked = index::sample(&mut rng, group.len(), k).into_vec();
            picked.sort_unstable();
            out.extend(picked.into_iter().map(|i| group[i].clone()));
        }
    }
    out.shuffle(&mut rng);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn numeric_table(values: &[f64]) -> FeatureTable {
        FeatureTable::new(
            vec![Column { name: "x".to_string(), kind: ColumnKind::Numeric }],
            values.iter().map(|&v| vec![Cell::Number(v)]).collect(),
        )
        .unwrap()
    }

    fn encoded(values: &[f64]) -> Vec<String> {
        numeric_table(values)
            .percentile_encode()
            .unwrap()
            .rows()
            .iter()
            .map(|r| r[0].to_string())
            .collect()
    }

    fn case(id: &str, label: Label) -> CaseRecord {
        CaseRecord { id: id.to_string(), attributes: [("k", id)].into_iter().collect(), label }
    }

    #[test]
    fn ordinals() {
        let got: Vec<_> = [1, 2, 3, 4, 11, 12, 13, 21, 22, 23, 65, 100, 111].iter().map(|&n| ordinal(n)).collect();
        assert_eq!(
            got,
            ["1st", "2nd", "3rd", "4th", "11th", "12th", "13th", "21st", "22nd", "23rd", "65th", "100th", "111th"]
        );
    }

    #[test]
    fn percentile_constant_column() {
        assert!(encoded(&[5.0, 5.0, 5.0]).iter().all(|s| s == "100th percentile"));
    }

    #[test]
    fn percentile_rank_thirteen_of_twenty() {
        let values: Vec<f64> = (0..20).map(|i| (i * 7 % 20) as f64 * 1.5).collect();
        let out = encoded(&values);
        let pos = values.iter().position(|&v| v == 12.0 * 1.5).unwrap();
        assert_eq!(out[pos], "65th percentile");
    }

    #[test]
    fn percentile_minimum_of_four() {
        assert_eq!(encoded(&[3.0, 1.0, 4.0, 2.0])[1], "25th percentile");
    }

    #[test]
    fn percentile_twice_is_rejected() {
        let t = numeric_table(&[1.0, 2.0]).percentile_encode().unwrap();
        assert!(matches!(t.percentile_encode(), Err(DatasetError::AlreadyEncoded { .. })));
        assert!(matches!(numeric_table(&[]).percentile_encode(), Err(DatasetError::EmptyColumn(_))));
    }

    #[test]
    fn categorical_untouched() {
        let t = FeatureTable::new(
            vec![
                Column { name: "purpose".to_string(), kind: ColumnKind::Categorical },
                Column { name: "age".to_string(), kind: ColumnKind::Numeric },
            ],
            vec![vec![Cell::Text("car".to_string()), Cell::Number(30.0)]],
        )
        .unwrap();
        let t = t.percentile_encode().unwrap();
        assert_eq!(t.rows()[0][0], Cell::Text("car".to_string()));
    }

    fn wide_table(cols: usize) -> RawTable {
        let columns: Vec<Column> =
            (0..cols).map(|i| Column { name: format!("f{i}"), kind: ColumnKind::Categorical }).collect();
        let rows = vec![(0..cols).map(|i| Cell::Text(format!("v{i}"))).collect(); 2];
        RawTable::new(FeatureTable::new(columns, rows).unwrap(), "credit_risk", vec![Label::Good, Label::Bad]).unwrap()
    }

    #[test]
    fn exclude_examples() {
        let t = wide_table(3);
        assert_eq!(t.clone().exclude_features(&[]).unwrap(), t);

        let mut t = wide_table(20);
        t.features.columns[7].name = "credit_amount_DM".to_string();
        let out = t.exclude_features(&["credit_amount_DM".to_string()]).unwrap();
        assert_eq!(out.features().columns().len(), 19);
        assert_eq!(out.len(), 2);
        assert!(out.features().column_index("credit_amount_DM").is_none());

        assert_eq!(
            wide_table(3).exclude_features(&["credit_risk".to_string()]),
            Err(DatasetError::ExcludeLabel("credit_risk".to_string()))
        );
        assert_eq!(
            wide_table(3).exclude_features(&["nope".to_string()]),
            Err(DatasetError::UnknownColumn("nope".to_string()))
        );
    }

    #[test]
    fn feature_transforms_ignore_labels() {
        let build = |labels: Vec<Label>| {
            let t = FeatureTable::new(
                vec![Column { name: "x".to_string(), kind: ColumnKind::Numeric }],
                vec![vec![Cell::Number(1.0)], vec![Cell::Number(2.0)], vec![Cell::Number(3.0)]],
            )
            .unwrap();
            RawTable::new(t, "y", labels).unwrap().percentile_encode().unwrap()
        };
        let a = build(vec![Label::Good, Label::Bad, Label::Good]);
        let b = build(vec![Label::Bad, Label::Bad, Label::Good]);
        assert_eq!(a.features(), b.features());
    }

    #[test]
    fn render_examples() {
        let c = CaseRecord {
            id: "a".to_string(),
            attributes: [("age", "65th percentile")].into_iter().collect(),
            label: Label::Good,
        };
        assert_eq!(render_attributes(&c), "age: 65th percentile");
        let c2 = CaseRecord {
            attributes: [("age", "65th percentile"), ("purpose", "car")].into_iter().collect(),
            ..c.clone()
        };
        assert_eq!(render_attributes(&c2), "age: 65th percentile; purpose: car");
        assert_eq!(render_attributes(&c2), render_attributes(&c2));
    }

    #[test]
    fn into_cases_uses_positional_ids() {
        let cases = wide_table(2).into_cases();
        assert_eq!(cases[0].id, "case-0001");
        assert_eq!(cases[1].label, Label::Bad);
        assert_eq!(render_attributes(&cases[0]), "f0: v0; f1: v1");
    }

    #[test]
    fn balance_german_ratio() {
        let mut cases = Vec::new();
        cases.extend((0..700).map(|i| case(&format!("g{i}"), Label::Good)));
        cases.extend((0..300).map(|i| case(&format!("b{i}"), Label::Bad)));
        let out = balance_sample(&cases, 7, SampleSize::All).unwrap();
        assert_eq!(out.iter().filter(|c| c.label == Label::Good).count(), 300);
        assert_eq!(out.iter().filter(|c| c.label == Label::Bad).count(), 300);
        let mut bad_ids: Vec<_> = out.iter().filter(|c| c.label == Label::Bad).map(|c| c.id.clone()).collect();
        bad_ids.sort();
        bad_ids.dedup();
        assert_eq!(bad_ids.len(), 300);

        let fifty = balance_sample(&cases, 7, SampleSize::PerClass(50)).unwrap();
        assert_eq!(fifty.iter().filter(|c| c.label == Label::Good).count(), 50);
        assert_eq!(fifty.len(), 100);

        assert_eq!(
            balance_sample(&cases, 7, SampleSize::PerClass(301)),
            Err(DatasetError::NotEnoughCases { requested: 301, available: 300 })
        );
        assert_eq!(balance_sample(&cases, 7, SampleSize::All).unwrap(), out);
    }

    #[test]
    fn balance_already_balanced_is_same_multiset() {
        let mut cases = Vec::new();
        cases.extend((0..50).map(|i| case(&format!("g{i}"), Label::Good)));
        cases.extend((0..50).map(|i| case(&format!("b{i}"), Label::Bad)));
        let mut out: Vec<_> = balance_sample(&cases, 1, SampleSize::All).unwrap().into_iter().map(|c| c.id).collect();
        let mut want: Vec<_> = cases.iter().map(|c| c.id.clone()).collect();
        out.sort();
        want.sort();
        assert_eq!(out, want);
    }

    #[test]
    fn balance_needs_both_classes() {
        let cases = vec![case("a", Label::Good)];
        assert_eq!(balance_sample(&cases, 0, SampleSize::All), Err(DatasetError::MissingClass));
    }
}
