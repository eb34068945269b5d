//! Delimited-text ingestion and the case preparation pipeline.

use std::collections::BTreeSet;
use std::path::Path;

use factcheck_core::dataset::{balance_sample, Cell, Column, ColumnKind, FeatureTable, Label, RawTable};
use factcheck_core::CaseRecord;

use crate::config::DatasetConfig;
use crate::error::{Error, Result};

/// Read a header-first delimited file. The label column is mapped through
/// `label_map`; the id column, when configured, becomes the case id.
pub fn load_table(path: &Path, cfg: &DatasetConfig) -> Result<RawTable> {
    let delimiter = u8::try_from(cfg.delimiter)
        .map_err(|_| Error::Config(format!("delimiter {:?} is not a single byte", cfg.delimiter)))?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let header: Vec<String> = reader.headers().map_err(|e| csv_error(path, e))?.iter().map(str::to_string).collect();

    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("{}: missing column {name:?}", path.display())))
    };
    let label_at = find(&cfg.label_column)?;
    let id_at = cfg.id_column.as_deref().map(find).transpose()?;
    let numeric: BTreeSet<&str> = cfg.numeric_columns.iter().map(String::as_str).collect();
    for n in &numeric {
        find(n)?;
    }

    let feature_at: Vec<usize> = (0..header.len()).filter(|&i| i != label_at && Some(i) != id_at).collect();
    let columns: Vec<Column> = feature_at
        .iter()
        .map(|&i| Column {
            name: header[i].clone(),
            kind: if numeric.contains(header[i].as_str()) { ColumnKind::Numeric } else { ColumnKind::Categorical },
        })
        .collect();

    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut ids = Vec::new();
    for (r, record) in reader.records().enumerate() {
        // header is line 1
        let line = r + 2;
        let record = record.map_err(|e| csv_error(path, e))?;
        if record.len() != header.len() {
            return Err(Error::parse(path, line, format!("row {r}: {} fields, expected {}", record.len(), header.len())));
        }
        let raw_label = &record[label_at];
        let label = match cfg.label_map.get(raw_label) {
            Some(0) => Label::Bad,
            Some(_) => Label::Good,
            None => return Err(Error::parse(path, line, format!("row {r}: label {raw_label:?} not in label_map"))),
        };
        let mut row = Vec::with_capacity(columns.len());
        for (c, &i) in columns.iter().zip(&feature_at) {
            let v = &record[i];
            row.push(match c.kind {
                ColumnKind::Numeric => Cell::Number(v.parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(|| {
                    Error::parse(path, line, format!("row {r}: column {:?} value {v:?} is not numeric", c.name))
                })?),
                ColumnKind::Categorical => Cell::Text(v.to_string()),
            });
        }
        rows.push(row);
        labels.push(label);
        if let Some(i) = id_at {
            ids.push(record[i].to_string());
        }
    }

    let table = RawTable::new(FeatureTable::new(columns, rows)?, &cfg.label_column, labels)?;
    Ok(if id_at.is_some() { table.with_ids(ids)? } else { table })
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.position() {
        Some(p) => Error::parse(path, p.line() as usize, e.to_string()),
        None => match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::parse(path, 0, format!("{other:?}")),
        },
    }
}

/// Exclusion, percentile encoding, then class balancing.
pub fn prepare_cases(table: RawTable, cfg: &DatasetConfig) -> Result<Vec<CaseRecord>> {
    let cases = table.exclude_features(&cfg.excluded_features)?.percentile_encode()?.into_cases();
    Ok(balance_sample(&cases, cfg.seed, cfg.cases_per_class.into())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{AllKeyword, CasesPerClass};
    use std::collections::BTreeMap;
    use std::io::Write;

    fn cfg(path: &Path) -> DatasetConfig {
        DatasetConfig {
            path: path.to_path_buf(),
            delimiter: ',',
            label_column: "class".into(),
            id_column: None,
            label_map: BTreeMap::from([("1".to_string(), 1), ("2".to_string(), 0)]),
            numeric_columns: vec!["age".into()],
            excluded_features: vec![],
            cases_per_class: CasesPerClass::All(AllKeyword::All),
            seed: 0,
        }
    }

    fn file(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_rows_and_maps_original_coding() {
        let f = file("age,housing,class\n30,own,1\n45,rent,2\n22,own,1\n");
        let t = load_table(f.path(), &cfg(f.path())).unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t.labels(), [Label::Good, Label::Bad, Label::Good]);
        assert_eq!(t.features().columns().len(), 2);
    }

    #[test]
    fn non_numeric_names_row() {
        let f = file("age,housing,class\n30,own,1\nabc,rent,2\n");
        let err = load_table(f.path(), &cfg(f.path())).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        assert!(err.to_string().contains("row 1"), "{err}");
    }

    #[test]
    fn missing_column_is_schema_error() {
        let f = file("age,housing\n30,own\n");
        assert!(matches!(load_table(f.path(), &cfg(f.path())), Err(Error::Schema(_))));
        let f = file("years,housing,class\n30,own,1\n");
        assert!(matches!(load_table(f.path(), &cfg(f.path())), Err(Error::Schema(_))));
    }

    #[test]
    fn unmapped_label_rejected() {
        let f = file("age,housing,class\n30,own,3\n");
        assert!(matches!(load_table(f.path(), &cfg(f.path())), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn id_column_and_semicolon_delimiter() {
        let f = file("id;age;class\nA;30;1\nB;40;2\n");
        let mut c = cfg(f.path());
        c.delimiter = ';';
        c.id_column = Some("id".into());
        let cases = load_table(f.path(), &c).unwrap().into_cases();
        assert_eq!(cases[0].id, "A");
        assert_eq!(cases[1].attributes.len(), 1);
    }

    #[test]
    fn prepare_encodes_and_balances() {
        let f = file("age,housing,class\n30,own,1\n45,rent,2\n22,own,1\n60,free,1\n");
        let mut c = cfg(f.path());
        c.excluded_features = vec!["housing".into()];
        let cases = prepare_cases(load_table(f.path(), &c).unwrap(), &c).unwrap();
        assert_eq!(cases.len(), 2);
        assert!(cases.iter().all(|c| c.attributes.iter().all(|(k, v)| k == "age" && v.ends_with("percentile"))));
        let bad = cases.iter().find(|c| c.label == Label::Bad).unwrap();
        assert_eq!(bad.attributes.iter().next().unwrap().1, "75th percentile");
    }
}
