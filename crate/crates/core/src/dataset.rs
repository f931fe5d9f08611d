//! Labeled sample collections and per-sample protected attributes.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensorcore::ArrayF;

/// Samples `[N x T x M]` with binary labels and stable identifiers.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: ArrayF,
    pub labels: Vec<usize>,
    pub sample_ids: Vec<String>,
}

impl Dataset {
    pub fn new(samples: ArrayF, labels: Vec<usize>, sample_ids: Vec<String>) -> Result<Self> {
        let n = match *samples.shape() {
            [n, _, _] => n,
            ref s => {
                return Err(Error::Dimension(format!("samples must be [N x T x M], got {s:?}")));
            }
        };
        if labels.len() != n || sample_ids.len() != n {
            return Err(Error::Dimension(format!(
                "{n} samples but {} labels and {} ids",
                labels.len(),
                sample_ids.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::Index(format!("label {bad} is not binary")));
        }
        check_unique(&sample_ids)?;
        Ok(Self {
            samples,
            labels,
            sample_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn timesteps(&self) -> usize {
        self.samples.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.samples.shape()[2]
    }

    /// Rows `idx` in the given order.
    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        Ok(Dataset {
            samples: self.samples.select_rows(idx)?,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            sample_ids: idx.iter().map(|&i| self.sample_ids[i].clone()).collect(),
        })
    }

    /// Number of samples with label 0 and label 1.
    pub fn class_counts(&self) -> [usize; 2] {
        let pos = self.labels.iter().filter(|&&l| l == 1).count();
        [self.len() - pos, pos]
    }
}

pub(crate) fn check_unique(ids: &[String]) -> Result<()> {
    let mut seen = HashSet::with_capacity(ids.len());
    for id in ids {
        if !seen.insert(id.as_str()) {
            return Err(Error::Alignment(format!("duplicate sample id {id}")));
        }
    }
    Ok(())
}

/// Protected attribute values keyed by sample id.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeTable {
    attributes: Vec<String>,
    ids: Vec<String>,
    rows: Vec<Vec<String>>,
    index: HashMap<String, usize>,
}

impl AttributeTable {
    pub fn new(attributes: Vec<String>, ids: Vec<String>, rows: Vec<Vec<String>>) -> Result<Self> {
        if ids.len() != rows.len() {
            return Err(Error::Dimension(format!("{} ids for {} rows", ids.len(), rows.len())));
        }
        if let Some(r) = rows.iter().find(|r| r.len() != attributes.len()) {
            return Err(Error::Dimension(format!(
                "row has {} values for {} attributes",
                r.len(),
                attributes.len()
            )));
        }
        check_unique(&ids)?;
        let index = ids.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect();
        Ok(Self {
            attributes,
            ids,
            rows,
            index,
        })
    }

    pub fn attributes(&self) -> &[String] {
        &self.attributes
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn attribute_index(&self, attribute: &str) -> Result<usize> {
        self.attributes
            .iter()
            .position(|a| a == attribute)
            .ok_or_else(|| Error::Contract(format!("unknown attribute {attribute}")))
    }

    pub fn value(&self, sample_id: &str, attribute: &str) -> Result<&str> {
        let a = self.attribute_index(attribute)?;
        let row = self
            .index
            .get(sample_id)
            .ok_or_else(|| Error::Alignment(format!("sample {sample_id} has no attribute row")))?;
        Ok(&self.rows[*row][a])
    }

    /// Attribute value of every id in `sample_ids`, in order.
    pub fn column_for(&self, sample_ids: &[String], attribute: &str) -> Result<Vec<&str>> {
        sample_ids.iter().map(|id| self.value(id, attribute)).collect()
    }

    /// Row positions of `sample_ids` grouped by attribute value (values sorted).
    pub fn segments(&self, sample_ids: &[String], attribute: &str) -> Result<BTreeMap<String, Vec<usize>>> {
        let mut out: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, v) in self.column_for(sample_ids, attribute)?.into_iter().enumerate() {
            out.entry(v.to_string()).or_default().push(i);
        }
        Ok(out)
    }

    /// Sorted distinct values of an attribute over the whole table.
    pub fn values_of(&self, attribute: &str) -> Result<Vec<String>> {
        let a = self.attribute_index(attribute)?;
        let set: std::collections::BTreeSet<&str> = self.rows.iter().map(|r| r[a].as_str()).collect();
        Ok(set.into_iter().map(str::to_string).collect())
    }

    /// Reads a CSV whose first column is the sample id and whose remaining
    /// columns are attributes.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
        let headers = reader.headers().map_err(|e| csv_err(path, e))?.clone();
        if headers.len() < 2 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: "attribute table needs an id column and at least one attribute".into(),
            });
        }
        let attributes = headers.iter().skip(1).map(str::to_string).collect();
        let mut ids = Vec::new();
        let mut rows = Vec::new();
        for rec in reader.records() {
            let rec = rec.map_err(|e| csv_err(path, e))?;
            ids.push(rec[0].to_string());
            rows.push(rec.iter().skip(1).map(str::to_string).collect());
        }
        Self::new(attributes, ids, rows)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        let mut header = vec!["sample_id".to_string()];
        header.extend(self.attributes.iter().cloned());
        w.write_record(&header).map_err(|e| csv_err(path, e))?;
        for (id, row) in self.ids.iter().zip(&self.rows) {
            w.write_record(std::iter::once(id).chain(row)).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> AttributeTable {
        AttributeTable::new(
            vec!["sex".into(), "age".into()],
            vec!["a".into(), "b".into(), "c".into()],
            vec![
                vec!["F".into(), "old".into()],
                vec!["M".into(), "young".into()],
                vec!["F".into(), "young".into()],
            ],
        )
        .unwrap()
    }

    #[test]
    fn segments_partition_rows() {
        let t = table();
        let ids: Vec<String> = ["c", "a", "b"].iter().map(|s| s.to_string()).collect();
        let seg = t.segments(&ids, "sex").unwrap();
        assert_eq!(seg["F"], vec![0, 1]);
        assert_eq!(seg["M"], vec![2]);
        assert!(matches!(t.segments(&ids, "race"), Err(Error::Contract(_))));
        assert!(matches!(t.value("zz", "sex"), Err(Error::Alignment(_))));
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("attrs.csv");
        table().write_csv(&p).unwrap();
        assert_eq!(AttributeTable::read_csv(&p).unwrap(), table());
    }

    #[test]
    fn dataset_validation() {
        let x = ArrayF::zeros(&[2, 3, 1]);
        assert!(Dataset::new(x.clone(), vec![0, 2], vec!["a".into(), "b".into()]).is_err());
        assert!(matches!(
            Dataset::new(x.clone(), vec![0, 1], vec!["a".into(), "a".into()]),
            Err(Error::Alignment(_))
        ));
        let d = Dataset::new(x, vec![0, 1], vec!["a".into(), "b".into()]).unwrap();
        assert_eq!(d.subset(&[1]).unwrap().sample_ids, vec!["b".to_string()]);
    }
}
