use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Category ids for the train (base), val and test (novel) roles.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawSplit")]
pub struct DatasetSplit {
    pub train: BTreeSet<u32>,
    pub val: BTreeSet<u32>,
    pub test: BTreeSet<u32>,
}

#[derive(Deserialize)]
struct RawSplit {
    train: Vec<u32>,
    #[serde(default)]
    val: Vec<u32>,
    #[serde(default)]
    test: Vec<u32>,
}

impl TryFrom<RawSplit> for DatasetSplit {
    type Error = Error;

    fn try_from(raw: RawSplit) -> Result<Self> {
        DatasetSplit::new(raw.train, raw.val, raw.test)
    }
}

impl DatasetSplit {
    pub fn new(
        train: impl IntoIterator<Item = u32>,
        val: impl IntoIterator<Item = u32>,
        test: impl IntoIterator<Item = u32>,
    ) -> Result<Self> {
        let split = Self {
            train: train.into_iter().collect(),
            val: val.into_iter().collect(),
            test: test.into_iter().collect(),
        };
        split.validate()?;
        Ok(split)
    }

    pub fn validate(&self) -> Result<()> {
        let pairs = [
            ("train", &self.train, "val", &self.val),
            ("train", &self.train, "test", &self.test),
            ("val", &self.val, "test", &self.test),
        ];
        for (a, sa, b, sb) in pairs {
            if let Some(id) = sa.intersection(sb).next() {
                return Err(Error::Validation(format!(
                    "category {id} appears in both {a} and {b} splits"
                )));
            }
        }
        Ok(())
    }

    pub fn contains(&self, category: u32) -> bool {
        self.train.contains(&category) || self.val.contains(&category) || self.test.contains(&category)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            record: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}
