use serde::{Deserialize, Serialize};

/// One labeled interaction as stored on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub domain: usize,
    /// Raw statistics, bucketized into implicit domain indicators.
    pub stats: Vec<f64>,
    /// Behavior sequence, oldest first.
    pub seq: Vec<usize>,
    pub cand: usize,
    pub user: usize,
    pub side: Vec<usize>,
    pub label: u8,
}

/// Train / validation / test partition of a dataset.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<SampleRecord>,
    pub val: Vec<SampleRecord>,
    pub test: Vec<SampleRecord>,
}

impl Splits {
    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
