use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DataError;

/// Train/validation/test volume counts of the reference 199-volume corpus.
pub const REFERENCE_SPLIT: [usize; 3] = [127, 32, 40];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Val,
    Test,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::Train, Partition::Val, Partition::Test];

    pub fn name(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Val => "val",
            Partition::Test => "test",
        }
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Partition {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Partition::Train),
            "val" | "validation" => Ok(Partition::Val),
            "test" => Ok(Partition::Test),
            other => Err(format!("unknown partition {other:?}")),
        }
    }
}

/// Disjoint volume-level partitions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetSplit {
    pub fn get(&self, p: Partition) -> &[String] {
        match p {
            Partition::Train => &self.train,
            Partition::Val => &self.val,
            Partition::Test => &self.test,
        }
    }

    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.test.len())
    }

    pub fn is_disjoint(&self) -> bool {
        let mut seen = HashSet::new();
        Partition::ALL
            .iter()
            .flat_map(|&p| self.get(p))
            .all(|id| seen.insert(id))
    }
}

/// Shuffles volume ids with `seed` and cuts them into train/val/test.
///
/// When the corpus size equals `counts.sum()` the counts are used verbatim;
/// otherwise val and test get `round(n · count / total)` volumes (at least
/// one each) and train absorbs the remainder, which must be non-empty.
pub fn split_dataset(volume_ids: &[String], counts: [usize; 3], seed: u64) -> Result<DatasetSplit, DataError> {
    let n = volume_ids.len();
    let too_few = |reason: String| DataError::TooFewVolumes { available: n, reason };
    let unique: HashSet<&String> = volume_ids.iter().collect();
    if unique.len() != n {
        return Err(too_few("volume ids are not unique".into()));
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(too_few("split counts sum to zero".into()));
    }
    let (val, test) = if n == total {
        (counts[1], counts[2])
    } else {
        let share = |c: usize| {
            let r = ((n * c) as f64 / total as f64).round() as usize;
            if c > 0 { r.max(1) } else { 0 }
        };
        (share(counts[1]), share(counts[2]))
    };
    if val + test >= n {
        return Err(too_few(format!(
            "cannot give every partition at least one volume with counts {counts:?}"
        )));
    }
    let mut ids = volume_ids.to_vec();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test_ids = ids.split_off(n - test);
    let val_ids = ids.split_off(n - test - val);
    Ok(DatasetSplit {
        train: ids,
        val: val_ids,
        test: test_ids,
    })
}

/// Plain-text split file: `[train]`, `[val]`, `[test]` headers each followed
/// by one volume id per line. Blank lines and `#` comments are ignored.
pub fn write_split_file(path: &Path, split: &DatasetSplit) -> Result<(), DataError> {
    let mut out = String::new();
    for p in Partition::ALL {
        out.push_str(&format!("[{p}]\n"));
        for id in split.get(p) {
            out.push_str(id);
            out.push('\n');
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| DataError::Unwritable {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub fn read_split_file(path: &Path) -> Result<DatasetSplit, DataError> {
    let text = std::fs::read_to_string(path).map_err(|e| DataError::Unreadable {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let bad = |reason: String| DataError::SplitFile {
        path: path.to_path_buf(),
        reason,
    };
    let mut split = DatasetSplit::default();
    let mut current: Option<Partition> = None;
    let mut seen = HashSet::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            let p: Partition = name.trim().parse().map_err(bad)?;
            if !seen.insert(p) {
                return Err(bad(format!("section [{p}] appears twice")));
            }
            current = Some(p);
            continue;
        }
        let p = current.ok_or_else(|| bad(format!("line {}: id before any section header", no + 1)))?;
        match p {
            Partition::Train => split.train.push(line.to_string()),
            Partition::Val => split.val.push(line.to_string()),
            Partition::Test => split.test.push(line.to_string()),
        }
    }
    if seen.len() != 3 {
        return Err(bad("expected [train], [val] and [test] sections".into()));
    }
    if !split.is_disjoint() {
        return Err(bad("a volume id appears in more than one section".into()));
    }
    Ok(split)
}
