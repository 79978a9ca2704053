//! Interaction logs, id indexing, splits and feature-matrix storage.
//!
//! Interactions are implicit feedback: deduplicated `(user, item)` pairs.
//! Feature matrices arrive as precomputed per-item vectors in a small
//! binary format (see [`write_features`]) with a text sidecar listing the
//! external item ids row by row.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mat::DenseMatrix;

/// Magic bytes of the feature/tensor binary format.
pub const FEATURE_MAGIC: &[u8; 4] = b"MMGF";
/// Current feature file format version.
pub const FEATURE_VERSION: u32 = 1;

/// Bijection between opaque external ids and contiguous indices
/// `0..n-1`, ordered by first appearance.
#[derive(Debug, Clone, Default)]
pub struct IdMap {
    ids: Vec<String>,
    index: HashMap<String, usize>,
}

impl IdMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns the index for `id`, inserting it if unseen.
    pub fn intern(&mut self, id: &str) -> usize {
        if let Some(&idx) = self.index.get(id) {
            return idx;
        }
        let idx = self.ids.len();
        self.ids.push(id.to_string());
        self.index.insert(id.to_string(), idx);
        idx
    }

    pub fn get(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn id(&self, idx: usize) -> &str {
        &self.ids[idx]
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

    /// Rebuilds a map from ids already in index order. Fails on duplicates.
    pub fn from_ids(ids: Vec<String>) -> Result<Self> {
        let mut map = IdMap::new();
        for id in &ids {
            map.intern(id);
        }
        if map.len() != ids.len() {
            return Err(Error::Config("duplicate id in id list".into()));
        }
        Ok(map)
    }
}

/// Which split an interaction table belongs to. Freshly loaded tables are
/// tagged `Train` until partitioned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// Deduplicated `(user_idx, item_idx)` implicit-feedback pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionTable {
    pub pairs: Vec<(usize, usize)>,
    pub split: Split,
}

impl InteractionTable {
    pub fn new(split: Split) -> Self {
        Self {
            pairs: Vec::new(),
            split,
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Per-user item lists, preserving pair order.
    pub fn items_by_user(&self, n_users: usize) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); n_users];
        for &(u, i) in &self.pairs {
            out[u].push(i);
        }
        out
    }

    /// Per-item user lists, preserving pair order.
    pub fn users_by_item(&self, n_items: usize) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); n_items];
        for &(u, i) in &self.pairs {
            out[i].push(u);
        }
        out
    }
}

/// Line layout of raw interaction logs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InteractionFormat {
    /// `user_id<TAB>item_id[<TAB>timestamp]`
    Tsv,
    /// Fields separated by any run of whitespace.
    Whitespace,
}

/// Loads a raw interaction log. Lines starting with `#` and blank lines
/// are skipped; duplicate records collapse to one pair; timestamps are
/// ignored. Ids are indexed in order of first appearance.
pub fn load_interactions(
    path: impl AsRef<Path>,
    format: InteractionFormat,
) -> Result<(InteractionTable, IdMap, IdMap)> {
    let path = path.as_ref();
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;

    let mut users = IdMap::new();
    let mut items = IdMap::new();
    let mut table = InteractionTable::new(Split::Train);
    let mut seen: HashSet<(usize, usize)> = HashSet::new();

    for (lineno, raw) in content.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = match format {
            InteractionFormat::Tsv => line.split('\t').collect(),
            InteractionFormat::Whitespace => line.split_whitespace().collect(),
        };
        if fields.len() < 2 || fields.len() > 3 || fields[0].is_empty() || fields[1].is_empty() {
            return Err(Error::ParseLine {
                path: path.into(),
                line: lineno + 1,
                reason: format!(
                    "expected user_id, item_id[, timestamp], got {} field(s)",
                    fields.len()
                ),
            });
        }
        let u = users.intern(fields[0]);
        let i = items.intern(fields[1]);
        if seen.insert((u, i)) {
            table.pairs.push((u, i));
        }
    }

    if table.is_empty() {
        return Err(Error::EmptyDataset { path: path.into() });
    }
    Ok((table, users, items))
}

/// Per-user random holdout split. `ratios = (train, val, test)` must be
/// positive and sum to one. Val and test sizes round down; the remainder
/// stays in train. Users with fewer than three interactions keep
/// everything in train so evaluation denominators stay well-defined.
pub fn split_interactions(
    table: &InteractionTable,
    n_users: usize,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(InteractionTable, InteractionTable, InteractionTable)> {
    let (rt, rv, rte) = ratios;
    if rt <= 0.0 || rv <= 0.0 || rte <= 0.0 || ((rt + rv + rte) - 1.0).abs() > 1e-9 {
        return Err(Error::BadSplitRatios(ratios));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let by_user = table.items_by_user(n_users);

    let mut train = InteractionTable::new(Split::Train);
    let mut val = InteractionTable::new(Split::Val);
    let mut test = InteractionTable::new(Split::Test);

    for (u, mut its) in by_user.into_iter().enumerate() {
        let n = its.len();
        if n < 3 {
            train.pairs.extend(its.into_iter().map(|i| (u, i)));
            continue;
        }
        its.shuffle(&mut rng);
        let n_val = (rv * n as f64).floor() as usize;
        let n_test = (rte * n as f64).floor() as usize;
        for (pos, i) in its.into_iter().enumerate() {
            if pos < n_val {
                val.pairs.push((u, i));
            } else if pos < n_val + n_test {
                test.pairs.push((u, i));
            } else {
                train.pairs.push((u, i));
            }
        }
    }

    for t in [&mut train, &mut val, &mut test] {
        t.pairs.sort_unstable();
    }
    Ok((train, val, test))
}

/// Removes all train pairs touching a random `floor(ratio * n_items)`
/// item subset. Returns the reduced table and the sorted cold item set.
pub fn make_cold_start_split(
    train: &InteractionTable,
    n_items: usize,
    ratio: f64,
    seed: u64,
) -> Result<(InteractionTable, Vec<usize>)> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::BadColdRatio(ratio));
    }
    let n_cold = (ratio * n_items as f64).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut all: Vec<usize> = (0..n_items).collect();
    all.shuffle(&mut rng);
    let mut cold: Vec<usize> = all.into_iter().take(n_cold).collect();
    cold.sort_unstable();

    let cold_set: HashSet<usize> = cold.iter().copied().collect();
    let reduced = InteractionTable {
        pairs: train
            .pairs
            .iter()
            .copied()
            .filter(|(_, i)| !cold_set.contains(i))
            .collect(),
        split: Split::Train,
    };
    Ok((reduced, cold))
}

/// Content-feature source of a matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text = 0,
    Image = 1,
    Fused = 2,
    Latent = 3,
}

impl Modality {
    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Modality::Text),
            1 => Some(Modality::Image),
            2 => Some(Modality::Fused),
            3 => Some(Modality::Latent),
            _ => None,
        }
    }
}

/// Dense per-item feature matrix for one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub modality: Modality,
    pub values: DenseMatrix,
}

impl FeatureMatrix {
    pub fn rows(&self) -> usize {
        self.values.rows()
    }

    pub fn cols(&self) -> usize {
        self.values.cols()
    }
}

/// Writes a feature matrix: magic `MMGF`, version u32 LE, modality u8,
/// rows u32 LE, cols u32 LE, then `rows*cols` f32 LE values row-major.
/// Values are stored as f32; writing values outside f32 precision rounds.
pub fn write_features(path: impl AsRef<Path>, fm: &FeatureMatrix) -> Result<()> {
    let path = path.as_ref();
    let rows = fm.rows();
    let cols = fm.cols();
    let mut buf = Vec::with_capacity(13 + rows * cols * 4);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.push(fm.modality.tag());
    buf.extend_from_slice(&(rows as u32).to_le_bytes());
    buf.extend_from_slice(&(cols as u32).to_le_bytes());
    for v in fm.values.as_slice() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads a feature matrix written by [`write_features`]. When
/// `expected_rows` is given, the row count must match the item space.
pub fn load_features(path: impl AsRef<Path>, expected_rows: Option<usize>) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;

    if buf.len() < 17 || &buf[0..4] != FEATURE_MAGIC {
        return Err(Error::FeatureMagic { path: path.into() });
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
    if version != FEATURE_VERSION {
        return Err(Error::FeatureVersion {
            path: path.into(),
            version,
        });
    }
    let tag = buf[8];
    let modality = Modality::from_tag(tag).ok_or(Error::FeatureModality {
        path: path.into(),
        tag,
    })?;
    let rows = u32::from_le_bytes(buf[9..13].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(buf[13..17].try_into().unwrap()) as usize;

    let expected_bytes = rows * cols * 4;
    let payload = &buf[17..];
    if payload.len() != expected_bytes {
        return Err(Error::FeatureTruncated {
            path: path.into(),
            expected: expected_bytes,
        });
    }
    if let Some(er) = expected_rows {
        if rows != er {
            return Err(Error::FeatureDims {
                path: path.into(),
                expected: er,
                found: rows,
            });
        }
    }

    let mut values = Vec::with_capacity(rows * cols);
    for (k, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::FeatureNonFinite {
                path: path.into(),
                row: k / cols,
                col: k % cols,
            });
        }
        values.push(v as f64);
    }
    Ok(FeatureMatrix {
        modality,
        values: DenseMatrix::from_vec(rows, cols, values),
    })
}

/// Writes a parameter tensor in the same binary layout as features,
/// tagged `latent`.
pub fn write_tensor(path: impl AsRef<Path>, m: &DenseMatrix) -> Result<()> {
    write_features(
        path,
        &FeatureMatrix {
            modality: Modality::Latent,
            values: m.clone(),
        },
    )
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<DenseMatrix> {
    Ok(load_features(path, None)?.values)
}

/// One id per line, index order.
pub fn write_id_sidecar(path: impl AsRef<Path>, ids: &[String]) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for id in ids {
        writeln!(f, "{id}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_id_sidecar(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(content.lines().map(|l| l.to_string()).collect())
}

/// A prepared dataset: indexed splits plus optional per-modality features
/// whose rows align with the item id map.
#[derive(Debug, Clone)]
pub struct DatasetBundle {
    pub users: IdMap,
    pub items: IdMap,
    pub train: InteractionTable,
    pub val: InteractionTable,
    pub test: InteractionTable,
    pub text: Option<FeatureMatrix>,
    pub image: Option<FeatureMatrix>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct BundleManifest {
    pub n_users: usize,
    pub n_items: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub modalities: Vec<String>,
    pub split_seed: u64,
    pub split_ratios: (f64, f64, f64),
    pub fingerprint: String,
}

impl DatasetBundle {
    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    /// Content hash over ids, splits and feature bits; identifies the
    /// dataset for checkpoint compatibility checks.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for id in self.users.ids() {
            h.update(id.as_bytes());
            h.update([0]);
        }
        h.update([1]);
        for id in self.items.ids() {
            h.update(id.as_bytes());
            h.update([0]);
        }
        for t in [&self.train, &self.val, &self.test] {
            h.update([2]);
            for &(u, i) in &t.pairs {
                h.update((u as u64).to_le_bytes());
                h.update((i as u64).to_le_bytes());
            }
        }
        for fm in [&self.text, &self.image].into_iter().flatten() {
            h.update([3, fm.modality.tag()]);
            h.update((fm.rows() as u64).to_le_bytes());
            h.update((fm.cols() as u64).to_le_bytes());
            for v in fm.values.as_slice() {
                h.update((*v as f32).to_le_bytes());
            }
        }
        hex_digest(h)
    }

    /// Writes the bundle into `dir` and returns its fingerprint.
    pub fn save(&self, dir: impl AsRef<Path>, seed: u64, ratios: (f64, f64, f64)) -> Result<String> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_id_sidecar(dir.join("users.txt"), self.users.ids())?;
        write_id_sidecar(dir.join("items.txt"), self.items.ids())?;
        for (name, t) in [
            ("train.tsv", &self.train),
            ("val.tsv", &self.val),
            ("test.tsv", &self.test),
        ] {
            let path = dir.join(name);
            let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            for &(u, i) in &t.pairs {
                writeln!(f, "{u}\t{i}").map_err(|e| Error::io(&path, e))?;
            }
        }
        let mut modalities = Vec::new();
        if let Some(fm) = &self.text {
            write_features(dir.join("features_text.mmgf"), fm)?;
            modalities.push("text".to_string());
        }
        if let Some(fm) = &self.image {
            write_features(dir.join("features_image.mmgf"), fm)?;
            modalities.push("image".to_string());
        }
        let fingerprint = self.fingerprint();
        let manifest = BundleManifest {
            n_users: self.n_users(),
            n_items: self.n_items(),
            n_train: self.train.len(),
            n_val: self.val.len(),
            n_test: self.test.len(),
            modalities,
            split_seed: seed,
            split_ratios: ratios,
            fingerprint: fingerprint.clone(),
        };
        let path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::Config(format!("manifest serialization: {e}")))?;
        fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        Ok(fingerprint)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<(Self, BundleManifest)> {
        let dir = dir.as_ref();
        let manifest_path = dir.join("manifest.json");
        let manifest: BundleManifest = serde_json::from_str(
            &fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?,
        )
        .map_err(|e| Error::Config(format!("bad bundle manifest: {e}")))?;

        let users = IdMap::from_ids(read_id_sidecar(dir.join("users.txt"))?)?;
        let items = IdMap::from_ids(read_id_sidecar(dir.join("items.txt"))?)?;

        let read_split = |name: &str, split: Split| -> Result<InteractionTable> {
            let path = dir.join(name);
            let content = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let mut t = InteractionTable::new(split);
            for (lineno, line) in content.lines().enumerate() {
                if line.is_empty() {
                    continue;
                }
                let mut it = line.split('\t');
                let parse = |s: Option<&str>| -> Option<usize> { s?.parse().ok() };
                match (parse(it.next()), parse(it.next())) {
                    (Some(u), Some(i)) if u < users.len() && i < items.len() => {
                        t.pairs.push((u, i))
                    }
                    _ => {
                        return Err(Error::ParseLine {
                            path: path.clone(),
                            line: lineno + 1,
                            reason: "expected indexed pair".into(),
                        })
                    }
                }
            }
            Ok(t)
        };
        let train = read_split("train.tsv", Split::Train)?;
        let val = read_split("val.tsv", Split::Val)?;
        let test = read_split("test.tsv", Split::Test)?;

        let load_modality = |name: &str| -> Result<Option<FeatureMatrix>> {
            let path = dir.join(name);
            if path.exists() {
                Ok(Some(load_features(path, Some(items.len()))?))
            } else {
                Ok(None)
            }
        };
        let text = load_modality("features_text.mmgf")?;
        let image = load_modality("features_image.mmgf")?;

        let bundle = DatasetBundle {
            users,
            items,
            train,
            val,
            test,
            text,
            image,
        };
        if bundle.fingerprint() != manifest.fingerprint {
            return Err(Error::Config(format!(
                "bundle at {} does not match its manifest fingerprint",
                dir.display()
            )));
        }
        Ok((bundle, manifest))
    }
}

pub fn hex_digest(h: Sha256) -> String {
    let out = h.finalize();
    let mut s = String::with_capacity(out.len() * 2);
    for b in out {
        s.push_str(&format!("{b:02x}"));
    }
    s
}
