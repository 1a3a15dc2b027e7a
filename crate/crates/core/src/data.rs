//! Rating ingestion, the user × content popularity matrix, the 80/20 split,
//! per-MEN sharding and a synthetic Zipf workload.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Matrix, RngStream};

/// One observed interaction: user `user_id` gave content `content_id` the
/// popularity factor `value`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatingEvent {
    pub user_id: u32,
    pub content_id: u32,
    #[serde(rename = "rating")]
    pub value: f64,
    pub timestamp: i64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Format {
    /// `UserID::MovieID::Rating::Timestamp`
    MovielensDat,
    /// `user_id,content_id,rating,timestamp` with a header row.
    Csv,
}

impl Format {
    /// Guesses the format from a file extension; anything but `.csv` is
    /// treated as MovieLens `.dat`.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => Format::Csv,
            _ => Format::MovielensDat,
        }
    }
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "movielens-dat" | "dat" => Ok(Format::MovielensDat),
            "csv" => Ok(Format::Csv),
            other => Err(Error::Config(format!("unknown rating format `{other}`"))),
        }
    }
}

pub fn ingest(path: impl AsRef<Path>, format: Format) -> Result<Vec<RatingEvent>> {
    let file = File::open(path.as_ref())?;
    match format {
        Format::MovielensDat => parse_movielens(BufReader::new(file)),
        Format::Csv => parse_csv(file),
    }
}

pub fn parse_movielens(reader: impl BufRead) -> Result<Vec<RatingEvent>> {
    let mut events = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split("::").collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected 4 `::`-separated fields, found {}", fields.len()),
            });
        }
        let event = RatingEvent {
            user_id: parse_field(fields[0], "user id", line_no)?,
            content_id: parse_field(fields[1], "content id", line_no)?,
            value: parse_field(fields[2], "rating", line_no)?,
            timestamp: parse_field(fields[3], "timestamp", line_no)?,
        };
        validate_event(&event, line_no)?;
        events.push(event);
    }
    if events.is_empty() {
        return Err(Error::Data("rating file contains no events".into()));
    }
    Ok(events)
}

pub fn parse_csv(reader: impl Read) -> Result<Vec<RatingEvent>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut events = Vec::new();
    for (idx, record) in rdr.deserialize::<RatingEvent>().enumerate() {
        // header is line 1
        let line_no = idx + 2;
        let event = record.map_err(|e| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        validate_event(&event, line_no)?;
        events.push(event);
    }
    if events.is_empty() {
        return Err(Error::Data("rating file contains no events".into()));
    }
    Ok(events)
}

fn parse_field<T: std::str::FromStr>(raw: &str, what: &str, line: usize) -> Result<T> {
    raw.trim().parse().map_err(|_| Error::Parse {
        line,
        msg: format!("invalid {what} `{raw}`"),
    })
}

fn validate_event(e: &RatingEvent, line: usize) -> Result<()> {
    if e.user_id == 0 || e.content_id == 0 {
        return Err(Error::Parse {
            line,
            msg: "ids must be ≥ 1".into(),
        });
    }
    if !e.value.is_finite() || e.value < 0.0 {
        return Err(Error::Parse {
            line,
            msg: format!(
                "popularity factor must be a finite value ≥ 0, got {}",
                e.value
            ),
        });
    }
    Ok(())
}

pub fn write_events(path: impl AsRef<Path>, events: &[RatingEvent], format: Format) -> Result<()> {
    let file = File::create(path.as_ref())?;
    match format {
        Format::MovielensDat => {
            let mut w = BufWriter::new(file);
            for e in events {
                writeln!(
                    w,
                    "{}::{}::{}::{}",
                    e.user_id, e.content_id, e.value, e.timestamp
                )?;
            }
            w.flush()?;
        }
        Format::Csv => {
            let mut w = csv::Writer::from_writer(file);
            for e in events {
                w.serialize(e)?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

/// Sorted id list with reverse lookup.
#[derive(Clone, Debug, Default)]
pub struct AxisIndex {
    ids: Vec<u32>,
    pos: HashMap<u32, usize>,
}

impl PartialEq for AxisIndex {
    fn eq(&self, other: &Self) -> bool {
        self.ids == other.ids
    }
}

impl AxisIndex {
    pub fn new(mut ids: Vec<u32>) -> Self {
        ids.sort_unstable();
        ids.dedup();
        let pos = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        Self { ids, pos }
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn position(&self, id: u32) -> Option<usize> {
        self.pos.get(&id).copied()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Entry {
    pub row: usize,
    pub col: usize,
    pub value: f64,
    pub timestamp: i64,
}

/// Sparse user × content matrix of popularity factors.
///
/// Rows follow ascending user id and columns ascending content id. Entries are
/// kept sorted by `(row, col)` with no duplicates.
#[derive(Clone, Debug, PartialEq)]
pub struct RatingMatrix {
    users: AxisIndex,
    contents: AxisIndex,
    entries: Vec<Entry>,
}

impl RatingMatrix {
    /// Builds the matrix over the users and contents that appear in `events`.
    pub fn from_events(events: &[RatingEvent]) -> Result<Self> {
        let users = events.iter().map(|e| e.user_id).collect();
        let contents = events.iter().map(|e| e.content_id).collect();
        Self::with_axes(events, AxisIndex::new(users), AxisIndex::new(contents))
    }

    /// Builds the matrix over fixed axes. Duplicate `(user, content)` pairs
    /// keep the latest timestamp; on equal timestamps the later event wins.
    pub fn with_axes(
        events: &[RatingEvent],
        users: AxisIndex,
        contents: AxisIndex,
    ) -> Result<Self> {
        let mut latest: BTreeMap<(usize, usize), (f64, i64)> = BTreeMap::new();
        for e in events {
            let row = users
                .position(e.user_id)
                .ok_or_else(|| Error::Data(format!("user {} not on the user axis", e.user_id)))?;
            let col = contents.position(e.content_id).ok_or_else(|| {
                Error::Data(format!("content {} not in the catalog", e.content_id))
            })?;
            match latest.get(&(row, col)) {
                Some(&(_, ts)) if ts > e.timestamp => {}
                _ => {
                    latest.insert((row, col), (e.value, e.timestamp));
                }
            }
        }
        let entries = latest
            .into_iter()
            .map(|((row, col), (value, timestamp))| Entry {
                row,
                col,
                value,
                timestamp,
            })
            .collect();
        Ok(Self {
            users,
            contents,
            entries,
        })
    }

    fn from_parts(users: AxisIndex, contents: AxisIndex, mut entries: Vec<Entry>) -> Self {
        entries.sort_by_key(|e| (e.row, e.col));
        Self {
            users,
            contents,
            entries,
        }
    }

    pub fn users(&self) -> &AxisIndex {
        &self.users
    }

    pub fn contents(&self) -> &AxisIndex {
        &self.contents
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_contents(&self) -> usize {
        self.contents.len()
    }

    /// Number of observed entries.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn get(&self, user_id: u32, content_id: u32) -> Option<f64> {
        let row = self.users.position(user_id)?;
        let col = self.contents.position(content_id)?;
        self.entries
            .binary_search_by_key(&(row, col), |e| (e.row, e.col))
            .ok()
            .map(|i| self.entries[i].value)
    }

    pub fn to_events(&self) -> Vec<RatingEvent> {
        self.entries
            .iter()
            .map(|e| RatingEvent {
                user_id: self.users.ids[e.row],
                content_id: self.contents.ids[e.col],
                value: e.value,
                timestamp: e.timestamp,
            })
            .collect()
    }

    /// Zero-filled dense view.
    pub fn dense(&self) -> Matrix {
        let mut m = Matrix::zeros(self.n_users(), self.n_contents());
        for e in &self.entries {
            m[(e.row, e.col)] = e.value;
        }
        m
    }

    /// 1 where an entry is observed, 0 elsewhere.
    pub fn mask(&self) -> Matrix {
        let mut m = Matrix::zeros(self.n_users(), self.n_contents());
        for e in &self.entries {
            m[(e.row, e.col)] = 1.0;
        }
        m
    }

    pub fn max_value(&self) -> f64 {
        self.entries.iter().map(|e| e.value).fold(0.0, f64::max)
    }

    /// Multiplies every observed value by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        for e in &mut out.entries {
            e.value *= factor;
        }
        out
    }

    /// Restriction to `user_ids`, keeping the full content axis.
    pub fn subset_users(&self, user_ids: &[u32]) -> Result<Self> {
        let mut rows = Vec::with_capacity(user_ids.len());
        for &u in user_ids {
            rows.push(
                self.users
                    .position(u)
                    .ok_or_else(|| Error::Contract(format!("unknown user id {u}")))?,
            );
        }
        let users = AxisIndex::new(user_ids.to_vec());
        let keep: HashMap<usize, usize> = rows
            .iter()
            .map(|&r| (r, users.position(self.users.ids[r]).expect("just inserted")))
            .collect();
        let entries = self
            .entries
            .iter()
            .filter_map(|e| keep.get(&e.row).map(|&row| Entry { row, ..*e }))
            .collect();
        Ok(Self::from_parts(users, self.contents.clone(), entries))
    }

    /// Vertical concatenation of matrices with disjoint users over one catalog.
    pub fn vstack(parts: &[RatingMatrix]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("nothing to concatenate".into()))?;
        let mut ids = Vec::new();
        for p in parts {
            if p.contents != first.contents {
                return Err(Error::Contract("shards do not share a catalog".into()));
            }
            ids.extend_from_slice(p.users.ids());
        }
        let total = ids.len();
        let users = AxisIndex::new(ids);
        if users.len() != total {
            return Err(Error::Contract("shards share users".into()));
        }
        let mut entries = Vec::new();
        for p in parts {
            for e in &p.entries {
                let row = users.position(p.users.ids[e.row]).expect("collected above");
                entries.push(Entry { row, ..*e });
            }
        }
        Ok(Self::from_parts(users, first.contents.clone(), entries))
    }

    /// Observed entries grouped by row.
    pub fn rows(&self) -> Vec<Vec<Entry>> {
        let mut out = vec![Vec::new(); self.n_users()];
        for e in &self.entries {
            out[e.row].push(*e);
        }
        out
    }
}

/// Train/test partition of one rating matrix. Both halves share the user
/// axis and catalog of the original.
#[derive(Clone, Debug)]
pub struct SplitPair {
    pub train: RatingMatrix,
    pub test: RatingMatrix,
    pub seed: u64,
}

/// Per-user stratified random split. Every user with at least two ratings
/// keeps at least one in train; users with fewer go entirely to train. The
/// global test count is `round((1 − train_ratio) · total)` whenever the
/// eligible users can absorb it.
pub fn split(events: &[RatingEvent], train_ratio: f64, seed: u64) -> Result<SplitPair> {
    if !(train_ratio > 0.0 && train_ratio < 1.0) {
        return Err(Error::Config(format!(
            "train ratio must lie in (0, 1), got {train_ratio}"
        )));
    }
    let full = RatingMatrix::from_events(events)?;
    if full.len() < 5 {
        return Err(Error::Data(format!(
            "need at least 5 ratings to split, got {}",
            full.len()
        )));
    }
    let test_frac = 1.0 - train_ratio;
    let mut rng = RngStream::with_stream(seed, 0x5b11);
    let rows = full.rows();

    let mut quota = vec![0usize; rows.len()];
    let mut capacity = vec![0usize; rows.len()];
    let mut remainders = Vec::new();
    for (u, row) in rows.iter().enumerate() {
        let c = row.len();
        if c < 2 {
            if c == 1 {
                log::info!(
                    "user {} has a single rating; kept in train",
                    full.users.ids[u]
                );
            }
            continue;
        }
        let exact = c as f64 * test_frac;
        let base = ((exact + 1e-9).floor() as usize).min(c - 1);
        quota[u] = base;
        capacity[u] = c - 1;
        remainders.push((exact - base as f64, rng.next_u64(), u));
    }
    let target = (full.len() as f64 * test_frac).round() as usize;
    let mut assigned: usize = quota.iter().sum();
    remainders.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, _, u) in remainders.iter().cycle().take(remainders.len() * 2) {
        if assigned >= target {
            break;
        }
        if quota[u] < capacity[u] {
            quota[u] += 1;
            assigned += 1;
        }
    }

    let mut train = Vec::with_capacity(full.len() - assigned);
    let mut test = Vec::with_capacity(assigned);
    for (u, row) in rows.into_iter().enumerate() {
        let mut order: Vec<usize> = (0..row.len()).collect();
        rng.shuffle(&mut order);
        let mut to_test = vec![false; row.len()];
        for &i in order.iter().take(quota[u]) {
            to_test[i] = true;
        }
        for (e, t) in row.into_iter().zip(to_test) {
            if t {
                test.push(e);
            } else {
                train.push(e);
            }
        }
    }
    Ok(SplitPair {
        train: RatingMatrix::from_parts(full.users.clone(), full.contents.clone(), train),
        test: RatingMatrix::from_parts(full.users, full.contents, test),
        seed,
    })
}

/// Partitions users round-robin over `n` MENs after a seeded shuffle. Shard
/// `k` (0-based) belongs to MEN `k + 1`; sizes differ by at most one.
pub fn shard(x: &RatingMatrix, n: usize, seed: u64) -> Result<Vec<RatingMatrix>> {
    if n == 0 {
        return Err(Error::Config("MEN count must be ≥ 1".into()));
    }
    if x.n_users() < n {
        return Err(Error::Config(format!(
            "{} users cannot be spread over {n} MENs",
            x.n_users()
        )));
    }
    let mut ids = x.users.ids().to_vec();
    RngStream::with_stream(seed, 0x5a4d).shuffle(&mut ids);
    let mut groups = vec![Vec::new(); n];
    for (k, id) in ids.into_iter().enumerate() {
        groups[k % n].push(id);
    }
    groups.iter().map(|g| x.subset_users(g)).collect()
}

/// `men_id → user ids`, the record of which users each MEN serves.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ShardManifest(pub BTreeMap<usize, Vec<u32>>);

impl ShardManifest {
    pub fn from_shards(shards: &[RatingMatrix]) -> Self {
        Self(
            shards
                .iter()
                .enumerate()
                .map(|(k, s)| (k + 1, s.users.ids().to_vec()))
                .collect(),
        )
    }

    /// Every user served by a single MEN (`men_id` 1).
    pub fn single(users: &[u32]) -> Self {
        Self([(1, users.to_vec())].into_iter().collect())
    }

    pub fn men_count(&self) -> usize {
        self.0.len()
    }

    pub fn users_of(&self, men_id: usize) -> Option<&[u32]> {
        self.0.get(&men_id).map(Vec::as_slice)
    }

    pub fn home_map(&self) -> HashMap<u32, usize> {
        self.0
            .iter()
            .flat_map(|(&m, us)| us.iter().map(move |&u| (u, m)))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Parameters of the synthetic workload.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub users: usize,
    pub contents: usize,
    /// Fraction of the catalog each user rates.
    pub density: f64,
    /// Zipf exponent `s`.
    pub exponent: f64,
    pub seed: u64,
}

/// Number of taste groups shared by users and contents.
const TASTE_GROUPS: u32 = 4;

/// Synthetic ratings with Zipf content popularity.
///
/// Content id `i` has popularity rank `i`, so its selection weight is
/// `i^(−s)`. Each user rates `round(density · contents)` distinct contents,
/// drawn without replacement by weight. A rating centres on
/// `4.5 − 3 ln(i) / ln(I)` (popular contents rate higher), shifted by a
/// taste-group affinity and a per-user bias, plus noise, rounded into 1..=5.
pub fn synth_zipf(cfg: &SynthConfig) -> Result<Vec<RatingEvent>> {
    if cfg.users == 0 || cfg.contents == 0 {
        return Err(Error::Config(
            "synthetic workload needs users and contents".into(),
        ));
    }
    if !(cfg.density > 0.0 && cfg.density <= 1.0) {
        return Err(Error::Config(format!(
            "density must lie in (0, 1], got {}",
            cfg.density
        )));
    }
    if !(cfg.exponent >= 0.0) {
        return Err(Error::Config(format!(
            "zipf exponent must be ≥ 0, got {}",
            cfg.exponent
        )));
    }
    let per_user = ((cfg.density * cfg.contents as f64).round() as usize).clamp(1, cfg.contents);
    let log_catalog = (cfg.contents.max(2) as f64).ln();
    let weights: Vec<f64> = (1..=cfg.contents)
        .map(|r| (r as f64).powf(-cfg.exponent))
        .collect();
    let mut rng = RngStream::with_stream(cfg.seed, 0x2199);
    let mut events = Vec::with_capacity(cfg.users * per_user);
    let mut ts: i64 = 978_300_000;

    for user in 1..=cfg.users as u32 {
        let bias = 0.35 * rng.normal();
        // Efraimidis–Spirakis: largest ln(u)/w keys form a weighted sample
        let mut keys: Vec<(f64, u32)> = weights
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let u = rng.uniform().max(f64::MIN_POSITIVE);
                (u.ln() / w, i as u32 + 1)
            })
            .collect();
        keys.select_nth_unstable_by(per_user - 1, |a, b| b.0.total_cmp(&a.0));
        let mut chosen: Vec<u32> = keys[..per_user].iter().map(|k| k.1).collect();
        chosen.sort_unstable();
        for content in chosen {
            let base = 4.5 - 3.0 * (content as f64).ln() / log_catalog;
            let affinity = if (user - 1) % TASTE_GROUPS == (content - 1) % TASTE_GROUPS {
                0.75
            } else {
                -0.25
            };
            let raw = base + affinity + bias + 0.5 * rng.normal();
            events.push(RatingEvent {
                user_id: user,
                content_id: content,
                value: raw.round().clamp(1.0, 5.0),
                timestamp: ts,
            });
            ts += 1;
        }
    }
    Ok(events)
}

/// Keeps the `users` most active users and the `contents` most rated contents.
pub fn subsample_dense_core(
    events: &[RatingEvent],
    users: usize,
    contents: usize,
) -> Vec<RatingEvent> {
    fn top(counts: HashMap<u32, usize>, k: usize) -> std::collections::HashSet<u32> {
        let mut v: Vec<(u32, usize)> = counts.into_iter().collect();
        v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        v.into_iter().take(k).map(|(id, _)| id).collect()
    }
    let mut content_counts = HashMap::new();
    for e in events {
        *content_counts.entry(e.content_id).or_insert(0usize) += 1;
    }
    let keep_contents = top(content_counts, contents);
    let mut user_counts = HashMap::new();
    for e in events
        .iter()
        .filter(|e| keep_contents.contains(&e.content_id))
    {
        *user_counts.entry(e.user_id).or_insert(0usize) += 1;
    }
    let keep_users = top(user_counts, users);
    events
        .iter()
        .filter(|e| keep_users.contains(&e.user_id) && keep_contents.contains(&e.content_id))
        .copied()
        .collect()
}
