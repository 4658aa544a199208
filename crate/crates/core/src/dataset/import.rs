//! Converters from the four raw corpus layouts into a normalized [`Dataset`].
//!
//! * `statute`: JSON Lines of `{id, text, statutes: [..]}` plus a catalog file
//!   holding a JSON array of `{label, title, description}`.
//! * `echr_binary`: JSON Lines (or a directory of `.json` files) of ECHR cases
//!   with `ITEMID`, `TEXT` (list of facts) and `VIOLATED_ARTICLES`.
//! * `stock_window`: a directory with `tweets/<TICKER>/<YYYY-MM-DD>` files of
//!   JSON tweets and `prices/<TICKER>.csv` daily price histories.
//! * `reddit_class`: a CSV with a `text` (or `post`) and `label` (or `class`)
//!   column and an optional `id` column.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::{Duration, NaiveDate};
use serde::Deserialize;

use super::{CatalogEntry, DataRecord, Dataset, DatasetError};
use crate::labels::{LabelSet, LabelSpace, TaskKind};

/// Minimum number of tweets in a two-day window for a stock record to exist.
pub const DEFAULT_MIN_MENTIONS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SourceFormat {
    Statute,
    EchrBinary,
    StockWindow,
    RedditClass,
}

impl SourceFormat {
    pub fn default_task_id(self) -> &'static str {
        match self {
            SourceFormat::Statute => "statute",
            SourceFormat::EchrBinary => "human-rights",
            SourceFormat::StockWindow => "stock",
            SourceFormat::RedditClass => "reddit",
        }
    }
}

impl FromStr for SourceFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "statute" => Ok(Self::Statute),
            "echr_binary" | "echr-binary" => Ok(Self::EchrBinary),
            "stock_window" | "stock-window" => Ok(Self::StockWindow),
            "reddit_class" | "reddit-class" => Ok(Self::RedditClass),
            other => Err(format!(
                "unknown source format `{other}` (expected statute, echr_binary, stock_window or reddit_class)"
            )),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ImportOptions {
    pub task_id: Option<String>,
    /// Statute catalog file (required for `statute`).
    pub catalog: Option<PathBuf>,
    /// Explicit class list for `reddit_class`; inferred from the data otherwise.
    pub labels: Option<Vec<String>>,
    pub min_mentions: usize,
    /// Restricts `stock_window` to these tickers.
    pub tickers: Option<Vec<String>>,
    /// Keeps only the first `n` records.
    pub limit: Option<usize>,
}

impl Default for ImportOptions {
    fn default() -> Self {
        Self {
            task_id: None,
            catalog: None,
            labels: None,
            min_mentions: DEFAULT_MIN_MENTIONS,
            tickers: None,
            limit: None,
        }
    }
}

/// Reads a raw corpus in `format` and normalizes it.
pub fn load_dataset(
    path: &Path,
    format: SourceFormat,
    opts: &ImportOptions,
) -> Result<Dataset, DatasetError> {
    let task_id = opts
        .task_id
        .clone()
        .unwrap_or_else(|| format.default_task_id().to_string());
    let dataset = match format {
        SourceFormat::Statute => load_statute(path, &task_id, opts)?,
        SourceFormat::EchrBinary => load_echr(path, &task_id)?,
        SourceFormat::StockWindow => load_stock(path, &task_id, opts)?,
        SourceFormat::RedditClass => load_reddit(path, &task_id, opts)?,
    };
    match opts.limit {
        Some(n) => dataset.truncated(n),
        None => Ok(dataset),
    }
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>, DatasetError> {
    let file = fs::File::open(path).map_err(|e| DatasetError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| DatasetError::io(path, e))?;
        if !line.trim().is_empty() {
            out.push((i + 1, line));
        }
    }
    Ok(out)
}

#[derive(Deserialize)]
struct RawFact {
    id: String,
    text: String,
    statutes: Vec<String>,
}

#[derive(Deserialize)]
struct RawCatalogEntry {
    #[serde(alias = "id")]
    label: String,
    title: String,
    description: String,
}

fn load_statute(path: &Path, task_id: &str, opts: &ImportOptions) -> Result<Dataset, DatasetError> {
    let catalog_path = opts
        .catalog
        .as_deref()
        .ok_or_else(|| DatasetError::schema(path, 0, "statute import needs a catalog file"))?;
    let text = fs::read_to_string(catalog_path).map_err(|e| DatasetError::io(catalog_path, e))?;
    let raw: Vec<RawCatalogEntry> = serde_json::from_str(&text)
        .map_err(|e| DatasetError::schema(catalog_path, e.line(), e.to_string()))?;
    if raw.is_empty() {
        return Err(DatasetError::EmptyCatalog);
    }
    let catalog: Vec<CatalogEntry> = raw
        .into_iter()
        .map(|r| CatalogEntry {
            label: r.label,
            title: r.title,
            description: r.description,
        })
        .collect();
    let space = LabelSpace::new(
        task_id,
        TaskKind::Multilabel,
        catalog.iter().map(|c| c.label.clone()),
    )
    .map_err(|e| DatasetError::schema(catalog_path, 1, e.to_string()))?;

    let mut records = Vec::new();
    for (line, content) in read_lines(path)? {
        let fact: RawFact = serde_json::from_str(&content)
            .map_err(|e| DatasetError::schema(path, line, e.to_string()))?;
        for s in &fact.statutes {
            if !space.contains(s) {
                return Err(DatasetError::schema(
                    path,
                    line,
                    format!("unknown statute `{s}`"),
                ));
            }
        }
        records.push((
            line,
            DataRecord {
                id: fact.id,
                text: fact.text,
                gold: fact.statutes.into_iter().collect(),
            },
        ));
    }
    build(path, space, records, Some(catalog))
}

/// Validates records one by one so schema errors carry the source line.
fn build(
    path: &Path,
    space: LabelSpace,
    records: Vec<(usize, DataRecord)>,
    catalog: Option<Vec<CatalogEntry>>,
) -> Result<Dataset, DatasetError> {
    let mut seen = BTreeSet::new();
    for (line, r) in &records {
        if !seen.insert(r.id.as_str()) {
            return Err(DatasetError::schema(
                path,
                *line,
                format!("duplicate record id `{}`", r.id),
            ));
        }
        if r.text.trim().is_empty() {
            return Err(DatasetError::schema(
                path,
                *line,
                format!("record `{}` has empty text", r.id),
            ));
        }
    }
    if records.is_empty() {
        return Err(DatasetError::Empty {
            task_id: space.task_id().to_string(),
        });
    }
    Dataset::new(
        space,
        records.into_iter().map(|(_, r)| r).collect(),
        catalog,
    )
}

#[derive(Deserialize)]
struct RawEchrCase {
    #[serde(rename = "ITEMID")]
    item_id: String,
    #[serde(rename = "TEXT")]
    text: Vec<String>,
    #[serde(rename = "VIOLATED_ARTICLES", default)]
    violated_articles: Vec<String>,
}

fn echr_record(case: RawEchrCase) -> DataRecord {
    let violated = if case.violated_articles.is_empty() {
        "0"
    } else {
        "1"
    };
    DataRecord {
        id: case.item_id,
        text: case.text.join("\n"),
        gold: LabelSet::single(violated),
    }
}

fn load_echr(path: &Path, task_id: &str) -> Result<Dataset, DatasetError> {
    let space = LabelSpace::binary(task_id);
    let mut records = Vec::new();
    if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| DatasetError::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        files.sort();
        for (i, file) in files.iter().enumerate() {
            let text = fs::read_to_string(file).map_err(|e| DatasetError::io(file, e))?;
            let case: RawEchrCase = serde_json::from_str(&text)
                .map_err(|e| DatasetError::schema(file, e.line(), e.to_string()))?;
            records.push((i + 1, echr_record(case)));
        }
    } else {
        for (line, content) in read_lines(path)? {
            let case: RawEchrCase = serde_json::from_str(&content)
                .map_err(|e| DatasetError::schema(path, line, e.to_string()))?;
            records.push((line, echr_record(case)));
        }
    }
    build(path, space, records, None)
}

#[derive(Deserialize)]
#[serde(untagged)]
enum TweetText {
    Tokens(Vec<String>),
    Plain(String),
}

#[derive(Deserialize)]
struct RawTweet {
    text: TweetText,
}

impl RawTweet {
    fn into_text(self) -> String {
        match self.text {
            TweetText::Tokens(t) => t.join(" "),
            TweetText::Plain(s) => s,
        }
    }
}

fn read_prices(path: &Path) -> Result<BTreeMap<NaiveDate, f64>, DatasetError> {
    let mut reader =
        csv::Reader::from_path(path).map_err(|e| DatasetError::schema(path, 0, e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| DatasetError::schema(path, 1, e.to_string()))?
        .clone();
    let date_col = headers
        .iter()
        .position(|h| h.eq_ignore_ascii_case("date"))
        .ok_or_else(|| DatasetError::schema(path, 1, "missing `Date` column"))?;
    let close_col = headers
        .iter()
        .position(|h| h.eq_ignore_ascii_case("adj close"))
        .or_else(|| headers.iter().position(|h| h.eq_ignore_ascii_case("close")))
        .ok_or_else(|| DatasetError::schema(path, 1, "missing `Adj Close` or `Close` column"))?;
    let mut prices = BTreeMap::new();
    for (i, row) in reader.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| DatasetError::schema(path, line, e.to_string()))?;
        let date = NaiveDate::parse_from_str(row.get(date_col).unwrap_or(""), "%Y-%m-%d")
            .map_err(|e| DatasetError::schema(path, line, format!("bad date: {e}")))?;
        let close: f64 = row
            .get(close_col)
            .unwrap_or("")
            .trim()
            .parse()
            .map_err(|e| DatasetError::schema(path, line, format!("bad close price: {e}")))?;
        prices.insert(date, close);
    }
    Ok(prices)
}

fn read_tweets(path: &Path) -> Result<Vec<String>, DatasetError> {
    let mut tweets = Vec::new();
    for (line, content) in read_lines(path)? {
        let tweet: RawTweet = serde_json::from_str(&content)
            .map_err(|e| DatasetError::schema(path, line, e.to_string()))?;
        tweets.push(tweet.into_text());
    }
    Ok(tweets)
}

fn load_stock(root: &Path, task_id: &str, opts: &ImportOptions) -> Result<Dataset, DatasetError> {
    let space = LabelSpace::binary(task_id);
    let tweets_root = root.join("tweets");
    let mut tickers: Vec<String> = fs::read_dir(&tweets_root)
        .map_err(|e| DatasetError::io(&tweets_root, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    tickers.sort();
    if let Some(filter) = &opts.tickers {
        tickers.retain(|t| filter.iter().any(|f| f.eq_ignore_ascii_case(t)));
    }

    let mut records = Vec::new();
    for ticker in &tickers {
        let price_path = root.join("prices").join(format!("{ticker}.csv"));
        let prices = read_prices(&price_path)?;
        let mut previous: Option<f64> = None;
        for (&date, &close) in &prices {
            let Some(prev_close) = previous.replace(close) else {
                continue;
            };
            let mut window = Vec::new();
            for back in [2, 1] {
                let day = date - Duration::days(back);
                let file = tweets_root
                    .join(ticker)
                    .join(day.format("%Y-%m-%d").to_string());
                if file.is_file() {
                    window.extend(read_tweets(&file)?);
                }
            }
            if window.len() < opts.min_mentions {
                continue;
            }
            let movement = if close > prev_close { "1" } else { "0" };
            records.push((
                records.len() + 1,
                DataRecord {
                    id: format!("{ticker}_{date}"),
                    text: window.join("\n"),
                    gold: LabelSet::single(movement),
                },
            ));
        }
    }
    build(root, space, records, None)
}

fn load_reddit(path: &Path, task_id: &str, opts: &ImportOptions) -> Result<Dataset, DatasetError> {
    let mut reader =
        csv::Reader::from_path(path).map_err(|e| DatasetError::schema(path, 0, e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| DatasetError::schema(path, 1, e.to_string()))?
        .clone();
    let find = |names: &[&str]| {
        headers
            .iter()
            .position(|h| names.iter().any(|n| h.trim().eq_ignore_ascii_case(n)))
    };
    let text_col = find(&["text", "post"])
        .ok_or_else(|| DatasetError::schema(path, 1, "missing `text` column"))?;
    let label_col = find(&["label", "class"])
        .ok_or_else(|| DatasetError::schema(path, 1, "missing `label` column"))?;
    let id_col = find(&["id"]);

    let mut rows = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| DatasetError::schema(path, line, e.to_string()))?;
        let id = id_col
            .and_then(|c| row.get(c))
            .map(str::to_string)
            .unwrap_or_else(|| format!("r{}", i + 1));
        let text = row.get(text_col).unwrap_or("").to_string();
        let label = row.get(label_col).unwrap_or("").trim().to_string();
        rows.push((line, id, text, label));
    }
    let labels = match &opts.labels {
        Some(l) => l.clone(),
        None => rows
            .iter()
            .map(|(_, _, _, l)| l.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect(),
    };
    let space = LabelSpace::new(task_id, TaskKind::Multiclass, labels)
        .map_err(|e| DatasetError::schema(path, 1, e.to_string()))?;
    let mut records = Vec::new();
    for (line, id, text, label) in rows {
        if !space.contains(&label) {
            return Err(DatasetError::schema(
                path,
                line,
                format!("unknown label `{label}`"),
            ));
        }
        records.push((
            line,
            DataRecord {
                id,
                text,
                gold: LabelSet::single(label),
            },
        ));
    }
    build(path, space, records, None)
}
