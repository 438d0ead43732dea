//! Interaction logs and item catalogs: ingestion, sequence-length rules,
//! leave-one-out splits, context rendering and dataset statistics.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::textproc::{Vocab, SEP};

/// Dense index of an item inside an [`ItemCatalog`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ItemIdx(pub u32);

impl ItemIdx {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub item_id: String,
    pub title: String,
    /// Title, attributes and synopsis concatenated; defaults to the title.
    pub content: String,
}

#[derive(Deserialize)]
struct RawItem {
    item_id: String,
    title: String,
    #[serde(default)]
    content: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ItemCatalog {
    items: Vec<ItemRecord>,
    index: HashMap<String, ItemIdx>,
}

impl ItemCatalog {
    pub fn new(items: Vec<ItemRecord>) -> Result<Self> {
        let mut index = HashMap::with_capacity(items.len());
        for (i, it) in items.iter().enumerate() {
            if it.title.trim().is_empty() {
                return Err(Error::Invalid(format!("item {:?} has an empty title", it.item_id)));
            }
            if index.insert(it.item_id.clone(), ItemIdx(i as u32)).is_some() {
                return Err(Error::Invalid(format!("duplicate item id {:?}", it.item_id)));
            }
        }
        Ok(ItemCatalog { items, index })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, idx: ItemIdx) -> &ItemRecord {
        &self.items[idx.index()]
    }

    pub fn lookup(&self, item_id: &str) -> Option<ItemIdx> {
        self.index.get(item_id).copied()
    }

    pub fn items(&self) -> &[ItemRecord] {
        &self.items
    }

    pub fn indices(&self) -> impl Iterator<Item = ItemIdx> {
        (0..self.items.len() as u32).map(ItemIdx)
    }

    /// One JSON object per line: `item_id`, `title`, optional `content`.
    pub fn from_jsonl(text: &str, path: &Path) -> Result<Self> {
        let mut items = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let raw: RawItem = serde_json::from_str(line).map_err(|e| Error::Malformed {
                path: path.to_path_buf(),
                line: lineno + 1,
                reason: e.to_string(),
            })?;
            let content = raw.content.unwrap_or_else(|| raw.title.clone());
            items.push(ItemRecord {
                item_id: raw.item_id,
                title: raw.title,
                content,
            });
        }
        Self::new(items)
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for it in &self.items {
            s.push_str(&serde_json::to_string(it).expect("serializable record"));
            s.push('\n');
        }
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(&text, path)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Interaction {
    pub user_id: String,
    pub item_id: String,
    pub timestamp: i64,
}

/// `user_id<TAB>item_id<TAB>timestamp` rows; blank lines are skipped.
pub fn parse_interactions(text: &str, path: &Path) -> Result<Vec<Interaction>> {
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |reason: &str| Error::Malformed {
            path: path.to_path_buf(),
            line: lineno + 1,
            reason: reason.to_string(),
        };
        let fields: Vec<&str> = line.split('\t').collect();
        let [user, item, ts] = fields[..] else {
            return Err(malformed("expected 3 tab-separated fields"));
        };
        if user.is_empty() || item.is_empty() {
            return Err(malformed("empty user or item id"));
        }
        let timestamp = ts
            .trim()
            .parse()
            .map_err(|_| malformed("timestamp is not an integer"))?;
        rows.push(Interaction {
            user_id: user.to_string(),
            item_id: item.to_string(),
            timestamp,
        });
    }
    Ok(rows)
}

/// A user's items in chronological order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSequence {
    pub user_id: String,
    pub items: Vec<ItemIdx>,
}

/// Groups rows per user (users in order of first appearance), sorts each user
/// by timestamp keeping file order on ties, and collapses consecutive exact
/// duplicates.
pub fn group_interactions(rows: &[Interaction], catalog: &ItemCatalog) -> Result<Vec<UserSequence>> {
    let mut unknown: Vec<String> = rows
        .iter()
        .filter(|r| catalog.lookup(&r.item_id).is_none())
        .map(|r| r.item_id.clone())
        .collect();
    if !unknown.is_empty() {
        unknown.sort();
        unknown.dedup();
        return Err(Error::UnknownItems(unknown));
    }
    let mut order: Vec<&str> = Vec::new();
    let mut per_user: HashMap<&str, Vec<(i64, ItemIdx)>> = HashMap::new();
    for r in rows {
        let entry = per_user.entry(&r.user_id).or_insert_with(|| {
            order.push(&r.user_id);
            Vec::new()
        });
        entry.push((r.timestamp, catalog.lookup(&r.item_id).expect("checked above")));
    }
    Ok(order
        .into_iter()
        .map(|u| {
            let mut events = per_user.remove(u).expect("user recorded");
            events.sort_by_key(|&(ts, _)| ts);
            events.dedup();
            UserSequence {
                user_id: u.to_string(),
                items: events.into_iter().map(|(_, i)| i).collect(),
            }
        })
        .collect())
}

pub fn load(interactions: &Path, catalog: &Path) -> Result<(Vec<UserSequence>, ItemCatalog)> {
    let catalog = ItemCatalog::load(catalog)?;
    let text = std::fs::read_to_string(interactions).map_err(|e| Error::io(interactions, e))?;
    let rows = parse_interactions(&text, interactions)?;
    let seqs = group_interactions(&rows, &catalog)?;
    Ok((seqs, catalog))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LengthRule {
    pub min: usize,
    pub max: usize,
}

impl Default for LengthRule {
    fn default() -> Self {
        LengthRule { min: 5, max: 10 }
    }
}

/// Drops users shorter than `min`; keeps only the most recent `max` items.
pub fn apply_length_rules(seqs: Vec<UserSequence>, rule: LengthRule) -> Vec<UserSequence> {
    seqs.into_iter()
        .filter(|s| s.items.len() >= rule.min)
        .map(|mut s| {
            if s.items.len() > rule.max {
                s.items.drain(..s.items.len() - rule.max);
            }
            s
        })
        .collect()
}

/// Leave-one-out view of a sequence: last item is the test target, the one
/// before it the validation target, the rest the training region.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionSequence {
    pub user_id: String,
    pub items: Vec<ItemIdx>,
}

impl InteractionSequence {
    pub fn test_target(&self) -> ItemIdx {
        self.items[self.items.len() - 1]
    }

    pub fn valid_target(&self) -> ItemIdx {
        self.items[self.items.len() - 2]
    }

    pub fn train_region(&self) -> &[ItemIdx] {
        &self.items[..self.items.len() - 2]
    }

    /// History used to predict the test target.
    pub fn test_history(&self) -> &[ItemIdx] {
        &self.items[..self.items.len() - 1]
    }

    /// History used to predict the validation target.
    pub fn valid_history(&self) -> &[ItemIdx] {
        self.train_region()
    }

    /// Every `(prefix, next)` pair inside the training region.
    pub fn training_pairs(&self) -> Vec<(&[ItemIdx], ItemIdx)> {
        let region = self.train_region();
        (1..region.len()).map(|k| (&region[..k], region[k])).collect()
    }
}

pub fn split_leave_one_out(seq: UserSequence) -> Result<InteractionSequence> {
    if seq.items.len() < 3 {
        return Err(Error::Invalid(format!(
            "user {:?} has {} items; leave-one-out needs at least 3",
            seq.user_id,
            seq.items.len()
        )));
    }
    Ok(InteractionSequence {
        user_id: seq.user_id,
        items: seq.items,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Template {
    /// Instruction line, titles each followed by SEP, then `next :`.
    #[default]
    Default,
    /// Titles each followed by SEP, nothing else.
    Bare,
}

impl std::str::FromStr for Template {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "default" => Ok(Template::Default),
            "bare" => Ok(Template::Bare),
            other => Err(format!("unknown template {other:?}")),
        }
    }
}

/// Where a rendered context sits in the position space.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Align {
    /// Tokens start at the first position after the virtual rows.
    Left,
    /// Tokens end at a fixed anchor: the longest context the budget and
    /// history length allow, so the cue and the generated title always occupy
    /// the same positions.
    #[default]
    Right,
}

impl std::str::FromStr for Align {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "left" => Ok(Align::Left),
            "right" => Ok(Align::Right),
            other => Err(format!("unknown alignment {other:?}")),
        }
    }
}

pub const INSTRUCTION: &str = "a user watched the following items :";
pub const NEXT_CUE: &str = "next :";

/// Template words, so they can be added to the vocabulary corpus.
pub fn template_text() -> String {
    format!("{INSTRUCTION} {NEXT_CUE}")
}

/// Tokens the template adds around the item segments.
pub fn template_overhead(vocab: &Vocab, template: Template) -> usize {
    match template {
        Template::Default => vocab.encode(INSTRUCTION, usize::MAX).ids.len() + vocab.encode(NEXT_CUE, usize::MAX).ids.len(),
        Template::Bare => 0,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ContextBudget {
    pub item_tokens: usize,
    pub total_tokens: usize,
}

impl Default for ContextBudget {
    fn default() -> Self {
        ContextBudget {
            item_tokens: 32,
            total_tokens: 512,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RenderedContext {
    pub ids: Vec<u32>,
    /// Kept history items, oldest first.
    pub items: Vec<ItemIdx>,
    /// `(start, end)` token span of each kept item's title (SEP excluded).
    pub item_spans: Vec<(usize, usize)>,
    /// Number of oldest items dropped to fit the budget.
    pub dropped: usize,
}

pub fn render_context(
    history: &[ItemIdx],
    catalog: &ItemCatalog,
    vocab: &Vocab,
    template: Template,
    budget: ContextBudget,
) -> Result<RenderedContext> {
    if history.is_empty() {
        return Err(Error::Empty("history".into()));
    }
    let (head, tail) = match template {
        Template::Default => (
            vocab.encode(INSTRUCTION, usize::MAX).ids,
            vocab.encode(NEXT_CUE, usize::MAX).ids,
        ),
        Template::Bare => (Vec::new(), Vec::new()),
    };
    let segments: Vec<Vec<u32>> = history
        .iter()
        .map(|&i| {
            let mut ids = vocab.encode(&catalog.get(i).title, budget.item_tokens).ids;
            ids.push(SEP);
            ids
        })
        .collect();
    let fixed = head.len() + tail.len();
    let mut total = fixed + segments.iter().map(Vec::len).sum::<usize>();
    let mut first = 0;
    while total > budget.total_tokens && first < segments.len() {
        total -= segments[first].len();
        first += 1;
    }
    if first == segments.len() {
        return Err(Error::Budget {
            needed: fixed + segments.last().map_or(0, Vec::len),
            budget: budget.total_tokens,
        });
    }
    let mut ids = head;
    let mut item_spans = Vec::new();
    for seg in &segments[first..] {
        let start = ids.len();
        ids.extend_from_slice(seg);
        item_spans.push((start, ids.len() - 1));
    }
    ids.extend_from_slice(&tail);
    Ok(RenderedContext {
        ids,
        items: history[first..].to_vec(),
        item_spans,
        dropped: first,
    })
}

/// Counts behind a dataset statistics row; ratios are derived on demand.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DatasetStats {
    pub users: u64,
    pub items: u64,
    pub interactions: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsRecord {
    pub num_users: u64,
    pub num_items: u64,
    pub num_interactions: u64,
    pub sparsity: String,
    pub avg_user: String,
    pub avg_item: String,
}

impl DatasetStats {
    pub fn from_counts(users: u64, items: u64, interactions: u64) -> Result<Self> {
        if users == 0 || items == 0 {
            return Err(Error::Empty("statistics need at least one user and one item".into()));
        }
        Ok(DatasetStats {
            users,
            items,
            interactions,
        })
    }

    pub fn sparsity(&self) -> f64 {
        1.0 - self.interactions as f64 / (self.users as f64 * self.items as f64)
    }

    pub fn avg_per_user(&self) -> f64 {
        self.interactions as f64 / self.users as f64
    }

    pub fn avg_per_item(&self) -> f64 {
        self.interactions as f64 / self.items as f64
    }

    /// Rendered at two decimals, sparsity as a percentage.
    pub fn record(&self) -> StatsRecord {
        StatsRecord {
            num_users: self.users,
            num_items: self.items,
            num_interactions: self.interactions,
            sparsity: format!("{:.2}%", 100.0 * self.sparsity()),
            avg_user: format!("{:.2}", self.avg_per_user()),
            avg_item: format!("{:.2}", self.avg_per_item()),
        }
    }
}

/// Statistics over processed sequences; the item count is the catalog size
/// (the candidate set of the all-ranking protocol).
pub fn dataset_stats(seqs: &[UserSequence], catalog: &ItemCatalog) -> Result<DatasetStats> {
    let interactions = seqs.iter().map(|s| s.items.len() as u64).sum();
    DatasetStats::from_counts(seqs.len() as u64, catalog.len() as u64, interactions)
}

pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub user_id: String,
    pub items: Vec<String>,
    pub valid_index: usize,
    pub test_index: usize,
}

/// Versioned container for processed, split sequences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProcessedDataset {
    pub version: u32,
    pub config_hash: String,
    pub length_rule: LengthRule,
    pub users: Vec<SplitRecord>,
}

impl ProcessedDataset {
    pub fn from_sequences(
        seqs: &[InteractionSequence],
        catalog: &ItemCatalog,
        rule: LengthRule,
        config_hash: &str,
    ) -> Self {
        let users = seqs
            .iter()
            .map(|s| SplitRecord {
                user_id: s.user_id.clone(),
                items: s.items.iter().map(|&i| catalog.get(i).item_id.clone()).collect(),
                valid_index: s.items.len() - 2,
                test_index: s.items.len() - 1,
            })
            .collect();
        ProcessedDataset {
            version: DATASET_VERSION,
            config_hash: config_hash.to_string(),
            length_rule: rule,
            users,
        }
    }

    pub fn sequences(&self, catalog: &ItemCatalog) -> Result<Vec<InteractionSequence>> {
        self.users
            .iter()
            .map(|u| {
                let mut missing = Vec::new();
                let items = u
                    .items
                    .iter()
                    .filter_map(|id| {
                        let found = catalog.lookup(id);
                        if found.is_none() {
                            missing.push(id.clone());
                        }
                        found
                    })
                    .collect::<Vec<_>>();
                if !missing.is_empty() {
                    return Err(Error::UnknownItems(missing));
                }
                split_leave_one_out(UserSequence {
                    user_id: u.user_id.clone(),
                    items,
                })
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ds: ProcessedDataset = serde_json::from_str(&text)?;
        if ds.version != DATASET_VERSION {
            return Err(Error::Version {
                found: ds.version,
                supported: DATASET_VERSION,
            });
        }
        Ok(ds)
    }
}

/// TSV rendering of interactions, used by fixtures.
pub fn interactions_to_tsv(rows: &[Interaction]) -> String {
    let mut s = String::new();
    for r in rows {
        let _ = writeln!(s, "{}\t{}\t{}", r.user_id, r.item_id, r.timestamp);
    }
    s
}
