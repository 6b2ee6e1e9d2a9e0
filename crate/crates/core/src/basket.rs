//! Transactions, itemsets, and association rules, plus basket-file ingestion
//! and the support arithmetic shared by the miners.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::BufRead;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum BasketError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("no transactions")]
    NoTransactions,
    #[error("invalid item {0:?}: must be non-empty, trimmed, and free of commas and newlines")]
    InvalidItem(String),
    #[error("an itemset needs at least one item")]
    EmptyItemset,
    #[error("{name} must lie in (0, 1], got {value}")]
    InvalidFraction { name: &'static str, value: f64 },
    #[error("read failed: {0}")]
    Io(String),
}

/// A single product token.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Item(String);

impl Item {
    pub fn new(name: impl Into<String>) -> Result<Self, BasketError> {
        let name = name.into();
        let ok = !name.is_empty()
            && name.trim() == name
            && !name.contains(',')
            && !name.contains('\n')
            && !name.contains('\r');
        if ok {
            Ok(Item(name))
        } else {
            Err(BasketError::InvalidItem(name))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for Item {
    type Error = BasketError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        Item::new(s)
    }
}

impl From<Item> for String {
    fn from(item: Item) -> String {
        item.0
    }
}

impl fmt::Display for Item {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// A non-empty set of items in canonical (strictly ascending) order.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<Item>", into = "Vec<Item>")]
pub struct Itemset(Vec<Item>);

impl Itemset {
    /// Canonicalizes `items` (sort + dedup).
    pub fn new(mut items: Vec<Item>) -> Result<Self, BasketError> {
        items.sort();
        items.dedup();
        if items.is_empty() {
            return Err(BasketError::EmptyItemset);
        }
        Ok(Itemset(items))
    }

    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self, BasketError> {
        let items = names
            .iter()
            .map(|n| Item::new(n.as_ref()))
            .collect::<Result<Vec<_>, _>>()?;
        Itemset::new(items)
    }

    pub(crate) fn from_sorted(items: Vec<Item>) -> Self {
        debug_assert!(!items.is_empty());
        debug_assert!(items.windows(2).all(|w| w[0] < w[1]));
        Itemset(items)
    }

    pub fn items(&self) -> &[Item] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// True when every item of `self` occurs in the sorted slice `items`.
    pub fn is_contained_in(&self, items: &[Item]) -> bool {
        let mut rest = items.iter();
        'outer: for needle in &self.0 {
            for candidate in rest.by_ref() {
                match candidate.cmp(needle) {
                    std::cmp::Ordering::Less => continue,
                    std::cmp::Ordering::Equal => continue 'outer,
                    std::cmp::Ordering::Greater => return false,
                }
            }
            return false;
        }
        true
    }

    /// All subsets obtained by dropping exactly one item, in canonical order
    /// of the dropped position. Empty for singletons.
    pub fn drop_one_subsets(&self) -> Vec<Itemset> {
        if self.0.len() < 2 {
            return Vec::new();
        }
        (0..self.0.len())
            .map(|skip| {
                let items = self
                    .0
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| *i != skip)
                    .map(|(_, item)| item.clone())
                    .collect();
                Itemset(items)
            })
            .collect()
    }

    /// Every non-empty proper subset, ordered by the bitmask of kept
    /// positions. Meant for small sets (fewer than 64 items).
    pub fn proper_subsets(&self) -> Vec<Itemset> {
        let n = self.0.len();
        assert!(n < 64, "itemset too large to enumerate");
        (1u64..(1 << n) - 1)
            .map(|mask| {
                let items = (0..n)
                    .filter(|i| mask >> i & 1 == 1)
                    .map(|i| self.0[i].clone())
                    .collect();
                Itemset::from_sorted(items)
            })
            .collect()
    }

    /// Items of `self` that are not in `other`, or `None` if nothing remains.
    pub fn difference(&self, other: &Itemset) -> Option<Itemset> {
        let rest: Vec<Item> = self
            .0
            .iter()
            .filter(|i| other.0.binary_search(i).is_err())
            .cloned()
            .collect();
        (!rest.is_empty()).then_some(Itemset(rest))
    }

    /// Comma-joined text form; commas never occur inside items.
    pub fn encode(&self) -> String {
        let names: Vec<&str> = self.0.iter().map(Item::as_str).collect();
        names.join(",")
    }

    pub fn decode(text: &str) -> Result<Self, BasketError> {
        let items = text
            .split(',')
            .map(Item::new)
            .collect::<Result<Vec<_>, _>>()?;
        Itemset::new(items)
    }
}

impl TryFrom<Vec<Item>> for Itemset {
    type Error = BasketError;
    fn try_from(items: Vec<Item>) -> Result<Self, Self::Error> {
        Itemset::new(items)
    }
}

impl From<Itemset> for Vec<Item> {
    fn from(set: Itemset) -> Vec<Item> {
        set.0
    }
}

impl fmt::Display for Itemset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{{}}}", self.encode())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Transaction {
    pub id: usize,
    items: Vec<Item>,
}

impl Transaction {
    pub fn new(id: usize, items: Vec<Item>) -> Result<Self, BasketError> {
        let set = Itemset::new(items)?;
        Ok(Transaction { id, items: set.0 })
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn contains(&self, set: &Itemset) -> bool {
        set.is_contained_in(&self.items)
    }

    /// The basket-file line for this transaction, without the newline.
    pub fn to_line(&self) -> String {
        let names: Vec<&str> = self.items.iter().map(Item::as_str).collect();
        names.join(",")
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TransactionDataset {
    transactions: Vec<Transaction>,
    universe: Vec<Item>,
}

impl TransactionDataset {
    /// Builds a dataset from item lists, renumbering ids from zero.
    pub fn from_item_lists(lists: Vec<Vec<Item>>) -> Result<Self, BasketError> {
        let transactions = lists
            .into_iter()
            .enumerate()
            .map(|(id, items)| Transaction::new(id, items))
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_transactions(transactions)
    }

    fn from_transactions(transactions: Vec<Transaction>) -> Result<Self, BasketError> {
        if transactions.is_empty() {
            return Err(BasketError::NoTransactions);
        }
        let mut universe: Vec<Item> = transactions
            .iter()
            .flat_map(|t| t.items.iter().cloned())
            .collect();
        universe.sort();
        universe.dedup();
        Ok(TransactionDataset {
            transactions,
            universe,
        })
    }

    /// Convenience for tests and examples: `&[&["beer", "diaper"], ...]`.
    pub fn from_names<S: AsRef<str>>(rows: &[&[S]]) -> Result<Self, BasketError> {
        let lists = rows
            .iter()
            .map(|row| row.iter().map(|n| Item::new(n.as_ref())).collect())
            .collect::<Result<Vec<Vec<Item>>, _>>()?;
        Self::from_item_lists(lists)
    }

    pub fn transactions(&self) -> &[Transaction] {
        &self.transactions
    }

    pub fn universe(&self) -> &[Item] {
        &self.universe
    }

    pub fn len(&self) -> usize {
        self.transactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transactions.is_empty()
    }

    pub fn max_transaction_len(&self) -> usize {
        self.transactions
            .iter()
            .map(|t| t.items.len())
            .max()
            .unwrap_or(0)
    }

    /// Canonical basket-file text: one sorted, comma-joined line per transaction.
    pub fn to_basket_text(&self) -> String {
        let mut out = String::new();
        for t in &self.transactions {
            out.push_str(&t.to_line());
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiningParams {
    pub min_support: f64,
    pub min_confidence: f64,
}

impl MiningParams {
    pub fn new(min_support: f64, min_confidence: f64) -> Result<Self, BasketError> {
        check_fraction("min_support", min_support)?;
        check_fraction("min_confidence", min_confidence)?;
        Ok(MiningParams {
            min_support,
            min_confidence,
        })
    }
}

pub(crate) fn check_fraction(name: &'static str, value: f64) -> Result<(), BasketError> {
    if value > 0.0 && value <= 1.0 {
        Ok(())
    } else {
        Err(BasketError::InvalidFraction { name, value })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssociationRule {
    pub antecedent: Itemset,
    pub consequent: Itemset,
    pub support: f64,
    pub confidence: f64,
    pub union_count: u64,
}

impl AssociationRule {
    /// Builds `antecedent -> union \ antecedent` from absolute counts.
    pub fn from_counts(
        antecedent: Itemset,
        consequent: Itemset,
        union_count: u64,
        antecedent_count: u64,
        n_transactions: usize,
    ) -> Self {
        AssociationRule {
            antecedent,
            consequent,
            support: union_count as f64 / n_transactions as f64,
            confidence: union_count as f64 / antecedent_count as f64,
            union_count,
        }
    }
}

impl fmt::Display for AssociationRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} => {} (support {:.4}, confidence {:.4})",
            self.antecedent, self.consequent, self.support, self.confidence
        )
    }
}

/// Reads a basket file: one transaction per line, comma-separated items,
/// `#` comment lines and blank lines skipped. Items are trimmed, then
/// deduplicated and sorted within each line.
pub fn parse_transactions<R: BufRead>(source: R) -> Result<TransactionDataset, BasketError> {
    let mut transactions = Vec::new();
    for (idx, line) in source.lines().enumerate() {
        let line = line.map_err(|e| BasketError::Io(e.to_string()))?;
        let lineno = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut items = Vec::new();
        for token in line.split(',') {
            let token = token.trim();
            if token.is_empty() {
                return Err(BasketError::Parse {
                    line: lineno,
                    message: "empty item".to_string(),
                });
            }
            let item = Item::new(token).map_err(|e| BasketError::Parse {
                line: lineno,
                message: e.to_string(),
            })?;
            items.push(item);
        }
        let id = transactions.len();
        transactions.push(Transaction::new(id, items)?);
    }
    TransactionDataset::from_transactions(transactions)
}

pub fn parse_str(text: &str) -> Result<TransactionDataset, BasketError> {
    parse_transactions(text.as_bytes())
}

/// `ceil(min_support * n)`, never below 1.
///
/// A tolerance of 1e-9 absorbs binary representation error so that e.g.
/// 0.3 of 10 transactions is 3, not 4.
pub fn absolute_support_threshold(min_support: f64, n: usize) -> u64 {
    let raw = min_support * n as f64;
    let threshold = (raw - 1e-9).ceil();
    (threshold.max(1.0)) as u64
}

/// Number of transactions containing `set`, by exhaustive scan.
pub fn count_support(dataset: &TransactionDataset, set: &Itemset) -> u64 {
    dataset
        .transactions()
        .iter()
        .filter(|t| set.items().iter().all(|i| t.items().contains(i)))
        .count() as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn d4() -> TransactionDataset {
        TransactionDataset::from_names(&[
            &["beer", "diaper"],
            &["beer", "diaper", "milk"],
            &["diaper", "milk"],
            &["beer", "milk"],
        ])
        .unwrap()
    }

    fn set(names: &[&str]) -> Itemset {
        Itemset::from_names(names).unwrap()
    }

    #[test]
    fn parses_simple_file() {
        let ds = parse_str("a,b\na,c\n").unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.transactions()[0].to_line(), "a,b");
        assert_eq!(ds.transactions()[1].to_line(), "a,c");
        let names: Vec<&str> = ds.universe().iter().map(Item::as_str).collect();
        assert_eq!(names, ["a", "b", "c"]);
    }

    #[test]
    fn trims_dedups_and_sorts() {
        let ds = parse_str("b, a ,a\n").unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.transactions()[0].to_line(), "a,b");
    }

    #[test]
    fn interior_whitespace_is_kept() {
        let ds = parse_str("ice cream , milk\n").unwrap();
        assert_eq!(ds.transactions()[0].to_line(), "ice cream,milk");
    }

    #[test]
    fn empty_token_is_an_error() {
        assert_eq!(
            parse_str("a,,b\n").unwrap_err(),
            BasketError::Parse {
                line: 1,
                message: "empty item".into()
            }
        );
        assert!(matches!(
            parse_str("a\n , \n").unwrap_err(),
            BasketError::Parse { line: 2, .. }
        ));
    }

    #[test]
    fn comments_and_blank_lines_are_skipped() {
        let ds = parse_str("# header\n\na,b\n   \n# x\nc\n").unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.transactions()[1].id, 1);
    }

    #[test]
    fn empty_input_has_no_transactions() {
        assert_eq!(parse_str("").unwrap_err(), BasketError::NoTransactions);
        assert_eq!(
            parse_str("# only\n\n").unwrap_err(),
            BasketError::NoTransactions
        );
    }

    #[test]
    fn threshold_uses_ceiling() {
        assert_eq!(absolute_support_threshold(0.5, 4), 2);
        assert_eq!(absolute_support_threshold(0.5, 5), 3);
        assert_eq!(absolute_support_threshold(1.0, 7), 7);
        assert_eq!(absolute_support_threshold(0.3, 10), 3);
        assert_eq!(absolute_support_threshold(0.001, 7), 1);
    }

    #[test]
    fn count_support_on_d4() {
        let ds = d4();
        assert_eq!(count_support(&ds, &set(&["diaper"])), 3);
        assert_eq!(count_support(&ds, &set(&["beer", "diaper", "milk"])), 1);
        assert_eq!(count_support(&ds, &set(&["tea"])), 0);
    }

    #[test]
    fn params_are_validated() {
        assert!(MiningParams::new(0.5, 0.6).is_ok());
        assert!(MiningParams::new(0.0, 0.6).is_err());
        assert!(MiningParams::new(0.5, 1.5).is_err());
        assert!(MiningParams::new(f64::NAN, 0.5).is_err());
    }

    #[test]
    fn itemset_helpers() {
        let abc = set(&["c", "a", "b", "a"]);
        assert_eq!(abc.encode(), "a,b,c");
        assert_eq!(Itemset::decode("a,b,c").unwrap(), abc);
        let subs: Vec<String> = abc.drop_one_subsets().iter().map(Itemset::encode).collect();
        assert_eq!(subs, ["b,c", "a,c", "a,b"]);
        assert_eq!(abc.difference(&set(&["b"])).unwrap(), set(&["a", "c"]));
        assert!(abc.difference(&abc).is_none());
        assert!(set(&["a", "c"]).is_contained_in(abc.items()));
        assert!(!set(&["a", "d"]).is_contained_in(abc.items()));
        assert!(Itemset::new(vec![]).is_err());
    }

    #[test]
    fn proper_subsets_of_three() {
        let subs: Vec<String> = set(&["a", "b", "c"])
            .proper_subsets()
            .iter()
            .map(Itemset::encode)
            .collect();
        assert_eq!(subs, ["a", "b", "a,b", "c", "a,c", "b,c"]);
        assert!(set(&["a"]).proper_subsets().is_empty());
    }

    fn dataset_strategy() -> impl Strategy<Value = TransactionDataset> {
        prop::collection::vec(prop::collection::btree_set(0u8..8, 1..6), 1..30).prop_map(|rows| {
            let lists = rows
                .into_iter()
                .map(|row| {
                    row.into_iter()
                        .map(|i| Item::new(format!("i{i}")).unwrap())
                        .collect()
                })
                .collect();
            TransactionDataset::from_item_lists(lists).unwrap()
        })
    }

    proptest! {
        #[test]
        fn support_is_anti_monotone(ds in dataset_strategy(), picks in prop::collection::vec(0u8..8, 1..5), extra in 0u8..8) {
            let small = Itemset::new(picks.iter().map(|i| Item::new(format!("i{i}")).unwrap()).collect()).unwrap();
            let mut bigger_items = small.items().to_vec();
            bigger_items.push(Item::new(format!("i{extra}")).unwrap());
            let big = Itemset::new(bigger_items).unwrap();
            prop_assert!(count_support(&ds, &small) >= count_support(&ds, &big));
        }

        #[test]
        fn canonical_text_reparses_identically(ds in dataset_strategy()) {
            let again = parse_str(&ds.to_basket_text()).unwrap();
            prop_assert_eq!(&again, &ds);
            prop_assert_eq!(again.to_basket_text(), ds.to_basket_text());
        }

        #[test]
        fn singleton_supports_sum_to_memberships(ds in dataset_strategy()) {
            let total: u64 = ds.universe().iter()
                .map(|i| count_support(&ds, &Itemset::new(vec![i.clone()]).unwrap()))
                .sum();
            let memberships: usize = ds.transactions().iter().map(|t| t.items().len()).sum();
            prop_assert_eq!(total, memberships as u64);
        }
    }
}
