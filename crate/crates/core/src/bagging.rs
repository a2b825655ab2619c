//! Disjoint fixed-size bag generation and the bag file format.
//!
//! File layout (tab separated, one bag per line):
//!
//! ```text
//! #llp-bags v1 C=<C> M=<M>
//! <bag_id>\t<i0,i1,...>\t<m0,m1,...>
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::types::{validate_bag, Bag, BagCollection, Dataset};

const HEADER_TAG: &str = "#llp-bags v1";

/// One parsed line of a bag file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BagFileRecord {
    pub bag_id: usize,
    pub instance_indices: Vec<usize>,
    pub counts: Vec<usize>,
}

/// Shuffles all indices with `seed`, then cuts consecutive chunks of `bag_size`.
/// The trailing `len % bag_size` instances are dropped.
pub fn generate_bags(dataset: &Dataset, bag_size: usize, seed: u64) -> Result<BagCollection> {
    if bag_size == 0 {
        return Err(Error::InvalidArgument("bag size must be at least 1".into()));
    }
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("dataset is empty".into()));
    }
    if bag_size > dataset.len() {
        return Err(Error::BagSizeExceedsDataset {
            bag_size,
            samples: dataset.len(),
        });
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let bags = order
        .chunks_exact(bag_size)
        .map(|chunk| Bag::from_labels(chunk.to_vec(), dataset.labels(), dataset.class_count()))
        .collect::<Result<Vec<_>>>()?;
    Ok(BagCollection {
        bags,
        source_dataset_id: dataset.fingerprint(),
    })
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

/// Renders a collection in the bag file format.
pub fn render_bags(collection: &BagCollection) -> Result<String> {
    let m = collection
        .bag_size()
        .ok_or_else(|| Error::InvalidArgument("bags must share one size to be written".into()))?;
    let c = collection.bags.first().map_or(0, Bag::class_count);
    let mut out = format!("{HEADER_TAG} C={c} M={m}\n");
    for (id, bag) in collection.bags.iter().enumerate() {
        writeln!(out, "{id}\t{}\t{}", join(&bag.indices), join(&bag.counts)).expect("string write");
    }
    Ok(out)
}

pub fn write_bags(collection: &BagCollection, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, render_bags(collection)?).map_err(|e| Error::io(path, e))
}

fn parse_list(path: &Path, line: usize, field: &str, what: &str) -> Result<Vec<usize>> {
    if field.is_empty() {
        return Ok(Vec::new());
    }
    field
        .split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| Error::parse(path, line, format!("bad {what} entry {t:?}")))
        })
        .collect()
}

fn parse_header(path: &Path, header: &str) -> Result<(usize, usize)> {
    let rest = header
        .strip_prefix(HEADER_TAG)
        .ok_or_else(|| Error::parse(path, 1, format!("expected header starting with {HEADER_TAG:?}")))?;
    let mut c = None;
    let mut m = None;
    for tok in rest.split_whitespace() {
        let (k, v) = tok
            .split_once('=')
            .ok_or_else(|| Error::parse(path, 1, format!("bad header token {tok:?}")))?;
        let v: usize = v
            .parse()
            .map_err(|_| Error::parse(path, 1, format!("bad header value {tok:?}")))?;
        match k {
            "C" => c = Some(v),
            "M" => m = Some(v),
            _ => return Err(Error::parse(path, 1, format!("unknown header key {k:?}"))),
        }
    }
    match (c, m) {
        (Some(c), Some(m)) => Ok((c, m)),
        _ => Err(Error::parse(path, 1, "header must define C and M")),
    }
}

/// Parses bag file text into records, checking syntax and the header's C/M.
pub fn parse_bag_records(path: &Path, text: &str) -> Result<(usize, usize, Vec<BagFileRecord>)> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::parse(path, 1, "empty bag file"))?;
    let (c, m) = parse_header(path, header)?;

    let mut records = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::parse(path, lineno, format!("expected 3 tab-separated fields, got {}", fields.len())));
        }
        let bag_id = fields[0]
            .parse()
            .map_err(|_| Error::parse(path, lineno, format!("bad bag id {:?}", fields[0])))?;
        let instance_indices = parse_list(path, lineno, fields[1], "index")?;
        let counts = parse_list(path, lineno, fields[2], "count")?;
        if counts.len() != c {
            return Err(Error::parse(path, lineno, format!("{} counts, header says C={c}", counts.len())));
        }
        if instance_indices.len() != m {
            return Err(Error::parse(path, lineno, format!("{} indices, header says M={m}", instance_indices.len())));
        }
        let sum: usize = counts.iter().sum();
        if sum != m {
            return Err(Error::parse(path, lineno, format!("counts sum to {sum}, header says M={m}")));
        }
        records.push(BagFileRecord {
            bag_id,
            instance_indices,
            counts,
        });
    }
    Ok((c, m, records))
}

/// Reads a bag file and validates every bag against `dataset`, plus disjointness.
pub fn read_bags(path: impl AsRef<Path>, dataset: &Dataset) -> Result<BagCollection> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (c, _, records) = parse_bag_records(path, &text)?;
    if c != dataset.class_count() {
        return Err(Error::parse(path, 1, format!("C={c} but dataset has {} classes", dataset.class_count())));
    }
    let mut bags = Vec::with_capacity(records.len());
    for rec in records {
        let bag = Bag::from_counts(rec.instance_indices, rec.counts)?;
        validate_bag(&bag, dataset)?;
        bags.push(bag);
    }
    let collection = BagCollection {
        bags,
        source_dataset_id: dataset.fingerprint(),
    };
    if let Some(dup) = collection.find_overlap() {
        return Err(Error::InvalidArgument(format!("bags are not disjoint: index {dup} appears twice")));
    }
    Ok(collection)
}
