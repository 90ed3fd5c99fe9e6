//! Text node set: trend, variable and event descriptions, embedded through a
//! trainable table keyed by a stable text id.

use std::io::Read;
use std::path::Path;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::{glorot_uniform, ParamBuilder, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextCategory {
    Trend,
    Variable,
    Event,
}

impl TextCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            TextCategory::Trend => "trend",
            TextCategory::Variable => "variable",
            TextCategory::Event => "event",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TextItem {
    pub category: TextCategory,
    pub stable_id: String,
    pub content: String,
}

impl TextItem {
    pub fn new(category: TextCategory, content: impl Into<String>) -> Self {
        let content = content.into();
        Self {
            stable_id: format!("{}:{}", category.as_str(), content),
            category,
            content,
        }
    }
}

/// The four trend descriptions a window can receive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Trend {
    Rising,
    Falling,
    RisingThenFalling,
    FallingThenRising,
}

impl Trend {
    pub const ALL: [Trend; 4] = [
        Trend::Rising,
        Trend::Falling,
        Trend::RisingThenFalling,
        Trend::FallingThenRising,
    ];

    pub fn text(self) -> &'static str {
        match self {
            Trend::Rising => "rising",
            Trend::Falling => "falling",
            Trend::RisingThenFalling => "first rising then falling",
            Trend::FallingThenRising => "first falling then rising",
        }
    }

    pub fn item(self) -> TextItem {
        TextItem::new(TextCategory::Trend, self.text())
    }
}

const FLAT_SLOPE: f64 = 1e-9;

fn ls_slope(ys: &[f64]) -> f64 {
    let n = ys.len() as f64;
    if ys.len() < 2 {
        return 0.0;
    }
    let mean_x = (n - 1.0) / 2.0;
    let mean_y = ys.iter().sum::<f64>() / n;
    let (mut num, mut den) = (0.0, 0.0);
    for (i, y) in ys.iter().enumerate() {
        let dx = i as f64 - mean_x;
        num += dx * (y - mean_y);
        den += dx * dx;
    }
    num / den
}

/// Classifies a window by the signs of least-squares slopes over the two
/// halves of its variable-averaged series. Flat slopes count as rising.
pub fn classify_trend(x_enc: &Tensor) -> Trend {
    let avg: Vec<f64> = (0..x_enc.rows())
        .map(|r| x_enc.row(r).iter().sum::<f64>() / x_enc.cols() as f64)
        .collect();
    let half = avg.len() / 2;
    let up = |s: f64| s > -FLAT_SLOPE;
    match (up(ls_slope(&avg[..half])), up(ls_slope(&avg[half..]))) {
        (true, true) => Trend::Rising,
        (false, false) => Trend::Falling,
        (true, false) => Trend::RisingThenFalling,
        (false, true) => Trend::FallingThenRising,
    }
}

pub fn label_trend(x_enc: &Tensor) -> TextItem {
    classify_trend(x_enc).item()
}

/// `[trend] + [one item per variable] + [events]`, in that order.
pub fn build_text_set(x_enc: &Tensor, variable_names: &[String], events: &[String]) -> Vec<TextItem> {
    let mut items = Vec::with_capacity(1 + variable_names.len() + events.len());
    items.push(label_trend(x_enc));
    items.extend(variable_names.iter().map(|v| TextItem::new(TextCategory::Variable, v.as_str())));
    items.extend(events.iter().map(|e| TextItem::new(TextCategory::Event, e.as_str())));
    items
}

/// Event text attached to every window whose span overlaps `[start_ts, end_ts]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub start_ts: String,
    pub end_ts: String,
    pub content: String,
}

/// Sidecar event list. Timestamps compare lexicographically, which orders
/// ISO-8601 strings of a common format chronologically.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EventLog {
    pub events: Vec<Event>,
}

impl EventLog {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(file)
    }

    pub fn read<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let events = rdr
            .deserialize()
            .enumerate()
            .map(|(i, r)| {
                r.map_err(|e| Error::Parse {
                    row: i + 1,
                    column: 0,
                    detail: e.to_string(),
                })
            })
            .collect::<Result<Vec<Event>>>()?;
        Ok(Self { events })
    }

    pub fn overlapping(&self, start_ts: &str, end_ts: &str) -> Vec<String> {
        self.events
            .iter()
            .filter(|e| e.start_ts.as_str() <= end_ts && e.end_ts.as_str() >= start_ts)
            .map(|e| e.content.clone())
            .collect()
    }

    pub fn contents(&self) -> Vec<String> {
        let mut seen: Vec<String> = Vec::new();
        for e in &self.events {
            if !seen.contains(&e.content) {
                seen.push(e.content.clone());
            }
        }
        seen
    }
}

/// Reads precomputed embeddings: `stable_id, v0, ..., v{d-1}`.
pub fn read_embedding_file<R: Read>(reader: R, width: usize) -> Result<Vec<(String, Vec<f64>)>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::Parse {
            row,
            column: 0,
            detail: e.to_string(),
        })?;
        if rec.len() != width + 1 {
            return Err(Error::Parse {
                row,
                column: rec.len(),
                detail: format!("expected stable_id plus {width} values"),
            });
        }
        let values = (1..=width)
            .map(|c| {
                rec[c].trim().parse::<f64>().map_err(|_| Error::Parse {
                    row,
                    column: c,
                    detail: format!("non-numeric value {:?}", &rec[c]),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        out.push((rec[0].to_string(), values));
    }
    Ok(out)
}

pub fn load_embedding_file(path: impl AsRef<Path>, width: usize) -> Result<Vec<(String, Vec<f64>)>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_embedding_file(file, width)
}

/// Maps stable text ids to trainable `d`-vectors held in the parameter store.
#[derive(Debug, Clone, Default)]
pub struct TextEmbeddingStore {
    width: usize,
    ids: IndexMap<String, ParamId>,
}

impl TextEmbeddingStore {
    pub fn new(width: usize) -> Self {
        Self {
            width,
            ids: IndexMap::new(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Registered ids in registration order.
    pub fn stable_ids(&self) -> impl Iterator<Item = &str> {
        self.ids.keys().map(String::as_str)
    }

    pub fn param_id(&self, stable_id: &str) -> Option<ParamId> {
        self.ids.get(stable_id).copied()
    }

    /// Registers a trainable vector for `stable_id`, initialized from
    /// `initial` when given, otherwise from the id's hash-seeded default.
    pub fn register(&mut self, pb: &mut ParamBuilder, stable_id: &str, initial: Option<&[f64]>) -> Result<ParamId> {
        if let Some(id) = self.param_id(stable_id) {
            return Ok(id);
        }
        let value = match initial {
            Some(v) if v.len() == self.width => Tensor::new(vec![self.width], v.to_vec())?,
            Some(v) => {
                return Err(Error::Config(format!(
                    "embedding for {stable_id} has {} values, expected {}",
                    v.len(),
                    self.width
                )))
            }
            None => self.default_vector(stable_id),
        };
        let id = pb.tensor(&format!("text.{stable_id}"), value)?;
        self.ids.insert(stable_id.to_string(), id);
        Ok(id)
    }

    /// Deterministic initialization seeded by a hash of the id.
    pub fn default_vector(&self, stable_id: &str) -> Tensor {
        let digest = Sha256::digest(stable_id.as_bytes());
        let mut seed = [0u8; 8];
        seed.copy_from_slice(&digest[..8]);
        let mut rng = ChaCha8Rng::seed_from_u64(u64::from_le_bytes(seed));
        glorot_uniform(&mut rng, &[self.width], 1, self.width)
    }

    /// `[N x d]` embedding matrix, one row per item. Unregistered ids get
    /// their deterministic default vector as a constant.
    pub fn embed(&self, tape: &mut Tape, params: &ParamStore, items: &[TextItem]) -> Result<Var> {
        if items.is_empty() {
            return Err(Error::Contract("cannot embed an empty text set".into()));
        }
        let rows = items
            .iter()
            .map(|item| {
                let v = match self.param_id(&item.stable_id) {
                    Some(id) => tape.param(params, id),
                    None => tape.constant(self.default_vector(&item.stable_id)),
                };
                tape.reshape(v, vec![1, self.width])
            })
            .collect::<Result<Vec<_>>>()?;
        tape.concat(&rows, 0)
    }
}
