//! Fixed-capacity FIFO bank of previously tested images. Each incoming test
//! image borrows batch statistics from a few stored companions, chosen either
//! by style similarity or by recency.

use std::collections::VecDeque;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::normstats::{symmetric_kl, StyleSignature};
use crate::segnet::{self, ModelParams, NormMode};
use crate::tensor::{LabelMap, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SelectionPolicy {
    /// Closest styles under the symmetric KL distance.
    Style,
    /// Most recent arrivals.
    Queue,
}

impl FromStr for SelectionPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sib" | "style" => Ok(Self::Style),
            "qib" | "queue" => Ok(Self::Queue),
            other => Err(Error::Config(format!("unknown selection policy '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BankEntry {
    pub image: Tensor,
    pub style: StyleSignature,
    pub arrival_index: u64,
    /// Evaluation metadata only; selection never looks at it.
    pub domain_tag: Option<u32>,
}

#[derive(Clone, Debug)]
pub struct ImageBank {
    capacity: usize,
    policy: SelectionPolicy,
    entries: VecDeque<BankEntry>,
    next_index: u64,
}

/// Outcome of one bank-assisted prediction.
#[derive(Clone, Debug)]
pub struct BankPrediction {
    pub labels: LabelMap,
    /// Arrival indices of the companions used, in selection order.
    pub companions: Vec<u64>,
    pub companion_tags: Vec<Option<u32>>,
}

impl ImageBank {
    pub fn new(capacity: usize, policy: SelectionPolicy) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("bank capacity must be positive".into()));
        }
        Ok(Self { capacity, policy, entries: VecDeque::with_capacity(capacity), next_index: 0 })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn policy(&self) -> SelectionPolicy {
        self.policy
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries, oldest first.
    pub fn entries(&self) -> impl Iterator<Item = &BankEntry> {
        self.entries.iter()
    }

    /// Appends an image with its cached style, evicting the oldest entry when
    /// full. Returns the arrival index assigned.
    pub fn push(&mut self, image: Tensor, style: StyleSignature, domain_tag: Option<u32>) -> Result<u64> {
        if image.batch() != 1 {
            return Err(Error::Shape(format!("bank stores single images, got batch {}", image.batch())));
        }
        if let Some(first) = self.entries.front() {
            if first.style.channels() != style.channels() {
                return Err(Error::Shape(format!(
                    "style has {} channels, bank holds {}",
                    style.channels(),
                    first.style.channels()
                )));
            }
            if first.image.shape() != image.shape() {
                return Err(Error::Shape(format!(
                    "image shape {:?} differs from bank shape {:?}",
                    image.shape(),
                    first.image.shape()
                )));
            }
        }
        let arrival_index = self.next_index;
        self.next_index += 1;
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(BankEntry { image, style, arrival_index, domain_tag });
        Ok(arrival_index)
    }

    /// Up to `m` companions for `query`. Style selection orders by distance,
    /// older entries first on ties; queue selection returns the newest first.
    pub fn select(&self, query: &StyleSignature, m: usize) -> Result<Vec<&BankEntry>> {
        let take = m.min(self.entries.len());
        match self.policy {
            SelectionPolicy::Queue => Ok(self.entries.iter().rev().take(take).collect()),
            SelectionPolicy::Style => {
                let mut scored = self
                    .entries
                    .iter()
                    .map(|e| Ok((symmetric_kl(query, &e.style)?, e)))
                    .collect::<Result<Vec<_>>>()?;
                // entries are stored oldest first, so a stable sort keeps older ones ahead on ties
                scored.sort_by(|a, b| a.0.total_cmp(&b.0));
                Ok(scored.into_iter().take(take).map(|(_, e)| e).collect())
            }
        }
    }

    /// Predicts one image with statistics of the image plus up to `m`
    /// selected companions, then stores the image.
    pub fn predict(
        &mut self,
        image: &Tensor,
        params: &ModelParams,
        m: usize,
        domain_tag: Option<u32>,
    ) -> Result<BankPrediction> {
        if image.batch() != 1 {
            return Err(Error::Shape(format!("expected one image, got batch {}", image.batch())));
        }
        if let Some(first) = self.entries.front() {
            if first.image.shape() != image.shape() {
                return Err(Error::Shape(format!(
                    "image shape {:?} differs from bank shape {:?}",
                    image.shape(),
                    first.image.shape()
                )));
            }
        }
        let style = segnet::extract_style(params, image)?;
        let selected = self.select(&style, m)?;
        let companions = selected.iter().map(|e| e.arrival_index).collect();
        let companion_tags = selected.iter().map(|e| e.domain_tag).collect();
        let mut parts = vec![image];
        parts.extend(selected.iter().map(|e| &e.image));
        let batch = Tensor::concat_batch(&parts)?;
        let logits = segnet::forward(params, &batch, &NormMode::TargetSpecific)?.logits;
        let labels = segnet::argmax(&logits.sample(0));
        self.push(image.clone(), style, domain_tag)?;
        Ok(BankPrediction { labels, companions, companion_tags })
    }

    /// CSV dump: arrival_index, domain_tag, then mean and sigma per channel.
    pub fn to_csv(&self) -> String {
        let channels = self.entries.front().map_or(0, |e| e.style.channels());
        let mut out = String::from("arrival_index,domain_tag");
        for c in 0..channels {
            out.push_str(&format!(",mu{c}"));
        }
        for c in 0..channels {
            out.push_str(&format!(",sigma{c}"));
        }
        out.push('\n');
        for e in &self.entries {
            let tag = e.domain_tag.map(|t| t.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{}", e.arrival_index, tag));
            for v in e.style.mu.iter().chain(&e.style.sigma) {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}
