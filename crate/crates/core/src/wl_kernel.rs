//! Weisfeiler-Lehman subtree kernel on directed, op-labeled DAGs.
//!
//! Each refinement round relabels a node with the compressed tuple
//! `(own label, sorted in-neighbor labels, sorted out-neighbor labels)`.
//! Feature vectors count every label produced in rounds `0..=h`.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::Dag;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WlConfig {
    pub h: usize,
    pub use_ops_as_initial_labels: bool,
}

impl Default for WlConfig {
    fn default() -> Self {
        WlConfig {
            h: 3,
            use_ops_as_initial_labels: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum LabelKey {
    Uniform,
    Op(u32),
    Refined {
        round: u32,
        own: u32,
        ins: Vec<u32>,
        outs: Vec<u32>,
    },
}

/// Label compression map shared by every graph in one kernel session.
/// Feature vectors are only comparable when built against the same dictionary.
#[derive(Debug, Default, Clone)]
pub struct LabelDictionary {
    ids: HashMap<LabelKey, u32>,
}

impl LabelDictionary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn intern(&mut self, key: LabelKey) -> u32 {
        let next = self.ids.len() as u32;
        *self.ids.entry(key).or_insert(next)
    }
}

/// Sparse label-count vector, sorted by label id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct WlFeatureVector {
    counts: Vec<(u32, u64)>,
}

impl WlFeatureVector {
    pub fn from_counts(mut counts: Vec<(u32, u64)>) -> Self {
        counts.sort_unstable();
        let mut merged: Vec<(u32, u64)> = Vec::with_capacity(counts.len());
        for (id, c) in counts {
            match merged.last_mut() {
                Some((last, total)) if *last == id => *total += c,
                _ => merged.push((id, c)),
            }
        }
        merged.retain(|&(_, c)| c > 0);
        WlFeatureVector { counts: merged }
    }

    pub fn counts(&self) -> &[(u32, u64)] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&(_, c)| c).sum()
    }

    pub fn get(&self, id: u32) -> u64 {
        self.counts
            .binary_search_by_key(&id, |&(i, _)| i)
            .map_or(0, |k| self.counts[k].1)
    }

    /// Exact inner product.
    pub fn dot(&self, other: &WlFeatureVector) -> u64 {
        let (mut a, mut b) = (
            self.counts.iter().peekable(),
            other.counts.iter().peekable(),
        );
        let mut acc = 0u64;
        while let (Some(&&(ia, ca)), Some(&&(ib, cb))) = (a.peek(), b.peek()) {
            match ia.cmp(&ib) {
                std::cmp::Ordering::Less => {
                    a.next();
                }
                std::cmp::Ordering::Greater => {
                    b.next();
                }
                std::cmp::Ordering::Equal => {
                    acc += ca * cb;
                    a.next();
                    b.next();
                }
            }
        }
        acc
    }
}

/// Runs `h` refinement rounds and returns the per-round node labels.
fn refine<L, F>(dag: &Dag, h: usize, initial: impl Fn(usize) -> L, mut relabel: F) -> Vec<Vec<L>>
where
    L: Copy + Ord,
    F: FnMut(usize, L, Vec<L>, Vec<L>) -> L,
{
    let n = dag.n();
    let mut rounds = Vec::with_capacity(h + 1);
    rounds.push((0..n).map(initial).collect::<Vec<L>>());
    for round in 1..=h {
        let prev = &rounds[round - 1];
        let next: Vec<L> = (0..n)
            .map(|v| {
                let mut ins: Vec<L> = dag.in_neighbors(v).map(|u| prev[u]).collect();
                let mut outs: Vec<L> = dag.out_neighbors(v).map(|w| prev[w]).collect();
                ins.sort_unstable();
                outs.sort_unstable();
                relabel(round, prev[v], ins, outs)
            })
            .collect();
        rounds.push(next);
    }
    rounds
}

pub fn wl_features(dag: &Dag, cfg: &WlConfig, dict: &mut LabelDictionary) -> WlFeatureVector {
    let initial: Vec<u32> = (0..dag.n())
        .map(|v| {
            let key = if cfg.use_ops_as_initial_labels {
                LabelKey::Op(dag.ops()[v].tag())
            } else {
                LabelKey::Uniform
            };
            dict.intern(key)
        })
        .collect();
    let rounds = refine(
        dag,
        cfg.h,
        |v| initial[v],
        |round, own, ins, outs| {
            dict.intern(LabelKey::Refined {
                round: round as u32,
                own,
                ins,
                outs,
            })
        },
    );
    WlFeatureVector::from_counts(rounds.into_iter().flatten().map(|id| (id, 1)).collect())
}

pub fn wl_kernel_raw(fa: &WlFeatureVector, fb: &WlFeatureVector) -> f64 {
    fa.dot(fb) as f64
}

/// Cosine-normalized WL kernel in `[0, 1]`.
pub fn wl_similarity(ga: &Dag, gb: &Dag, cfg: &WlConfig) -> Result<f64> {
    let mut dict = LabelDictionary::new();
    let fa = wl_features(ga, cfg, &mut dict);
    let fb = wl_features(gb, cfg, &mut dict);
    normalized(&fa, &fb)
}

pub fn normalized(fa: &WlFeatureVector, fb: &WlFeatureVector) -> Result<f64> {
    let kaa = fa.dot(fa) as f64;
    let kbb = fb.dot(fb) as f64;
    if kaa == 0.0 || kbb == 0.0 {
        return Err(Error::DegenerateGraph);
    }
    Ok((fa.dot(fb) as f64 / (kaa * kbb).sqrt()).min(1.0))
}

fn digest64(parts: &[&[u8]]) -> u64 {
    let mut hasher = Sha256::new();
    for p in parts {
        hasher.update((p.len() as u64).to_le_bytes());
        hasher.update(p);
    }
    let out = hasher.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("8 bytes"))
}

fn words(xs: &[u64]) -> Vec<u8> {
    xs.iter().flat_map(|x| x.to_le_bytes()).collect()
}

/// 128-bit hex digest invariant under node relabeling.
///
/// Labels are hashed rather than compressed so that the digest does not
/// depend on any session dictionary. Initial labels are the op tags.
pub fn wl_canonical_hash(dag: &Dag, h: usize) -> String {
    let rounds = refine(
        dag,
        h,
        |v| digest64(&[b"op", &u64::from(dag.ops()[v].tag()).to_le_bytes()]),
        |round, own, ins, outs| {
            digest64(&[
                b"wl",
                &(round as u64).to_le_bytes(),
                &own.to_le_bytes(),
                &words(&ins),
                &words(&outs),
            ])
        },
    );
    let mut last = rounds.last().cloned().unwrap_or_default();
    last.sort_unstable();
    let mut ops: Vec<u64> = dag.ops().iter().map(|op| u64::from(op.tag())).collect();
    ops.sort_unstable();

    let mut hasher = Sha256::new();
    hasher.update((dag.n() as u64).to_le_bytes());
    hasher.update((dag.edge_count() as u64).to_le_bytes());
    hasher.update(words(&last));
    hasher.update(b"|");
    hasher.update(words(&ops));
    let out = hasher.finalize();
    out[..16].iter().map(|b| format!("{b:02x}")).collect()
}
