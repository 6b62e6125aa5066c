//! Random labeled code trees, the shipped dependency models, shifts, Markov
//! stops and boundary codes.
//!
//! Trees are stored level by level. Each label is a pure function of
//! (seed, level, node key) and of already generated labels, so growing a tree
//! further never changes what was drawn before.

use crate::rng::{child_key, hash_words, Stream};
use crate::simgeom::{
    apply_polygon, check_uosc, convex_signed_depth, Code, OpenSetSpec, Point, Similarity,
};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TreeError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("code {0} is not present in the tree")]
    Absent(String),
    #[error("tree too shallow for this stop: depth {required} needed")]
    InsufficientDepth { required: usize },
    #[error("unsupported: {0}")]
    Unsupported(String),
}

/// A realized IFS label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Rifs {
    pub maps: Vec<Similarity>,
}

impl Rifs {
    pub fn new(maps: Vec<Similarity>) -> Self {
        Rifs { maps }
    }

    pub fn n(&self) -> usize {
        self.maps.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Recursive,
    Homogeneous,
    VVariable,
    DependentGasket,
    Pinned,
    MarkovCarpet,
}

/// Serializable description of a tree model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Possible label values of the primary RIFS.
    pub labels: Vec<Rifs>,
    /// Marginal law of the primary RIFS over `labels`.
    pub probs: Vec<f64>,
    /// Number of label copies per level for `v_variable`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v: Option<u32>,
    /// Pinned word set for `pinned`; all words carry the same label below a node.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pinned: Option<Vec<Vec<u32>>>,
    /// Rows l = 0..4 (0 = no left neighbour) of the carpet transition table.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transition: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone)]
enum Rule {
    Recursive,
    Homogeneous,
    VVariable(u32),
    DependentGasket { m_max: u32 },
    /// (canonical word, other words)
    Pinned { canon: Vec<u32>, others: Vec<Vec<u32>> },
    MarkovCarpet {
        rows: Vec<Vec<f64>>,
        /// Grid offset of each map of each label.
        offsets: Vec<Vec<(u32, u32)>>,
    },
}

/// A validated model ready for sampling.
#[derive(Debug, Clone)]
pub struct TreeModel {
    pub spec: ModelSpec,
    cum: Vec<f64>,
    rule: Rule,
    r_min: f64,
    r_max: f64,
}

fn cumulative(p: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    p.iter()
        .map(|x| {
            acc += x;
            acc
        })
        .collect()
}

impl TreeModel {
    pub fn new(spec: ModelSpec) -> Result<Self, TreeError> {
        let cfg = |m: &str| TreeError::Config(m.to_string());
        if spec.labels.is_empty() {
            return Err(cfg("model needs at least one label"));
        }
        if spec.labels.len() > u16::MAX as usize {
            return Err(cfg("too many labels"));
        }
        if spec.probs.len() != spec.labels.len() {
            return Err(cfg("probs and labels differ in length"));
        }
        if spec.probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(cfg("probabilities must lie in [0,1]"));
        }
        let total: f64 = spec.probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(cfg("probabilities must sum to 1"));
        }
        let mut r_min = f64::INFINITY;
        let mut r_max: f64 = 0.0;
        for l in &spec.labels {
            if l.maps.is_empty() {
                return Err(cfg("a label has no maps"));
            }
            if l.maps.len() > 255 {
                return Err(cfg("a label has more than 255 maps"));
            }
            for m in &l.maps {
                if !(m.ratio > 0.0 && m.ratio < 1.0) {
                    return Err(cfg("contraction ratio outside (0,1)"));
                }
                r_min = r_min.min(m.ratio);
                r_max = r_max.max(m.ratio);
            }
        }
        let rule = match spec.kind {
            ModelKind::Recursive => Rule::Recursive,
            ModelKind::Homogeneous => Rule::Homogeneous,
            ModelKind::VVariable => {
                let v = spec.v.ok_or_else(|| cfg("v_variable needs v"))?;
                if v == 0 {
                    return Err(cfg("v must be positive"));
                }
                Rule::VVariable(v)
            }
            ModelKind::DependentGasket => {
                if spec.labels.len() != 2 || (spec.probs[0] - 0.5).abs() > 1e-12 {
                    return Err(cfg(
                        "dependent_gasket needs exactly two labels with probability 1/2 each",
                    ));
                }
                let m_max = spec.labels.iter().map(|l| l.n()).min().unwrap() as u32;
                Rule::DependentGasket { m_max }
            }
            ModelKind::Pinned => {
                let n = spec.labels[0].n();
                if spec.labels.iter().any(|l| l.n() != n) {
                    return Err(cfg("pinned model needs a constant number of maps"));
                }
                let mut words = spec.pinned.clone().ok_or_else(|| cfg("pinned model needs words"))?;
                if words.is_empty() || words.iter().any(|w| w.is_empty()) {
                    return Err(cfg("pinned words must be non-empty"));
                }
                for w in &words {
                    if w.iter().any(|&i| i == 0 || i as usize > n) {
                        return Err(cfg("pinned word uses a letter outside 1..N"));
                    }
                }
                for a in &words {
                    for b in &words {
                        if a != b && b.starts_with(a) {
                            return Err(cfg("pinned words must not be prefixes of each other"));
                        }
                    }
                }
                words.sort_by(|a, b| a.len().cmp(&b.len()).then(a.cmp(b)));
                let canon = words.remove(0);
                if canon.len() != 1 {
                    return Err(cfg("the shortest pinned word must be a single letter"));
                }
                Rule::Pinned {
                    canon,
                    others: words,
                }
            }
            ModelKind::MarkovCarpet => {
                let rows = spec.transition.clone().ok_or_else(|| cfg("markov_carpet needs a transition table"))?;
                let k = spec.labels.len();
                if rows.len() != k + 1 || rows.iter().any(|r| r.len() != k) {
                    return Err(cfg("transition table must have shape (labels+1) x labels"));
                }
                for r in &rows {
                    if (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 || r.iter().any(|&x| x < 0.0) {
                        return Err(cfg("transition rows must be probability vectors"));
                    }
                }
                for j in 0..k {
                    if (rows[0][j] - spec.probs[j]).abs() > 1e-9 {
                        return Err(cfg("row l=0 must equal the marginal law"));
                    }
                    let stat: f64 = (0..k).map(|l| spec.probs[l] * rows[l + 1][j]).sum();
                    if (stat - spec.probs[j]).abs() > 1e-9 {
                        return Err(cfg("marginal law is not stationary for the transition table"));
                    }
                }
                let mut offsets = Vec::new();
                for l in &spec.labels {
                    let mut o = Vec::new();
                    for m in &l.maps {
                        let ok = (m.ratio - 0.5).abs() < 1e-12 && m.rotation.abs() < 1e-12 && !m.reflect;
                        let dx = (m.translation[0] * 2.0).round();
                        let dy = (m.translation[1] * 2.0).round();
                        if !ok
                            || !(0.0..=1.0).contains(&dx)
                            || !(0.0..=1.0).contains(&dy)
                            || (dx / 2.0 - m.translation[0]).abs() > 1e-12
                            || (dy / 2.0 - m.translation[1]).abs() > 1e-12
                        {
                            return Err(cfg(
                                "markov_carpet maps must be the quadrant maps of the unit square",
                            ));
                        }
                        o.push((dx as u32, dy as u32));
                    }
                    offsets.push(o);
                }
                Rule::MarkovCarpet { rows, offsets }
            }
        };
        Ok(TreeModel {
            cum: cumulative(&spec.probs),
            spec,
            rule,
            r_min,
            r_max,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.spec.kind
    }

    pub fn labels(&self) -> &[Rifs] {
        &self.spec.labels
    }

    pub fn r_min(&self) -> f64 {
        self.r_min
    }

    pub fn r_max(&self) -> f64 {
        self.r_max
    }

    /// True when every realization is the same tree.
    pub fn is_deterministic(&self) -> bool {
        let support = self.spec.probs.iter().filter(|&&p| p > 0.0).count();
        support == 1 && !matches!(self.rule, Rule::DependentGasket { .. } | Rule::MarkovCarpet { .. })
    }

    /// Checks the open set condition for every possible label.
    pub fn check_open_set(&self, o: &OpenSetSpec, tol: f64) -> Result<bool, TreeError> {
        for l in &self.spec.labels {
            let r = check_uosc(&l.maps, o, tol).map_err(|e| TreeError::Config(e.to_string()))?;
            if !(r.contained && r.pairwise_disjoint) {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

/// Growth limit of a sampled tree.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StopRule {
    /// All levels 0..=n.
    Depth(usize),
    /// Expand nodes while R·r_σ > r.
    Markov { r: f64, big_r: f64 },
}

const NONE: u32 = u32::MAX;

#[derive(Debug, Clone, Default)]
pub struct Level {
    pub label: Vec<u16>,
    pub letter: Vec<u8>,
    pub parent: Vec<u32>,
    pub first_child: Vec<u32>,
    pub key: Vec<u64>,
    pub ratio: Vec<f64>,
}

impl Level {
    pub fn len(&self) -> usize {
        self.label.len()
    }

    pub fn is_empty(&self) -> bool {
        self.label.is_empty()
    }
}

/// Node address: (level, index within level).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeRef {
    pub level: u32,
    pub index: u32,
}

impl NodeRef {
    pub const ROOT: NodeRef = NodeRef { level: 0, index: 0 };
}

/// Source of the random draws of a tree: the keyed stream, or a shared
/// enumerator walking through every possible outcome.
#[derive(Debug, Clone)]
struct Drawer {
    seed: u64,
    enumerator: Option<Arc<Mutex<Enumerator>>>,
}

impl Drawer {
    fn pick(&self, level: u64, key: u64, stream: u64, cum: &[f64]) -> usize {
        match &self.enumerator {
            None => Stream::new(self.seed, level, key, stream).pick(cum),
            Some(e) => e.lock().unwrap().draw((level, key, stream), cum),
        }
    }

    fn below(&self, level: u64, key: u64, stream: u64, n: usize) -> usize {
        match &self.enumerator {
            None => Stream::new(self.seed, level, key, stream).below(n as u64) as usize,
            Some(_) => {
                let cum: Vec<f64> = (1..=n).map(|i| i as f64 / n as f64).collect();
                self.pick(level, key, stream, &cum)
            }
        }
    }

    fn level_label(&self, level: u64, cum: &[f64]) -> u16 {
        self.pick(level, 0, 1, cum) as u16
    }

    fn v_label(&self, level: u64, key: u64, v: u32, cum: &[f64]) -> u16 {
        let t = self.below(level, key, 2, v as usize) as u64;
        self.pick(level, t, 3, cum) as u16
    }
}

/// Odometer over all outcomes of the draws made while building one tree.
/// Draws sharing a key reuse the first outcome, as with the keyed stream.
#[derive(Debug, Default)]
struct Enumerator {
    trail: Vec<(usize, Vec<f64>)>,
    pos: usize,
    memo: HashMap<(u64, u64, u64), usize>,
}

impl Enumerator {
    fn draw(&mut self, key: (u64, u64, u64), cum: &[f64]) -> usize {
        if let Some(&v) = self.memo.get(&key) {
            return v;
        }
        let probs: Vec<f64> = cum
            .iter()
            .scan(0.0, |prev, &c| {
                let p = c - *prev;
                *prev = c;
                Some(p)
            })
            .collect();
        let idx = if self.pos < self.trail.len() {
            self.trail[self.pos].0
        } else {
            let first = probs.iter().position(|&p| p > 0.0).unwrap_or(0);
            self.trail.push((first, probs));
            first
        };
        self.pos += 1;
        self.memo.insert(key, idx);
        idx
    }

    fn weight(&self) -> f64 {
        self.trail[..self.pos].iter().map(|(i, p)| p[*i]).product()
    }

    /// Moves to the next outcome sequence; false when exhausted.
    fn advance(&mut self) -> bool {
        self.trail.truncate(self.pos);
        self.pos = 0;
        self.memo.clear();
        while let Some((idx, probs)) = self.trail.last_mut() {
            if let Some(n) = (*idx + 1..probs.len()).find(|&j| probs[j] > 0.0) {
                *idx = n;
                return true;
            }
            self.trail.pop();
        }
        false
    }
}

/// Calls `visit(tree, probability)` for every possible realization of the
/// levels 0..=depth. Returns false (after visiting some trees) if more than
/// `cap` realizations exist.
pub fn enumerate_trees<V>(model: &Arc<TreeModel>, depth: usize, cap: usize, mut visit: V) -> bool
where
    V: FnMut(&LabeledTree, f64),
{
    let e = Arc::new(Mutex::new(Enumerator::default()));
    let mut count = 0usize;
    loop {
        let mut t = LabeledTree::root_with(model.clone(), 0, Some(e.clone()));
        t.grow_to_depth(depth);
        let w = e.lock().unwrap().weight();
        visit(&t, w);
        count += 1;
        if !e.lock().unwrap().advance() {
            return true;
        }
        if count >= cap {
            return false;
        }
    }
}

/// Finite realized part of a labeled code tree.
#[derive(Debug, Clone)]
pub struct LabeledTree {
    enumerator: Option<Arc<Mutex<Enumerator>>>,
    model: Option<Arc<TreeModel>>,
    alphabet: Arc<Vec<Rifs>>,
    pub seed: u64,
    pub levels: Vec<Level>,
}

pub fn sample_tree(model: &Arc<TreeModel>, stop: StopRule, seed: u64) -> LabeledTree {
    let mut t = LabeledTree::root_only(model.clone(), seed);
    match stop {
        StopRule::Depth(n) => t.grow_to_depth(n),
        StopRule::Markov { r, big_r } => t.grow_markov(r, big_r),
    }
    t
}

impl LabeledTree {
    fn root_only(model: Arc<TreeModel>, seed: u64) -> Self {
        Self::root_with(model, seed, None)
    }

    fn root_with(model: Arc<TreeModel>, seed: u64, enumerator: Option<Arc<Mutex<Enumerator>>>) -> Self {
        let root_key = match model.rule {
            Rule::MarkovCarpet { .. } => pack(0, 0),
            _ => hash_words(&[0x726f_6f74]),
        };
        let alphabet = Arc::new(model.spec.labels.clone());
        let mut t = LabeledTree {
            enumerator,
            model: Some(model),
            alphabet,
            seed,
            levels: vec![Level::default()],
        };
        let label = t.draw_root(root_key);
        let l0 = &mut t.levels[0];
        l0.label.push(label);
        l0.letter.push(0);
        l0.parent.push(NONE);
        l0.first_child.push(NONE);
        l0.key.push(root_key);
        l0.ratio.push(1.0);
        t
    }

    pub fn alphabet(&self) -> &[Rifs] {
        &self.alphabet
    }

    /// Deepest level holding at least one node.
    pub fn depth(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn node_count(&self) -> usize {
        self.levels.iter().map(|l| l.len()).sum()
    }

    pub fn label_index(&self, n: NodeRef) -> u16 {
        self.levels[n.level as usize].label[n.index as usize]
    }

    pub fn label_at(&self, n: NodeRef) -> &Rifs {
        &self.alphabet[self.label_index(n) as usize]
    }

    pub fn ratio_at(&self, n: NodeRef) -> f64 {
        self.levels[n.level as usize].ratio[n.index as usize]
    }

    pub fn is_expanded(&self, n: NodeRef) -> bool {
        self.levels[n.level as usize].first_child[n.index as usize] != NONE
    }

    /// Child with 1-based letter `i`, if generated.
    pub fn child(&self, n: NodeRef, i: u32) -> Option<NodeRef> {
        let lv = &self.levels[n.level as usize];
        let fc = lv.first_child[n.index as usize];
        let cnt = self.alphabet[lv.label[n.index as usize] as usize].n() as u32;
        if fc == NONE || i == 0 || i > cnt {
            return None;
        }
        Some(NodeRef {
            level: n.level + 1,
            index: fc + i - 1,
        })
    }

    pub fn children(&self, n: NodeRef) -> impl Iterator<Item = NodeRef> + '_ {
        let cnt = self.label_at(n).n() as u32;
        (1..=cnt).filter_map(move |i| self.child(n, i))
    }

    pub fn find(&self, code: &Code) -> Option<NodeRef> {
        let mut n = NodeRef::ROOT;
        for &i in &code.0 {
            n = self.child(n, i)?;
        }
        Some(n)
    }

    pub fn get(&self, code: &Code) -> Option<&Rifs> {
        self.find(code).map(|n| self.label_at(n))
    }

    pub fn code_of(&self, n: NodeRef) -> Code {
        let mut letters = Vec::with_capacity(n.level as usize);
        let mut cur = n;
        while cur.level > 0 {
            let lv = &self.levels[cur.level as usize];
            letters.push(lv.letter[cur.index as usize] as u32);
            cur = NodeRef {
                level: cur.level - 1,
                index: lv.parent[cur.index as usize],
            };
        }
        letters.reverse();
        Code(letters)
    }

    /// The map f_σ = f_{σ1} ∘ f_{σ1σ2} ∘ … of a node.
    pub fn map_of(&self, n: NodeRef) -> Similarity {
        let mut chain = Vec::with_capacity(n.level as usize);
        let mut cur = n;
        while cur.level > 0 {
            let lv = &self.levels[cur.level as usize];
            let p = NodeRef {
                level: cur.level - 1,
                index: lv.parent[cur.index as usize],
            };
            let letter = lv.letter[cur.index as usize] as usize;
            chain.push(self.label_at(p).maps[letter - 1]);
            cur = p;
        }
        chain.reverse();
        crate::simgeom::compose(&chain)
    }

    /// All stored codes with their labels.
    pub fn nodes(&self) -> BTreeMap<Code, &Rifs> {
        let mut m = BTreeMap::new();
        for (l, lv) in self.levels.iter().enumerate() {
            for i in 0..lv.len() {
                let n = NodeRef {
                    level: l as u32,
                    index: i as u32,
                };
                m.insert(self.code_of(n), self.label_at(n));
            }
        }
        m
    }

    /// Replaces the label of a node by another label with the same number of
    /// maps. Used to build deliberately broken models in tests.
    pub fn relabel(&mut self, n: NodeRef, label: u16) -> Result<(), TreeError> {
        let old = self.label_at(n).n();
        if self.alphabet[label as usize].n() != old && self.is_expanded(n) {
            return Err(TreeError::Unsupported(
                "relabelling must keep the number of maps of an expanded node".into(),
            ));
        }
        self.levels[n.level as usize].label[n.index as usize] = label;
        Ok(())
    }

    pub fn grow_to_depth(&mut self, n: usize) {
        while self.levels.len() <= n {
            let l = self.levels.len() - 1;
            let todo: Vec<u32> = (0..self.levels[l].len() as u32)
                .filter(|&i| self.levels[l].first_child[i as usize] == NONE)
                .collect();
            if !self.expand(l, &todo) {
                break;
            }
        }
        // Nodes left unexpanded above depth n by an earlier Markov growth.
        for l in 0..n.min(self.levels.len().saturating_sub(1)) {
            let todo: Vec<u32> = (0..self.levels[l].len() as u32)
                .filter(|&i| self.levels[l].first_child[i as usize] == NONE)
                .collect();
            if !todo.is_empty() {
                self.expand(l, &todo);
            }
        }
    }

    /// Expands every node with R·r_σ > r. Growth stops on branches as soon as
    /// R·r_σ ≤ r.
    pub fn grow_markov(&mut self, r: f64, big_r: f64) {
        let mut l = 0;
        while l < self.levels.len() {
            let lv = &self.levels[l];
            let todo: Vec<u32> = (0..lv.len() as u32)
                .filter(|&i| lv.first_child[i as usize] == NONE && big_r * lv.ratio[i as usize] > r)
                .collect();
            if !todo.is_empty() && self.model.is_some() {
                self.expand(l, &todo);
            }
            l += 1;
        }
    }

    fn model(&self) -> &TreeModel {
        self.model.as_ref().expect("tree without model cannot grow")
    }

    fn drawer(&self) -> Drawer {
        Drawer {
            seed: self.seed,
            enumerator: self.enumerator.clone(),
        }
    }

    fn draw_root(&self, key: u64) -> u16 {
        let m = self.model();
        let d = self.drawer();
        match &m.rule {
            Rule::Homogeneous => d.level_label(0, &m.cum),
            Rule::VVariable(v) => d.v_label(0, key, *v, &m.cum),
            Rule::MarkovCarpet { rows, .. } => d.pick(0, key, 0, &cumulative(&rows[0])) as u16,
            _ => d.pick(0, key, 0, &m.cum) as u16,
        }
    }

    /// Creates the children of the listed nodes of level `l`. Returns false
    /// if nothing was created.
    fn expand(&mut self, l: usize, parents: &[u32]) -> bool {
        if parents.is_empty() || self.model.is_none() {
            return false;
        }
        let model = self.model.clone().unwrap();
        if self.levels.len() == l + 1 {
            self.levels.push(Level::default());
        }
        let carpet = matches!(model.rule, Rule::MarkovCarpet { .. });
        let start = self.levels[l + 1].len();
        {
            let (lo, hi) = self.levels.split_at_mut(l + 1);
            let pl = &mut lo[l];
            let cl = &mut hi[0];
            for &p in parents {
                let pi = p as usize;
                let lab = &self.alphabet[pl.label[pi] as usize];
                pl.first_child[pi] = cl.len() as u32;
                for (j, f) in lab.maps.iter().enumerate() {
                    let letter = j as u32 + 1;
                    let key = if carpet {
                        let (px, py) = unpack(pl.key[pi]);
                        let off = match &model.rule {
                            Rule::MarkovCarpet { offsets, .. } => offsets[pl.label[pi] as usize][j],
                            _ => unreachable!(),
                        };
                        pack(2 * px + off.0, 2 * py + off.1)
                    } else {
                        child_key(pl.key[pi], letter)
                    };
                    cl.label.push(0);
                    cl.letter.push(letter as u8);
                    cl.parent.push(p);
                    cl.first_child.push(NONE);
                    cl.key.push(key);
                    cl.ratio.push(pl.ratio[pi] * f.ratio);
                }
            }
        }
        let end = self.levels[l + 1].len();
        self.assign_labels(&model, l + 1, start, end);
        end > start
    }

    fn assign_labels(&mut self, model: &TreeModel, level: usize, start: usize, end: usize) {
        let d = self.drawer();
        let lvl = level as u64;
        match &model.rule {
            Rule::Recursive => {
                let lv = &mut self.levels[level];
                for i in start..end {
                    lv.label[i] = d.pick(lvl, lv.key[i], 0, &model.cum) as u16;
                }
            }
            Rule::Homogeneous => {
                let lab = d.level_label(lvl, &model.cum);
                let lv = &mut self.levels[level];
                lv.label[start..end].iter_mut().for_each(|x| *x = lab);
            }
            Rule::VVariable(v) => {
                for i in start..end {
                    let k = self.levels[level].key[i];
                    self.levels[level].label[i] = d.v_label(lvl, k, *v, &model.cum);
                }
            }
            Rule::DependentGasket { m_max } => {
                let m = 1 + d.below(lvl, 0, 4, *m_max as usize) as u8;
                let (lo, hi) = self.levels.split_at_mut(level);
                let pl = &lo[level - 1];
                let cl = &mut hi[0];
                for i in start..end {
                    let p = cl.parent[i] as usize;
                    let g = d.pick(lvl - 1, pl.key[p], 5, &model.cum) as u16;
                    cl.label[i] = if cl.letter[i] == m { g } else { 1 - g };
                }
            }
            Rule::Pinned { canon, others } => {
                for i in start..end {
                    let n = NodeRef {
                        level: level as u32,
                        index: i as u32,
                    };
                    let lab = match self.pinned_source(n, canon, others) {
                        Some(src) => self.label_index(src),
                        None => {
                            let k = self.levels[level].key[i];
                            d.pick(lvl, k, 0, &model.cum) as u16
                        }
                    };
                    self.levels[level].label[i] = lab;
                }
            }
            Rule::MarkovCarpet { rows, .. } => {
                let cums: Vec<Vec<f64>> = rows.iter().map(|r| cumulative(r)).collect();
                let lv = &mut self.levels[level];
                // Rows top to bottom, left to right.
                let mut order: Vec<usize> = (0..lv.len()).collect();
                order.sort_by_key(|&i| {
                    let (x, y) = unpack(lv.key[i]);
                    (std::cmp::Reverse(y), x)
                });
                let mut prev: Option<(u32, u32, u16)> = None;
                for &i in &order {
                    let (x, y) = unpack(lv.key[i]);
                    let l = match prev {
                        Some((px, py, lab)) if py == y && px + 1 == x => lab as usize + 1,
                        _ => 0,
                    };
                    let lab = if i >= start && i < end {
                        let v = d.pick(lvl, lv.key[i], 0, &cums[l]) as u16;
                        lv.label[i] = v;
                        v
                    } else {
                        lv.label[i]
                    };
                    prev = Some((x, y, lab));
                }
            }
        }
    }

    /// For a node στ with τ a non-canonical pinned word, the node σw₀ whose
    /// label it copies.
    fn pinned_source(&self, n: NodeRef, canon: &[u32], others: &[Vec<u32>]) -> Option<NodeRef> {
        for w in others {
            if (n.level as usize) < w.len() {
                continue;
            }
            let mut cur = n;
            let mut ok = true;
            for &c in w.iter().rev() {
                let lv = &self.levels[cur.level as usize];
                if lv.letter[cur.index as usize] as u32 != c {
                    ok = false;
                    break;
                }
                cur = NodeRef {
                    level: cur.level - 1,
                    index: lv.parent[cur.index as usize],
                };
            }
            if !ok {
                continue;
            }
            let mut tgt = cur;
            for &c in canon {
                tgt = self.child(tgt, c)?;
            }
            return Some(tgt);
        }
        None
    }

    /// Grid position of a carpet node at its level (column, row from the
    /// bottom).
    pub fn carpet_position(&self, n: NodeRef) -> Option<(u32, u32)> {
        match &self.model.as_ref()?.rule {
            Rule::MarkovCarpet { .. } => Some(unpack(self.levels[n.level as usize].key[n.index as usize])),
            _ => None,
        }
    }

    /// Depth-first walk over the cells of the Markov stop with threshold
    /// ratio `t` (cells with r_σ ≤ t) below `start`. `prune` is called with
    /// the map of each visited node and skips its subtree when it returns
    /// true. Fails if a node above the threshold has not been expanded.
    pub fn walk_stop<P, E>(&self, start: NodeRef, t: f64, mut prune: P, mut emit: E) -> Result<(), TreeError>
    where
        P: FnMut(&Similarity) -> bool,
        E: FnMut(NodeRef, &Similarity),
    {
        let base = self.map_of(start);
        let mut stack = vec![(start, base)];
        while let Some((n, f)) = stack.pop() {
            if prune(&f) {
                continue;
            }
            if self.ratio_at(n) <= t {
                emit(n, &f);
                continue;
            }
            if !self.is_expanded(n) {
                return Err(TreeError::InsufficientDepth {
                    required: self.required_depth(t),
                });
            }
            let lab = self.label_at(n);
            let fc = self.levels[n.level as usize].first_child[n.index as usize];
            for (j, g) in lab.maps.iter().enumerate().rev() {
                let c = NodeRef {
                    level: n.level + 1,
                    index: fc + j as u32,
                };
                stack.push((c, f.then_inner(g)));
            }
        }
        Ok(())
    }

    fn required_depth(&self, t: f64) -> usize {
        let r_max = match &self.model {
            Some(m) => m.r_max,
            None => self
                .alphabet
                .iter()
                .flat_map(|l| l.maps.iter().map(|m| m.ratio))
                .fold(0.0, f64::max),
        };
        (t.ln() / r_max.ln()).ceil().max(0.0) as usize
    }
}

fn pack(x: u32, y: u32) -> u64 {
    (x as u64) | ((y as u64) << 32)
}

fn unpack(k: u64) -> (u32, u32) {
    ((k & 0xffff_ffff) as u32, (k >> 32) as u32)
}

/// The subtree at σ re-rooted at ∅. The result is frozen (cannot grow).
pub fn shift(tree: &LabeledTree, sigma: &Code) -> Result<LabeledTree, TreeError> {
    let start = tree.find(sigma).ok_or_else(|| TreeError::Absent(sigma.to_string()))?;
    let mut out = LabeledTree {
        enumerator: None,
        model: None,
        alphabet: tree.alphabet.clone(),
        seed: tree.seed,
        levels: vec![Level::default()],
    };
    let r0 = tree.ratio_at(start);
    let mut frontier = vec![(start, NONE, 0u8)];
    let mut l = 0usize;
    while !frontier.is_empty() {
        if out.levels.len() == l {
            out.levels.push(Level::default());
        }
        let mut next = Vec::new();
        for (n, parent, letter) in frontier {
            let idx = out.levels[l].len() as u32;
            let src = &tree.levels[n.level as usize];
            let i = n.index as usize;
            if parent != NONE {
                let pl = &mut out.levels[l - 1];
                if pl.first_child[parent as usize] == NONE {
                    pl.first_child[parent as usize] = idx;
                }
            }
            let lv = &mut out.levels[l];
            lv.label.push(src.label[i]);
            lv.letter.push(letter);
            lv.parent.push(parent);
            lv.first_child.push(NONE);
            lv.key.push(src.key[i]);
            lv.ratio.push(src.ratio[i] / r0);
            for c in tree.children(n) {
                let letter = tree.levels[c.level as usize].letter[c.index as usize];
                next.push((c, idx, letter));
            }
        }
        frontier = next;
        l += 1;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StopEntry {
    pub node: NodeRef,
    pub ratio: f64,
}

/// The antichain Σ(r) = {σ : R·r_σ ≤ r < R·r_{parent(σ)}}.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovStop {
    pub entries: Vec<StopEntry>,
    pub r: f64,
    pub big_r: f64,
}

impl MarkovStop {
    pub fn codes(&self, tree: &LabeledTree) -> Vec<Code> {
        self.entries.iter().map(|e| tree.code_of(e.node)).collect()
    }

    pub fn ratios(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.ratio).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn markov_stop(tree: &LabeledTree, r: f64, big_r: f64) -> Result<MarkovStop, TreeError> {
    let mut entries = Vec::new();
    if r >= big_r {
        entries.push(StopEntry {
            node: NodeRef::ROOT,
            ratio: 1.0,
        });
    } else {
        let mut stack = vec![NodeRef::ROOT];
        while let Some(n) = stack.pop() {
            let rr = tree.ratio_at(n);
            if big_r * rr <= r {
                entries.push(StopEntry { node: n, ratio: rr });
                continue;
            }
            if !tree.is_expanded(n) {
                return Err(TreeError::InsufficientDepth {
                    required: tree.required_depth(r / big_r),
                });
            }
            let kids: Vec<NodeRef> = tree.children(n).collect();
            stack.extend(kids.into_iter().rev());
        }
    }
    Ok(MarkovStop { entries, r, big_r })
}

/// Codes of the stop whose cells O_σ come within 2r of the complement of
/// 𝔣(O) = ∪ f_i(O). A conservative superset of the codes whose parallel
/// sets meet the r-neighbourhood of that complement.
pub fn boundary_codes(tree: &LabeledTree, stop: &MarkovStop, o: &OpenSetSpec) -> Vec<Code> {
    let root_maps = &tree.label_at(NodeRef::ROOT).maps;
    let images: Vec<Vec<Point>> = root_maps.iter().map(|f| apply_polygon(f, &o.polygon)).collect();
    let mut out = Vec::new();
    for e in &stop.entries {
        let code = tree.code_of(e.node);
        let d = if code.is_empty() {
            0.0
        } else {
            let cell = apply_polygon(&tree.map_of(e.node), &o.polygon);
            let host = &images[code.0[0] as usize - 1];
            let host_ccw = if crate::simgeom::signed_area(host) < 0.0 {
                host.iter().rev().copied().collect::<Vec<_>>()
            } else {
                host.clone()
            };
            cell.iter()
                .map(|&v| convex_signed_depth(&host_ccw, v))
                .fold(f64::INFINITY, f64::min)
                .max(0.0)
        };
        if d <= 2.0 * stop.r {
            out.push(code);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct A2Report {
    pub p_marginal: f64,
    pub p_independence: f64,
    pub samples_used: usize,
}

/// Breadth-first label sequence of the subtree at `n`, truncated `depth`
/// levels below it.
fn truncated_state(tree: &LabeledTree, n: NodeRef, depth: usize) -> Vec<u16> {
    let mut out = Vec::new();
    let mut frontier = vec![n];
    for d in 0..=depth {
        let mut next = Vec::new();
        for &m in &frontier {
            out.push(tree.label_index(m));
            if d < depth {
                next.extend(tree.children(m));
            }
        }
        out.push(u16::MAX);
        frontier = next;
    }
    out
}

fn sim_key(s: &Similarity) -> [i64; 5] {
    let q = |x: f64| (x * 1e9).round() as i64;
    [q(s.ratio), q(s.rotation), s.reflect as i64, q(s.translation[0]), q(s.translation[1])]
}

/// Chi-square p-value of a contingency table after pooling sparse columns.
fn chi_square_table(rows: &[HashMap<u64, f64>]) -> f64 {
    let mut col_tot: HashMap<u64, f64> = HashMap::new();
    for r in rows {
        for (&k, &v) in r {
            *col_tot.entry(k).or_default() += v;
        }
    }
    let row_tot: Vec<f64> = rows.iter().map(|r| r.values().sum()).collect();
    let total: f64 = row_tot.iter().sum();
    let live_rows: Vec<usize> = (0..rows.len()).filter(|&i| row_tot[i] > 0.0).collect();
    if live_rows.len() < 2 || total == 0.0 {
        return 1.0;
    }
    let min_row = live_rows.iter().map(|&i| row_tot[i]).fold(f64::INFINITY, f64::min);
    // Pool columns with expected count below 5 in the smallest row.
    let mut cols: Vec<u64> = col_tot.keys().copied().collect();
    cols.sort_unstable();
    let pooled = u64::MAX;
    let mut merged: Vec<HashMap<u64, f64>> = vec![HashMap::new(); rows.len()];
    for &c in &cols {
        let keep = col_tot[&c] * min_row / total >= 5.0;
        let dst = if keep { c } else { pooled };
        for &i in &live_rows {
            if let Some(v) = rows[i].get(&c) {
                *merged[i].entry(dst).or_default() += v;
            }
        }
    }
    let mut mcols: HashMap<u64, f64> = HashMap::new();
    for &i in &live_rows {
        for (&k, &v) in &merged[i] {
            *mcols.entry(k).or_default() += v;
        }
    }
    if let Some(&p) = mcols.get(&pooled) {
        if p * min_row / total < 5.0 && mcols.len() > 1 {
            // Fold a too-small pooled column into the smallest kept one.
            let (&small, _) = mcols
                .iter()
                .filter(|(&k, _)| k != pooled)
                .min_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(a.0.cmp(b.0)))
                .unwrap();
            for &i in &live_rows {
                if let Some(v) = merged[i].remove(&pooled) {
                    *merged[i].entry(small).or_default() += v;
                }
            }
            let v = mcols.remove(&pooled).unwrap();
            *mcols.get_mut(&small).unwrap() += v;
        }
    }
    if mcols.len() < 2 {
        return 1.0;
    }
    let mut stat = 0.0;
    for &i in &live_rows {
        for (&c, &ct) in &mcols {
            let e = row_tot[i] * ct / total;
            let o = merged[i].get(&c).copied().unwrap_or(0.0);
            stat += (o - e) * (o - e) / e;
        }
    }
    let df = ((live_rows.len() - 1) * (mcols.len() - 1)) as f64;
    ChiSquared::new(df).map(|d| d.sf(stat)).unwrap_or(1.0)
}

fn state_hash(s: &[u16]) -> u64 {
    let mut h = 0x51_7cc1_b727_220a;
    for &x in s {
        h = crate::rng::mix64(h ^ x as u64);
    }
    h
}

/// Prefix of a breadth-first state holding levels 0..=d.
fn cut(s: &[u16], d: usize) -> &[u16] {
    let mut seen = 0;
    for (i, &x) in s.iter().enumerate() {
        if x == u16::MAX {
            if seen == d {
                return &s[..=i];
            }
            seen += 1;
        }
    }
    s
}

/// Chi-square checks of back-path independence for the subtree at letter
/// `i`, using trees drawn by `sampler(seed)` grown to `depth + 1`.
pub fn test_a2_with<S>(sampler: S, i: u32, n_samples: usize, depth: usize, seed: u64) -> Result<A2Report, TreeError>
where
    S: Fn(u64) -> LabeledTree,
{
    if depth > 3 {
        return Err(TreeError::Unsupported("depth above 3 is not enumerable".into()));
    }
    // Marginal: independent trees for T and T^[i].
    let mut whole: Vec<Vec<u16>> = Vec::with_capacity(n_samples);
    let mut sub: Vec<(Vec<u16>, [i64; 5])> = Vec::with_capacity(n_samples);
    for s in 0..n_samples as u64 {
        let a = sampler(hash_words(&[seed, 2 * s]));
        whole.push(truncated_state(&a, NodeRef::ROOT, depth));
        let b = sampler(hash_words(&[seed, 2 * s + 1]));
        if let Some(c) = b.child(NodeRef::ROOT, i) {
            let f = b.label_at(NodeRef::ROOT).maps[i as usize - 1];
            sub.push((truncated_state(&b, c, depth), sim_key(&f)));
        }
    }
    // One test per truncation level, combined by Bonferroni.
    let levels = depth + 1;
    let mut p_marginal: f64 = 1.0;
    let mut p_independence: f64 = 1.0;
    for d in 0..=depth {
        let mut rows = vec![HashMap::new(), HashMap::new()];
        for s in &whole {
            *rows[0].entry(state_hash(&cut(s, d))).or_insert(0.0) += 1.0;
        }
        for (s, _) in &sub {
            *rows[1].entry(state_hash(&cut(s, d))).or_insert(0.0) += 1.0;
        }
        p_marginal = p_marginal.min(chi_square_table(&rows) * levels as f64);

        let mut by_map: BTreeMap<[i64; 5], HashMap<u64, f64>> = BTreeMap::new();
        for (s, f) in &sub {
            *by_map.entry(*f).or_default().entry(state_hash(&cut(s, d))).or_insert(0.0) += 1.0;
        }
        let rows: Vec<HashMap<u64, f64>> = by_map.into_values().collect();
        p_independence = p_independence.min(chi_square_table(&rows) * levels as f64);
    }
    let p_marginal = p_marginal.min(1.0);
    let p_independence = p_independence.min(1.0);
    Ok(A2Report {
        p_marginal,
        p_independence,
        samples_used: sub.len(),
    })
}

pub fn test_a2(model: &Arc<TreeModel>, i: u32, n_samples: usize, depth: usize, seed: u64) -> Result<A2Report, TreeError> {
    test_a2_with(|s| sample_tree(model, StopRule::Depth(depth + 1), s), i, n_samples, depth, seed)
}

/// Proportion with its binomial standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Proportion {
    pub value: f64,
    pub stderr: f64,
    pub n: usize,
}

impl Proportion {
    fn from_counts(hits: usize, n: usize) -> Self {
        if n == 0 {
            return Proportion {
                value: f64::NAN,
                stderr: f64::NAN,
                n,
            };
        }
        let p = hits as f64 / n as f64;
        Proportion {
            value: p,
            stderr: (p * (1.0 - p) / n as f64).sqrt(),
            n,
        }
    }

    /// |value − target| ≤ k·stderr, with a one-count floor on the error so
    /// an exact 0 or 1 estimate of a non-degenerate target is not accepted.
    pub fn within(&self, target: f64, k: f64) -> bool {
        let se = if self.stderr > 0.0 {
            self.stderr
        } else if target == self.value {
            0.0
        } else {
            (target * (1.0 - target) / self.n as f64).sqrt()
        };
        (self.value - target).abs() <= k * se
    }
}

/// Monte-Carlo estimates of w_k = P(F_1 = G_1, F_2 = G_2, F_3 = G_3 | F_∅ = G_k)
/// for the carpet model.
pub fn carpet_level_dependence(model: &Arc<TreeModel>, n_samples: usize, seed: u64) -> Result<Vec<Proportion>, TreeError> {
    if model.kind() != ModelKind::MarkovCarpet {
        return Err(TreeError::Unsupported("carpet statistics need a markov_carpet model".into()));
    }
    let k = model.labels().len();
    let mut hits = vec![0usize; k];
    let mut tot = vec![0usize; k];
    for s in 0..n_samples as u64 {
        let t = sample_tree(model, StopRule::Depth(1), hash_words(&[seed, s]));
        let root = t.label_index(NodeRef::ROOT) as usize;
        tot[root] += 1;
        let ok = (1..=3u32).all(|i| {
            t.child(NodeRef::ROOT, i)
                .map(|c| t.label_index(c) as u32 == i - 1)
                .unwrap_or(false)
        });
        if ok {
            hits[root] += 1;
        }
    }
    Ok((0..k).map(|j| Proportion::from_counts(hits[j], tot[j])).collect())
}

/// Empirical left-neighbour transition frequencies of the carpet model,
/// pooled over levels 1..=depth. Row l = 0 collects squares without a left
/// neighbour.
pub fn carpet_transition_frequencies(
    model: &Arc<TreeModel>,
    n_samples: usize,
    depth: usize,
    seed: u64,
) -> Result<Vec<Vec<Proportion>>, TreeError> {
    if model.kind() != ModelKind::MarkovCarpet {
        return Err(TreeError::Unsupported("carpet statistics need a markov_carpet model".into()));
    }
    let k = model.labels().len();
    let mut counts = vec![vec![0usize; k]; k + 1];
    for s in 0..n_samples as u64 {
        let t = sample_tree(model, StopRule::Depth(depth), hash_words(&[seed, s]));
        for l in 1..t.levels.len() {
            let lv = &t.levels[l];
            let mut pos: HashMap<(u32, u32), u16> = HashMap::with_capacity(lv.len());
            for i in 0..lv.len() {
                pos.insert(unpack(lv.key[i]), lv.label[i]);
            }
            for i in 0..lv.len() {
                let (x, y) = unpack(lv.key[i]);
                let left = if x == 0 { None } else { pos.get(&(x - 1, y)) };
                let row = left.map(|&v| v as usize + 1).unwrap_or(0);
                counts[row][lv.label[i] as usize] += 1;
            }
        }
    }
    Ok(counts
        .iter()
        .map(|row| {
            let n: usize = row.iter().sum();
            row.iter().map(|&c| Proportion::from_counts(c, n)).collect()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    pub(crate) fn g(t: Point) -> Similarity {
        Similarity::scaling(0.5, t)
    }

    fn gasket() -> Rifs {
        Rifs::new(vec![g([0.0, 0.0]), g([0.5, 0.0]), g([0.25, 3f64.sqrt() / 4.0])])
    }

    fn gasket_prime() -> Rifs {
        let mut m = gasket().maps;
        m.push(Similarity::new(0.5, PI / 3.0, false, [0.5, 0.0]));
        Rifs::new(m)
    }

    fn det_gasket() -> Arc<TreeModel> {
        Arc::new(
            TreeModel::new(ModelSpec {
                kind: ModelKind::Recursive,
                labels: vec![gasket()],
                probs: vec![1.0],
                v: None,
                pinned: None,
                transition: None,
            })
            .unwrap(),
        )
    }

    fn dep_gasket() -> Arc<TreeModel> {
        Arc::new(
            TreeModel::new(ModelSpec {
                kind: ModelKind::DependentGasket,
                labels: vec![gasket(), gasket_prime()],
                probs: vec![0.5, 0.5],
                v: None,
                pinned: None,
                transition: None,
            })
            .unwrap(),
        )
    }

    fn quadrant(j: usize) -> Similarity {
        // 1 top-left, 2 top-right, 3 bottom-left, 4 bottom-right
        let t = [[0.0, 0.5], [0.5, 0.5], [0.0, 0.0], [0.5, 0.0]][j - 1];
        g(t)
    }

    pub(crate) fn carpet_spec() -> ModelSpec {
        let labels = (1..=4)
            .map(|k| Rifs::new((1..=4).filter(|&j| j != k).map(quadrant).collect()))
            .collect();
        ModelSpec {
            kind: ModelKind::MarkovCarpet,
            labels,
            probs: vec![0.25; 4],
            v: None,
            pinned: None,
            transition: Some(vec![
                vec![0.25; 4],
                vec![0.25; 4],
                vec![0.5, 0.25, 0.0, 0.25],
                vec![0.25; 4],
                vec![0.0, 0.25, 0.5, 0.25],
            ]),
        }
    }

    fn carpet() -> Arc<TreeModel> {
        Arc::new(TreeModel::new(carpet_spec()).unwrap())
    }

    fn recursive_carpet_labels() -> Arc<TreeModel> {
        let mut s = carpet_spec();
        s.kind = ModelKind::Recursive;
        s.transition = None;
        Arc::new(TreeModel::new(s).unwrap())
    }

    fn pinned() -> Arc<TreeModel> {
        let a = Rifs::new(vec![g([0.0, 0.0]), g([0.5, 0.5])]);
        let b = Rifs::new(vec![g([0.0, 0.5]), Similarity::scaling(0.25, [0.75, 0.0])]);
        Arc::new(
            TreeModel::new(ModelSpec {
                kind: ModelKind::Pinned,
                labels: vec![a, b],
                probs: vec![0.5, 0.5],
                v: None,
                pinned: Some(vec![vec![2, 1], vec![1]]),
                transition: None,
            })
            .unwrap(),
        )
    }

    #[test]
    fn deterministic_depth_two() {
        let t = sample_tree(&det_gasket(), StopRule::Depth(2), 5);
        assert_eq!(t.levels.iter().map(|l| l.len()).collect::<Vec<_>>(), vec![1, 3, 9]);
        assert!(t.nodes().values().all(|r| r.n() == 3));
        assert_eq!(t.nodes().len(), 13);
    }

    #[test]
    fn same_seed_same_tree() {
        for m in [dep_gasket(), carpet(), pinned()] {
            let a = sample_tree(&m, StopRule::Depth(4), 77);
            let b = sample_tree(&m, StopRule::Depth(4), 77);
            assert_eq!(a.nodes(), b.nodes());
            let c = sample_tree(&m, StopRule::Depth(4), 78);
            assert_ne!(a.nodes(), c.nodes());
        }
    }

    #[test]
    fn markov_growth_agrees_with_full_growth() {
        let m = pinned();
        let full = sample_tree(&m, StopRule::Depth(8), 3);
        let part = sample_tree(&m, StopRule::Markov { r: 0.01, big_r: 1.5 }, 3);
        for (code, lab) in part.nodes() {
            if code.len() <= 8 {
                assert_eq!(full.get(&code), Some(lab));
            }
        }
        let mut grown = part.clone();
        grown.grow_to_depth(8);
        assert_eq!(grown.nodes().len(), full.nodes().len());
    }

    #[test]
    fn dependent_gasket_root_frequency() {
        let m = dep_gasket();
        let n = 10_000;
        let hits = (0..n)
            .filter(|&s| sample_tree(&m, StopRule::Depth(1), s).label_index(NodeRef::ROOT) == 0)
            .count();
        let p = Proportion::from_counts(hits, n as usize);
        assert!(p.within(0.5, 3.0), "{p:?}");
    }

    #[test]
    fn dependent_gasket_level_structure() {
        let m = dep_gasket();
        for seed in 0..50 {
            let t = sample_tree(&m, StopRule::Depth(4), seed);
            for l in 1..t.levels.len() {
                let lv = &t.levels[l];
                // exceptional position shared by the level
                let mut exc = None;
                for p in 0..t.levels[l - 1].len() {
                    let pn = NodeRef { level: l as u32 - 1, index: p as u32 };
                    let kids: Vec<u16> = t.children(pn).map(|c| t.label_index(c)).collect();
                    let odd: Vec<usize> = (0..kids.len()).filter(|&i| kids.iter().filter(|&&x| x == kids[i]).count() == 1).collect();
                    assert_eq!(odd.len(), 1, "exactly one exceptional daughter");
                    let pos = odd[0];
                    if let Some(e) = exc {
                        assert_eq!(e, pos);
                    }
                    exc = Some(pos);
                }
                assert!(!lv.is_empty());
            }
        }
    }

    #[test]
    fn carpet_has_three_children() {
        let m = carpet();
        for s in 0..20 {
            let t = sample_tree(&m, StopRule::Depth(1), s);
            let kids: Vec<Code> = t.nodes().keys().filter(|c| c.len() == 1).cloned().collect();
            assert_eq!(kids, vec![Code(vec![1]), Code(vec![2]), Code(vec![3])]);
        }
    }

    #[test]
    fn pinned_copies_label() {
        let m = pinned();
        for s in 0..20 {
            let t = sample_tree(&m, StopRule::Depth(5), s);
            for (code, lab) in t.nodes() {
                let c = &code.0;
                if c.len() >= 2 && c[c.len() - 2..] == [2, 1] {
                    let mut src = c[..c.len() - 2].to_vec();
                    src.push(1);
                    assert_eq!(t.get(&Code(src)).unwrap(), lab);
                }
            }
        }
    }

    #[test]
    fn shift_identity_and_concatenation() {
        let t = sample_tree(&dep_gasket(), StopRule::Depth(5), 11);
        let s0 = shift(&t, &Code::root()).unwrap();
        assert_eq!(s0.nodes(), t.nodes());
        let a = Code(vec![2]);
        let b = Code(vec![1, 3]);
        let two = shift(&shift(&t, &a).unwrap(), &b).unwrap();
        let one = shift(&t, &a.concat(&b)).unwrap();
        assert_eq!(two.nodes(), one.nodes());
        assert_eq!(one.depth(), t.depth() - 3);
        assert!(shift(&t, &Code(vec![9])).is_err());
    }

    #[test]
    fn shifted_root_law_matches_primary() {
        let m = recursive_carpet_labels();
        let n = 10_000u64;
        let mut c = [0f64; 4];
        for s in 0..n {
            let t = sample_tree(&m, StopRule::Depth(1), s);
            let sh = shift(&t, &Code(vec![1])).unwrap();
            c[sh.label_index(NodeRef::ROOT) as usize] += 1.0;
        }
        let e = n as f64 / 4.0;
        let stat: f64 = c.iter().map(|o| (o - e) * (o - e) / e).sum();
        let p = ChiSquared::new(3.0).unwrap().sf(stat);
        assert!(p > 0.01, "p = {p}");
    }

    #[test]
    fn stop_examples() {
        let m = det_gasket();
        let big_r = 1.5;
        let t = sample_tree(&m, StopRule::Depth(6), 0);
        let s = markov_stop(&t, 2.0, big_r).unwrap();
        assert_eq!(s.codes(&t), vec![Code::root()]);
        let s = markov_stop(&t, big_r / 2.0, big_r).unwrap();
        assert_eq!(s.len(), 3);
        assert!(s.ratios().iter().all(|&r| r == 0.5));
        for k in 0..=5 {
            let s = markov_stop(&t, big_r * 0.5f64.powi(k), big_r).unwrap();
            assert_eq!(s.len(), 3usize.pow(k as u32));
            assert!(s.codes(&t).iter().all(|c| c.len() == k as usize));
        }
        match markov_stop(&t, big_r * 0.5f64.powi(9), big_r) {
            Err(TreeError::InsufficientDepth { required }) => assert_eq!(required, 9),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn stop_is_covering_antichain() {
        let m = pinned();
        for seed in 0..20 {
            let t = sample_tree(&m, StopRule::Depth(10), seed);
            let big_r = 1.49;
            for r in [0.7, 0.2, 0.05, 0.01] {
                let s = markov_stop(&t, r, big_r).unwrap();
                let codes = s.codes(&t);
                for e in &s.entries {
                    let c = t.code_of(e.node);
                    assert!(big_r * e.ratio <= r);
                    if !c.is_empty() {
                        let p = t.find(&c.prefix(c.len() - 1)).unwrap();
                        assert!(r < big_r * t.ratio_at(p));
                    }
                }
                for a in &codes {
                    for b in &codes {
                        assert!(a == b || !a.is_prefix_of(b));
                    }
                }
                // every deepest node has exactly one ancestor in the stop
                let deep = t.levels.len() - 1;
                for i in 0..t.levels[deep].len() {
                    let c = t.code_of(NodeRef { level: deep as u32, index: i as u32 });
                    assert_eq!(codes.iter().filter(|s| s.is_prefix_of(&c)).count(), 1);
                }
            }
        }
    }

    #[test]
    fn boundary_code_examples() {
        let m = det_gasket();
        let o = OpenSetSpec::unit_triangle();
        let big_r = crate::simgeom::cutoff_r(&o, 0.05);
        let t = sample_tree(&m, StopRule::Depth(6), 0);
        let s = markov_stop(&t, big_r, big_r).unwrap();
        assert_eq!(boundary_codes(&t, &s, &o), vec![Code::root()]);
        // Gasket points lie within about 0.108 of the boundary of their
        // first-level cell, so interior codes only appear once 2r is below
        // that.
        let s = markov_stop(&t, big_r / 8.0, big_r).unwrap();
        assert_eq!(boundary_codes(&t, &s, &o).len(), 27);
        let s = markov_stop(&t, big_r / 64.0, big_r).unwrap();
        let b = boundary_codes(&t, &s, &o);
        assert_eq!(s.len(), 729);
        assert!(b.len() < 729, "{}", b.len());
        let all = s.codes(&t);
        assert!(b.iter().all(|c| all.contains(c)));
    }

    #[test]
    fn a2_holds_for_recursive_model() {
        let r = test_a2(&recursive_carpet_labels(), 1, 20_000, 2, 1).unwrap();
        assert!(r.p_marginal > 0.01 && r.p_independence > 0.01, "{r:?}");
    }

    #[test]
    fn a2_detects_planted_violation() {
        let m = recursive_carpet_labels();
        let broken = |s: u64| {
            let mut t = sample_tree(&m, StopRule::Depth(3), s);
            for l in 0..t.levels.len() - 1 {
                for p in 0..t.levels[l].len() {
                    let pn = NodeRef { level: l as u32, index: p as u32 };
                    if let Some(c) = t.child(pn, 1) {
                        let lab = t.label_index(pn);
                        t.relabel(c, lab).unwrap();
                    }
                }
            }
            t
        };
        let r = test_a2_with(broken, 1, 5_000, 2, 9).unwrap();
        assert!(r.p_independence < 0.01, "{r:?}");
    }

    #[test]
    fn carpet_w_values() {
        let w = carpet_level_dependence(&carpet(), 40_000, 5).unwrap();
        assert_eq!(w[0].value, 0.0);
        assert_eq!(w[1].value, 0.0);
        assert!(w[2].within(1.0 / 64.0, 3.0), "{:?}", w[2]);
        assert!(w[3].within(1.0 / 64.0, 3.0), "{:?}", w[3]);
    }

    #[test]
    fn carpet_spec_rejects_bad_tables() {
        let mut s = carpet_spec();
        s.transition.as_mut().unwrap()[2] = vec![0.7, 0.1, 0.1, 0.1];
        assert!(TreeModel::new(s).is_err());
        let mut s = carpet_spec();
        s.labels[0].maps[0].ratio = 1.1;
        assert!(TreeModel::new(s).is_err());
    }

    #[test]
    fn enumeration_weights_sum_to_one() {
        for (m, d) in [(dep_gasket(), 2), (pinned(), 3), (carpet(), 1)] {
            let mut total = 0.0;
            let mut n = 0;
            assert!(enumerate_trees(&m, d, 100_000, |_, w| {
                total += w;
                n += 1;
            }));
            assert!((total - 1.0).abs() < 1e-12, "{total}");
            assert!(n > 1);
        }
        // dependent gasket depth 1: root(2) x G(2) x M(3)
        let mut n = 0;
        enumerate_trees(&dep_gasket(), 1, 1000, |_, _| n += 1);
        assert_eq!(n, 12);
    }

    #[test]
    fn walk_stop_matches_markov_stop() {
        let m = dep_gasket();
        let t = sample_tree(&m, StopRule::Markov { r: 0.01, big_r: 1.5 }, 4);
        let s = markov_stop(&t, 0.01, 1.5).unwrap();
        let mut seen = Vec::new();
        t.walk_stop(NodeRef::ROOT, 0.01 / 1.5, |_| false, |n, f| {
            let g = t.map_of(n);
            assert!((g.translation[0] - f.translation[0]).abs() < 1e-12);
            seen.push(n)
        })
        .unwrap();
        let mut a: Vec<NodeRef> = s.entries.iter().map(|e| e.node).collect();
        a.sort();
        seen.sort();
        assert_eq!(a, seen);
    }
}
