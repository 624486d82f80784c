//! R*-tree over data points, used to partition the data space into
//! subspaces whose granularity follows the point density.
//!
//! Splits and forced reinsertion follow the classic R*-tree. Subtree choice
//! instead minimizes `(area_new / area) * (area_new - area)`, which weighs
//! the enlargement by how much it dilutes the child's density.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::model::Range;

pub type NodeId = usize;

#[derive(Debug, Clone)]
pub enum Entry {
    Point(Vec<f64>),
    Child(NodeId),
}

#[derive(Debug, Clone)]
pub struct Node {
    pub id: NodeId,
    /// 0 for leaves.
    pub level: u32,
    pub mbr: Range,
    pub parent: Option<NodeId>,
    pub entries: Vec<Entry>,
    /// Points routed here after the tree was frozen.
    pub routed: u64,
}

impl Node {
    pub fn is_leaf(&self) -> bool {
        self.level == 0
    }

    pub fn children(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.entries.iter().filter_map(|e| match e {
            Entry::Child(c) => Some(*c),
            Entry::Point(_) => None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TreeParams {
    pub m_max: usize,
    pub m_min: usize,
    pub reinsert_count: usize,
}

impl TreeParams {
    /// Canonical R*-tree constants: 40% minimum fill, 30% forced reinsertion.
    pub fn with_max(m_max: usize) -> Self {
        TreeParams {
            m_max,
            m_min: ((m_max as f64) * 0.4).ceil() as usize,
            reinsert_count: ((m_max as f64) * 0.3).ceil() as usize,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m_max < 4 {
            return Err(Error::Config("m_max must be at least 4".into()));
        }
        if self.m_min < 1 || 2 * self.m_min > self.m_max {
            return Err(Error::Config(format!(
                "m_min ({}) must be in 1..=m_max/2 ({})",
                self.m_min,
                self.m_max / 2
            )));
        }
        if self.reinsert_count >= self.m_max + 1 - self.m_min {
            return Err(Error::Config("reinsert_count too large".into()));
        }
        Ok(())
    }
}

/// Density-weighted enlargement cost. A zero-area rectangle falls back to
/// `area_new` alone.
#[inline]
pub fn insertion_cost(area: f64, area_new: f64) -> f64 {
    if area > 0.0 {
        (area_new / area) * (area_new - area)
    } else {
        area_new
    }
}

/// Classic R-tree choice: smallest area growth.
#[inline]
pub fn area_change(area: f64, area_new: f64) -> f64 {
    area_new - area
}

/// Picks among `children` (id, mbr) the one with the lowest
/// [`insertion_cost`] for `rect`; ties go to the smaller area, then the
/// smaller id.
pub fn choose_child<'a>(children: impl IntoIterator<Item = (NodeId, &'a Range)>, rect: &Range) -> Option<NodeId> {
    let mut best: Option<(f64, f64, NodeId)> = None;
    for (id, mbr) in children {
        let area = mbr.area();
        let cost = insertion_cost(area, mbr.area_enlarged_by_range(rect));
        let better = match best {
            None => true,
            Some((bc, ba, bid)) => match cost.total_cmp(&bc) {
                Ordering::Less => true,
                Ordering::Greater => false,
                Ordering::Equal => match area.total_cmp(&ba) {
                    Ordering::Less => true,
                    Ordering::Greater => false,
                    Ordering::Equal => id < bid,
                },
            },
        };
        if better {
            best = Some((cost, area, id));
        }
    }
    best.map(|b| b.2)
}

#[derive(Debug, Clone)]
pub struct RTree {
    ndims: usize,
    params: TreeParams,
    nodes: Vec<Node>,
    root: Option<NodeId>,
    len: usize,
    frozen: bool,
}

impl RTree {
    pub fn new(ndims: usize, params: TreeParams) -> Result<Self> {
        params.validate()?;
        Ok(RTree {
            ndims,
            params,
            nodes: Vec::new(),
            root: None,
            len: 0,
            frozen: false,
        })
    }

    pub fn params(&self) -> TreeParams {
        self.params
    }

    pub fn ndims(&self) -> usize {
        self.ndims
    }

    /// Points inserted during the exact phase.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn root(&self) -> Option<NodeId> {
        self.root
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Number of levels (0 for an empty tree).
    pub fn height(&self) -> u32 {
        self.root.map_or(0, |r| self.nodes[r].level + 1)
    }

    fn entry_rect(&self, e: &Entry) -> Range {
        match e {
            Entry::Point(p) => Range::point(p),
            Entry::Child(c) => self.nodes[*c].mbr.clone(),
        }
    }

    fn new_node(&mut self, level: u32, mbr: Range, parent: Option<NodeId>) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node {
            id,
            level,
            mbr,
            parent,
            entries: Vec::new(),
            routed: 0,
        });
        id
    }

    pub fn insert(&mut self, coords: Vec<f64>) -> Result<()> {
        if self.frozen {
            return Err(Error::Construction("insert into a frozen tree".into()));
        }
        if coords.len() != self.ndims {
            return Err(Error::Construction(format!(
                "point has {} coords, tree {}",
                coords.len(),
                self.ndims
            )));
        }
        if self.root.is_none() {
            let root = self.new_node(0, Range::point(&coords), None);
            self.root = Some(root);
        }
        let height = self.height() as usize;
        let mut reinserted = vec![false; height + 1];
        self.insert_entry(Entry::Point(coords), 0, &mut reinserted);
        self.len += 1;
        Ok(())
    }

    fn insert_entry(&mut self, entry: Entry, level: u32, reinserted: &mut Vec<bool>) {
        let rect = self.entry_rect(&entry);
        let mut node = self.root.expect("root exists");
        while self.nodes[node].level > level {
            let n = &self.nodes[node];
            let children = n.children().map(|c| (c, &self.nodes[c].mbr));
            node = choose_child(children, &rect).expect("internal node has children");
        }
        if let Entry::Child(c) = entry {
            self.nodes[c].parent = Some(node);
        }
        let n = &mut self.nodes[node];
        if n.entries.is_empty() {
            n.mbr = rect.clone();
        } else {
            n.mbr.expand_to_range(&rect);
        }
        n.entries.push(entry);
        self.enlarge_upward(node, &rect);
        if self.nodes[node].entries.len() > self.params.m_max {
            self.overflow(node, reinserted);
        }
    }

    fn enlarge_upward(&mut self, mut node: NodeId, rect: &Range) {
        while let Some(p) = self.nodes[node].parent {
            self.nodes[p].mbr.expand_to_range(rect);
            node = p;
        }
    }

    fn recompute_mbr(&mut self, node: NodeId) {
        let mut it = self.nodes[node].entries.iter();
        let Some(first) = it.next() else { return };
        let mut mbr = self.entry_rect(first);
        for e in it {
            let r = self.entry_rect(e);
            mbr.expand_to_range(&r);
        }
        self.nodes[node].mbr = mbr;
    }

    fn tighten_upward(&mut self, mut node: NodeId) {
        self.recompute_mbr(node);
        while let Some(p) = self.nodes[node].parent {
            self.recompute_mbr(p);
            node = p;
        }
    }

    fn overflow(&mut self, node: NodeId, reinserted: &mut Vec<bool>) {
        let level = self.nodes[node].level as usize;
        if reinserted.len() <= level {
            reinserted.resize(level + 1, false);
        }
        if Some(node) != self.root && !reinserted[level] && self.params.reinsert_count > 0 {
            reinserted[level] = true;
            self.reinsert(node, reinserted);
        } else {
            self.split(node, reinserted);
        }
    }

    fn reinsert(&mut self, node: NodeId, reinserted: &mut Vec<bool>) {
        let center = self.nodes[node].mbr.center();
        let entries = std::mem::take(&mut self.nodes[node].entries);
        let mut keyed: Vec<(f64, usize, Entry)> = entries
            .into_iter()
            .enumerate()
            .map(|(i, e)| {
                let c = self.entry_rect(&e).center();
                let dist: f64 = c.iter().zip(&center).map(|(a, b)| (a - b) * (a - b)).sum();
                (dist, i, e)
            })
            .collect();
        // Farthest first; stable on original position.
        keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let p = self.params.reinsert_count;
        let keep: Vec<Entry> = keyed.drain(p..).map(|k| k.2).collect();
        self.nodes[node].entries = keep;
        self.tighten_upward(node);
        let level = self.nodes[node].level;
        // Close reinsert: nearest of the removed entries go back first.
        for (_, _, e) in keyed.into_iter().rev() {
            self.insert_entry(e, level, reinserted);
        }
    }

    fn split(&mut self, node: NodeId, reinserted: &mut Vec<bool>) {
        let entries = std::mem::take(&mut self.nodes[node].entries);
        let rects: Vec<Range> = entries.iter().map(|e| self.entry_rect(e)).collect();
        let (group_a, group_b) = rstar_split(&rects, self.params.m_min);

        let mut slots: Vec<Option<Entry>> = entries.into_iter().map(Some).collect();
        let a: Vec<Entry> = group_a.iter().map(|&i| slots[i].take().unwrap()).collect();
        let b: Vec<Entry> = group_b.iter().map(|&i| slots[i].take().unwrap()).collect();

        let level = self.nodes[node].level;
        let parent = self.nodes[node].parent;
        let sibling = self.new_node(level, self.nodes[node].mbr.clone(), parent);
        for e in &b {
            if let Entry::Child(c) = e {
                self.nodes[*c].parent = Some(sibling);
            }
        }
        self.nodes[node].entries = a;
        self.nodes[sibling].entries = b;
        self.recompute_mbr(node);
        self.recompute_mbr(sibling);

        match parent {
            None => {
                let mbr = {
                    let mut m = self.nodes[node].mbr.clone();
                    m.expand_to_range(&self.nodes[sibling].mbr);
                    m
                };
                let root = self.new_node(level + 1, mbr, None);
                self.nodes[root].entries = vec![Entry::Child(node), Entry::Child(sibling)];
                self.nodes[node].parent = Some(root);
                self.nodes[sibling].parent = Some(root);
                self.root = Some(root);
            }
            Some(p) => {
                self.nodes[p].entries.push(Entry::Child(sibling));
                self.tighten_upward(p);
                if self.nodes[p].entries.len() > self.params.m_max {
                    self.overflow(p, reinserted);
                }
            }
        }
    }

    /// Stops structural changes and drops the point entries; later points
    /// only expand leaf rectangles.
    pub fn freeze(&mut self) {
        for n in &mut self.nodes {
            if n.is_leaf() {
                n.routed = 0;
                n.entries.clear();
            }
        }
        self.frozen = true;
    }

    pub fn leaves(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        if let Some(r) = self.root {
            self.collect_level(r, 0, &mut out);
        }
        out
    }

    /// Nodes at `level` in depth-first order.
    pub fn nodes_at_level(&self, level: u32) -> Vec<NodeId> {
        let mut out = Vec::new();
        if let Some(r) = self.root {
            self.collect_level(r, level, &mut out);
        }
        out
    }

    fn collect_level(&self, node: NodeId, level: u32, out: &mut Vec<NodeId>) {
        let n = &self.nodes[node];
        if n.level == level {
            out.push(node);
        } else if n.level > level {
            for c in n.children() {
                self.collect_level(c, level, out);
            }
        }
    }

    /// Leaves (or nodes at `level`) whose MBR intersects `query`.
    pub fn search(&self, query: &Range, level: u32) -> Vec<NodeId> {
        let mut out = Vec::new();
        let mut stack: Vec<NodeId> = self.root.into_iter().collect();
        while let Some(id) = stack.pop() {
            let n = &self.nodes[id];
            if !n.mbr.intersects(query) {
                continue;
            }
            if n.level == level {
                out.push(id);
            } else if n.level > level {
                let mut ch: Vec<NodeId> = n.children().collect();
                ch.reverse();
                stack.extend(ch);
            }
        }
        out
    }

    /// First leaf in depth-first order whose MBR contains the point.
    pub fn find_containing_leaf(&self, coords: &[f64]) -> Option<NodeId> {
        let root = self.root?;
        self.find_containing(root, coords)
    }

    fn find_containing(&self, node: NodeId, coords: &[f64]) -> Option<NodeId> {
        let n = &self.nodes[node];
        if !n.mbr.contains_point(coords) {
            return None;
        }
        if n.is_leaf() {
            return Some(node);
        }
        n.children().find_map(|c| self.find_containing(c, coords))
    }

    /// Leaf with the lowest insertion cost for the point, over all leaves.
    pub fn nearest_leaf(&self, coords: &[f64], leaves: &[NodeId]) -> Option<NodeId> {
        let rect = Range::point(coords);
        choose_child(leaves.iter().map(|&l| (l, &self.nodes[l].mbr)), &rect)
    }

    /// Frozen-phase routing: a containing leaf if any, else the nearest leaf,
    /// whose rectangle (and its ancestors') grows to cover the point.
    pub fn route(&mut self, coords: &[f64], leaves: &[NodeId]) -> Option<NodeId> {
        if let Some(l) = self.find_containing_leaf(coords) {
            self.nodes[l].routed += 1;
            return Some(l);
        }
        let l = self.nearest_leaf(coords, leaves)?;
        let rect = Range::point(coords);
        self.nodes[l].mbr.expand_to_range(&rect);
        self.enlarge_upward(l, &rect);
        self.nodes[l].routed += 1;
        Some(l)
    }

    /// Number of point entries held by a leaf in the exact phase.
    pub fn leaf_point_count(&self, leaf: NodeId) -> usize {
        self.nodes[leaf]
            .entries
            .iter()
            .filter(|e| matches!(e, Entry::Point(_)))
            .count()
    }

    /// Checks structural invariants; used by tests.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        let Some(root) = self.root else { return Ok(()) };
        let mut leaf_depths = Vec::new();
        self.check_node(root, 0, &mut leaf_depths)?;
        if leaf_depths.windows(2).any(|w| w[0] != w[1]) {
            return Err("leaves at different depths".into());
        }
        Ok(())
    }

    fn check_node(&self, id: NodeId, depth: usize, leaf_depths: &mut Vec<usize>) -> std::result::Result<(), String> {
        let n = &self.nodes[id];
        if n.is_leaf() {
            leaf_depths.push(depth);
        }
        for e in &n.entries {
            let r = self.entry_rect(e);
            if !n.mbr.contains_range(&r) {
                return Err(format!("node {id} does not contain entry {r:?}"));
            }
            if let Entry::Child(c) = e {
                if self.nodes[*c].parent != Some(id) {
                    return Err(format!("bad parent link {c} -> {id}"));
                }
                if self.nodes[*c].level + 1 != n.level {
                    return Err(format!("level mismatch at {c}"));
                }
                self.check_node(*c, depth + 1, leaf_depths)?;
            }
        }
        if !self.frozen && Some(id) != self.root {
            let k = n.entries.len();
            if k < self.params.m_min || k > self.params.m_max {
                return Err(format!("node {id} has {k} entries"));
            }
        }
        Ok(())
    }
}

/// R*-tree split: choose the axis with the smallest total margin over all
/// legal distributions, then the distribution with the least overlap (ties:
/// least total area). Returns the two index groups.
pub fn rstar_split(rects: &[Range], m_min: usize) -> (Vec<usize>, Vec<usize>) {
    let n = rects.len();
    let d = rects[0].ndims();
    let m_min = m_min.max(1).min(n / 2);

    let sortings = |axis: usize| -> [Vec<usize>; 2] {
        let mut by_lo: Vec<usize> = (0..n).collect();
        by_lo.sort_by(|&a, &b| {
            let (ra, rb) = (&rects[a].intervals[axis], &rects[b].intervals[axis]);
            ra.lo.total_cmp(&rb.lo).then(ra.hi.total_cmp(&rb.hi)).then(a.cmp(&b))
        });
        let mut by_hi: Vec<usize> = (0..n).collect();
        by_hi.sort_by(|&a, &b| {
            let (ra, rb) = (&rects[a].intervals[axis], &rects[b].intervals[axis]);
            ra.hi.total_cmp(&rb.hi).then(ra.lo.total_cmp(&rb.lo)).then(a.cmp(&b))
        });
        [by_lo, by_hi]
    };

    // Prefix and suffix bounding boxes of one ordering.
    let bounds = |order: &[usize]| -> (Vec<Range>, Vec<Range>) {
        let mut pre = Vec::with_capacity(n);
        let mut acc = rects[order[0]].clone();
        for &i in order {
            acc.expand_to_range(&rects[i]);
            pre.push(acc.clone());
        }
        let mut suf = vec![rects[order[n - 1]].clone(); n];
        let mut acc = rects[order[n - 1]].clone();
        for (pos, &i) in order.iter().enumerate().rev() {
            acc.expand_to_range(&rects[i]);
            suf[pos] = acc.clone();
        }
        (pre, suf)
    };

    let mut best_axis = 0;
    let mut best_margin = f64::INFINITY;
    for axis in 0..d {
        let mut margin = 0.0;
        for order in sortings(axis) {
            let (pre, suf) = bounds(&order);
            for k in m_min..=(n - m_min) {
                margin += pre[k - 1].margin() + suf[k].margin();
            }
        }
        if margin < best_margin {
            best_margin = margin;
            best_axis = axis;
        }
    }

    let mut best: Option<(f64, f64, Vec<usize>, usize)> = None;
    for order in sortings(best_axis) {
        let (pre, suf) = bounds(&order);
        for k in m_min..=(n - m_min) {
            let overlap = pre[k - 1].overlap_area(&suf[k]);
            let area = pre[k - 1].area() + suf[k].area();
            let better = match &best {
                None => true,
                Some((bo, ba, _, _)) => overlap < *bo || (overlap == *bo && area < *ba),
            };
            if better {
                best = Some((overlap, area, order.clone(), k));
            }
        }
    }
    let (_, _, order, k) = best.expect("at least one distribution");
    (order[..k].to_vec(), order[k..].to_vec())
}
