//! Binary index file.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "IHCUBEIX" | version u32 | section count u32
//! section*: tag [u8; 4] | length u64 | crc32 u32 | payload
//! ```
//!
//! Sections: `META` (build milliseconds as u64, then JSON: schema,
//! descriptor, build config, other stats),
//! `TREE`, `LEAF`, `LSH_` and `MMIN`. Every float is stored as raw bits, so a
//! loaded index answers queries bit-for-bit like the one that was saved.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::descriptor::DescriptorConfig;
use crate::error::{Error, Result};
use crate::ih::{IhGeometry, IntegralHistogram};
use crate::index::{BuildConfig, BuildStats, Index, Leaf, TreeNode};
use crate::lsh::{LshBuckets, LshFamily};
use crate::model::{Interval, Range, Schema};

pub const MAGIC: &[u8; 8] = b"IHCUBEIX";
pub const FORMAT_VERSION: u32 = 1;

const NONE: u32 = u32::MAX;

#[derive(Serialize, Deserialize)]
struct Meta {
    schema: Schema,
    descriptor: DescriptorConfig,
    build: BuildConfig,
    stats: BuildStats,
}

/// Byte sink that can also just count.
enum Sink {
    Bytes(Vec<u8>),
    Count(usize),
}

impl Sink {
    fn put(&mut self, b: &[u8]) {
        match self {
            Sink::Bytes(v) => v.extend_from_slice(b),
            Sink::Count(n) => *n += b.len(),
        }
    }
    fn u32(&mut self, v: u32) {
        self.put(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.put(&v.to_le_bytes());
    }
    fn i64(&mut self, v: i64) {
        self.put(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.put(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        match self {
            Sink::Bytes(buf) => {
                buf.reserve(v.len() * 8);
                for x in v {
                    buf.extend_from_slice(&x.to_le_bytes());
                }
            }
            Sink::Count(n) => *n += v.len() * 8,
        }
    }
    fn u32s(&mut self, v: &[u32]) {
        self.u64(v.len() as u64);
        for &x in v {
            self.u32(x);
        }
    }
    fn range(&mut self, r: &Range) {
        self.u32(r.intervals.len() as u32);
        for iv in &r.intervals {
            self.f64(iv.lo);
            self.f64(iv.hi);
        }
    }
    fn len(&self) -> usize {
        match self {
            Sink::Bytes(v) => v.len(),
            Sink::Count(n) => *n,
        }
    }
    fn counting(&self) -> bool {
        matches!(self, Sink::Count(_))
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    section: &'static str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], section: &'static str) -> Self {
        Reader { buf, pos: 0, section }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("section {} truncated", self.section)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn len(&mut self, elem: usize) -> Result<usize> {
        let n = self.u64()? as usize;
        if n.saturating_mul(elem) > self.buf.len() - self.pos {
            return Err(Error::Format(format!("section {}: bad length {n}", self.section)));
        }
        Ok(n)
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len(8)?;
        let b = self.take(n * 8)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    fn u32s(&mut self) -> Result<Vec<u32>> {
        let n = self.len(4)?;
        (0..n).map(|_| self.u32()).collect()
    }
    fn range(&mut self) -> Result<Range> {
        let d = self.u32()? as usize;
        let mut iv = Vec::with_capacity(d.min(1024));
        for _ in 0..d {
            iv.push(Interval::new(self.f64()?, self.f64()?));
        }
        Ok(Range::new(iv))
    }
    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!("section {} has trailing bytes", self.section)));
        }
        Ok(())
    }
}

fn opt_u32(v: Option<u32>) -> u32 {
    v.unwrap_or(NONE)
}

fn from_opt_u32(v: u32) -> Option<u32> {
    (v != NONE).then_some(v)
}

fn write_tree(s: &mut Sink, index: &Index) {
    s.u32(opt_u32(index.root));
    s.u64(index.nodes.len() as u64);
    for n in &index.nodes {
        s.u32(n.level);
        s.range(&n.mbr);
        s.u32s(&n.children);
        s.u32(opt_u32(n.leaf));
        s.f64s(&n.total);
    }
}

fn write_leaves(s: &mut Sink, index: &Index) {
    s.u64(index.leaves.len() as u64);
    for l in &index.leaves {
        s.u32(l.node);
        s.u64(l.points);
        s.range(&l.mbr);
        let geo = l.ih.geometry();
        s.u32(geo.cell_edges.len() as u32);
        for e in &geo.cell_edges {
            s.u32s(e);
        }
        match l.ih.local_range() {
            Some((lo, hi)) => {
                s.u32(1);
                s.f64(lo);
                s.f64(hi);
            }
            None => s.u32(0),
        }
        s.f64s(l.ih.table());
    }
}

fn write_lsh(s: &mut Sink, index: &Index) {
    let f = &index.lsh;
    s.u64(f.projections.len() as u64);
    for p in &f.projections {
        s.f64s(p);
    }
    s.f64s(&f.offsets);
    s.f64(f.bucket_width);
    s.u64(f.tables as u64);
    s.u64(f.seed);
    let b = &index.buckets;
    s.u64(b.tables as u64);
    s.u64(b.subspaces as u64);
    s.u64(b.maps.len() as u64);
    for m in &b.maps {
        s.u64(m.len() as u64);
        for (k, ids) in m {
            s.i64(*k);
            s.u32s(ids);
        }
    }
}

fn encode(index: &Index, sink: &mut Sink) -> Result<()> {
    let mut stats = index.stats.clone();
    // The file size is recovered from the file itself on load. Build time
    // goes in fixed width so it cannot change the size.
    stats.storage_bytes = 0;
    let build_millis = std::mem::take(&mut stats.build_millis);
    let meta = Meta {
        schema: index.schema.clone(),
        descriptor: index.descriptor.clone(),
        build: index.build.clone(),
        stats,
    };
    let meta_json = serde_json::to_vec(&meta).map_err(|e| Error::Format(e.to_string()))?;

    sink.put(MAGIC);
    sink.u32(FORMAT_VERSION);
    sink.u32(5);
    let counting = sink.counting();
    let sections: [(&[u8; 4], &dyn Fn(&mut Sink)); 5] = [
        (b"META", &|s: &mut Sink| {
            s.u64(build_millis);
            s.put(&meta_json);
        }),
        (b"TREE", &|s: &mut Sink| write_tree(s, index)),
        (b"LEAF", &|s: &mut Sink| write_leaves(s, index)),
        (b"LSH_", &|s: &mut Sink| write_lsh(s, index)),
        (b"MMIN", &|s: &mut Sink| s.f64s(&index.measure_min)),
    ];
    for (tag, body) in sections {
        let mut payload = if counting {
            Sink::Count(0)
        } else {
            Sink::Bytes(Vec::new())
        };
        body(&mut payload);
        sink.put(tag);
        sink.u64(payload.len() as u64);
        match payload {
            Sink::Bytes(p) => {
                sink.u32(crc32fast::hash(&p));
                sink.put(&p);
            }
            Sink::Count(n) => {
                sink.u32(0);
                if let Sink::Count(total) = sink {
                    *total += n;
                }
            }
        }
    }
    Ok(())
}

/// Serialized size in bytes, without materializing the file.
pub fn encoded_len(index: &Index) -> usize {
    let mut s = Sink::Count(0);
    encode(index, &mut s).map(|_| s.len()).unwrap_or(0)
}

pub fn to_bytes(index: &Index) -> Result<Vec<u8>> {
    let mut s = Sink::Bytes(Vec::with_capacity(encoded_len(index)));
    encode(index, &mut s)?;
    match s {
        Sink::Bytes(v) => Ok(v),
        Sink::Count(_) => unreachable!(),
    }
}

pub fn save(index: &Index, path: &Path) -> Result<()> {
    let bytes = to_bytes(index)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Index> {
    from_bytes(&fs::read(path)?)
}

const SECTION_NAMES: [&str; 5] = ["META", "TREE", "LEAF", "LSH_", "MMIN"];

pub fn from_bytes(bytes: &[u8]) -> Result<Index> {
    let mut r = Reader::new(bytes, "header");
    if r.take(8)? != MAGIC {
        return Err(Error::Format("not an index file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let count = r.u32()? as usize;
    if count != SECTION_NAMES.len() {
        return Err(Error::Format(format!(
            "expected {} sections, found {count}",
            SECTION_NAMES.len()
        )));
    }
    let mut payloads: Vec<&[u8]> = Vec::with_capacity(count);
    for name in SECTION_NAMES {
        let tag = r.take(4)?;
        if tag != name.as_bytes() {
            return Err(Error::Format(format!("expected section {name}")));
        }
        let len = r.u64()? as usize;
        let crc = r.u32()?;
        let p = r.take(len)?;
        if crc32fast::hash(p) != crc {
            return Err(Error::Checksum(name));
        }
        payloads.push(p);
    }
    r.finish()?;

    let mut m = Reader::new(payloads[0], "META");
    let build_millis = m.u64()?;
    let mut meta: Meta =
        serde_json::from_slice(m.take(payloads[0].len() - 8)?).map_err(|e| Error::Format(format!("META: {e}")))?;
    m.finish()?;
    meta.stats.build_millis = build_millis;
    meta.schema.validate()?;
    let d = meta.schema.ndims();

    let mut t = Reader::new(payloads[1], "TREE");
    let root = from_opt_u32(t.u32()?);
    let n_nodes = t.len(4)?;
    let mut nodes = Vec::with_capacity(n_nodes);
    for _ in 0..n_nodes {
        nodes.push(TreeNode {
            level: t.u32()?,
            mbr: t.range()?,
            children: t.u32s()?,
            leaf: from_opt_u32(t.u32()?),
            total: t.f64s()?,
        });
    }
    t.finish()?;

    let mut l = Reader::new(payloads[2], "LEAF");
    let n_leaves = l.len(4)?;
    let mut leaves = Vec::with_capacity(n_leaves);
    for _ in 0..n_leaves {
        let node = l.u32()?;
        let points = l.u64()?;
        let mbr = l.range()?;
        let dims = l.u32()? as usize;
        if dims != d || mbr.ndims() != d {
            return Err(Error::Format("leaf dimensionality mismatch".into()));
        }
        let cell_edges = (0..dims).map(|_| l.u32s()).collect::<Result<Vec<_>>>()?;
        let local_range = match l.u32()? {
            0 => None,
            _ => Some((l.f64()?, l.f64()?)),
        };
        let table = l.f64s()?;
        let ih = IntegralHistogram::from_parts(
            &meta.schema,
            IhGeometry { cell_edges },
            meta.descriptor.clone(),
            local_range,
            table,
        )?;
        leaves.push(Leaf { node, mbr, ih, points });
    }
    l.finish()?;

    let mut s = Reader::new(payloads[3], "LSH_");
    let n_proj = s.len(8)?;
    let projections = (0..n_proj).map(|_| s.f64s()).collect::<Result<Vec<_>>>()?;
    let offsets = s.f64s()?;
    let bucket_width = s.f64()?;
    let tables = s.u64()? as usize;
    let seed = s.u64()?;
    let lsh = LshFamily {
        projections,
        offsets,
        bucket_width,
        tables,
        seed,
    };
    let b_tables = s.u64()? as usize;
    let subspaces = s.u64()? as usize;
    let n_maps = s.len(8)?;
    let mut maps = Vec::with_capacity(n_maps);
    for _ in 0..n_maps {
        let n = s.len(12)?;
        let mut m = BTreeMap::new();
        for _ in 0..n {
            let k = s.i64()?;
            m.insert(k, s.u32s()?);
        }
        maps.push(m);
    }
    s.finish()?;

    let mut mm = Reader::new(payloads[4], "MMIN");
    let measure_min = mm.f64s()?;
    mm.finish()?;

    let mut stats = meta.stats;
    stats.storage_bytes = bytes.len() as u64;
    let index = Index {
        schema: meta.schema,
        descriptor: meta.descriptor,
        build: meta.build,
        nodes,
        root,
        leaves,
        lsh,
        buckets: LshBuckets {
            tables: b_tables,
            maps,
            subspaces,
        },
        measure_min,
        stats,
    };
    check_structure(&index)?;
    Ok(index)
}

fn check_structure(index: &Index) -> Result<()> {
    let bad = |m: &str| Err(Error::Format(m.to_string()));
    let n = index.nodes.len() as u32;
    if index.root.is_some_and(|r| r >= n) || (index.root.is_none() && n > 0) {
        return bad("root out of range");
    }
    for node in &index.nodes {
        if node.children.iter().any(|&c| c >= n) {
            return bad("child out of range");
        }
        if node.leaf.is_some_and(|l| l as usize >= index.leaves.len()) {
            return bad("leaf out of range");
        }
        if node.total.len() != index.descriptor.total_slots() || node.mbr.ndims() != index.schema.ndims() {
            return bad("node shape mismatch");
        }
    }
    for (i, leaf) in index.leaves.iter().enumerate() {
        if leaf.node >= n || index.nodes[leaf.node as usize].leaf != Some(i as u32) {
            return bad("leaf/node link broken");
        }
    }
    if index.lsh.projections.iter().any(|p| p.len() != index.schema.ndims())
        || index.lsh.offsets.len() != index.lsh.projections.len()
        || index.buckets.maps.len() != index.lsh.projections.len() * index.buckets.tables
        || index.buckets.subspaces != index.leaves.len()
        || index
            .buckets
            .maps
            .iter()
            .flat_map(|m| m.values().flatten())
            .any(|&id| id as usize >= index.leaves.len())
    {
        return bad("LSH layer inconsistent");
    }
    if index.measure_min.len() != index.schema.measures.len() {
        return bad("measure table mismatch");
    }
    Ok(())
}
