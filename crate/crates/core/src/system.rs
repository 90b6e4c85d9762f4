//! Hypergraph systems and edge combinatorics.
//!
//! A system is a finite index set `J` of labelled vertex classes, a class size
//! per label, an order `d`, and a d-uniform top layer of edges over `J`. Lower
//! layers are derived by repeated skeleton union, so every subset of a top
//! edge appears in the layer of its cardinality. Product spaces `V_e` are
//! addressed by row-major index arithmetic in a fixed canonical order; all set
//! and partition machinery in the other modules is built on top of that
//! addressing.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default guardrail for brute-force enumeration: number of cells a single
/// product space may have before constructors and oracles refuse to run.
pub const DEFAULT_CELL_CAP: u64 = 100_000_000;

/// A subset of the label index set, kept sorted; the canonical order on edges
/// is lexicographic on these sorted index lists.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Edge(Vec<u8>);

impl Edge {
    /// Build an edge from label indices; rejects duplicates.
    pub fn new(mut indices: Vec<u8>) -> Result<Self> {
        indices.sort_unstable();
        let before = indices.len();
        indices.dedup();
        if indices.len() != before {
            return Err(Error::InvalidSystem("edge has a repeated vertex label".into()));
        }
        Ok(Edge(indices))
    }

    pub fn empty() -> Self {
        Edge(Vec::new())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, j: u8) -> bool {
        self.0.binary_search(&j).is_ok()
    }

    pub fn is_subset_of(&self, other: &Edge) -> bool {
        self.0.iter().all(|j| other.contains(*j))
    }

    pub fn iter(&self) -> impl Iterator<Item = u8> + '_ {
        self.0.iter().copied()
    }

    pub fn indices(&self) -> &[u8] {
        &self.0
    }

    pub fn union(&self, other: &Edge) -> Edge {
        let mut v: Vec<u8> = self.0.iter().chain(other.0.iter()).copied().collect();
        v.sort_unstable();
        v.dedup();
        Edge(v)
    }

    /// The skeleton: all subsets obtained by dropping one element.
    pub fn skeleton(&self) -> Vec<Edge> {
        let mut out = Vec::with_capacity(self.0.len());
        for drop in 0..self.0.len() {
            let v: Vec<u8> = self
                .0
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != drop)
                .map(|(_, j)| *j)
                .collect();
            out.push(Edge(v));
        }
        out.sort();
        out
    }

    /// All strict subsets (including the empty edge), in canonical order.
    pub fn proper_subsets(&self) -> Vec<Edge> {
        let k = self.0.len();
        let mut out = Vec::with_capacity((1usize << k).saturating_sub(1));
        for mask in 0..(1u32 << k) {
            if mask == (1u32 << k) - 1 {
                continue;
            }
            let v: Vec<u8> = (0..k).filter(|i| mask >> i & 1 == 1).map(|i| self.0[i]).collect();
            out.push(Edge(v));
        }
        out.sort();
        out
    }
}

impl fmt::Debug for Edge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "e{:?}", self.0)
    }
}

/// One point of a product space `V_e`: a coordinate per label of the base.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Point {
    pub base: Edge,
    pub coords: Vec<u32>,
}

/// Maps indices of `V_from` to indices of `V_to` for `to ⊆ from`.
#[derive(Clone)]
pub struct Projector {
    entries: Vec<(u64, u64, u64)>, // (from stride, size, to stride)
}

impl Projector {
    #[inline]
    pub fn map(&self, idx: u64) -> u64 {
        self.entries
            .iter()
            .map(|&(fs, sz, ts)| ((idx / fs) % sz) * ts)
            .sum()
    }
}

/// The quadruple (J, (V_j), d, H_d) together with its derived layers.
#[derive(Clone, Debug)]
pub struct HypergraphSystem {
    labels: Vec<String>,
    sizes: Vec<u64>,
    order: usize,
    layers: Vec<Vec<Edge>>, // layers[j] = H_j for 0 <= j <= d, canonical order
    cap: u64,
}

/// Compute layers backwards from the top by repeated skeleton union.
pub fn down_closure(order: usize, top: &[Edge]) -> Vec<Vec<Edge>> {
    let mut layers = vec![Vec::new(); order + 1];
    layers[order] = {
        let set: BTreeSet<Edge> = top.iter().cloned().collect();
        set.into_iter().collect()
    };
    for j in (0..order).rev() {
        let mut set = BTreeSet::new();
        for e in &layers[j + 1] {
            for f in e.skeleton() {
                set.insert(f);
            }
        }
        layers[j] = set.into_iter().collect();
    }
    layers
}

impl HypergraphSystem {
    pub fn new(
        labels: Vec<String>,
        sizes: Vec<u64>,
        order: usize,
        top: Vec<Edge>,
    ) -> Result<Self> {
        Self::with_cap(labels, sizes, order, top, DEFAULT_CELL_CAP)
    }

    pub fn with_cap(
        labels: Vec<String>,
        sizes: Vec<u64>,
        order: usize,
        top: Vec<Edge>,
        cap: u64,
    ) -> Result<Self> {
        if order < 1 {
            return Err(Error::InvalidSystem("order d must be at least 1".into()));
        }
        if labels.len() != sizes.len() {
            return Err(Error::InvalidSystem("labels and sizes differ in length".into()));
        }
        if labels.len() > u8::MAX as usize {
            return Err(Error::InvalidSystem("too many vertex classes".into()));
        }
        {
            let mut seen = BTreeSet::new();
            for l in &labels {
                if !seen.insert(l) {
                    return Err(Error::InvalidSystem(format!("duplicate label {l:?}")));
                }
            }
        }
        if let Some(i) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::InvalidSystem(format!(
                "vertex class {:?} is empty",
                labels[i]
            )));
        }
        for e in &top {
            if e.len() != order {
                return Err(Error::InvalidSystem(format!(
                    "top edge {e:?} is not {order}-uniform"
                )));
            }
            if e.iter().any(|j| usize::from(j) >= labels.len()) {
                return Err(Error::InvalidSystem(format!(
                    "top edge {e:?} references an unknown label"
                )));
            }
        }
        let total: u128 = sizes.iter().map(|&s| u128::from(s)).product();
        if total > u128::from(cap) {
            return Err(Error::CapExceeded { cells: total, cap });
        }
        let layers = down_closure(order, &top);
        Ok(HypergraphSystem { labels, sizes, order, layers, cap })
    }

    /// Parse the JSON description form.
    pub fn from_json(text: &str) -> Result<Self> {
        let file: SystemFile = serde_json::from_str(text)?;
        file.into_system(DEFAULT_CELL_CAP)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label_count(&self) -> usize {
        self.labels.len()
    }

    pub fn size(&self, j: u8) -> u64 {
        self.sizes[usize::from(j)]
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn cap(&self) -> u64 {
        self.cap
    }

    /// H_j in canonical order; empty slice above the top layer.
    pub fn layer(&self, j: usize) -> &[Edge] {
        if j < self.layers.len() {
            &self.layers[j]
        } else {
            &[]
        }
    }

    pub fn top_layer(&self) -> &[Edge] {
        &self.layers[self.order]
    }

    /// All of H = union of the layers, as (layer, edge) pairs, ascending layer
    /// then canonical edge order.
    pub fn all_edges(&self) -> impl Iterator<Item = (usize, &Edge)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(j, es)| es.iter().map(move |e| (j, e)))
    }

    pub fn edge_in_layers(&self, e: &Edge) -> bool {
        self.layer(e.len()).binary_search(e).is_ok()
    }

    /// The full label set as an edge.
    pub fn ground_edge(&self) -> Edge {
        Edge((0..self.labels.len() as u8).collect())
    }

    /// |V_e| as an unchecked product (validated against the cap at
    /// construction for any e ⊆ J).
    pub fn cells(&self, e: &Edge) -> u64 {
        e.iter().map(|j| self.size(j)).product()
    }

    fn strides(&self, e: &Edge) -> Vec<u64> {
        let k = e.len();
        let mut strides = vec![1u64; k];
        for i in (0..k.saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.size(e.indices()[i + 1]);
        }
        strides
    }

    /// Row-major rank of a coordinate tuple in `V_e`.
    pub fn point_index(&self, e: &Edge, coords: &[u32]) -> u64 {
        debug_assert_eq!(coords.len(), e.len());
        let strides = self.strides(e);
        coords
            .iter()
            .zip(strides.iter())
            .map(|(&c, &s)| u64::from(c) * s)
            .sum()
    }

    /// Coordinates of the point at the given row-major rank.
    pub fn point_coords(&self, e: &Edge, idx: u64) -> Vec<u32> {
        let strides = self.strides(e);
        e.indices()
            .iter()
            .zip(strides.iter())
            .map(|(&j, &s)| ((idx / s) % self.size(j)) as u32)
            .collect()
    }

    /// Index translator from `V_from` onto `V_to`, for `to ⊆ from`.
    pub fn projector(&self, from: &Edge, to: &Edge) -> Projector {
        debug_assert!(to.is_subset_of(from));
        let from_strides = self.strides(from);
        let to_strides = self.strides(to);
        let entries = to
            .indices()
            .iter()
            .enumerate()
            .map(|(ti, &j)| {
                let fi = from.indices().iter().position(|&x| x == j).expect("subset base");
                (from_strides[fi], self.size(j), to_strides[ti])
            })
            .collect();
        Projector { entries }
    }

    /// Stream the points of `V_e` in canonical row-major order.
    pub fn enumerate_points<'a>(&'a self, e: &'a Edge) -> impl Iterator<Item = Point> + 'a {
        (0..self.cells(e)).map(move |idx| Point {
            base: e.clone(),
            coords: self.point_coords(e, idx),
        })
    }

    /// Error unless `V_e` fits under the guardrail cap.
    pub fn check_cells(&self, e: &Edge) -> Result<u64> {
        let cells: u128 = e.iter().map(|j| u128::from(self.size(j))).product();
        if cells > u128::from(self.cap) {
            return Err(Error::CapExceeded { cells, cap: self.cap });
        }
        Ok(cells as u64)
    }

    /// Resolve a list of label strings to an edge.
    pub fn edge_of_labels(&self, labels: &[String]) -> Result<Edge> {
        let mut v = Vec::with_capacity(labels.len());
        for l in labels {
            let i = self
                .labels
                .iter()
                .position(|x| x == l)
                .ok_or_else(|| Error::InvalidSystem(format!("unknown label {l:?}")))?;
            v.push(i as u8);
        }
        Edge::new(v)
    }

    pub fn edge_labels(&self, e: &Edge) -> Vec<String> {
        e.iter().map(|j| self.labels[usize::from(j)].clone()).collect()
    }

    pub fn to_file(&self) -> SystemFile {
        SystemFile {
            labels: self.labels.clone(),
            sizes: self.sizes.clone(),
            d: self.order,
            top: self
                .top_layer()
                .iter()
                .map(|e| self.edge_labels(e))
                .collect(),
        }
    }
}

/// JSON description of a system. Unknown fields are rejected; labels may be
/// written as strings or integers.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemFile {
    #[serde(deserialize_with = "de_labels")]
    pub labels: Vec<String>,
    pub sizes: Vec<u64>,
    pub d: usize,
    #[serde(rename = "H_d", deserialize_with = "de_edges")]
    pub top: Vec<Vec<String>>,
}

impl SystemFile {
    pub fn into_system(self, cap: u64) -> Result<HypergraphSystem> {
        // Two-phase: build with an empty top to get label resolution, then
        // resolve the top edges against it.
        let shell = HypergraphSystem::with_cap(
            self.labels.clone(),
            self.sizes.clone(),
            self.d,
            Vec::new(),
            cap,
        )?;
        let mut top = Vec::with_capacity(self.top.len());
        for e in &self.top {
            top.push(shell.edge_of_labels(e)?);
        }
        HypergraphSystem::with_cap(self.labels, self.sizes, self.d, top, cap)
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum LabelValue {
    Int(i64),
    Str(String),
}

impl LabelValue {
    fn into_string(self) -> String {
        match self {
            LabelValue::Int(i) => i.to_string(),
            LabelValue::Str(s) => s,
        }
    }
}

fn de_labels<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Vec<String>, D::Error> {
    let raw: Vec<LabelValue> = Vec::deserialize(d)?;
    Ok(raw.into_iter().map(LabelValue::into_string).collect())
}

fn de_edges<'de, D: serde::Deserializer<'de>>(
    d: D,
) -> std::result::Result<Vec<Vec<String>>, D::Error> {
    let raw: Vec<Vec<LabelValue>> = Vec::deserialize(d)?;
    Ok(raw
        .into_iter()
        .map(|e| e.into_iter().map(LabelValue::into_string).collect())
        .collect())
}

/// A hypergraph over a ground set `K` together with a homomorphism onto the
/// system's edges. The projection is stored explicitly: after doubling, two
/// ground elements can share one label of `J`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bundle {
    ground: usize,
    projection: Vec<u8>, // ground element -> label index
    edges: Vec<Edge>,    // over ground indices, canonical order
}

impl Bundle {
    pub fn new(system: &HypergraphSystem, projection: Vec<u8>, edges: Vec<Edge>) -> Result<Self> {
        if projection.len() > u8::MAX as usize {
            return Err(Error::InvalidSystem("bundle ground set too large".into()));
        }
        for &l in &projection {
            if usize::from(l) >= system.label_count() {
                return Err(Error::InvalidSystem("bundle projects onto an unknown label".into()));
            }
        }
        let set: BTreeSet<Edge> = edges.into_iter().collect();
        for g in &set {
            if g.iter().any(|k| usize::from(k) >= projection.len()) {
                return Err(Error::InvalidSystem(format!(
                    "bundle edge {g:?} leaves the ground set"
                )));
            }
            // Homomorphism: injective on the edge, image in H.
            let image: Vec<u8> = g.iter().map(|k| projection[usize::from(k)]).collect();
            let image = Edge::new(image).map_err(|_| {
                Error::InvalidSystem(format!("projection is not injective on bundle edge {g:?}"))
            })?;
            if !system.edge_in_layers(&image) {
                return Err(Error::InvalidSystem(format!(
                    "bundle edge {g:?} projects to {image:?}, which is not an edge of the system"
                )));
            }
            // Inclusion closure: dropping any one element stays inside.
            for sub in g.skeleton() {
                if !set.contains(&sub) {
                    return Err(Error::InvalidSystem(format!(
                        "bundle is not closed under set inclusion: {sub:?} missing below {g:?}"
                    )));
                }
            }
        }
        Ok(Bundle {
            ground: projection.len(),
            projection,
            edges: set.into_iter().collect(),
        })
    }

    pub fn ground_size(&self) -> usize {
        self.ground
    }

    pub fn projection(&self) -> &[u8] {
        &self.projection
    }

    pub fn label_of(&self, k: u8) -> u8 {
        self.projection[usize::from(k)]
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// sup |g| over the edges.
    pub fn order(&self) -> usize {
        self.edges.iter().map(Edge::len).max().unwrap_or(0)
    }

    /// |V_K| with the guardrail applied.
    pub fn cells(&self, system: &HypergraphSystem) -> Result<u64> {
        let cells: u128 = self
            .projection
            .iter()
            .map(|&l| u128::from(system.size(l)))
            .product();
        if cells > u128::from(system.cap()) {
            return Err(Error::CapExceeded { cells, cap: system.cap() });
        }
        Ok(cells as u64)
    }

    /// The bundle over `K ⊕_{g0} K`: two copies of the ground glued along a
    /// maximal edge `g0`. Edges of top order other than the identified copies
    /// of edges inside `g0` are dropped; every lower-order edge not inside
    /// `g0` is duplicated, one copy per side.
    pub fn double(&self, system: &HypergraphSystem, g0: &Edge) -> Result<Bundle> {
        let top = self.order();
        if self.edges.binary_search(g0).is_err() {
            return Err(Error::Precondition(format!("{g0:?} is not an edge of the bundle")));
        }
        if g0.len() != top {
            return Err(Error::Precondition(format!(
                "{g0:?} has size {}, not the bundle's top order {top}",
                g0.len()
            )));
        }
        let n = self.ground;
        let outside: Vec<u8> = (0..n as u8).filter(|k| !g0.contains(*k)).collect();
        if 2 * n - g0.len() > u8::MAX as usize {
            return Err(Error::InvalidSystem("doubled ground set too large".into()));
        }
        // copy 0 keeps its indices; copy 1 of an element outside g0 gets a
        // fresh index after the originals.
        let mut copy1 = vec![0u8; n];
        for k in 0..n as u8 {
            copy1[usize::from(k)] = k;
        }
        let mut projection = self.projection.clone();
        for (r, &k) in outside.iter().enumerate() {
            copy1[usize::from(k)] = (n + r) as u8;
            projection.push(self.projection[usize::from(k)]);
        }

        let mut edges = BTreeSet::new();
        for g in &self.edges {
            if g.is_subset_of(g0) && g != g0 {
                edges.insert(g.clone());
            } else if g.len() + 1 <= top {
                // g not strictly inside g0, of order at most top-1: both copies.
                edges.insert(g.clone());
                let mirrored: Vec<u8> = g.iter().map(|k| copy1[usize::from(k)]).collect();
                edges.insert(Edge::new(mirrored).expect("copy map is injective"));
            }
        }
        Bundle::new(system, projection, edges.into_iter().collect())
    }
}
