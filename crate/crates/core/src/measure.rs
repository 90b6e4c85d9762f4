//! Sets, partitions, conditional expectation, density, and energy.
//!
//! A cylinder set lives on a base edge and is stored as a bit-vector over the
//! base's product space in canonical point order; lifted to the full space it
//! depends only on the base coordinates, so densities and expectations can be
//! computed on the smallest sufficient base by weighting instead of
//! materializing the full space. Partitions carry a tracked complexity bound
//! (the number of generator sets along their construction), which is an upper
//! bound on the minimal generator count; all complexity accounting elsewhere
//! refers to this tracked bound.
//!
//! Every count underlying a density, conditional expectation, or energy is an
//! exact integer; the `f64` values divide those integers at the last step, and
//! the `exact` submodule assembles the same counts into arbitrary-precision
//! rationals for the exact-rational mode.

use std::collections::HashMap;

use fixedbitset::FixedBitSet;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::system::{Edge, HypergraphSystem, Projector};

/// A subset of `V_e` for some base edge `e`, i.e. a cylinder set on the full
/// space whose membership depends only on the base coordinates.
#[derive(Clone, PartialEq, Eq)]
pub struct CylinderSet {
    base: Edge,
    bits: FixedBitSet,
}

impl std::fmt::Debug for CylinderSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "CylinderSet({:?}, {}/{})", self.base, self.bits.count_ones(..), self.bits.len())
    }
}

impl CylinderSet {
    pub fn empty(system: &HypergraphSystem, base: Edge) -> Self {
        let cells = system.cells(&base) as usize;
        CylinderSet { base, bits: FixedBitSet::with_capacity(cells) }
    }

    pub fn full(system: &HypergraphSystem, base: Edge) -> Self {
        let mut s = Self::empty(system, base);
        s.bits.insert_range(..);
        s
    }

    pub fn from_indices(
        system: &HypergraphSystem,
        base: Edge,
        indices: impl IntoIterator<Item = u64>,
    ) -> Self {
        let mut s = Self::empty(system, base);
        for i in indices {
            s.bits.insert(i as usize);
        }
        s
    }

    pub fn base(&self) -> &Edge {
        &self.base
    }

    pub fn cells(&self) -> u64 {
        self.bits.len() as u64
    }

    pub fn len(&self) -> u64 {
        self.bits.count_ones(..) as u64
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains_index(&self, idx: u64) -> bool {
        self.bits.contains(idx as usize)
    }

    pub fn insert_index(&mut self, idx: u64) {
        self.bits.insert(idx as usize);
    }

    pub fn remove_index(&mut self, idx: u64) {
        self.bits.remove(idx as usize);
    }

    pub fn iter_indices(&self) -> impl Iterator<Item = u64> + '_ {
        self.bits.ones().map(|i| i as u64)
    }

    pub fn complement(&self) -> Self {
        let mut bits = self.bits.clone();
        bits.toggle_range(..);
        CylinderSet { base: self.base.clone(), bits }
    }

    /// Intersection of two sets on the same base.
    pub fn intersect(&self, other: &Self) -> Result<Self> {
        self.check_same_base(other)?;
        let mut bits = self.bits.clone();
        bits.intersect_with(&other.bits);
        Ok(CylinderSet { base: self.base.clone(), bits })
    }

    /// Set difference on the same base.
    pub fn minus(&self, other: &Self) -> Result<Self> {
        self.check_same_base(other)?;
        let mut bits = self.bits.clone();
        bits.difference_with(&other.bits);
        Ok(CylinderSet { base: self.base.clone(), bits })
    }

    fn check_same_base(&self, other: &Self) -> Result<()> {
        if self.base != other.base {
            return Err(Error::BaseMismatch {
                expected: format!("{:?}", self.base),
                found: format!("{:?}", other.base),
            });
        }
        Ok(())
    }

    /// Re-express the set on a larger base containing the current one.
    pub fn lifted_to(&self, system: &HypergraphSystem, base: &Edge) -> Self {
        assert!(self.base.is_subset_of(base), "lift target must contain the base");
        if *base == self.base {
            return self.clone();
        }
        let proj = system.projector(base, &self.base);
        let cells = system.cells(base);
        let mut out = CylinderSet::empty(system, base.clone());
        for idx in 0..cells {
            if self.contains_index(proj.map(idx)) {
                out.insert_index(idx);
            }
        }
        out
    }

    /// Density within the base space, which equals the lifted density.
    pub fn density(&self) -> f64 {
        if self.cells() == 0 {
            return 0.0;
        }
        self.len() as f64 / self.cells() as f64
    }

    pub fn to_file(&self, system: &HypergraphSystem) -> CylinderSetFile {
        CylinderSetFile {
            base: system.edge_labels(&self.base),
            points: self
                .iter_indices()
                .map(|i| system.point_coords(&self.base, i))
                .collect(),
        }
    }

    pub fn from_file(system: &HypergraphSystem, file: &CylinderSetFile) -> Result<Self> {
        let base = system.edge_of_labels(&file.base)?;
        let mut out = CylinderSet::empty(system, base.clone());
        for coords in &file.points {
            if coords.len() != base.len() {
                return Err(Error::InvalidSystem(format!(
                    "point {coords:?} does not match base {base:?}"
                )));
            }
            for (c, j) in coords.iter().zip(base.iter()) {
                if u64::from(*c) >= system.size(j) {
                    return Err(Error::InvalidSystem(format!(
                        "coordinate {c} out of range for label index {j}"
                    )));
                }
            }
            out.insert_index(system.point_index(&base, coords));
        }
        Ok(out)
    }
}

/// File form of a cylinder set: member points in canonical order.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CylinderSetFile {
    pub base: Vec<String>,
    pub points: Vec<Vec<u32>>,
}

/// A partition of `V_e` (a sub-σ-algebra of the cylinder algebra on `e`),
/// with a tracked generator-count bound.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FactorAlgebra {
    base: Edge,
    labels: Vec<u32>,
    atom_count: u32,
    complexity_bound: u32,
}

impl FactorAlgebra {
    /// The trivial partition: one atom, complexity 0.
    pub fn trivial(system: &HypergraphSystem, base: Edge) -> Self {
        let cells = system.cells(&base) as usize;
        FactorAlgebra { base, labels: vec![0; cells], atom_count: 1, complexity_bound: 0 }
    }

    /// The discrete partition on the base: every point its own atom. The
    /// tracked bound is the generator count of a binary encoding.
    pub fn discrete(system: &HypergraphSystem, base: Edge) -> Self {
        let cells = system.cells(&base) as usize;
        let labels: Vec<u32> = (0..cells as u32).collect();
        let bound = if cells <= 1 { 0 } else { (usize::BITS - (cells - 1).leading_zeros()) as u32 };
        FactorAlgebra { base, labels, atom_count: cells.max(1) as u32, complexity_bound: bound }
    }

    /// Generate from a family of sets on the shared base: atoms are the
    /// distinct intersection signatures of the generators.
    pub fn generate(
        system: &HypergraphSystem,
        base: Edge,
        generators: &[CylinderSet],
    ) -> Result<Self> {
        for g in generators {
            if *g.base() != base {
                return Err(Error::BaseMismatch {
                    expected: format!("{base:?}"),
                    found: format!("{:?}", g.base()),
                });
            }
        }
        let cells = system.cells(&base) as usize;
        let mut signature = vec![0u64; cells];
        if generators.len() > 63 {
            return Err(Error::Config("more than 63 generators in one call".into()));
        }
        for (gi, g) in generators.iter().enumerate() {
            for idx in g.iter_indices() {
                signature[idx as usize] |= 1u64 << gi;
            }
        }
        let (labels, atom_count) = relabel(&signature);
        let complexity_bound = if atom_count <= 1 { 0 } else { generators.len() as u32 };
        Ok(FactorAlgebra { base, labels, atom_count, complexity_bound })
    }

    /// The algebra generated by a single set.
    pub fn from_set(system: &HypergraphSystem, set: &CylinderSet) -> Self {
        Self::generate(system, set.base().clone(), std::slice::from_ref(set))
            .expect("base matches by construction")
    }

    /// Join with the algebra generated by one more set; the tracked bound
    /// grows by at most one, and not at all if the partition is unchanged.
    pub fn refine_with_set(&self, set: &CylinderSet) -> Result<Self> {
        if *set.base() != self.base {
            return Err(Error::BaseMismatch {
                expected: format!("{:?}", self.base),
                found: format!("{:?}", set.base()),
            });
        }
        let mut signature = vec![0u64; self.labels.len()];
        for (i, &l) in self.labels.iter().enumerate() {
            signature[i] = (u64::from(l) << 1) | u64::from(set.contains_index(i as u64));
        }
        let (labels, atom_count) = relabel(&signature);
        if atom_count == self.atom_count {
            // No atom split: the generated algebra was already contained.
            return Ok(self.clone());
        }
        Ok(FactorAlgebra {
            base: self.base.clone(),
            labels,
            atom_count,
            complexity_bound: self.complexity_bound + 1,
        })
    }

    pub fn base(&self) -> &Edge {
        &self.base
    }

    pub fn atom_count(&self) -> u32 {
        self.atom_count
    }

    pub fn complexity_bound(&self) -> u32 {
        self.complexity_bound
    }

    pub fn label_of_index(&self, idx: u64) -> u32 {
        self.labels[idx as usize]
    }

    /// The atom with the given label as a cylinder set on the base.
    pub fn atom(&self, system: &HypergraphSystem, label: u32) -> CylinderSet {
        let mut out = CylinderSet::empty(system, self.base.clone());
        for (i, &l) in self.labels.iter().enumerate() {
            if l == label {
                out.insert_index(i as u64);
            }
        }
        out
    }

    pub fn atoms<'a>(
        &'a self,
        system: &'a HypergraphSystem,
    ) -> impl Iterator<Item = CylinderSet> + 'a {
        (0..self.atom_count).map(move |l| self.atom(system, l))
    }

    /// True when every atom of `self` sits inside an atom of `coarser`.
    pub fn refines(&self, coarser: &FactorAlgebra) -> bool {
        if self.base != coarser.base {
            return false;
        }
        let mut seen: Vec<Option<u32>> = vec![None; self.atom_count as usize];
        for (i, &l) in self.labels.iter().enumerate() {
            let c = coarser.labels[i];
            match seen[l as usize] {
                None => seen[l as usize] = Some(c),
                Some(prev) if prev != c => return false,
                _ => {}
            }
        }
        true
    }

    pub fn same_partition(&self, other: &FactorAlgebra) -> bool {
        self.base == other.base && self.refines(other) && other.refines(self)
    }

    /// True when the set is a union of atoms.
    pub fn measures(&self, set: &CylinderSet) -> bool {
        if *set.base() != self.base {
            return false;
        }
        let mut status: Vec<Option<bool>> = vec![None; self.atom_count as usize];
        for (i, &l) in self.labels.iter().enumerate() {
            let inside = set.contains_index(i as u64);
            match status[l as usize] {
                None => status[l as usize] = Some(inside),
                Some(prev) if prev != inside => return false,
                _ => {}
            }
        }
        true
    }
}

fn relabel(signature: &[u64]) -> (Vec<u32>, u32) {
    let mut dense: HashMap<u64, u32> = HashMap::new();
    let mut labels = Vec::with_capacity(signature.len());
    for &s in signature {
        let next = dense.len() as u32;
        let l = *dense.entry(s).or_insert(next);
        labels.push(l);
    }
    (labels, dense.len().max(1) as u32)
}

/// A join `∨ B_f` of factor algebras over possibly different base edges,
/// viewed as a partition of the full space. The atom of a point is the tuple
/// of factor labels of its projections.
#[derive(Clone, Debug, Default)]
pub struct JoinAlgebra {
    factors: Vec<FactorAlgebra>,
}

impl JoinAlgebra {
    pub fn new(factors: Vec<FactorAlgebra>) -> Self {
        JoinAlgebra { factors }
    }

    /// The trivial algebra on the full space.
    pub fn trivial() -> Self {
        JoinAlgebra { factors: Vec::new() }
    }

    pub fn factors(&self) -> &[FactorAlgebra] {
        &self.factors
    }

    /// Tracked complexity bound: at most the sum of the factor bounds.
    pub fn complexity_bound(&self) -> u64 {
        self.factors.iter().map(|f| u64::from(f.complexity_bound())).sum()
    }

    pub fn base_union(&self) -> Edge {
        self.factors
            .iter()
            .fold(Edge::empty(), |acc, f| acc.union(f.base()))
    }

    /// Atom structure over an evaluation base containing every factor base.
    pub fn table(&self, system: &HypergraphSystem, extra: &Edge) -> Result<AtomTable> {
        let base = self.base_union().union(extra);
        let cells = system.check_cells(&base)?;
        let projs: Vec<(Projector, &FactorAlgebra)> = self
            .factors
            .iter()
            .map(|f| (system.projector(&base, f.base()), f))
            .collect();
        let mut radix_ok = true;
        let mut radix: u128 = 1;
        for f in &self.factors {
            radix = radix.saturating_mul(u128::from(f.atom_count()));
            if radix > u128::from(u64::MAX) {
                radix_ok = false;
                break;
            }
        }
        let mut dense: HashMap<u64, u32> = HashMap::new();
        let mut wide: HashMap<Vec<u32>, u32> = HashMap::new();
        let mut atom_of = Vec::with_capacity(cells as usize);
        let mut sizes: Vec<u64> = Vec::new();
        for idx in 0..cells {
            let id = if radix_ok {
                let mut key: u64 = 0;
                for (proj, f) in &projs {
                    key = key * u64::from(f.atom_count()) + u64::from(f.label_of_index(proj.map(idx)));
                }
                let next = dense.len() as u32;
                *dense.entry(key).or_insert(next)
            } else {
                let key: Vec<u32> = projs
                    .iter()
                    .map(|(proj, f)| f.label_of_index(proj.map(idx)))
                    .collect();
                let next = wide.len() as u32;
                *wide.entry(key).or_insert(next)
            };
            if id as usize == sizes.len() {
                sizes.push(0);
            }
            sizes[id as usize] += 1;
            atom_of.push(id);
        }
        Ok(AtomTable { base, atom_of, sizes })
    }
}

/// Dense atom assignment of a join over an evaluation base: atom ids are
/// contiguous and assigned by first occurrence in canonical point order.
#[derive(Clone, Debug)]
pub struct AtomTable {
    base: Edge,
    atom_of: Vec<u32>,
    sizes: Vec<u64>,
}

impl AtomTable {
    pub fn base(&self) -> &Edge {
        &self.base
    }

    pub fn atom_count(&self) -> usize {
        self.sizes.len()
    }

    pub fn cells(&self) -> u64 {
        self.atom_of.len() as u64
    }

    #[inline]
    pub fn atom_of(&self, idx: u64) -> u32 {
        self.atom_of[idx as usize]
    }

    pub fn size(&self, atom: u32) -> u64 {
        self.sizes[atom as usize]
    }
}

/// Conditional expectation of an indicator with respect to a join: per-atom
/// hit counts over the atom table's base. Values are only defined on
/// non-empty atoms, and every atom of the table is non-empty by construction.
#[derive(Clone, Debug)]
pub struct Conditional {
    table: AtomTable,
    hits: Vec<u64>,
}

impl Conditional {
    pub fn table(&self) -> &AtomTable {
        &self.table
    }

    pub fn hits(&self, atom: u32) -> u64 {
        self.hits[atom as usize]
    }

    /// E(1_E | B) on the atom, in [0, 1].
    pub fn value(&self, atom: u32) -> f64 {
        self.hits[atom as usize] as f64 / self.table.sizes[atom as usize] as f64
    }

    #[inline]
    pub fn value_at(&self, idx: u64) -> f64 {
        self.value(self.table.atom_of(idx))
    }

    /// The residual 1_E − E(1_E|B) at a point of the evaluation base.
    #[inline]
    pub fn residual_at(&self, set_lifted: &CylinderSet, idx: u64) -> f64 {
        f64::from(u8::from(set_lifted.contains_index(idx))) - self.value_at(idx)
    }
}

/// Density of a cylinder set in the full space.
pub fn density(set: &CylinderSet) -> f64 {
    set.density()
}

/// Conditional expectation of `1_E` with respect to the join, evaluated on
/// the union of the set's base and the join's bases.
pub fn cond_expect(
    system: &HypergraphSystem,
    set: &CylinderSet,
    algebra: &JoinAlgebra,
) -> Result<Conditional> {
    let table = algebra.table(system, set.base())?;
    let proj = system.projector(&table.base, set.base());
    let mut hits = vec![0u64; table.atom_count()];
    for idx in 0..table.cells() {
        if set.contains_index(proj.map(idx)) {
            hits[table.atom_of(idx) as usize] += 1;
        }
    }
    Ok(Conditional { table, hits })
}

/// The energy E(|E(1_E|B)|²) of a join with respect to a set.
pub fn energy(
    system: &HypergraphSystem,
    set: &CylinderSet,
    algebra: &JoinAlgebra,
) -> Result<f64> {
    let cond = cond_expect(system, set, algebra)?;
    Ok(energy_of(&cond))
}

pub fn energy_of(cond: &Conditional) -> f64 {
    let cells = cond.table.cells() as f64;
    cond.hits
        .iter()
        .zip(cond.table.sizes.iter())
        .map(|(&h, &s)| (h as f64) * (h as f64) / (s as f64) / cells)
        .sum()
}

/// E(|E(1_E|fine) − E(1_E|coarse)|²), the exact energy gained by refining.
pub fn refinement_gap(
    system: &HypergraphSystem,
    set: &CylinderSet,
    coarse: &JoinAlgebra,
    fine: &JoinAlgebra,
) -> Result<f64> {
    let base = coarse
        .base_union()
        .union(&fine.base_union())
        .union(set.base());
    let coarse_tab = coarse.table(system, &base)?;
    let fine_tab = fine.table(system, &base)?;
    let proj = system.projector(&base, set.base());
    let cells = coarse_tab.cells();
    let mut coarse_hits = vec![0u64; coarse_tab.atom_count()];
    let mut fine_hits = vec![0u64; fine_tab.atom_count()];
    for idx in 0..cells {
        if set.contains_index(proj.map(idx)) {
            coarse_hits[coarse_tab.atom_of(idx) as usize] += 1;
            fine_hits[fine_tab.atom_of(idx) as usize] += 1;
        }
    }
    let mut sum = 0.0;
    for idx in 0..cells {
        let a = coarse_tab.atom_of(idx) as usize;
        let b = fine_tab.atom_of(idx) as usize;
        let d = fine_hits[b] as f64 / fine_tab.sizes[b] as f64
            - coarse_hits[a] as f64 / coarse_tab.sizes[a] as f64;
        sum += d * d;
    }
    Ok(sum / cells as f64)
}

/// Exact-rational counterparts, for instances small enough to enumerate with
/// arbitrary-precision arithmetic.
pub mod exact {
    use num::BigRational;
    use num::{BigInt, Zero};

    use super::*;

    fn ratio(n: u64, d: u64) -> BigRational {
        BigRational::new(BigInt::from(n), BigInt::from(d))
    }

    pub fn density(set: &CylinderSet) -> BigRational {
        if set.cells() == 0 {
            return BigRational::zero();
        }
        ratio(set.len(), set.cells())
    }

    /// Per-atom conditional expectation values, exactly.
    pub fn cond_values(cond: &Conditional) -> Vec<BigRational> {
        (0..cond.table().atom_count() as u32)
            .map(|a| ratio(cond.hits(a), cond.table().size(a)))
            .collect()
    }

    pub fn energy(
        system: &HypergraphSystem,
        set: &CylinderSet,
        algebra: &JoinAlgebra,
    ) -> Result<BigRational> {
        let cond = cond_expect(system, set, algebra)?;
        Ok(energy_of(&cond))
    }

    pub fn energy_of(cond: &Conditional) -> BigRational {
        let cells = BigInt::from(cond.table().cells());
        let mut sum = BigRational::zero();
        for a in 0..cond.table().atom_count() as u32 {
            let h = BigInt::from(cond.hits(a));
            let s = BigInt::from(cond.table().size(a));
            sum += BigRational::new(&h * &h, s * &cells);
        }
        sum
    }

    /// Exact E(|E(1_E|fine) − E(1_E|coarse)|²).
    pub fn refinement_gap(
        system: &HypergraphSystem,
        set: &CylinderSet,
        coarse: &JoinAlgebra,
        fine: &JoinAlgebra,
    ) -> Result<BigRational> {
        let base = coarse
            .base_union()
            .union(&fine.base_union())
            .union(set.base());
        let coarse_cond = with_base(system, set, coarse, &base)?;
        let fine_cond = with_base(system, set, fine, &base)?;
        let coarse_vals = cond_values(&coarse_cond);
        let fine_vals = cond_values(&fine_cond);
        let cells = coarse_cond.table().cells();
        let mut sum = BigRational::zero();
        for idx in 0..cells {
            let d = &fine_vals[fine_cond.table().atom_of(idx) as usize]
                - &coarse_vals[coarse_cond.table().atom_of(idx) as usize];
            sum += &d * &d;
        }
        Ok(sum / BigRational::from(BigInt::from(cells)))
    }

    /// Conditional expectation evaluated over a caller-chosen base.
    pub fn with_base(
        system: &HypergraphSystem,
        set: &CylinderSet,
        algebra: &JoinAlgebra,
        base: &Edge,
    ) -> Result<Conditional> {
        let table = algebra.table(system, base)?;
        let proj = system.projector(table.base(), set.base());
        let mut hits = vec![0u64; table.atom_count()];
        for idx in 0..table.cells() {
            if set.contains_index(proj.map(idx)) {
                hits[table.atom_of(idx) as usize] += 1;
            }
        }
        Ok(Conditional { table, hits })
    }
}
