//! Good-atom classification, bad sets, the main/error-term decomposition of
//! an atom's indicator, and numerical counting checks including the bundle
//! generalization and its doubling identity.
//!
//! An atom tuple picks one atom per edge of the full down-closed hypergraph:
//! from the supplied top algebras on the top layer and from the coarse
//! algebras of a regularity decomposition below. A tuple is good when every
//! edge passes a largeness estimate (the atom covers a definite fraction of
//! its skeleton box, with threshold 1/log F(M_j)) and a regularity estimate
//! (the fine-vs-coarse conditional expectations differ little in mean square
//! over the lower box, with threshold 1/F(M_j)). The counting check then
//! compares the joint density of the tuple, measured by direct enumeration,
//! against the product of the conditional densities p_e.

use std::collections::BTreeMap;

use num::{BigInt, BigRational, One, Zero};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::measure::{cond_expect, CylinderSet, FactorAlgebra, JoinAlgebra};
use crate::regularity::{GrowthFunction, RegularityDecomposition};
use crate::system::{Bundle, Edge, HypergraphSystem};

/// Pass/fail state of the two good-atom conditions at one edge. When the
/// skeleton box is empty both conditions hold vacuously and the atom is good
/// by vacuity there.
#[derive(Clone, Copy, Debug, Serialize, PartialEq, Eq)]
pub struct ConditionFlags {
    pub largeness: bool,
    pub regularity: bool,
    pub vacuous: bool,
}

impl ConditionFlags {
    pub fn good(&self) -> bool {
        self.largeness && self.regularity
    }
}

/// One atom tuple with its conditional densities, flags, and joint density.
#[derive(Clone, Debug, Serialize)]
pub struct AtomProfile {
    /// Atom label per edge, keyed by the edge's label list.
    pub atoms: BTreeMap<String, u32>,
    /// p_e = E(1_{A_e} | skeleton box), with p_e = 1 on an empty box.
    pub p: BTreeMap<String, f64>,
    pub flags: BTreeMap<String, ConditionFlags>,
    /// E(prod_e 1_{A_e}) over the full space, by direct enumeration.
    pub joint_density: f64,
    pub good: bool,
}

fn edge_key(system: &HypergraphSystem, e: &Edge) -> String {
    system.edge_labels(e).join(",")
}

/// An atom tuple: one atom label per edge of the down-closed hypergraph.
pub type AtomTuple = BTreeMap<Edge, u32>;

/// The supplied top algebras for the top layer and the decomposition's
/// coarse algebras below.
fn algebra_of<'a>(
    system: &HypergraphSystem,
    decomp: &'a RegularityDecomposition,
    tops: &'a BTreeMap<Edge, FactorAlgebra>,
    e: &Edge,
) -> Result<&'a FactorAlgebra> {
    decomp
        .algebra_for(tops, e, system.order())
        .ok_or_else(|| Error::Precondition(format!("no algebra available for edge {e:?}")))
}

/// Enumerate every atom tuple of the joined system in canonical order.
pub fn atom_tuples(
    system: &HypergraphSystem,
    decomp: &RegularityDecomposition,
    tops: &BTreeMap<Edge, FactorAlgebra>,
) -> Result<Vec<AtomTuple>> {
    let edges: Vec<(Edge, u32)> = system
        .all_edges()
        .map(|(_, e)| {
            algebra_of(system, decomp, tops, e).map(|alg| (e.clone(), alg.atom_count()))
        })
        .collect::<Result<_>>()?;
    let total: u128 = edges.iter().map(|(_, c)| u128::from(*c)).product();
    if total > u128::from(system.cap()) {
        return Err(Error::CapExceeded { cells: total, cap: system.cap() });
    }
    let mut out = Vec::with_capacity(total as usize);
    let mut current: AtomTuple = edges.iter().map(|(e, _)| (e.clone(), 0)).collect();
    loop {
        out.push(current.clone());
        // Odometer over the edges in canonical order, last edge fastest.
        let mut done = true;
        for (e, count) in edges.iter().rev() {
            let slot = current.get_mut(e).expect("tuple covers all edges");
            if *slot + 1 < *count {
                *slot += 1;
                done = false;
                break;
            }
            *slot = 0;
        }
        if done {
            return Ok(out);
        }
    }
}

/// Check F(M_j) > e on every layer, so the largeness threshold 1/log F(M_j)
/// is positive and finite where F is, and collect the thresholds.
fn layer_thresholds(
    decomp: &RegularityDecomposition,
    growth: &GrowthFunction,
) -> Result<Vec<(f64, f64)>> {
    let mut out = Vec::with_capacity(decomp.thresholds.len());
    for (j, &m) in decomp.thresholds.iter().enumerate() {
        let fm = growth.eval(m)?;
        if fm <= std::f64::consts::E {
            return Err(Error::Config(format!(
                "F(M_{j}) = {fm} must exceed e for the largeness threshold to make sense"
            )));
        }
        out.push((1.0 / fm.ln(), 1.0 / fm));
    }
    Ok(out)
}

/// Classify one atom tuple against the good-atom conditions at every edge.
pub fn classify_atom(
    system: &HypergraphSystem,
    decomp: &RegularityDecomposition,
    tops: &BTreeMap<Edge, FactorAlgebra>,
    growth: &GrowthFunction,
    tuple: &AtomTuple,
) -> Result<AtomProfile> {
    let thresholds = layer_thresholds(decomp, growth)?;
    let mut atoms = BTreeMap::new();
    let mut p = BTreeMap::new();
    let mut flags = BTreeMap::new();
    let mut good = true;

    for (j, e) in system.all_edges() {
        let label = *tuple
            .get(e)
            .ok_or_else(|| Error::Precondition(format!("tuple misses edge {e:?}")))?;
        let algebra = algebra_of(system, decomp, tops, e)?;
        if label >= algebra.atom_count() {
            return Err(Error::Precondition(format!("atom label {label} out of range on {e:?}")));
        }
        let atom = algebra.atom(system, label);
        let (large_thresh, reg_thresh) = thresholds[j];

        let stats = edge_statistics(system, decomp, tops, tuple, e, &atom)?;
        let vacuous = stats.skeleton_box == 0;
        let largeness = stats.atom_and_box as f64 >= large_thresh * stats.skeleton_box as f64;
        let regularity =
            stats.sq_gap_over_lower <= reg_thresh * (stats.lower_box as f64 / stats.cells as f64)
                + f64::EPSILON * stats.lower_box as f64;
        let p_e = if vacuous {
            1.0
        } else {
            stats.atom_and_box as f64 / stats.skeleton_box as f64
        };
        let flag = ConditionFlags { largeness, regularity, vacuous };
        good &= flag.good();
        let key = edge_key(system, e);
        atoms.insert(key.clone(), label);
        p.insert(key.clone(), p_e);
        flags.insert(key, flag);
    }

    let joint_density = joint_density(system, decomp, tops, tuple)?;
    Ok(AtomProfile { atoms, p, flags, joint_density, good })
}

struct EdgeStatistics {
    cells: u64,
    /// |skeleton box| within V_e: points whose skeleton-face atoms match.
    skeleton_box: u64,
    /// |A_e ∩ skeleton box| within V_e.
    atom_and_box: u64,
    /// |lower box| within V_e: all proper-subset atoms match.
    lower_box: u64,
    /// E(|fine − coarse|² · 1_{lower box}) over the full space.
    sq_gap_over_lower: f64,
}

fn edge_statistics(
    system: &HypergraphSystem,
    decomp: &RegularityDecomposition,
    tops: &BTreeMap<Edge, FactorAlgebra>,
    tuple: &AtomTuple,
    e: &Edge,
    atom: &CylinderSet,
) -> Result<EdgeStatistics> {
    let cells = system.cells(e);
    // Lower atoms as (projector onto the face, atom label, algebra), split
    // into the skeleton faces and all proper subsets.
    let skeleton = e.skeleton();
    let lower_edges = e.proper_subsets();
    let mut member = Vec::new();
    for f in &lower_edges {
        let label = *tuple
            .get(f)
            .ok_or_else(|| Error::Precondition(format!("tuple misses edge {f:?}")))?;
        let algebra = algebra_of(system, decomp, tops, f)?;
        member.push((system.projector(e, f), algebra.clone(), label, skeleton.contains(f)));
    }
    let coarse_cond = cond_expect(system, atom, &decomp.coarse_join(e))?;
    let fine_cond = cond_expect(system, atom, &decomp.fine_join(e))?;
    let coarse_proj = system.projector(e, coarse_cond.table().base());
    let fine_proj = system.projector(e, fine_cond.table().base());

    let mut skeleton_box = 0u64;
    let mut atom_and_box = 0u64;
    let mut lower_box = 0u64;
    let mut sq_sum = 0.0f64;
    for idx in 0..cells {
        let mut in_skeleton = true;
        let mut in_lower = true;
        for (proj, algebra, label, on_skeleton) in &member {
            if algebra.label_of_index(proj.map(idx)) != *label {
                in_lower = false;
                if *on_skeleton {
                    in_skeleton = false;
                }
                if !in_skeleton {
                    break;
                }
            }
        }
        if in_skeleton {
            skeleton_box += 1;
            if atom.contains_index(idx) {
                atom_and_box += 1;
            }
        }
        if in_lower {
            lower_box += 1;
            let b = fine_cond.value_at(fine_proj.map(idx))
                - coarse_cond.value_at(coarse_proj.map(idx));
            sq_sum += b * b;
        }
    }
    Ok(EdgeStatistics {
        cells,
        skeleton_box,
        atom_and_box,
        lower_box,
        sq_gap_over_lower: sq_sum / cells as f64,
    })
}

/// E(prod_{e} 1_{A_e}) by direct enumeration of the full space.
pub fn joint_density(
    system: &HypergraphSystem,
    decomp: &RegularityDecomposition,
    tops: &BTreeMap<Edge, FactorAlgebra>,
    tuple: &AtomTuple,
) -> Result<f64> {
    let (hits, cells) = joint_count(system, decomp, tops, tuple)?;
    Ok(hits as f64 / cells as f64)
}

fn joint_count(
    system: &HypergraphSystem,
    decomp: &RegularityDecomposition,
    tops: &BTreeMap<Edge, FactorAlgebra>,
    tuple: &AtomTuple,
) -> Result<(u64, u64)> {
    let ground = system.ground_edge();
    let cells = system.check_cells(&ground)?;
    let mut tests = Vec::new();
    for (_, e) in system.all_edges() {
        let label = *tuple
            .get(e)
            .ok_or_else(|| Error::Precondition(format!("tuple misses edge {e:?}")))?;
        let algebra = algebra_of(system, decomp, tops, e)?;
        tests.push((system.projector(&ground, e), algebra.clone(), label));
    }
    let mut hits = 0u64;
    'points: for idx in 0..cells {
        for (proj, algebra, label) in &tests {
            if algebra.label_of_index(proj.map(idx)) != *label {
                continue 'points;
            }
        }
        hits += 1;
    }
    Ok((hits, cells))
}

/// The region below one atom where a good-atom condition fails: a union of
/// lower-tuple boxes, measurable in the join of the coarse algebras over the
/// proper subsets of the edge.
#[derive(Clone, Debug)]
pub struct BadSet {
    pub edge: Edge,
    pub atom: u32,
    /// Union of the failing boxes, on the union of the proper-subset bases.
    pub region: CylinderSet,
}

impl BadSet {
    /// E(1_{A_e} · 1_region) over the full space.
    pub fn mass_with(&self, system: &HypergraphSystem, atom: &CylinderSet) -> f64 {
        let base = self.region.base().union(atom.base());
        let cells = system.cells(&base);
        let to_region = system.projector(&base, self.region.base());
        let to_atom = system.projector(&base, atom.base());
        let mut hits = 0u64;
        for idx in 0..cells {
            if self.region.contains_index(to_region.map(idx))
                && atom.contains_index(to_atom.map(idx))
            {
                hits += 1;
            }
        }
        hits as f64 / cells as f64
    }
}

/// Compute the bad set of one (edge, atom) pair by scanning every lower
/// tuple: a box goes into the region when the largeness estimate fails on
/// its skeleton part or the regularity estimate fails on the full lower
/// tuple.
pub fn bad_set(
    system: &HypergraphSystem,
    decomp: &RegularityDecomposition,
    tops: &BTreeMap<Edge, FactorAlgebra>,
    growth: &GrowthFunction,
    e: &Edge,
    atom_label: u32,
) -> Result<BadSet> {
    let j = e.len();
    let thresholds = layer_thresholds(decomp, growth)?;
    let (large_thresh, reg_thresh) = thresholds[j];
    let algebra = algebra_of(system, decomp, tops, e)?;
    let atom = algebra.atom(system, atom_label);

    let lower_edges = e.proper_subsets();
    let low_base = lower_edges
        .iter()
        .fold(Edge::empty(), |acc, f| acc.union(f));
    let mut region = CylinderSet::empty(system, low_base.clone());
    if lower_edges.is_empty() {
        return Ok(BadSet { edge: e.clone(), atom: atom_label, region });
    }

    // Enumerate V_e once, aggregating per lower-tuple signature. Signatures
    // are mixed-radix over the lower atoms, skeleton part separated so the
    // largeness test can be aggregated on it alone.
    let skeleton = e.skeleton();
    let mut lowers = Vec::new();
    for f in &lower_edges {
        let alg = algebra_of(system, decomp, tops, f)?.clone();
        lowers.push((system.projector(e, f), alg, skeleton.contains(f)));
    }
    let mut radix: u128 = 1;
    for (_, alg, _) in &lowers {
        radix = radix.saturating_mul(u128::from(alg.atom_count()));
    }
    if radix > u128::from(system.cap()) {
        return Err(Error::CapExceeded { cells: radix, cap: system.cap() });
    }

    let coarse_cond = cond_expect(system, &atom, &decomp.coarse_join(e))?;
    let fine_cond = cond_expect(system, &atom, &decomp.fine_join(e))?;
    let coarse_proj = system.projector(e, coarse_cond.table().base());
    let fine_proj = system.projector(e, fine_cond.table().base());

    #[derive(Default, Clone)]
    struct Acc {
        lower_count: u64,
        sq_sum: f64,
    }
    #[derive(Default, Clone)]
    struct SkeletonAcc {
        box_count: u64,
        atom_count: u64,
    }
    let mut per_tuple: std::collections::HashMap<u64, Acc> = Default::default();
    let mut per_skeleton: std::collections::HashMap<u64, SkeletonAcc> = Default::default();

    let cells = system.cells(e);
    for idx in 0..cells {
        let mut full_sig: u64 = 0;
        let mut skel_sig: u64 = 0;
        for (proj, alg, on_skeleton) in &lowers {
            let label = alg.label_of_index(proj.map(idx));
            full_sig = full_sig * u64::from(alg.atom_count()) + u64::from(label);
            if *on_skeleton {
                skel_sig = skel_sig * u64::from(alg.atom_count()) + u64::from(label);
            }
        }
        let acc = per_tuple.entry(full_sig).or_default();
        acc.lower_count += 1;
        let b =
            fine_cond.value_at(fine_proj.map(idx)) - coarse_cond.value_at(coarse_proj.map(idx));
        acc.sq_sum += b * b;
        let sk = per_skeleton.entry(skel_sig).or_default();
        sk.box_count += 1;
        if atom.contains_index(idx) {
            sk.atom_count += 1;
        }
    }

    // Second pass: mark the failing signatures into the region bits.
    let low_proj = system.projector(e, &low_base);
    let mut failing: std::collections::HashSet<u64> = Default::default();
    for idx in 0..cells {
        let mut full_sig: u64 = 0;
        let mut skel_sig: u64 = 0;
        for (proj, alg, on_skeleton) in &lowers {
            let label = alg.label_of_index(proj.map(idx));
            full_sig = full_sig * u64::from(alg.atom_count()) + u64::from(label);
            if *on_skeleton {
                skel_sig = skel_sig * u64::from(alg.atom_count()) + u64::from(label);
            }
        }
        if failing.contains(&full_sig) {
            region.insert_index(low_proj.map(idx));
            continue;
        }
        let sk = &per_skeleton[&skel_sig];
        let largeness_ok = sk.atom_count as f64 >= large_thresh * sk.box_count as f64;
        let acc = &per_tuple[&full_sig];
        // Both sides divided by |V_e| give the expectations over the space.
        let regularity_ok = acc.sq_sum / cells as f64
            <= reg_thresh * (acc.lower_count as f64 / cells as f64)
                + f64::EPSILON * acc.lower_count as f64;
        if !(largeness_ok && regularity_ok) {
            failing.insert(full_sig);
            region.insert_index(low_proj.map(idx));
        }
    }
    Ok(BadSet { edge: e.clone(), atom: atom_label, region })
}

/// The decomposition of one atom's indicator into the constant conditional
/// density plus the coarse/fine gap plus the fine residual, with the
/// pointwise identity verified on the skeleton box.
#[derive(Clone, Debug)]
pub struct AtomDecomposition {
    pub p: f64,
    /// fine minus coarse conditional expectation, on V_e in canonical order.
    pub b: Vec<f64>,
    /// indicator minus fine conditional expectation, on V_e.
    pub c: Vec<f64>,
}

pub fn decompose_atom(
    system: &HypergraphSystem,
    decomp: &RegularityDecomposition,
    tops: &BTreeMap<Edge, FactorAlgebra>,
    tuple: &AtomTuple,
    e: &Edge,
) -> Result<AtomDecomposition> {
    let algebra = algebra_of(system, decomp, tops, e)?;
    let label = *tuple
        .get(e)
        .ok_or_else(|| Error::Precondition(format!("tuple misses edge {e:?}")))?;
    let atom = algebra.atom(system, label);
    let cells = system.cells(e);

    let coarse_cond = cond_expect(system, &atom, &decomp.coarse_join(e))?;
    let fine_cond = cond_expect(system, &atom, &decomp.fine_join(e))?;
    let coarse_proj = system.projector(e, coarse_cond.table().base());
    let fine_proj = system.projector(e, fine_cond.table().base());

    // Skeleton box membership per point of V_e.
    let skeleton = e.skeleton();
    let mut members = Vec::new();
    for f in &skeleton {
        let l = *tuple
            .get(f)
            .ok_or_else(|| Error::Precondition(format!("tuple misses edge {f:?}")))?;
        members.push((system.projector(e, f), algebra_of(system, decomp, tops, f)?.clone(), l));
    }

    let mut box_count = 0u64;
    let mut atom_in_box = 0u64;
    let mut b = Vec::with_capacity(cells as usize);
    let mut c = Vec::with_capacity(cells as usize);
    let mut in_box = Vec::with_capacity(cells as usize);
    for idx in 0..cells {
        let fine_v = fine_cond.value_at(fine_proj.map(idx));
        let coarse_v = coarse_cond.value_at(coarse_proj.map(idx));
        let ind = f64::from(u8::from(atom.contains_index(idx)));
        b.push(fine_v - coarse_v);
        c.push(ind - fine_v);
        let inside = members
            .iter()
            .all(|(proj, alg, l)| alg.label_of_index(proj.map(idx)) == *l);
        in_box.push(inside);
        if inside {
            box_count += 1;
            if atom.contains_index(idx) {
                atom_in_box += 1;
            }
        }
    }
    let p = if box_count == 0 { 1.0 } else { atom_in_box as f64 / box_count as f64 };

    // On the box, coarse conditional expectation is the constant p, so the
    // pointwise identity indicator = p + b + c must hold there.
    for idx in 0..cells as usize {
        if in_box[idx] {
            let ind = f64::from(u8::from(atom.contains_index(idx as u64)));
            let residue = ind - (p + b[idx] + c[idx]);
            if residue.abs() > 1e-12 {
                return Err(Error::Internal(format!(
                    "decomposition identity failed at point {idx} with residue {residue:e}"
                )));
            }
        }
    }
    Ok(AtomDecomposition { p, b, c })
}

/// Output of the counting comparison. No tolerance is asserted here: the
/// ratio and slack are reported, and sign claims are made only where
/// [`nonemptiness_certified`] says the instance parameters support them.
#[derive(Clone, Debug, Serialize)]
pub struct CountingCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub ratio: Option<f64>,
    pub additive_slack: f64,
}

/// Compare the measured joint density of a tuple against the product of its
/// conditional densities.
pub fn counting_check(
    system: &HypergraphSystem,
    decomp: &RegularityDecomposition,
    tops: &BTreeMap<Edge, FactorAlgebra>,
    profile: &AtomProfile,
    tuple: &AtomTuple,
) -> Result<CountingCheck> {
    let lhs = joint_density(system, decomp, tops, tuple)?;
    let rhs: f64 = profile.p.values().product();
    Ok(CountingCheck {
        lhs,
        rhs,
        ratio: if rhs > 0.0 { Some(lhs / rhs) } else { None },
        additive_slack: (lhs - rhs).abs(),
    })
}

/// Exact-rational check that the joint density equals the product of the
/// conditional densities; holds identically on product instances.
pub fn counting_check_exact(
    system: &HypergraphSystem,
    decomp: &RegularityDecomposition,
    tops: &BTreeMap<Edge, FactorAlgebra>,
    tuple: &AtomTuple,
) -> Result<bool> {
    let (hits, cells) = joint_count(system, decomp, tops, tuple)?;
    let lhs = BigRational::new(BigInt::from(hits), BigInt::from(cells));
    let mut rhs = BigRational::one();
    for (_, e) in system.all_edges() {
        let algebra = algebra_of(system, decomp, tops, e)?;
        let label = tuple[e];
        let atom = algebra.atom(system, label);
        let skeleton = e.skeleton();
        let mut members = Vec::new();
        for f in &skeleton {
            members.push((
                system.projector(e, f),
                algebra_of(system, decomp, tops, f)?.clone(),
                tuple[f],
            ));
        }
        let mut box_count = 0u64;
        let mut atom_in_box = 0u64;
        for idx in 0..system.cells(e) {
            if members
                .iter()
                .all(|(proj, alg, l)| alg.label_of_index(proj.map(idx)) == *l)
            {
                box_count += 1;
                if atom.contains_index(idx) {
                    atom_in_box += 1;
                }
            }
        }
        if box_count == 0 {
            // p_e = 1 by convention.
            continue;
        }
        rhs *= BigRational::new(BigInt::from(atom_in_box), BigInt::from(box_count));
    }
    Ok(lhs == rhs)
}

/// Whether the instance parameters let the library assert that good tuples
/// have positive joint density.
///
/// For order-2 systems the skeleton boxes are products of non-empty vertex
/// subsets, so they are never empty, and a union bound over the top edges
/// inside one box shows the joint density of a good tuple is at least
/// (1 − |H_2|·(1 − θ))·E(box) with θ = 1/log F(M_2). The claim is therefore
/// certified exactly when the decomposition came from the exact oracle and
/// θ > 1 − 1/|H_2|, i.e. log F(M_2) < |H_2|/(|H_2|−1).
pub fn nonemptiness_certified(
    system: &HypergraphSystem,
    decomp: &RegularityDecomposition,
    growth: &GrowthFunction,
    oracle_exact: bool,
) -> Result<bool> {
    if !oracle_exact || system.order() != 2 {
        return Ok(false);
    }
    let h2 = system.top_layer().len();
    if h2 <= 1 {
        return Ok(true);
    }
    let fm = growth.eval(decomp.thresholds[2])?;
    Ok(fm.ln() < h2 as f64 / (h2 as f64 - 1.0))
}

/// Generalized counting comparison over a bundle: the averaged product of
/// the atoms pulled back along the projection, against the product of the
/// corresponding conditional densities.
#[derive(Clone, Debug, Serialize)]
pub struct BundleCount {
    pub lhs: f64,
    pub rhs: f64,
    pub ratio: Option<f64>,
}

pub fn generalized_counting_check(
    system: &HypergraphSystem,
    bundle: &Bundle,
    atoms: &BTreeMap<Edge, CylinderSet>,
    p: &BTreeMap<Edge, f64>,
) -> Result<BundleCount> {
    let (hits, cells) = bundle_count(system, bundle, atoms)?;
    let lhs = hits as f64 / cells as f64;
    let mut rhs = 1.0;
    for g in bundle.edges() {
        let image = project_edge(bundle, g)?;
        let value = p
            .get(&image)
            .ok_or_else(|| Error::Precondition(format!("no p value for edge {image:?}")))?;
        rhs *= value;
    }
    Ok(BundleCount { lhs, rhs, ratio: if rhs > 0.0 { Some(lhs / rhs) } else { None } })
}

fn project_edge(bundle: &Bundle, g: &Edge) -> Result<Edge> {
    Edge::new(g.iter().map(|k| bundle.label_of(k)).collect())
        .map_err(|_| Error::InvalidSystem(format!("projection not injective on {g:?}")))
}

/// Count the points of the bundle's product space on which every edge's atom
/// holds, pulled back along the projection.
pub fn bundle_count(
    system: &HypergraphSystem,
    bundle: &Bundle,
    atoms: &BTreeMap<Edge, CylinderSet>,
) -> Result<(u64, u64)> {
    let cells = bundle.cells(system)?;
    let n = bundle.ground_size();
    // Row-major strides over the bundle ground, last element fastest.
    let mut strides = vec![1u64; n];
    for i in (0..n.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * system.size(bundle.label_of((i + 1) as u8));
    }
    // Per edge: the atom and, for each ground element of the edge, the
    // stride of the matching coordinate slot on the atom's base.
    struct EdgeTest<'a> {
        set: &'a CylinderSet,
        slots: Vec<(u64, u64, u64)>, // (ground stride, ground size, base stride)
    }
    let mut tests = Vec::new();
    for g in bundle.edges() {
        let image = project_edge(bundle, g)?;
        let set = atoms
            .get(&image)
            .ok_or_else(|| Error::Precondition(format!("no atom supplied for edge {image:?}")))?;
        if *set.base() != image {
            return Err(Error::BaseMismatch {
                expected: format!("{image:?}"),
                found: format!("{:?}", set.base()),
            });
        }
        let mut base_strides = vec![1u64; image.len()];
        for i in (0..image.len().saturating_sub(1)).rev() {
            base_strides[i] = base_strides[i + 1] * system.size(image.indices()[i + 1]);
        }
        let slots = g
            .iter()
            .map(|k| {
                let label = bundle.label_of(k);
                let pos = image.indices().iter().position(|&x| x == label).expect("image member");
                (
                    strides[usize::from(k)],
                    system.size(label),
                    base_strides[pos],
                )
            })
            .collect();
        tests.push(EdgeTest { set, slots });
    }
    let mut hits = 0u64;
    'points: for idx in 0..cells {
        for t in &tests {
            let mut base_idx = 0u64;
            for &(gs, size, bs) in &t.slots {
                base_idx += ((idx / gs) % size) * bs;
            }
            if !t.set.contains_index(base_idx) {
                continue 'points;
            }
        }
        hits += 1;
    }
    Ok((hits, cells))
}

/// Both sides of the doubling identity: the left side averages, over the
/// glued edge's space, the lower-box indicator times the square of the inner
/// average; it equals the bundle count over the doubled bundle exactly.
#[derive(Clone, Debug, Serialize)]
pub struct DoublingCheck {
    pub doubled_lhs: f64,
    pub split_average: f64,
    pub exact_match: bool,
}

pub fn doubling_identity(
    system: &HypergraphSystem,
    bundle: &Bundle,
    g0: &Edge,
    atoms: &BTreeMap<Edge, CylinderSet>,
) -> Result<DoublingCheck> {
    let doubled = bundle.double(system, g0)?;
    let (d_hits, d_cells) = bundle_count(system, &doubled, atoms)?;

    // Split the ground into g0 and the rest; the inner product ranges over
    // the edges that survive doubling outside g0, the outer indicator over
    // the edges strictly inside g0.
    let top = bundle.order();
    let inside: Vec<&Edge> =
        bundle.edges().iter().filter(|g| g.is_subset_of(g0) && *g != g0).collect();
    let outer: Vec<&Edge> = bundle
        .edges()
        .iter()
        .filter(|g| !(g.is_subset_of(g0) && *g != g0) && g.len() + 1 <= top)
        .collect();

    let g0_elems: Vec<u8> = g0.iter().collect();
    let rest_elems: Vec<u8> =
        (0..bundle.ground_size() as u8).filter(|k| !g0.contains(*k)).collect();
    let g0_cells: u64 = g0_elems.iter().map(|&k| system.size(bundle.label_of(k))).product();
    let rest_cells: u64 = rest_elems.iter().map(|&k| system.size(bundle.label_of(k))).product();

    // Coordinate assignment per ground element for a (g0 index, rest index)
    // pair; row-major within each part.
    let coord_of = |elems: &[u8], idx: u64, k: u8| -> u64 {
        let mut rem = idx;
        for &x in elems.iter().rev() {
            let size = system.size(bundle.label_of(x));
            let c = rem % size;
            if x == k {
                return c;
            }
            rem /= size;
        }
        unreachable!("element not in part")
    };

    let eval_edge = |g: &Edge, g0_idx: u64, rest_idx: u64| -> Result<bool> {
        let image = project_edge(bundle, g)?;
        let set = atoms
            .get(&image)
            .ok_or_else(|| Error::Precondition(format!("no atom supplied for edge {image:?}")))?;
        let mut base_strides = vec![1u64; image.len()];
        for i in (0..image.len().saturating_sub(1)).rev() {
            base_strides[i] = base_strides[i + 1] * system.size(image.indices()[i + 1]);
        }
        let mut base_idx = 0u64;
        for k in g.iter() {
            let label = bundle.label_of(k);
            let pos = image.indices().iter().position(|&x| x == label).expect("image member");
            let c = if g0.contains(k) {
                coord_of(&g0_elems, g0_idx, k)
            } else {
                coord_of(&rest_elems, rest_idx, k)
            };
            base_idx += c * base_strides[pos];
        }
        Ok(set.contains_index(base_idx))
    };

    let mut numerator: u128 = 0;
    for g0_idx in 0..g0_cells {
        let mut inner_ok = true;
        for g in &inside {
            if !eval_edge(g, g0_idx, 0)? {
                inner_ok = false;
                break;
            }
        }
        if !inner_ok {
            continue;
        }
        let mut inner_count: u64 = 0;
        'rest: for rest_idx in 0..rest_cells {
            for g in &outer {
                if !eval_edge(g, g0_idx, rest_idx)? {
                    continue 'rest;
                }
            }
            inner_count += 1;
        }
        numerator += u128::from(inner_count) * u128::from(inner_count);
    }
    let denominator = u128::from(g0_cells) * u128::from(rest_cells) * u128::from(rest_cells);
    let split_average = numerator as f64 / denominator as f64;
    let exact_match =
        numerator * u128::from(d_cells) == u128::from(d_hits) * denominator;
    Ok(DoublingCheck {
        doubled_lhs: d_hits as f64 / d_cells as f64,
        split_average,
        exact_match,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discrepancy::Oracle;
    use crate::regularity::{full_regularity, GrowthFunction};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn triangle(sizes: [u64; 3]) -> HypergraphSystem {
        let labels = vec!["1".into(), "2".into(), "3".into()];
        let top = vec![
            Edge::new(vec![0, 1]).unwrap(),
            Edge::new(vec![1, 2]).unwrap(),
            Edge::new(vec![0, 2]).unwrap(),
        ];
        HypergraphSystem::new(labels, sizes.to_vec(), 2, top).unwrap()
    }

    fn random_set(system: &HypergraphSystem, base: &Edge, seed: u64, density: f64) -> CylinderSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = CylinderSet::empty(system, base.clone());
        for idx in 0..system.cells(base) {
            if rng.gen_bool(density) {
                s.insert_index(idx);
            }
        }
        s
    }

    fn pipeline(
        sizes: [u64; 3],
        seed: u64,
    ) -> (HypergraphSystem, BTreeMap<Edge, FactorAlgebra>, RegularityDecomposition, GrowthFunction)
    {
        let sys = triangle(sizes);
        let mut tops = BTreeMap::new();
        for (i, e) in sys.top_layer().iter().enumerate() {
            let set = random_set(&sys, e, seed + i as u64, 0.5);
            tops.insert(e.clone(), FactorAlgebra::from_set(&sys, &set));
        }
        let growth = GrowthFunction::exponential(2.0).unwrap();
        let decomp = full_regularity(&sys, &tops, 1.0, &growth, &Oracle::exact()).unwrap();
        (sys, tops, decomp, growth)
    }

    #[test]
    fn trivial_tuple_is_good() {
        let sys = triangle([2, 2, 2]);
        let tops: BTreeMap<Edge, FactorAlgebra> = sys
            .top_layer()
            .iter()
            .map(|e| (e.clone(), FactorAlgebra::trivial(&sys, e.clone())))
            .collect();
        let growth = GrowthFunction::exponential(2.0).unwrap();
        let decomp = full_regularity(&sys, &tops, 1.0, &growth, &Oracle::exact()).unwrap();
        let tuples = atom_tuples(&sys, &decomp, &tops).unwrap();
        assert_eq!(tuples.len(), 1);
        let profile = classify_atom(&sys, &decomp, &tops, &growth, &tuples[0]).unwrap();
        assert!(profile.good);
        assert_eq!(profile.joint_density, 1.0);
        for flag in profile.flags.values() {
            assert!(flag.largeness && flag.regularity && !flag.vacuous);
        }
        let check = counting_check(&sys, &decomp, &tops, &profile, &tuples[0]).unwrap();
        assert_eq!(check.lhs, 1.0);
        assert_eq!(check.rhs, 1.0);
        assert_eq!(check.ratio, Some(1.0));
    }

    #[test]
    fn flags_match_direct_recomputation() {
        let (sys, tops, decomp, growth) = pipeline([4, 4, 4], 500);
        let tuples = atom_tuples(&sys, &decomp, &tops).unwrap();
        let thresholds: Vec<(f64, f64)> = decomp
            .thresholds
            .iter()
            .map(|&m| {
                let fm = growth.eval(m).unwrap();
                (1.0 / fm.ln(), 1.0 / fm)
            })
            .collect();
        for tuple in tuples.iter().step_by(7) {
            let profile = classify_atom(&sys, &decomp, &tops, &growth, tuple).unwrap();
            // Recompute both conditions for each edge by raw enumeration of
            // the full space.
            let ground = sys.ground_edge();
            for (j, e) in sys.all_edges() {
                let (large_thresh, reg_thresh) = thresholds[j];
                let algebra = decomp.algebra_for(&tops, e, 2).unwrap();
                let atom = algebra.atom(&sys, tuple[e]);
                let atom_lift = atom.lifted_to(&sys, &ground);

                let mut skel_box = 0u64;
                let mut skel_atom = 0u64;
                let mut lower_box = 0u64;
                let mut sq = 0.0;
                let coarse_cond = cond_expect(&sys, &atom, &decomp.coarse_join(e)).unwrap();
                let fine_cond = cond_expect(&sys, &atom, &decomp.fine_join(e)).unwrap();
                let pc = sys.projector(&ground, coarse_cond.table().base());
                let pf = sys.projector(&ground, fine_cond.table().base());
                for idx in 0..sys.cells(&ground) {
                    let in_skel = e.skeleton().iter().all(|f| {
                        let alg = decomp.algebra_for(&tops, f, 2).unwrap();
                        let p = sys.projector(&ground, f);
                        alg.label_of_index(p.map(idx)) == tuple[f]
                    });
                    let in_lower = e.proper_subsets().iter().all(|f| {
                        let alg = decomp.algebra_for(&tops, f, 2).unwrap();
                        let p = sys.projector(&ground, f);
                        alg.label_of_index(p.map(idx)) == tuple[f]
                    });
                    if in_skel {
                        skel_box += 1;
                        if atom_lift.contains_index(idx) {
                            skel_atom += 1;
                        }
                    }
                    if in_lower {
                        lower_box += 1;
                        let b = fine_cond.value_at(pf.map(idx)) - coarse_cond.value_at(pc.map(idx));
                        sq += b * b;
                    }
                }
                let cells = sys.cells(&ground) as f64;
                let expect_large = skel_atom as f64 >= large_thresh * skel_box as f64;
                let expect_reg = sq / cells
                    <= reg_thresh * (lower_box as f64 / cells) + f64::EPSILON * lower_box as f64;
                let flag = profile.flags[&super::edge_key(&sys, e)];
                assert_eq!(flag.largeness, expect_large, "largeness at {e:?}");
                assert_eq!(flag.regularity, expect_reg, "regularity at {e:?}");
                assert_eq!(flag.vacuous, skel_box == 0, "vacuity at {e:?}");
            }
        }
    }

    #[test]
    fn total_probability_and_nonemptiness() {
        let (sys, tops, decomp, growth) = pipeline([4, 4, 4], 41);
        let tuples = atom_tuples(&sys, &decomp, &tops).unwrap();
        let mut total = 0.0;
        let mut goods = 0usize;
        for tuple in &tuples {
            let profile = classify_atom(&sys, &decomp, &tops, &growth, &tuple).unwrap();
            total += profile.joint_density;
            if profile.good {
                goods += 1;
                assert!(
                    profile.joint_density > 0.0,
                    "good tuple with empty intersection: {tuple:?}"
                );
            }
        }
        assert!((total - 1.0).abs() < 1e-9, "joint densities must sum to 1, got {total}");
        assert!(nonemptiness_certified(&sys, &decomp, &growth, true).unwrap());
        let _ = goods;
    }

    #[test]
    fn bad_set_region_is_measurable_and_bounded() {
        let (sys, tops, decomp, growth) = pipeline([4, 4, 4], 77);
        for (j, e) in sys.all_edges() {
            let algebra = decomp.algebra_for(&tops, e, 2).unwrap().clone();
            let fm = growth.eval(decomp.thresholds[j]).unwrap();
            for a in 0..algebra.atom_count() {
                let bad = bad_set(&sys, &decomp, &tops, &growth, e, a).unwrap();
                // Region is a union of atoms of the lower coarse join.
                let lower = decomp.lower_join(e);
                if !bad.region.is_empty() {
                    let table = lower.table(&sys, bad.region.base()).unwrap();
                    let proj = sys.projector(table.base(), bad.region.base());
                    let mut status: Vec<Option<bool>> = vec![None; table.atom_count()];
                    for idx in 0..table.cells() {
                        let inside = bad.region.contains_index(proj.map(idx));
                        let slot = &mut status[table.atom_of(idx) as usize];
                        match slot {
                            None => *slot = Some(inside),
                            Some(prev) => assert_eq!(*prev, inside, "region not measurable"),
                        }
                    }
                }
                // Mass bound: 2 / log F(M_j), trivially true when F is inf.
                let atom = algebra.atom(&sys, a);
                let mass = bad.mass_with(&sys, &atom);
                let bound = 2.0 / fm.ln();
                assert!(
                    mass <= bound + 1e-12,
                    "bad mass {mass} above {bound} at {e:?} atom {a}"
                );
            }
        }
    }

    #[test]
    fn singleton_edge_bad_set_is_trivial_region() {
        let (sys, tops, decomp, growth) = pipeline([3, 3, 3], 11);
        let e = Edge::new(vec![0]).unwrap();
        let alg = decomp.algebra_for(&tops, &e, 2).unwrap().clone();
        for a in 0..alg.atom_count() {
            let bad = bad_set(&sys, &decomp, &tops, &growth, &e, a).unwrap();
            assert!(bad.region.base().is_empty());
            // Region over the empty base is either nothing or everything.
            assert!(bad.region.cells() == 1);
        }
    }

    #[test]
    fn decomposition_identity_on_random_instances() {
        let (sys, tops, decomp, growth) = pipeline([4, 4, 4], 90);
        let tuples = atom_tuples(&sys, &decomp, &tops).unwrap();
        let _ = growth;
        for tuple in tuples.iter().step_by(11) {
            for e in sys.top_layer() {
                let dec = decompose_atom(&sys, &decomp, &tops, tuple, e).unwrap();
                assert!(dec.p >= 0.0 && dec.p <= 1.0);
            }
        }
    }

    #[test]
    fn product_instance_counts_exactly() {
        // Hand-built decomposition on product sets: every p_e is 0 or 1 on
        // each box, so the joint density factorizes exactly.
        let sys = triangle([4, 4, 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(321);
        let mut tops = BTreeMap::new();
        let mut side_sets: BTreeMap<u8, Vec<CylinderSet>> = BTreeMap::new();
        for e in sys.top_layer() {
            let mut parts = Vec::new();
            for j in e.iter() {
                let base = Edge::new(vec![j]).unwrap();
                let mut s = CylinderSet::empty(&sys, base.clone());
                for idx in 0..sys.cells(&base) {
                    if rng.gen_bool(0.6) {
                        s.insert_index(idx);
                    }
                }
                side_sets.entry(j).or_default().push(s.clone());
                parts.push(s);
            }
            // Product cylinder: intersection of the lifted side sets.
            let mut prod = CylinderSet::full(&sys, e.clone());
            for s in &parts {
                let lifted = s.lifted_to(&sys, e);
                prod = prod.intersect(&lifted).unwrap();
            }
            tops.insert(e.clone(), FactorAlgebra::from_set(&sys, &prod));
        }
        // Coarse = fine = algebras generated by the side sets; lower layer
        // refines every factor, so the indicators are constant on boxes.
        let growth = GrowthFunction::exponential(2.0).unwrap();
        let mut coarse = BTreeMap::new();
        coarse.insert(Edge::empty(), FactorAlgebra::trivial(&sys, Edge::empty()));
        for j in 0..3u8 {
            let base = Edge::new(vec![j]).unwrap();
            let alg =
                FactorAlgebra::generate(&sys, base.clone(), &side_sets[&j]).unwrap();
            coarse.insert(base, alg);
        }
        let decomp = RegularityDecomposition {
            thresholds: vec![f64::INFINITY, 21.0, 2.0],
            coarse: coarse.clone(),
            fine: coarse,
            oracle: "exact".into(),
            growth: growth.descriptor().to_string(),
            audit: Default::default(),
        };
        let tuples = atom_tuples(&sys, &decomp, &tops).unwrap();
        for tuple in &tuples {
            assert!(
                counting_check_exact(&sys, &decomp, &tops, tuple).unwrap(),
                "product instance must factorize exactly"
            );
        }
    }

    #[test]
    fn bundle_count_specializes_to_joint_density() {
        let (sys, tops, decomp, growth) = pipeline([3, 3, 3], 60);
        let _ = growth;
        let edges: Vec<Edge> = sys.all_edges().map(|(_, e)| e.clone()).collect();
        let bundle = Bundle::new(&sys, vec![0, 1, 2], edges).unwrap();
        let tuples = atom_tuples(&sys, &decomp, &tops).unwrap();
        for tuple in tuples.iter().step_by(13) {
            let atoms: BTreeMap<Edge, CylinderSet> = tuple
                .iter()
                .map(|(e, &l)| {
                    let alg = decomp.algebra_for(&tops, e, 2).unwrap();
                    (e.clone(), alg.atom(&sys, l))
                })
                .collect();
            let (hits, cells) = bundle_count(&sys, &bundle, &atoms).unwrap();
            let direct = joint_density(&sys, &decomp, &tops, tuple).unwrap();
            assert!((hits as f64 / cells as f64 - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn order_zero_bundle_counts_one() {
        let sys = triangle([3, 3, 3]);
        let bundle = Bundle::new(&sys, vec![0, 1, 2], vec![Edge::empty()]).unwrap();
        let mut atoms = BTreeMap::new();
        atoms.insert(Edge::empty(), CylinderSet::full(&sys, Edge::empty()));
        let (hits, cells) = bundle_count(&sys, &bundle, &atoms).unwrap();
        assert_eq!(hits, cells);
        let p = BTreeMap::from([(Edge::empty(), 1.0)]);
        let check = generalized_counting_check(&sys, &bundle, &atoms, &p).unwrap();
        assert_eq!(check.lhs, 1.0);
        assert_eq!(check.rhs, 1.0);
    }

    #[test]
    fn doubling_identity_on_random_atoms() {
        // The identity is pure double counting, so it holds for arbitrary
        // sets, not only atoms of a decomposition.
        let sys = triangle([3, 3, 3]);
        let edges: Vec<Edge> = sys.all_edges().map(|(_, e)| e.clone()).collect();
        let bundle = Bundle::new(&sys, vec![0, 1, 2], edges).unwrap();
        for seed in 0..10u64 {
            let mut atoms = BTreeMap::new();
            for (_, e) in sys.all_edges() {
                atoms.insert(e.clone(), random_set(&sys, e, 1000 + seed * 31 + e.len() as u64, 0.6));
            }
            for g0 in sys.top_layer() {
                let check = doubling_identity(&sys, &bundle, g0, &atoms).unwrap();
                assert!(check.exact_match, "doubling identity failed at seed {seed}");
                assert!((check.doubled_lhs - check.split_average).abs() < 1e-12);
            }
        }
    }
}
