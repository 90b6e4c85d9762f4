//! The refinement machinery: energy increment, the randomness/structure
//! dichotomy, and the preliminary and full regularity decompositions.
//!
//! All loops are driven by a discrepancy oracle and break ties in canonical
//! order (edges lexicographically, atoms by label), so a run is reproducible
//! from its inputs and the oracle's seed. Guarantees involving discrepancies
//! are stated relative to the oracle that produced them: with the exact
//! oracle they are unconditional, with the heuristic oracle they hold for
//! heuristic-findable witnesses. Energies and complexity bounds are always
//! verified from integer counts.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::{Arc, Mutex};

use serde::Serialize;

use crate::discrepancy::{correlation_of_set, DiscrepancyResult, Oracle};
use crate::error::{Error, Result};
use crate::measure::{energy, refinement_gap, CylinderSet, FactorAlgebra, JoinAlgebra};
use crate::system::{Edge, HypergraphSystem};

/// Floor applied to derived accuracy targets so that a saturated growth value
/// (1/F = 0 in double precision) still leaves a usable strict target. Any
/// genuinely positive energy gain on a desk-scale instance is a rational
/// number far above this floor squared.
const EPSILON_FLOOR: f64 = 1e-150;

/// Additive slack for double-precision comparisons of exactly-rational
/// quantities.
const F64_SLACK: f64 = 1e-12;

/// An increasing function F with F(x) ≥ 1 + x, used to demand that the fine
/// approximation be arbitrarily more accurate than the coarse one is complex.
/// Evaluations are memoized and re-checked against both invariants on every
/// call.
pub struct GrowthFunction {
    descriptor: String,
    kind: GrowthKind,
    memo: Mutex<BTreeMap<u64, f64>>,
}

#[derive(Clone)]
enum GrowthKind {
    Affine { slope: f64, offset: f64 },
    Exponential { base: f64 },
    Tower { height: u32 },
    Compose(Box<GrowthKind>, Box<GrowthKind>),
    Raised { floor: f64, inner: Box<GrowthKind> },
    Custom(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl GrowthKind {
    fn raw(&self, x: f64) -> f64 {
        match self {
            GrowthKind::Affine { slope, offset } => slope * x + offset,
            GrowthKind::Exponential { base } => base.powf(x) + x + 1.0,
            GrowthKind::Tower { height } => {
                let mut t = x;
                for _ in 0..*height {
                    t = t.exp2();
                }
                t + x + 1.0
            }
            GrowthKind::Compose(outer, inner) => outer.raw(inner.raw(x)),
            GrowthKind::Raised { floor, inner } => inner.raw(x).max(floor + x + 1.0),
            GrowthKind::Custom(f) => f(x),
        }
    }
}

impl Clone for GrowthFunction {
    fn clone(&self) -> Self {
        GrowthFunction {
            descriptor: self.descriptor.clone(),
            kind: self.kind.clone(),
            memo: Mutex::new(self.memo.lock().expect("memo lock").clone()),
        }
    }
}

impl fmt::Debug for GrowthFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "GrowthFunction({})", self.descriptor)
    }
}

impl GrowthFunction {
    pub fn affine(slope: f64, offset: f64) -> Result<Self> {
        if !(slope >= 1.0 && offset >= 1.0) {
            return Err(Error::Config(
                "affine growth needs slope >= 1 and offset >= 1 to satisfy F(x) >= 1 + x".into(),
            ));
        }
        Ok(Self::from_kind(
            format!("affine({slope},{offset})"),
            GrowthKind::Affine { slope, offset },
        ))
    }

    pub fn exponential(base: f64) -> Result<Self> {
        if !(base >= 2.0) {
            return Err(Error::Config("exponential growth needs base >= 2".into()));
        }
        Ok(Self::from_kind(format!("exp({base})"), GrowthKind::Exponential { base }))
    }

    pub fn tower(height: u32) -> Result<Self> {
        if height < 1 {
            return Err(Error::Config("tower growth needs height >= 1".into()));
        }
        Ok(Self::from_kind(format!("tower({height})"), GrowthKind::Tower { height }))
    }

    pub fn compose(outer: &GrowthFunction, inner: &GrowthFunction) -> Self {
        Self::from_kind(
            format!("compose({},{})", outer.descriptor, inner.descriptor),
            GrowthKind::Compose(Box::new(outer.kind.clone()), Box::new(inner.kind.clone())),
        )
    }

    /// Arbitrary user evaluator; the invariants are enforced at every call.
    pub fn custom(
        descriptor: impl Into<String>,
        f: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self::from_kind(descriptor.into(), GrowthKind::Custom(Arc::new(f)))
    }

    /// max(F(x), floor + x + 1): the same function pushed above a level.
    pub fn raised(&self, floor: f64) -> Self {
        Self::from_kind(
            format!("raised({},{floor:e})", self.descriptor),
            GrowthKind::Raised { floor, inner: Box::new(self.kind.clone()) },
        )
    }

    fn from_kind(descriptor: String, kind: GrowthKind) -> Self {
        GrowthFunction { descriptor, kind, memo: Mutex::new(BTreeMap::new()) }
    }

    /// Parse a descriptor: `affine(a,b)`, `exp(b)` / `exponential(b)`,
    /// `tower(h)`, or `compose(outer,inner)`.
    pub fn parse(text: &str) -> Result<Self> {
        let text = text.trim();
        let open = text
            .find('(')
            .ok_or_else(|| Error::Config(format!("growth descriptor {text:?} has no '('")))?;
        if !text.ends_with(')') {
            return Err(Error::Config(format!("growth descriptor {text:?} has no closing ')'")));
        }
        let name = &text[..open];
        let args = &text[open + 1..text.len() - 1];
        let parts = split_top_level(args);
        let num = |s: &str| -> Result<f64> {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad number {s:?} in growth descriptor")))
        };
        match (name.trim(), parts.as_slice()) {
            ("affine", [a, b]) => Self::affine(num(a)?, num(b)?),
            ("exp" | "exponential", [b]) => Self::exponential(num(b)?),
            ("tower", [h]) => Self::tower(num(h)? as u32),
            ("compose", [outer, inner]) => {
                Ok(Self::compose(&Self::parse(outer)?, &Self::parse(inner)?))
            }
            _ => Err(Error::Config(format!("unknown growth descriptor {text:?}"))),
        }
    }

    pub fn descriptor(&self) -> &str {
        &self.descriptor
    }

    /// Evaluate with invariant checking; infinity is a legal saturation.
    pub fn eval(&self, x: f64) -> Result<f64> {
        if x.is_nan() || x < 0.0 {
            return Err(Error::Config(format!("growth function evaluated at {x}")));
        }
        let bits = x.to_bits();
        let mut memo = self.memo.lock().expect("memo lock");
        if let Some(&y) = memo.get(&bits) {
            return Ok(y);
        }
        let y = self.kind.raw(x);
        if y.is_nan() || !(y >= 1.0 + x) {
            return Err(Error::Config(format!(
                "growth function {} violates F(x) >= 1 + x at x = {x} (got {y})",
                self.descriptor
            )));
        }
        if let Some((_, &prev)) = memo.range(..bits).next_back() {
            if prev > y {
                return Err(Error::Config(format!(
                    "growth function {} is not monotone near x = {x}",
                    self.descriptor
                )));
            }
        }
        if let Some((_, &next)) = memo.range(bits + 1..).next() {
            if y > next {
                return Err(Error::Config(format!(
                    "growth function {} is not monotone near x = {x}",
                    self.descriptor
                )));
            }
        }
        memo.insert(bits, y);
        Ok(y)
    }
}

fn split_top_level(args: &str) -> Vec<&str> {
    let mut parts = Vec::new();
    let mut depth = 0usize;
    let mut start = 0usize;
    for (i, c) in args.char_indices() {
        match c {
            '(' => depth += 1,
            ')' => depth = depth.saturating_sub(1),
            ',' if depth == 0 => {
                parts.push(&args[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    if !args.trim().is_empty() {
        parts.push(&args[start..]);
    }
    parts
}

/// One structured event of a refinement run; serialized as a JSON line.
#[derive(Clone, Debug, Serialize)]
pub struct AuditRecord {
    pub layer: usize,
    pub edge: Option<Vec<String>>,
    pub atom: Option<u32>,
    pub oracle: String,
    pub value: f64,
    pub action: String,
}

#[derive(Clone, Debug, Default)]
pub struct AuditLog {
    pub records: Vec<AuditRecord>,
}

impl AuditLog {
    pub fn push(&mut self, record: AuditRecord) {
        self.records.push(record);
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("audit record serializes"));
            out.push('\n');
        }
        out
    }
}

/// Output of the full regularity decomposition: the threshold chain and the
/// coarse/fine algebra pairs on every layer below the top, plus the audit of
/// the run that produced them.
#[derive(Debug)]
pub struct RegularityDecomposition {
    /// thresholds[j] = M_j for 0 <= j <= d.
    pub thresholds: Vec<f64>,
    pub coarse: BTreeMap<Edge, FactorAlgebra>,
    pub fine: BTreeMap<Edge, FactorAlgebra>,
    pub oracle: String,
    pub growth: String,
    pub audit: AuditLog,
}

impl RegularityDecomposition {
    pub fn order(&self) -> usize {
        self.thresholds.len() - 1
    }

    /// ∨ of the coarse algebras over the skeleton of `e`.
    pub fn coarse_join(&self, e: &Edge) -> JoinAlgebra {
        JoinAlgebra::new(e.skeleton().iter().filter_map(|f| self.coarse.get(f).cloned()).collect())
    }

    /// ∨ of the fine algebras over the skeleton of `e`.
    pub fn fine_join(&self, e: &Edge) -> JoinAlgebra {
        JoinAlgebra::new(e.skeleton().iter().filter_map(|f| self.fine.get(f).cloned()).collect())
    }

    /// ∨ of the coarse algebras over every proper subset of `e`.
    pub fn lower_join(&self, e: &Edge) -> JoinAlgebra {
        JoinAlgebra::new(
            e.proper_subsets()
                .iter()
                .filter_map(|f| self.coarse.get(f).cloned())
                .collect(),
        )
    }

    /// The coarse algebra of a lower edge, or the supplied top algebra.
    pub fn algebra_for<'a>(
        &'a self,
        tops: &'a BTreeMap<Edge, FactorAlgebra>,
        e: &Edge,
        top_layer: usize,
    ) -> Option<&'a FactorAlgebra> {
        if e.len() == top_layer {
            tops.get(e)
        } else {
            self.coarse.get(e)
        }
    }
}

fn check_faces_covered(lowers: &BTreeMap<Edge, FactorAlgebra>, edges: &[Edge]) -> Result<()> {
    for e in edges {
        for f in e.skeleton() {
            if !lowers.contains_key(&f) {
                return Err(Error::Precondition(format!(
                    "no lower algebra supplied for face {f:?} of {e:?}"
                )));
            }
        }
    }
    Ok(())
}

/// Refine the skeleton algebras of one edge with the supplied witnesses.
///
/// Precondition: the witnesses attain correlation at least `epsilon` in
/// magnitude against the residual of `e_set` on the join of the supplied
/// algebras. Postconditions, verified from integer counts before returning:
/// each refined algebra grows by at most one tracked generator, and the join
/// energy grows by at least `epsilon²`.
pub fn energy_increment(
    system: &HypergraphSystem,
    e_set: &CylinderSet,
    coarse: &BTreeMap<Edge, FactorAlgebra>,
    witnesses: &[(Edge, CylinderSet)],
    epsilon: f64,
) -> Result<BTreeMap<Edge, FactorAlgebra>> {
    let faces = e_set.base().skeleton();
    check_faces_covered(coarse, std::slice::from_ref(e_set.base()))?;
    let before_join = JoinAlgebra::new(faces.iter().map(|f| coarse[f].clone()).collect());
    let corr = correlation_of_set(system, e_set, &before_join, witnesses)?;
    if corr.abs() + F64_SLACK < epsilon {
        return Err(Error::Precondition(format!(
            "witness correlation {:.6e} is below the required {epsilon:.6e}; the witnesses are stale",
            corr.abs()
        )));
    }
    let mut refined = BTreeMap::new();
    for f in &faces {
        let witness = witnesses
            .iter()
            .find(|(wf, _)| wf == f)
            .ok_or_else(|| Error::Precondition(format!("no witness supplied for face {f:?}")))?;
        let next = coarse[f].refine_with_set(&witness.1)?;
        if next.complexity_bound() > coarse[f].complexity_bound() + 1 {
            return Err(Error::Internal("complexity grew by more than one".into()));
        }
        refined.insert(f.clone(), next);
    }
    let after_join = JoinAlgebra::new(faces.iter().map(|f| refined[f].clone()).collect());
    let gain = energy(system, e_set, &after_join)? - energy(system, e_set, &before_join)?;
    if gain + F64_SLACK < epsilon * epsilon {
        return Err(Error::Internal(format!(
            "energy increment {gain:.6e} fell short of epsilon^2 = {:.6e}",
            epsilon * epsilon
        )));
    }
    Ok(refined)
}

/// Result of one dichotomy run: either every atom of every top algebra has
/// small discrepancy against the refined join (randomness), or some atom's
/// energy jumped by epsilon² (structure). In both branches the returned
/// algebras refine the inputs with complexity growth one per increment.
#[derive(Debug)]
pub enum DichotomyOutcome {
    Randomness { fine: BTreeMap<Edge, FactorAlgebra> },
    Structure { fine: BTreeMap<Edge, FactorAlgebra> },
}

impl DichotomyOutcome {
    pub fn fine(&self) -> &BTreeMap<Edge, FactorAlgebra> {
        match self {
            DichotomyOutcome::Randomness { fine } | DichotomyOutcome::Structure { fine } => fine,
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn dichotomy(
    system: &HypergraphSystem,
    layer: usize,
    tops: &BTreeMap<Edge, FactorAlgebra>,
    lowers: &BTreeMap<Edge, FactorAlgebra>,
    epsilon: f64,
    delta: f64,
    oracle: &Oracle,
    audit: &mut AuditLog,
) -> Result<DichotomyOutcome> {
    let edges: Vec<Edge> = tops.keys().cloned().collect();
    check_faces_covered(lowers, &edges)?;
    let m = tops.values().map(|b| f64::from(b.complexity_bound())).fold(0.0, f64::max);
    let cap = iteration_cap(edges.len(), m, epsilon) / (delta * delta).max(f64::MIN_POSITIVE);

    let mut fines = lowers.clone();
    fn join_of(alg: &BTreeMap<Edge, FactorAlgebra>, e: &Edge) -> JoinAlgebra {
        JoinAlgebra::new(e.skeleton().iter().map(|f| alg[f].clone()).collect())
    }

    // Baseline energies against the input algebras, per (edge, atom).
    let mut baseline: Vec<Vec<f64>> = Vec::with_capacity(edges.len());
    for e in &edges {
        let join = join_of(lowers, e);
        let mut per_atom = Vec::new();
        for atom in tops[e].atoms(system) {
            per_atom.push(energy(system, &atom, &join)?);
        }
        baseline.push(per_atom);
    }

    let mut disc_cache: HashMap<(usize, u32), DiscrepancyResult> = HashMap::new();
    let mut energy_cache: HashMap<(usize, u32), f64> = HashMap::new();
    let mut iter: u64 = 0;
    loop {
        // Step 1: first violator in canonical (edge, atom label) order.
        let mut violator: Option<(usize, u32, DiscrepancyResult)> = None;
        'scan: for (ei, e) in edges.iter().enumerate() {
            for a in 0..tops[e].atom_count() {
                let entry = match disc_cache.get(&(ei, a)) {
                    Some(r) => r.clone(),
                    None => {
                        let atom = tops[e].atom(system, a);
                        let join = join_of(&fines, e);
                        let salt = (iter << 24) ^ ((ei as u64) << 12) ^ u64::from(a);
                        let r = oracle.discrepancy(system, &atom, &join, salt)?;
                        disc_cache.insert((ei, a), r.clone());
                        r
                    }
                };
                if entry.value > delta {
                    violator = Some((ei, a, entry));
                    break 'scan;
                }
            }
        }
        let Some((ei, a, found)) = violator else {
            audit.push(AuditRecord {
                layer,
                edge: None,
                atom: None,
                oracle: oracle.describe(),
                value: delta,
                action: "randomness-halt".into(),
            });
            return Ok(DichotomyOutcome::Randomness { fine: fines });
        };

        // Increment along the violator's skeleton.
        let e = edges[ei].clone();
        let atom_set = tops[&e].atom(system, a);
        let faces = e.skeleton();
        let local: BTreeMap<Edge, FactorAlgebra> =
            faces.iter().map(|f| (f.clone(), fines[f].clone())).collect();
        let refined = energy_increment(system, &atom_set, &local, &found.witnesses, found.value)?;
        let mut changed = Vec::new();
        for (f, next) in refined {
            if !next.same_partition(&fines[&f]) {
                changed.push(f.clone());
            }
            fines.insert(f, next);
        }
        audit.push(AuditRecord {
            layer,
            edge: Some(system.edge_labels(&e)),
            atom: Some(a),
            oracle: oracle.describe(),
            value: found.value,
            action: "increment".into(),
        });
        // Any edge whose skeleton touches a changed face sees a new join.
        if !changed.is_empty() {
            let stale: Vec<(usize, u32)> = disc_cache
                .keys()
                .chain(energy_cache.keys())
                .copied()
                .filter(|(ej, _)| edges[*ej].skeleton().iter().any(|f| changed.contains(f)))
                .collect();
            for key in stale {
                disc_cache.remove(&key);
                energy_cache.remove(&key);
            }
        }

        // Step 2: halt with structure once any pair's energy has risen by
        // epsilon² over its baseline.
        let mut structure_hit: Option<(usize, u32, f64)> = None;
        'check: for (ej, e2) in edges.iter().enumerate() {
            for a2 in 0..tops[e2].atom_count() {
                let en = match energy_cache.get(&(ej, a2)) {
                    Some(&v) => v,
                    None => {
                        let atom = tops[e2].atom(system, a2);
                        let v = energy(system, &atom, &join_of(&fines, e2))?;
                        energy_cache.insert((ej, a2), v);
                        v
                    }
                };
                let gain = en - baseline[ej][a2 as usize];
                if gain >= epsilon * epsilon {
                    structure_hit = Some((ej, a2, gain));
                    break 'check;
                }
            }
        }
        if let Some((ej, a2, gain)) = structure_hit {
            audit.push(AuditRecord {
                layer,
                edge: Some(system.edge_labels(&edges[ej])),
                atom: Some(a2),
                oracle: oracle.describe(),
                value: gain,
                action: "structure-halt".into(),
            });
            return Ok(DichotomyOutcome::Structure { fine: fines });
        }

        iter += 1;
        if iter as f64 > cap {
            return Err(Error::IterationCap(format!(
                "dichotomy exceeded {cap} iterations; the oracle reported non-repeatable witnesses"
            )));
        }
    }
}

fn iteration_cap(edge_count: usize, m: f64, epsilon: f64) -> f64 {
    edge_count as f64 * 2f64.powf(2f64.powf(m)) / (epsilon * epsilon).max(f64::MIN_POSITIVE)
}

/// One layer of regularization: coarse and fine skeleton algebras for the
/// supplied top algebras, together with the complexity budget M actually
/// reached.
#[derive(Debug)]
pub struct LayerRegularity {
    pub bound: f64,
    pub coarse: BTreeMap<Edge, FactorAlgebra>,
    pub fine: BTreeMap<Edge, FactorAlgebra>,
}

/// Iterate the dichotomy, promoting fine to coarse on every structure branch,
/// until the randomness branch fires. `m` is the declared complexity bound of
/// the top algebras (it feeds the budget chain, so it is an input rather than
/// being recomputed from the algebras); the accuracy target 1/F(M) is
/// recomputed from the live complexity budget each pass.
#[allow(clippy::too_many_arguments)]
pub fn preliminary_regularity(
    system: &HypergraphSystem,
    layer: usize,
    tops: &BTreeMap<Edge, FactorAlgebra>,
    m: f64,
    epsilon: f64,
    growth: &GrowthFunction,
    oracle: &Oracle,
    audit: &mut AuditLog,
) -> Result<LayerRegularity> {
    let edges: Vec<Edge> = tops.keys().cloned().collect();
    for e in &edges {
        if f64::from(tops[e].complexity_bound()) > m {
            return Err(Error::Precondition(format!(
                "algebra on {e:?} has complexity {} above the declared bound {m}",
                tops[e].complexity_bound()
            )));
        }
    }
    let mut faces: Vec<Edge> = Vec::new();
    for e in &edges {
        for f in e.skeleton() {
            if !faces.contains(&f) {
                faces.push(f);
            }
        }
    }
    let mut coarse: BTreeMap<Edge, FactorAlgebra> = faces
        .iter()
        .map(|f| (f.clone(), FactorAlgebra::trivial(system, f.clone())))
        .collect();

    let cap = iteration_cap(edges.len(), m, epsilon);
    let mut outer: u64 = 0;
    loop {
        let live = coarse.values().map(|b| f64::from(b.complexity_bound())).fold(0.0, f64::max);
        let bound = growth.eval(m)?.max(live);
        let delta = 1.0 / growth.eval(bound)?;
        audit.push(AuditRecord {
            layer,
            edge: None,
            atom: None,
            oracle: oracle.describe(),
            value: delta,
            action: format!("pass(M={bound})"),
        });
        match dichotomy(system, layer, tops, &coarse, epsilon, delta, oracle, audit)? {
            DichotomyOutcome::Randomness { fine } => {
                return Ok(LayerRegularity { bound, coarse, fine });
            }
            DichotomyOutcome::Structure { fine } => {
                coarse = fine;
            }
        }
        outer += 1;
        if outer as f64 > cap {
            return Err(Error::IterationCap(format!(
                "regularity pass exceeded {cap} promotions at layer {layer}"
            )));
        }
    }
}

/// The full decomposition: regularize the top layer, then recurse on the
/// coarse output one layer down, with a fast-growth function at each level
/// chosen large enough (by a restart fixpoint) that the discrepancy target
/// reached at that level survives to the final 1/F(M_0) bound.
pub fn full_regularity(
    system: &HypergraphSystem,
    tops: &BTreeMap<Edge, FactorAlgebra>,
    top_bound: f64,
    growth: &GrowthFunction,
    oracle: &Oracle,
) -> Result<RegularityDecomposition> {
    let d = system.order();
    for e in system.top_layer() {
        let alg = tops
            .get(e)
            .ok_or_else(|| Error::Precondition(format!("no algebra supplied for top edge {e:?}")))?;
        if alg.base() != e {
            return Err(Error::BaseMismatch {
                expected: format!("{e:?}"),
                found: format!("{:?}", alg.base()),
            });
        }
        if f64::from(alg.complexity_bound()) > top_bound {
            return Err(Error::Precondition(format!(
                "algebra on {e:?} has complexity {} above the declared bound {top_bound}",
                alg.complexity_bound()
            )));
        }
    }
    if tops.len() != system.top_layer().len() {
        return Err(Error::Precondition("algebras supplied off the top layer".into()));
    }

    let audit = AuditLog::default();
    if system.top_layer().is_empty() {
        // Nothing to regularize; the threshold chain is driven by F alone.
        let mut thresholds = vec![0.0; d + 1];
        thresholds[d] = top_bound;
        for j in (0..d).rev() {
            thresholds[j] = growth.eval(thresholds[j + 1])?;
        }
        return Ok(RegularityDecomposition {
            thresholds,
            coarse: BTreeMap::new(),
            fine: BTreeMap::new(),
            oracle: oracle.describe(),
            growth: growth.descriptor().to_string(),
            audit,
        });
    }

    let mut audit = audit;
    let (thresholds, coarse, fine) =
        regularize_layer(system, d, tops, top_bound, growth, oracle, &mut audit)?;
    Ok(RegularityDecomposition {
        thresholds,
        coarse,
        fine,
        oracle: oracle.describe(),
        growth: growth.descriptor().to_string(),
        audit,
    })
}

#[allow(clippy::type_complexity)]
fn regularize_layer(
    system: &HypergraphSystem,
    layer: usize,
    tops: &BTreeMap<Edge, FactorAlgebra>,
    bound: f64,
    growth: &GrowthFunction,
    oracle: &Oracle,
    audit: &mut AuditLog,
) -> Result<(Vec<f64>, BTreeMap<Edge, FactorAlgebra>, BTreeMap<Edge, FactorAlgebra>)> {
    if layer == 0 {
        return Ok((vec![bound], BTreeMap::new(), BTreeMap::new()));
    }
    let epsilon = (1.0 / growth.eval(bound)?).max(EPSILON_FLOOR);
    let mut fast = growth.clone();
    for attempt in 0..8 {
        audit.push(AuditRecord {
            layer,
            edge: None,
            atom: None,
            oracle: oracle.describe(),
            value: attempt as f64,
            action: format!("level-pass({})", fast.descriptor()),
        });
        let pass = preliminary_regularity(system, layer, tops, bound, epsilon, &fast, oracle, audit)?;
        let next_bound = pass.bound;
        let (mut thresholds, mut coarse, mut fine) =
            regularize_layer(system, layer - 1, &pass.coarse, next_bound, growth, oracle, audit)?;
        let final_bound = thresholds[0];
        // The discrepancy target reached at this level is 1/F_fast(M_{j-1});
        // it must dominate the final 1/F(M_0) target.
        if fast.eval(next_bound)? >= growth.eval(final_bound)? {
            thresholds.push(bound);
            coarse.extend(pass.coarse);
            fine.extend(pass.fine);
            return Ok((thresholds, coarse, fine));
        }
        fast = growth.raised(growth.eval(final_bound)?);
    }
    Err(Error::IterationCap(format!(
        "fast-growth fixpoint did not stabilize in 8 attempts at layer {layer}"
    )))
}

/// Independent recheck of the four decomposition estimates, remeasuring
/// energies from counts and discrepancies through the oracle.
#[derive(Debug, Serialize)]
pub struct DecompositionAudit {
    pub growth_chain: bool,
    pub coarse_complexity: bool,
    pub nesting: bool,
    pub coarse_fine: bool,
    pub fine_accurate: bool,
    pub measurements: Vec<AuditRecord>,
}

impl DecompositionAudit {
    pub fn all_pass(&self) -> bool {
        self.growth_chain
            && self.coarse_complexity
            && self.nesting
            && self.coarse_fine
            && self.fine_accurate
    }
}

pub fn verify_decomposition(
    system: &HypergraphSystem,
    tops: &BTreeMap<Edge, FactorAlgebra>,
    decomp: &RegularityDecomposition,
    growth: &GrowthFunction,
    oracle: &Oracle,
) -> Result<DecompositionAudit> {
    let d = decomp.order();
    let mut measurements = Vec::new();

    let mut growth_chain = true;
    for j in (0..d).rev() {
        let hi = decomp.thresholds[j + 1];
        if !(hi <= growth.eval(hi)? && growth.eval(hi)? <= decomp.thresholds[j]) {
            growth_chain = false;
        }
    }
    let m0 = decomp.thresholds[0];
    if !(m0 <= growth.eval(m0)?) {
        growth_chain = false;
    }

    let mut coarse_complexity = true;
    let mut nesting = true;
    for (f, alg) in &decomp.coarse {
        if f64::from(alg.complexity_bound()) > decomp.thresholds[f.len()] {
            coarse_complexity = false;
        }
        match decomp.fine.get(f) {
            Some(fine) => {
                if !fine.refines(alg) {
                    nesting = false;
                }
            }
            None => nesting = false,
        }
    }

    let mut coarse_fine = true;
    let mut fine_accurate = true;
    let bound_m0 = 1.0 / growth.eval(decomp.thresholds[0])?;
    for j in (1..=d).rev() {
        let gap_bound = {
            let fmj = growth.eval(decomp.thresholds[j])?;
            1.0 / (fmj * fmj)
        };
        for (ei, e) in system.layer(j).iter().enumerate() {
            let Some(algebra) = decomp.algebra_for(tops, e, d) else {
                coarse_fine = false;
                continue;
            };
            let coarse_join = decomp.coarse_join(e);
            let fine_join = decomp.fine_join(e);
            for a in 0..algebra.atom_count() {
                let atom = algebra.atom(system, a);
                let gap = refinement_gap(system, &atom, &coarse_join, &fine_join)?;
                measurements.push(AuditRecord {
                    layer: j,
                    edge: Some(system.edge_labels(e)),
                    atom: Some(a),
                    oracle: "counts".into(),
                    value: gap,
                    action: "recheck-energy-gap".into(),
                });
                if gap > gap_bound + F64_SLACK {
                    coarse_fine = false;
                }
                let salt = 0xa11du64 ^ ((j as u64) << 32) ^ ((ei as u64) << 16) ^ u64::from(a);
                let disc = oracle.discrepancy(system, &atom, &fine_join, salt)?;
                measurements.push(AuditRecord {
                    layer: j,
                    edge: Some(system.edge_labels(e)),
                    atom: Some(a),
                    oracle: oracle.describe(),
                    value: disc.value,
                    action: "recheck-discrepancy".into(),
                });
                if disc.value > bound_m0 + F64_SLACK {
                    fine_accurate = false;
                }
            }
        }
    }

    Ok(DecompositionAudit {
        growth_chain,
        coarse_complexity,
        nesting,
        coarse_fine,
        fine_accurate,
        measurements,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
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

    fn bipartite(n1: u64, n2: u64) -> HypergraphSystem {
        let labels = vec!["1".into(), "2".into()];
        HypergraphSystem::new(labels, vec![n1, n2], 2, vec![Edge::new(vec![0, 1]).unwrap()])
            .unwrap()
    }

    fn random_set(system: &HypergraphSystem, base: &Edge, seed: u64) -> CylinderSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = CylinderSet::empty(system, base.clone());
        for idx in 0..system.cells(base) {
            if rng.gen_bool(0.5) {
                s.insert_index(idx);
            }
        }
        s
    }

    fn trivial_faces(system: &HypergraphSystem, e: &Edge) -> BTreeMap<Edge, FactorAlgebra> {
        e.skeleton()
            .into_iter()
            .map(|f| (f.clone(), FactorAlgebra::trivial(system, f)))
            .collect()
    }

    #[test]
    fn growth_function_invariants() {
        let f = GrowthFunction::exponential(2.0).unwrap();
        assert_eq!(f.eval(1.0).unwrap(), 4.0);
        assert_eq!(f.eval(4.0).unwrap(), 21.0);
        assert!(f.eval(f64::INFINITY).unwrap().is_infinite());
        assert!(GrowthFunction::affine(0.5, 3.0).is_err());
        let custom = GrowthFunction::custom("identity", |x| x); // violates F >= 1 + x
        assert!(custom.eval(1.0).is_err());
        let parsed = GrowthFunction::parse("compose(exp(2),affine(2,2))").unwrap();
        assert_eq!(parsed.eval(1.0).unwrap(), 2f64.powi(4) + 4.0 + 1.0);
        assert!(GrowthFunction::parse("nope(3)").is_err());
    }

    #[test]
    fn increment_on_the_corner_instance() {
        let sys = bipartite(2, 2);
        let e = Edge::new(vec![0, 1]).unwrap();
        let corner = CylinderSet::from_indices(&sys, e.clone(), [0]);
        let coarse = trivial_faces(&sys, &e);
        let witnesses: Vec<(Edge, CylinderSet)> = e
            .skeleton()
            .into_iter()
            .map(|f| {
                let s = CylinderSet::from_indices(&sys, f.clone(), [0]);
                (f, s)
            })
            .collect();
        let eps = 3.0 / 16.0;
        let refined = energy_increment(&sys, &corner, &coarse, &witnesses, eps).unwrap();
        for (f, alg) in &refined {
            assert_eq!(alg.complexity_bound(), 1, "face {f:?}");
        }
        let before = energy(&sys, &corner, &JoinAlgebra::trivial()).unwrap();
        let after =
            energy(&sys, &corner, &JoinAlgebra::new(refined.values().cloned().collect())).unwrap();
        assert!((before - 1.0 / 16.0).abs() < 1e-15);
        assert!((after - 1.0 / 4.0).abs() < 1e-15);
        assert!(after - before >= eps * eps);
    }

    #[test]
    fn increment_rejects_stale_witnesses() {
        let sys = bipartite(2, 2);
        let e = Edge::new(vec![0, 1]).unwrap();
        let corner = CylinderSet::from_indices(&sys, e.clone(), [0]);
        let coarse = trivial_faces(&sys, &e);
        // Full witnesses give zero correlation on a mean-zero residual.
        let witnesses: Vec<(Edge, CylinderSet)> = e
            .skeleton()
            .into_iter()
            .map(|f| {
                let s = CylinderSet::full(&sys, f.clone());
                (f, s)
            })
            .collect();
        assert!(matches!(
            energy_increment(&sys, &corner, &coarse, &witnesses, 0.25),
            Err(Error::Precondition(_))
        ));
        // A measurable set has residual zero, so any witness is stale.
        let full = CylinderSet::full(&sys, e.clone());
        assert!(matches!(
            energy_increment(&sys, &full, &coarse, &witnesses, 0.25),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn dichotomy_trivial_tops_are_random_immediately() {
        let sys = triangle([2, 2, 2]);
        let tops: BTreeMap<Edge, FactorAlgebra> = sys
            .top_layer()
            .iter()
            .map(|e| (e.clone(), FactorAlgebra::trivial(&sys, e.clone())))
            .collect();
        let mut lowers = BTreeMap::new();
        for e in sys.top_layer() {
            for f in e.skeleton() {
                lowers
                    .entry(f.clone())
                    .or_insert_with(|| FactorAlgebra::trivial(&sys, f));
            }
        }
        let mut audit = AuditLog::default();
        let out =
            dichotomy(&sys, 2, &tops, &lowers, 0.5, 0.1, &Oracle::exact(), &mut audit).unwrap();
        match out {
            DichotomyOutcome::Randomness { fine } => {
                for (f, alg) in &fine {
                    assert!(alg.same_partition(&lowers[f]));
                }
            }
            DichotomyOutcome::Structure { .. } => panic!("expected randomness"),
        }
    }

    #[test]
    fn dichotomy_with_generous_delta_is_random() {
        let sys = bipartite(2, 2);
        let e = Edge::new(vec![0, 1]).unwrap();
        let corner = CylinderSet::from_indices(&sys, e.clone(), [0]);
        let tops = BTreeMap::from([(e.clone(), FactorAlgebra::from_set(&sys, &corner))]);
        let lowers = trivial_faces(&sys, &e);
        let mut audit = AuditLog::default();
        let out =
            dichotomy(&sys, 2, &tops, &lowers, 1.0, 1.0, &Oracle::exact(), &mut audit).unwrap();
        assert!(matches!(out, DichotomyOutcome::Randomness { .. }));
    }

    #[test]
    fn dichotomy_refines_the_corner_instance() {
        // Exact discrepancy of the corner atom is 3/16 > 0.1, so at least one
        // increment happens; with epsilon = 1 the structure branch cannot
        // fire, and the loop must end in randomness at discrepancy <= 0.1.
        let sys = bipartite(2, 2);
        let e = Edge::new(vec![0, 1]).unwrap();
        let corner = CylinderSet::from_indices(&sys, e.clone(), [0]);
        let tops = BTreeMap::from([(e.clone(), FactorAlgebra::from_set(&sys, &corner))]);
        let lowers = trivial_faces(&sys, &e);
        let mut audit = AuditLog::default();
        let out =
            dichotomy(&sys, 2, &tops, &lowers, 1.0, 0.1, &Oracle::exact(), &mut audit).unwrap();
        let DichotomyOutcome::Randomness { fine } = out else {
            panic!("expected randomness at epsilon = 1");
        };
        assert!(audit.records.iter().any(|r| r.action == "increment"));
        // Re-measure: every atom now has discrepancy at most delta.
        let join = JoinAlgebra::new(e.skeleton().iter().map(|f| fine[f].clone()).collect());
        for atom in tops[&e].atoms(&sys) {
            let d = Oracle::exact().discrepancy(&sys, &atom, &join, 0).unwrap();
            assert!(d.value <= 0.1 + 1e-12);
        }
    }

    #[test]
    fn preliminary_regularity_trivial_instance() {
        let sys = triangle([2, 2, 2]);
        let tops: BTreeMap<Edge, FactorAlgebra> = sys
            .top_layer()
            .iter()
            .map(|e| (e.clone(), FactorAlgebra::trivial(&sys, e.clone())))
            .collect();
        let growth = GrowthFunction::affine(2.0, 2.0).unwrap();
        let mut audit = AuditLog::default();
        let pass = preliminary_regularity(
            &sys,
            2,
            &tops,
            0.0,
            0.5,
            &growth,
            &Oracle::exact(),
            &mut audit,
        )
        .unwrap();
        assert_eq!(pass.bound, 2.0); // F(m = 0) = 2
        for alg in pass.coarse.values().chain(pass.fine.values()) {
            assert_eq!(alg.atom_count(), 1);
        }
    }

    #[test]
    fn preliminary_regularity_postconditions_hold() {
        let sys = triangle([4, 4, 4]);
        let mut tops = BTreeMap::new();
        for (i, e) in sys.top_layer().iter().enumerate() {
            let set = random_set(&sys, e, 100 + i as u64);
            tops.insert(e.clone(), FactorAlgebra::from_set(&sys, &set));
        }
        let growth = GrowthFunction::affine(2.0, 2.0).unwrap();
        let oracle = Oracle::exact();
        let mut audit = AuditLog::default();
        let epsilon = 0.5;
        let pass =
            preliminary_regularity(&sys, 2, &tops, 1.0, epsilon, &growth, &oracle, &mut audit)
                .unwrap();

        // M >= F(m) and the coarse complexities stay under M.
        assert!(pass.bound >= growth.eval(1.0).unwrap());
        for alg in pass.coarse.values() {
            assert!(f64::from(alg.complexity_bound()) <= pass.bound);
        }
        let delta = 1.0 / growth.eval(pass.bound).unwrap();
        for (e, top) in &tops {
            let coarse_join =
                JoinAlgebra::new(e.skeleton().iter().map(|f| pass.coarse[f].clone()).collect());
            let fine_join =
                JoinAlgebra::new(e.skeleton().iter().map(|f| pass.fine[f].clone()).collect());
            for atom in top.atoms(&sys) {
                let gap = refinement_gap(&sys, &atom, &coarse_join, &fine_join).unwrap();
                assert!(gap <= epsilon * epsilon + 1e-12);
                let d = oracle.discrepancy(&sys, &atom, &fine_join, 1).unwrap();
                assert!(d.value <= delta + 1e-12);
            }
        }
    }

    #[test]
    fn full_regularity_on_singleton_layer() {
        // d = 1: every discrepancy against the empty-edge algebra vanishes,
        // so the output is immediate and the chain closes with M_0 >= F(M_1).
        let labels = vec!["1".into(), "2".into()];
        let sys = HypergraphSystem::new(
            labels,
            vec![4, 4],
            1,
            vec![Edge::new(vec![0]).unwrap(), Edge::new(vec![1]).unwrap()],
        )
        .unwrap();
        let mut tops = BTreeMap::new();
        for e in sys.top_layer() {
            let set = random_set(&sys, e, 7);
            tops.insert(e.clone(), FactorAlgebra::from_set(&sys, &set));
        }
        let growth = GrowthFunction::exponential(2.0).unwrap();
        let decomp = full_regularity(&sys, &tops, 1.0, &growth, &Oracle::exact()).unwrap();
        assert_eq!(decomp.thresholds.len(), 2);
        assert!(decomp.thresholds[0] >= growth.eval(decomp.thresholds[1]).unwrap());
        let audit = verify_decomposition(&sys, &tops, &decomp, &growth, &Oracle::exact()).unwrap();
        assert!(audit.all_pass());
    }

    #[test]
    fn full_regularity_empty_top_layer() {
        let labels = vec!["1".into(), "2".into(), "3".into()];
        let sys = HypergraphSystem::new(labels, vec![2, 2, 2], 2, vec![]).unwrap();
        let growth = GrowthFunction::exponential(2.0).unwrap();
        let decomp =
            full_regularity(&sys, &BTreeMap::new(), 1.0, &growth, &Oracle::exact()).unwrap();
        assert_eq!(decomp.thresholds, vec![21.0, 4.0, 1.0]);
        assert!(decomp.coarse.is_empty());
    }

    #[test]
    fn full_regularity_is_deterministic() {
        let sys = triangle([3, 3, 3]);
        let mut tops = BTreeMap::new();
        for (i, e) in sys.top_layer().iter().enumerate() {
            let set = random_set(&sys, e, 40 + i as u64);
            tops.insert(e.clone(), FactorAlgebra::from_set(&sys, &set));
        }
        let growth = GrowthFunction::exponential(2.0).unwrap();
        let a = full_regularity(&sys, &tops, 1.0, &growth, &Oracle::exact()).unwrap();
        let b = full_regularity(&sys, &tops, 1.0, &growth, &Oracle::exact()).unwrap();
        assert_eq!(a.thresholds, b.thresholds);
        for (f, alg) in &a.coarse {
            assert!(alg.same_partition(&b.coarse[f]));
        }
        for (f, alg) in &a.fine {
            assert!(alg.same_partition(&b.fine[f]));
        }
    }
}
