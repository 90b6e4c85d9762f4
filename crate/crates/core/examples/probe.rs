use std::collections::BTreeMap;
use std::time::Instant;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regulus_core::discrepancy::Oracle;
use regulus_core::measure::{CylinderSet, FactorAlgebra};
use regulus_core::regularity::{full_regularity, verify_decomposition, GrowthFunction};
use regulus_core::system::{Edge, HypergraphSystem};

fn main() {
    let labels = vec!["1".into(), "2".into(), "3".into()];
    let top = vec![
        Edge::new(vec![0, 1]).unwrap(),
        Edge::new(vec![1, 2]).unwrap(),
        Edge::new(vec![0, 2]).unwrap(),
    ];
    for n in [4u64, 8u64] {
        let sys = HypergraphSystem::new(labels.clone(), vec![n, n, n], 2, top.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut tops = BTreeMap::new();
        for e in sys.top_layer() {
            let mut s = CylinderSet::empty(&sys, e.clone());
            for idx in 0..sys.cells(e) {
                if rng.gen_bool(0.5) { s.insert_index(idx); }
            }
            tops.insert(e.clone(), FactorAlgebra::from_set(&sys, &s));
        }
        let growth = GrowthFunction::exponential(2.0).unwrap();
        let oracle = Oracle::exact();
        let t0 = Instant::now();
        let decomp = full_regularity(&sys, &tops, 1.0, &growth, &oracle).unwrap();
        let t1 = t0.elapsed();
        let audit = verify_decomposition(&sys, &tops, &decomp, &growth, &oracle).unwrap();
        let t2 = t0.elapsed();
        println!("n={n}: thresholds={:?} regularize={:?} verify={:?} all_pass={} increments={}",
            decomp.thresholds, t1, t2 - t1, audit.all_pass(),
            decomp.audit.records.iter().filter(|r| r.action == "increment").count());
        for (f, alg) in &decomp.coarse {
            println!("  coarse {:?}: atoms={} bound={}", f, alg.atom_count(), alg.complexity_bound());
        }
    }
}
