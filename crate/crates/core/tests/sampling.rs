use std::sync::Arc;

use loomtune::annotate::{sample_program, AnnotationPolicy};
use loomtune::interp::{check_equivalent, random_inputs, reference};
use loomtune::ir::validate;
use loomtune::sketch::{generate_sketches, SketchPolicy};
use loomtune::workloads::Workload;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn sampled_programs_match_reference_on_small_workloads() {
    let policy = AnnotationPolicy {
        compute_location_prob: 0.5,
        ..AnnotationPolicy::default()
    };
    for w in Workload::small_registry() {
        let dag = Arc::new(w.build());
        let inputs = random_inputs(&dag, 1);
        let want = reference(&dag, &inputs).unwrap();
        let sketches = generate_sketches(&dag, &[], &SketchPolicy::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for i in 0..60 {
            let s = &sketches[i % sketches.len()];
            let p = sample_program(&s.program, &policy, &mut rng).unwrap();
            validate(&p).unwrap();
            check_equivalent(&p, &inputs, &want, 1e-5).unwrap_or_else(|e| panic!("{}: {e}\n{p}", dag.id));
        }
    }
}
