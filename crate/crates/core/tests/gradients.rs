mod common;

use common::{check_gradients, grad_instance};
use tvsl_core::avc_block::LossWeights;

const TERMS: [(&str, LossWeights); 4] = [
    ("detection", LossWeights { av: 0.0, cls: 0.0, mcid: 1.0 }),
    ("class conditioning", LossWeights { av: 0.0, cls: 1.0, mcid: 0.0 }),
    ("correspondence", LossWeights { av: 1.0, cls: 0.0, mcid: 0.0 }),
    ("total", LossWeights { av: 1.0, cls: 1.0, mcid: 1.0 }),
];

#[test]
fn each_loss_term_matches_central_differences() {
    for (name, w) in TERMS {
        for seed in 0..5 {
            let (model, batch) = grad_instance(seed, w);
            let r = check_gradients(&model, &batch, 1e-5);
            println!("{name} seed {seed}: {:.2e} ({})", r.max_rel_err, r.worst);
            assert!(r.max_rel_err <= 1e-4, "{name} seed {seed}: {}", r.worst);
        }
    }
}
