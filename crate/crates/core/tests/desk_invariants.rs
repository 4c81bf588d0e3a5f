//! Training invariants on the desk configuration.

use msrl_core::geometry::EPS_BALL;
use msrl_core::synth::{generate_corpus, SubtypeProfile};
use msrl_core::training::{train, TrainConfig, TrainOptions};

#[test]
fn desk_run_invariants() {
    let slides = generate_corpus(&SubtypeProfile::default_set(), 200, 7, 256).unwrap();
    let cfg = TrainConfig::default();
    let k = cfg.prototypes as f64;
    let uniform = (1.0 - cfg.lambda + cfg.beta) * k.ln();
    let ck = train(cfg, &slides, &TrainOptions::default(), |_| {}).unwrap();
    let h = &ck.history;
    assert_eq!(h.len(), 30);
    // untrained net starts near the all-uniform value
    assert!(
        (h[0].loss - uniform).abs() <= 0.1 * uniform.abs(),
        "{} vs {uniform}",
        h[0].loss
    );
    assert!(h.last().unwrap().loss < h[1].loss);
    // the mean-entropy regularizer keeps prototype usage spread out
    assert!(h.last().unwrap().mean_entropy >= 0.5 * k.ln());
    for e in h {
        assert!(e.max_ball_norm <= 1.0 - EPS_BALL);
        assert!(e.prototype_norm_deviation <= 1e-9);
    }
}
