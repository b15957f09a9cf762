use redf_core::config::MaskMode;
use redf_core::gradcheck::{check_model, REL_TOL};
use redf_core::pipeline::generate_samples;
use redf_core::{Config, RedF};

fn small(mask_mode: MaskMode, use_graph: bool) -> Config {
    Config {
        num_channels: 2,
        lookback: 16,
        horizon: 4,
        patch_size: 4,
        patch_stride: 2,
        hidden_dim: 8,
        encoder_layers: 1,
        msp_count: 1,
        heads: 2,
        dropout: 0.0,
        mask_mode,
        use_graph,
        seed: 11,
        ..Config::default()
    }
}

fn series(total: usize) -> Vec<f64> {
    (0..2 * total)
        .map(|i| {
            let (c, t) = (i / total, (i % total) as f64);
            (0.41 * t + c as f64).sin() + 0.3 * (1.7 * t).cos() + 0.05 * ((i * 7919) % 13) as f64
        })
        .collect()
}

fn run(cfg: Config) {
    let model = RedF::new(cfg).unwrap();
    let s = series(40);
    let sample = generate_samples(&s, 2, 40, 3, 16, 4, 1).unwrap();
    let report = check_model(&model, &sample, 8).unwrap();
    assert!(report.checked > 100);
    assert!(report.passed(), "worst {:?}, {} failures", report.worst, report.failures.len());
    assert!(report.max_rel_err <= REL_TOL);
}

#[test]
fn soft_graph_objective_matches_finite_differences() {
    run(small(MaskMode::Soft, true));
}

#[test]
fn hard_graph_objective_matches_finite_differences() {
    run(small(MaskMode::Binary, true));
}

#[test]
fn unmasked_objective_matches_finite_differences() {
    run(small(MaskMode::Binary, false));
}
