use tokmdp::experiments::{argmin, corruption_benchmark, CorruptionConfig};
use tokmdp::heatmap::{token_colors, HeatmapFormat, NEGATIVE, NEUTRAL};
use tokmdp_core::Trajectory;

#[test]
fn localized_corruptions_render_at_the_negative_extreme() {
    let out = corruption_benchmark(&CorruptionConfig::default()).unwrap();
    assert!(out.report.passed, "{:?}", out.report);
    let mut checked = 0;
    for (r, values) in out.task.heldout.iter().zip(&out.heldout_rewards) {
        let Some(i) = r.corrupted_index else { continue };
        if argmin(values) != Some(i) {
            continue;
        }
        let traj = Trajectory::new(r.prompt.clone(), r.rejected.clone());
        let colors = token_colors(&traj, values).unwrap();
        if values[i].abs() >= values.iter().fold(0.0f64, |m, v| m.max(v.abs())) {
            assert_eq!(colors[i], NEGATIVE);
        }
        if values[i] < 0.0 {
            assert!(colors[i].2 < NEUTRAL.2, "negative values lean red");
        }
        checked += 1;
    }
    assert!(checked >= 90);
    let html = out.heatmap(5, HeatmapFormat::Html).unwrap();
    assert!(html.contains("corrupted at"));
}
