use crate::sampler::ContextWindow;

/// Mean of the unmasked target-column values of the seed's entity in the
/// window; `fallback` when there are none.
pub fn entity_mean_baseline(window: &ContextWindow, fallback: f64) -> f64 {
    let (sum, n) = window
        .tokens
        .iter()
        .filter(|t| !t.is_masked && t.column == window.target && window.entity_of(t) == window.seed_entity)
        .filter_map(|t| t.value.as_scalar())
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        fallback
    } else {
        sum / n as f64
    }
}
