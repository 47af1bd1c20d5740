use nucleisam::trainer::{best_epoch, early_stop_check, EarlyStopper, StopDecision};
use proptest::prelude::*;

/// Textbook patience loop: returns the epoch at which training stops, if any,
/// and the best epoch seen up to then.
fn reference(history: &[f64], patience: usize) -> (Option<usize>, Option<usize>) {
    let mut best = f64::INFINITY;
    let mut best_at = None;
    let mut wait = 0;
    for (i, &v) in history.iter().enumerate() {
        if v < best {
            best = v;
            best_at = Some(i);
            wait = 0;
        } else {
            wait += 1;
        }
        if wait >= patience {
            return (Some(i), best_at);
        }
    }
    (None, best_at)
}

fn loss() -> impl Strategy<Value = f64> {
    prop_oneof![
        20 => (0u32..20).prop_map(|v| v as f64 / 4.0),
        1 => Just(f64::NAN),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn matches_reference_loop(history in proptest::collection::vec(loss(), 0..60), patience in 1usize..12) {
        let (stop_at, best_at) = reference(&history, patience);
        let mut stopper = EarlyStopper::new(patience);
        let mut first_stop = None;
        for (i, &v) in history.iter().enumerate() {
            let (_, d) = stopper.observe(v);
            prop_assert_eq!(d, early_stop_check(&history[..=i], patience));
            if d == StopDecision::Stop && first_stop.is_none() {
                first_stop = Some(i);
            }
        }
        prop_assert_eq!(first_stop, stop_at);
        let cut = stop_at.map_or(history.len(), |s| s + 1);
        prop_assert_eq!(best_epoch(&history[..cut]), best_at);
        prop_assert_eq!(stopper.best().map(|b| b.0), best_epoch(&history));
    }
}

#[test]
fn monotone_decrease_never_stops() {
    let h: Vec<f64> = (0..400).map(|i| 1.0 / (1.0 + i as f64)).collect();
    let mut s = EarlyStopper::new(40);
    assert!(h.iter().all(|&v| s.observe(v).1 == StopDecision::Continue));
}

#[test]
fn plateau_is_not_improvement() {
    let mut h = vec![1.0];
    h.extend(std::iter::repeat_n(1.0, 40));
    assert_eq!(early_stop_check(&h, 40), StopDecision::Stop);
    assert_eq!(best_epoch(&h), Some(0));
}
