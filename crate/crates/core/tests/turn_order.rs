mod support;

use tooltraj_core::trajectory::validate_turn_order;

#[test]
fn exhaustive_against_regular_language() {
    let oracle = support::turn_order_oracle();
    let mut disagreements = Vec::new();
    let words = support::all_words(&['u', 'a', 'c', 't', 's'], 7);
    for w in &words {
        let messages: Vec<_> = w.chars().map(support::message_for).collect();
        let ok = validate_turn_order(&messages).is_empty();
        if ok != oracle.is_match(w) {
            disagreements.push(w.clone());
        }
    }
    assert!(
        disagreements.is_empty(),
        "{:?}",
        &disagreements[..disagreements.len().min(10)]
    );
}

#[test]
fn diagnostics_point_inside_or_at_end() {
    for w in support::all_words(&['u', 'a', 'c', 't'], 6) {
        let messages: Vec<_> = w.chars().map(support::message_for).collect();
        for d in validate_turn_order(&messages) {
            assert!(d.index <= messages.len(), "{w}: {d:?}");
        }
    }
}
