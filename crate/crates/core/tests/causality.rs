mod suites;

#[test]
fn backbone_rows_ignore_later_tokens() {
    suites::causality::backbone_rows_ignore_later_tokens();
}

#[test]
fn backbone_attention_is_causal_on_real_sequences() {
    suites::causality::backbone_attention_is_causal_on_real_sequences();
}

#[test]
fn memory_rows_ignore_later_slots() {
    suites::causality::memory_rows_ignore_later_slots();
}

#[test]
fn padded_slots_never_reach_the_feature() {
    suites::causality::padded_slots_never_reach_the_feature();
}

#[test]
fn feature_depends_only_on_the_window() {
    suites::causality::feature_depends_only_on_the_window();
}
