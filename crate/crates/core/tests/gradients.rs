mod suites;

#[test]
fn every_kernel_matches_finite_differences() {
    suites::gradients::kernels();
}

#[test]
fn two_block_stack_matches_finite_differences() {
    suites::gradients::composed_blocks();
}
