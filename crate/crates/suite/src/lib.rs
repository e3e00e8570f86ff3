//! Holds the acceptance run (`tests/acceptance.rs`). It is a separate package so
//! that `cargo test --workspace` runs it after the other crates' tests.
