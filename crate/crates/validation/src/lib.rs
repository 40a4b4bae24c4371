//! Holds the `acceptance` integration test target; run it with
//! `cargo test -p wideformer-validation --test acceptance -- --test-threads 1`.
