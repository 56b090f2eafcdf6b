//! Holds the end-to-end acceptance checks in `tests/acceptance.rs`.
