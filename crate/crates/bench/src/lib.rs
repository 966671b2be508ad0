//! Empty library; the crate exists for its criterion benches.
