//! Empty library target; the package exists for its `benches/` only.
