//! C ABI surface for the tfr toolkit.
