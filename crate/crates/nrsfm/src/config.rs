//! Config parsing.
