//! Operator surface for AWI models: the `awi` command line and the HTTP
//! chat API.

pub mod api;
pub mod cli;
