//! Campaign preparation: HAR conversion, compose generation, login
//! profiles and WordPress endpoint extraction.

pub mod compose;
pub mod har;
pub mod hargen;
pub mod login;
pub mod wordpress;
