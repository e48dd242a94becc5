//! Recommendability identification: deciding, at each system turn of a
//! conversation, whether a recommendation is appropriate.

pub mod archive;
pub mod backbone;
pub mod corpus;
pub mod evaluation;
pub mod methods;
pub mod templates;
