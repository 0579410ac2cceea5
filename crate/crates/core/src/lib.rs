pub mod evalkit;
pub mod experiment;
pub mod model;
pub mod numcore;
pub mod prompting;
pub mod toylang;
pub mod trainer;
pub mod vocab;
