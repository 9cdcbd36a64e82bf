pub mod cell;
pub mod net;
pub mod seed;
pub mod surrogate;
pub mod eval;
pub mod search;
