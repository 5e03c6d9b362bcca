pub mod eval;
pub mod gradcheck;
pub mod run;
pub mod synth;
