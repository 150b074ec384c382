pub mod crf;
pub mod deepem;
pub mod detect;
pub mod gradcheck;
pub mod metrics;
pub mod mil;
