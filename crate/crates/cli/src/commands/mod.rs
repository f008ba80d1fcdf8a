pub mod bon;
pub mod build_dataset;
pub mod corrupt;
pub mod eval;
pub mod plot;
pub mod score;
pub mod train;
