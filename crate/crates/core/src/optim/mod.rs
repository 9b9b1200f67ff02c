pub mod adam;
pub mod density;
pub mod fit;
pub mod grad;
pub mod gradcheck;
pub mod hair;
pub mod train;
