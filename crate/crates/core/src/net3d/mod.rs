pub mod io;
pub mod layers;
pub mod model;
