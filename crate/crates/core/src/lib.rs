pub mod augment;
pub mod clipper;
pub mod error;
pub mod evalmap;
pub mod gradcheck;
pub mod net3d;
pub mod pipeline;
pub mod postproc;
pub mod synthvid;
pub mod tensor;
pub mod trainer;
