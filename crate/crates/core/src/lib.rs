pub mod autodiff;
pub mod corpus;
pub mod encoder;
pub mod heads;
pub mod labelspace;
pub mod metrics;
pub mod params;
pub mod taxonomy;
pub mod trainer;
