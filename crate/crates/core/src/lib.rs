pub mod campaign;
pub mod config;
pub mod detect;
pub mod feedback;
pub mod model;
pub mod mock;
pub mod mutation;
pub mod request;
pub mod scheduler;
pub mod tooling;
