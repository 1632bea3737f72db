pub mod camera;
pub mod consistency;
pub mod density;
pub mod error;
pub mod gaussian;
pub mod image;
pub mod init;
pub mod loss;
pub mod optim;
pub mod ply;
pub mod render;
pub mod scene;
pub mod testkit;
pub mod train;

pub use error::{Error, Result};
