//! Scene, camera and asset serialization.

pub mod asset;
pub mod cameras;
pub mod ply;

pub use asset::{read_asset, LodAsset};
pub use cameras::{read_cameras_json, write_cameras_json};
pub use ply::{read_splat_ply, write_splat_ply};
