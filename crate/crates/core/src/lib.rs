pub mod analysis;
pub mod arch;
pub mod cli;
pub mod context;
pub mod error;
pub mod gates;
pub mod kernels;
pub mod params;
pub mod smg;
pub mod tape;
pub mod tensor;
pub mod verify;
