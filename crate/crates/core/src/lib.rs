pub mod grid;
pub mod profiles;
pub mod simulator;
pub mod flln;
pub mod fclt;
pub mod verify;
pub mod harness;
