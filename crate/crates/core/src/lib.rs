pub mod costs;
pub mod dynamics;
pub mod error;
pub mod game;
pub mod geometry;
pub mod network;
pub mod risk;
pub mod sim;
pub mod solver;
