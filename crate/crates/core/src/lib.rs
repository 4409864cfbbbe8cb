pub mod coupling;
pub mod grid;
pub mod hamiltonian;
pub mod paths;
pub mod stopping;
pub mod action;
pub mod solver;
pub mod cli;
