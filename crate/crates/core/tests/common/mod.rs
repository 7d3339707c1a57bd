#![allow(dead_code)]
pub mod gen;
pub mod gradcheck;
pub mod oracles;
