#![allow(dead_code)]

pub mod freeze;
pub mod gradcheck;
pub mod perceiver;
pub mod recipe;
