#![allow(dead_code)]

pub mod pdhg;
