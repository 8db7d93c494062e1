#![allow(dead_code)]

pub mod fd;
pub mod grad_suite;
pub mod criteria;
