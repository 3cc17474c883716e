//! Independent reference implementations shared by the integration and acceptance tests.
#![allow(dead_code)]

pub mod assignment;
pub mod attention;
pub mod evaluation;
