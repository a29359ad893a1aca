//! Crate-internal imports shared by every module.
#![allow(unused_imports)]

pub(crate) use alloc::boxed::Box;
pub(crate) use alloc::format;
pub(crate) use alloc::string::{String, ToString};
pub(crate) use alloc::vec;
pub(crate) use alloc::vec::Vec;
pub(crate) use num_traits::Float;

pub(crate) use crate::error::{Error, Result};
