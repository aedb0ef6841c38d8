//! Error type shared by every module.
//!
//! Each variant maps to a short, stable error code (`bad-shape`,
//! `region-oob`, ...) that the CLI prints and that tests match on.

use std::io;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("bad-shape: {0}")]
    BadShape(String),
    #[error("bad-cast: {0}")]
    BadCast(String),
    #[error("bad-code: {0}")]
    BadCode(String),
    #[error("bad-block: {0}")]
    BadBlock(String),
    #[error("bad-value: {0}")]
    BadValue(String),
    #[error("bad-layout: {0}")]
    BadLayout(String),
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("bad-perm: {0}")]
    BadPerm(String),
    #[error("bad-range: {0}")]
    BadRange(String),
    #[error("region-oob: {0}")]
    RegionOob(String),
    #[error("io-error: {0}")]
    Io(#[from] io::Error),
    #[error("bad-size: {0}")]
    BadSize(String),
    #[error("bad-token: {0}")]
    BadToken(String),
    #[error("bad-ticket: {0}")]
    BadTicket(String),
    #[error("bad-model: {0}")]
    BadModel(String),
    #[error("bad-prompt: {0}")]
    BadPrompt(String),
    #[error("ctx-full: {0}")]
    CtxFull(String),
    #[error("bad-lora: {0}")]
    BadLora(String),
    #[error("bad-arg: {0}")]
    BadArg(String),
}

impl Error {
    /// The stable short code for this error.
    pub fn code(&self) -> &'static str {
        match self {
            Error::BadShape(_) => "bad-shape",
            Error::BadCast(_) => "bad-cast",
            Error::BadCode(_) => "bad-code",
            Error::BadBlock(_) => "bad-block",
            Error::BadValue(_) => "bad-value",
            Error::BadLayout(_) => "bad-layout",
            Error::Infeasible(_) => "infeasible",
            Error::BadPerm(_) => "bad-perm",
            Error::BadRange(_) => "bad-range",
            Error::RegionOob(_) => "region-oob",
            Error::Io(_) => "io-error",
            Error::BadSize(_) => "bad-size",
            Error::BadToken(_) => "bad-token",
            Error::BadTicket(_) => "bad-ticket",
            Error::BadModel(_) => "bad-model",
            Error::BadPrompt(_) => "bad-prompt",
            Error::CtxFull(_) => "ctx-full",
            Error::BadLora(_) => "bad-lora",
            Error::BadArg(_) => "bad-arg",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
