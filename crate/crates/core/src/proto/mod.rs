//! One-shot upload of encrypted shards to a collecting server, model
//! download, and the communication-cost model.

pub mod client;
pub mod cost;
pub mod server;
pub mod transport;
pub mod wire;

use std::io;

use thiserror::Error;

pub use client::{expected_upload_bytes, fetch_model, upload, TransferSummary, UploadOptions};
pub use cost::{cost_report, CostParams, CostReport, Regime};
pub use server::{serve, serve_with, Server, ServerConfig, ServerHandle, SessionState, SessionStats};
pub use transport::{Connector, Fault, FaultPlan, LoopbackConnector, TcpConnector};
pub use wire::{ErrorCode, Frame, MessageType};

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error(transparent)]
    Io(#[from] io::Error),

    #[error("malformed message: {0}")]
    Malformed(String),

    #[error("unknown message type tag {0}")]
    UnknownType(u8),

    #[error("server error {code}: {message}")]
    Remote { code: u16, message: String },

    #[error("model artifact digest mismatch")]
    DigestMismatch,

    #[error("invalid upload: {0}")]
    Local(String),
}

impl ProtocolError {
    pub fn remote_code(&self) -> Option<ErrorCode> {
        match self {
            ProtocolError::Remote { code, .. } => ErrorCode::from_u16(*code),
            _ => None,
        }
    }
}
