//! Wire formats, transports and cost accounting for patch offloading.

pub mod frame;
pub mod ledger;
pub mod transport;

pub use frame::{
    bitmap_len, decode_patch_message, encode_patch_message, FrameError, ResultMessage, PATCH_HEADER_LEN,
    RESULT_FRAME_LEN,
};
pub use ledger::{CostLedger, CostRecord, CostSummary, LedgerError};
pub use transport::{ChannelTransport, FrameReader, FrameWriter, TcpTransport, Transport, TransportError};
