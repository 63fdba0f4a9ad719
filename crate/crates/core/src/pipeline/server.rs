use std::net::TcpListener;
use std::sync::Arc;
use std::thread::{self, JoinHandle};

use thiserror::Error;

use crate::protocol::{
    decode_patch_message, ChannelTransport, FrameError, ResultMessage, TcpTransport, Transport, TransportError,
};
use crate::vit::{classify_grid, ModelWeights, VitError};

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("bad frame: {0}")]
    Frame(#[from] FrameError),
    #[error("inference failed: {0}")]
    Model(#[from] VitError),
    #[error(transparent)]
    Transport(#[from] TransportError),
}

/// Server-side inference on received patch subsets. Cheap to clone; the
/// weights are shared read-only.
#[derive(Debug, Clone)]
pub struct Server {
    weights: Arc<ModelWeights>,
}

impl Server {
    pub fn new(weights: ModelWeights) -> Self {
        Self { weights: Arc::new(weights) }
    }

    pub fn from_shared(weights: Arc<ModelWeights>) -> Self {
        Self { weights }
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    /// Patch frame in, result frame out.
    pub fn handle_frame(&self, frame: &[u8]) -> Result<Vec<u8>, ServerError> {
        let (image_id, grid) = decode_patch_message(frame)?;
        let (label, trace) = classify_grid(&grid, &self.weights)?;
        let reply = ResultMessage { image_id, label: label as u32, confidence: trace.confidence() as f32 };
        Ok(reply.encode().to_vec())
    }

    /// Answers frames until the peer closes. Returns the number handled.
    /// A frame that cannot be processed ends the connection.
    pub fn serve<T: Transport>(&self, mut transport: T) -> Result<usize, ServerError> {
        let mut handled = 0;
        while let Some(frame) = transport.recv()? {
            let reply = self.handle_frame(&frame)?;
            transport.send(&reply)?;
            handled += 1;
        }
        Ok(handled)
    }

    /// Accepts connections forever, one thread per connection.
    pub fn serve_tcp(&self, listener: TcpListener) -> std::io::Result<()> {
        for stream in listener.incoming() {
            let stream = stream?;
            let server = self.clone();
            thread::spawn(move || {
                let peer = stream.peer_addr().map(|a| a.to_string()).unwrap_or_default();
                let result = TcpTransport::from_stream(stream).map_err(ServerError::from).and_then(|t| server.serve(t));
                if let Err(e) = result {
                    eprintln!("patchcast server: connection {peer}: {e}");
                }
            });
        }
        Ok(())
    }

    /// Starts a server thread behind an in-process channel and returns the
    /// client end. The thread exits when the client end is dropped.
    pub fn spawn_in_process(&self) -> (ChannelTransport, JoinHandle<Result<usize, ServerError>>) {
        let (client, server_end) = ChannelTransport::pair();
        let server = self.clone();
        let handle = thread::spawn(move || server.serve(server_end));
        (client, handle)
    }
}
