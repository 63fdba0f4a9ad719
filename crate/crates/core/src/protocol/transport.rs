//! Frame transports: an in-process channel pair and a length-prefixed byte
//! stream (TCP in practice).

use std::io::{self, BufReader, BufWriter, ErrorKind, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::mpsc::{channel, Receiver, Sender};

use thiserror::Error;

/// Frames larger than this are rejected on receipt.
pub const MAX_FRAME_LEN: u32 = 64 << 20;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("peer closed the connection")]
    Closed,
    #[error("connection lost mid-frame ({got} of {expected} bytes)")]
    MidFrame { expected: usize, got: usize },
    #[error("frame of {0} bytes exceeds the limit")]
    FrameTooLarge(u32),
}

/// Ordered, reliable delivery of whole frames.
pub trait Transport: Send {
    fn send(&mut self, frame: &[u8]) -> Result<(), TransportError>;

    /// `Ok(None)` when the peer has shut down cleanly between frames.
    fn recv(&mut self) -> Result<Option<Vec<u8>>, TransportError>;
}

impl<T: Transport + ?Sized> Transport for Box<T> {
    fn send(&mut self, frame: &[u8]) -> Result<(), TransportError> {
        (**self).send(frame)
    }

    fn recv(&mut self) -> Result<Option<Vec<u8>>, TransportError> {
        (**self).recv()
    }
}

/// One end of an in-process duplex channel.
pub struct ChannelTransport {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
}

impl ChannelTransport {
    pub fn pair() -> (Self, Self) {
        let (a_tx, b_rx) = channel();
        let (b_tx, a_rx) = channel();
        (Self { tx: a_tx, rx: a_rx }, Self { tx: b_tx, rx: b_rx })
    }
}

impl Transport for ChannelTransport {
    fn send(&mut self, frame: &[u8]) -> Result<(), TransportError> {
        self.tx.send(frame.to_vec()).map_err(|_| TransportError::Closed)
    }

    fn recv(&mut self) -> Result<Option<Vec<u8>>, TransportError> {
        Ok(self.rx.recv().ok())
    }
}

/// Writes `u32` little-endian length then the frame bytes.
pub struct FrameWriter<W: Write> {
    inner: W,
}

impl<W: Write> FrameWriter<W> {
    pub fn new(inner: W) -> Self {
        Self { inner }
    }

    pub fn write_frame(&mut self, frame: &[u8]) -> Result<(), TransportError> {
        let len = u32::try_from(frame.len()).ok().filter(|&l| l <= MAX_FRAME_LEN);
        let len = len.ok_or(TransportError::FrameTooLarge(frame.len().min(u32::MAX as usize) as u32))?;
        self.inner.write_all(&len.to_le_bytes())?;
        self.inner.write_all(frame)?;
        self.inner.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.inner
    }
}

/// Reassembles length-prefixed frames from arbitrary read boundaries.
pub struct FrameReader<R: Read> {
    inner: R,
}

impl<R: Read> FrameReader<R> {
    pub fn new(inner: R) -> Self {
        Self { inner }
    }

    /// Fills `buf`; returns how many bytes arrived before EOF.
    fn fill(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        let mut got = 0;
        while got < buf.len() {
            match self.inner.read(&mut buf[got..]) {
                Ok(0) => break,
                Ok(n) => got += n,
                Err(e) if e.kind() == ErrorKind::Interrupted => {}
                Err(e) => return Err(e),
            }
        }
        Ok(got)
    }

    pub fn read_frame(&mut self) -> Result<Option<Vec<u8>>, TransportError> {
        let mut len = [0u8; 4];
        match self.fill(&mut len)? {
            0 => return Ok(None),
            4 => {}
            got => return Err(TransportError::MidFrame { expected: 4, got }),
        }
        let len = u32::from_le_bytes(len);
        if len > MAX_FRAME_LEN {
            return Err(TransportError::FrameTooLarge(len));
        }
        let mut frame = vec![0u8; len as usize];
        let got = self.fill(&mut frame)?;
        if got != frame.len() {
            return Err(TransportError::MidFrame { expected: frame.len(), got });
        }
        Ok(Some(frame))
    }
}

/// Length-prefixed frames over a TCP connection.
pub struct TcpTransport {
    reader: FrameReader<BufReader<TcpStream>>,
    writer: FrameWriter<BufWriter<TcpStream>>,
}

impl TcpTransport {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self, TransportError> {
        Self::from_stream(TcpStream::connect(addr)?)
    }

    pub fn from_stream(stream: TcpStream) -> Result<Self, TransportError> {
        stream.set_nodelay(true)?;
        let reader = FrameReader::new(BufReader::new(stream.try_clone()?));
        let writer = FrameWriter::new(BufWriter::new(stream));
        Ok(Self { reader, writer })
    }

    /// Half-closes the write side so the peer sees a clean end of stream.
    pub fn shutdown_write(&mut self) -> Result<(), TransportError> {
        self.writer.inner.flush()?;
        self.writer.inner.get_ref().shutdown(std::net::Shutdown::Write)?;
        Ok(())
    }
}

impl Transport for TcpTransport {
    fn send(&mut self, frame: &[u8]) -> Result<(), TransportError> {
        self.writer.write_frame(frame)
    }

    fn recv(&mut self) -> Result<Option<Vec<u8>>, TransportError> {
        self.reader.read_frame()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;
    use std::net::TcpListener;
    use std::thread;

    /// Yields at most `chunk` bytes per read.
    struct Trickle<R> {
        inner: R,
        chunk: usize,
    }

    impl<R: Read> Read for Trickle<R> {
        fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
            let n = buf.len().min(self.chunk);
            self.inner.read(&mut buf[..n])
        }
    }

    fn framed(frames: &[Vec<u8>]) -> Vec<u8> {
        let mut w = FrameWriter::new(Vec::new());
        for f in frames {
            w.write_frame(f).unwrap();
        }
        w.into_inner()
    }

    #[test]
    fn reassembles_partial_reads() {
        let frames = vec![vec![1, 2, 3], vec![], vec![9; 1000]];
        let bytes = framed(&frames);
        for chunk in [1, 2, 3, 7, 1000] {
            let mut r = FrameReader::new(Trickle { inner: Cursor::new(bytes.clone()), chunk });
            let mut got = Vec::new();
            while let Some(f) = r.read_frame().unwrap() {
                got.push(f);
            }
            assert_eq!(got, frames);
        }
    }

    #[test]
    fn empty_stream_is_clean() {
        let mut r = FrameReader::new(Cursor::new(Vec::new()));
        assert!(r.read_frame().unwrap().is_none());
    }

    #[test]
    fn truncation_is_an_error() {
        let bytes = framed(&[vec![5; 10]]);
        let mut r = FrameReader::new(Cursor::new(bytes[..8].to_vec()));
        assert!(matches!(r.read_frame(), Err(TransportError::MidFrame { expected: 10, got: 4 })));
        let mut r = FrameReader::new(Cursor::new(bytes[..2].to_vec()));
        assert!(matches!(r.read_frame(), Err(TransportError::MidFrame { expected: 4, got: 2 })));
        let mut r = FrameReader::new(Cursor::new(u32::MAX.to_le_bytes().to_vec()));
        assert!(matches!(r.read_frame(), Err(TransportError::FrameTooLarge(_))));
    }

    #[test]
    fn channel_pair_is_duplex() {
        let (mut a, mut b) = ChannelTransport::pair();
        a.send(b"ping").unwrap();
        assert_eq!(b.recv().unwrap().unwrap(), b"ping");
        b.send(b"pong").unwrap();
        assert_eq!(a.recv().unwrap().unwrap(), b"pong");
        drop(b);
        assert!(a.recv().unwrap().is_none());
        assert!(matches!(a.send(b"x"), Err(TransportError::Closed)));
    }

    #[test]
    fn tcp_echo_and_clean_close() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server = thread::spawn(move || {
            let (s, _) = listener.accept().unwrap();
            let mut t = TcpTransport::from_stream(s).unwrap();
            let mut n = 0;
            while let Some(f) = t.recv().unwrap() {
                t.send(&f).unwrap();
                n += 1;
            }
            n
        });
        let mut c = TcpTransport::connect(addr).unwrap();
        for i in 0..20u8 {
            c.send(&vec![i; i as usize * 13]).unwrap();
            assert_eq!(c.recv().unwrap().unwrap(), vec![i; i as usize * 13]);
        }
        c.shutdown_write().unwrap();
        assert!(c.recv().unwrap().is_none());
        assert_eq!(server.join().unwrap(), 20);
    }
}
