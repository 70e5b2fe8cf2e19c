//! Byte-stream and websocket bindings for the frame codec.

use async_trait::async_trait;
use futures::stream::{SplitSink, SplitStream};
use futures::{SinkExt, StreamExt};
use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt, ReadHalf, WriteHalf};
use tokio_tungstenite::tungstenite::Message as WsMessage;
use tokio_tungstenite::WebSocketStream;

use super::codec::{decode_exact, decode_frame, CodecError, Decoded};
use super::message::RpcMessage;

#[derive(Debug, thiserror::Error)]
pub enum TransportError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("websocket: {0}")]
    WebSocket(String),
}

#[async_trait]
pub trait FrameSink: Send {
    async fn send_frame(&mut self, frame: Vec<u8>) -> Result<(), TransportError>;
    async fn close(&mut self);
}

#[async_trait]
pub trait FrameSource: Send {
    /// Next message, or `None` on orderly end of stream.
    async fn recv(&mut self) -> Result<Option<RpcMessage>, TransportError>;
}

pub struct Transport {
    pub sink: Box<dyn FrameSink>,
    pub source: Box<dyn FrameSource>,
}

impl Transport {
    /// Binds an ordered reliable byte stream (TCP, pipes, in-memory duplex).
    pub fn from_stream<S>(stream: S) -> Transport
    where
        S: AsyncRead + AsyncWrite + Send + 'static,
    {
        let (rd, wr) = tokio::io::split(stream);
        Transport {
            sink: Box::new(StreamSink { wr }),
            source: Box::new(StreamSource { rd, buf: Vec::with_capacity(8192) }),
        }
    }

    /// Binds a websocket; each frame travels as one binary message.
    pub fn from_websocket<S>(ws: WebSocketStream<S>) -> Transport
    where
        S: AsyncRead + AsyncWrite + Unpin + Send + 'static,
    {
        let (sink, stream) = ws.split();
        Transport {
            sink: Box::new(WsSink { sink }),
            source: Box::new(WsSource { stream }),
        }
    }

    /// Connects to `tcp://host:port`, `host:port` or `ws://host:port/path`.
    pub async fn connect(addr: &str) -> Result<Transport, TransportError> {
        if addr.starts_with("ws://") || addr.starts_with("wss://") {
            let (ws, _) = tokio_tungstenite::connect_async(addr)
                .await
                .map_err(|e| TransportError::WebSocket(e.to_string()))?;
            Ok(Transport::from_websocket(ws))
        } else {
            let hostport = addr.strip_prefix("tcp://").unwrap_or(addr);
            let stream = tokio::net::TcpStream::connect(hostport).await?;
            stream.set_nodelay(true)?;
            Ok(Transport::from_stream(stream))
        }
    }
}

struct StreamSink<S> {
    wr: WriteHalf<S>,
}

#[async_trait]
impl<S: AsyncRead + AsyncWrite + Send + 'static> FrameSink for StreamSink<S> {
    async fn send_frame(&mut self, frame: Vec<u8>) -> Result<(), TransportError> {
        self.wr.write_all(&frame).await?;
        self.wr.flush().await?;
        Ok(())
    }

    async fn close(&mut self) {
        let _ = self.wr.shutdown().await;
    }
}

struct StreamSource<S> {
    rd: ReadHalf<S>,
    buf: Vec<u8>,
}

#[async_trait]
impl<S: AsyncRead + AsyncWrite + Send + 'static> FrameSource for StreamSource<S> {
    async fn recv(&mut self) -> Result<Option<RpcMessage>, TransportError> {
        loop {
            if !self.buf.is_empty() {
                if let Decoded::Message(msg, used) = decode_frame(&self.buf)? {
                    self.buf.drain(..used);
                    return Ok(Some(msg));
                }
            }
            let n = self.rd.read_buf(&mut self.buf).await?;
            if n == 0 {
                if self.buf.is_empty() {
                    return Ok(None);
                }
                return Err(std::io::Error::from(std::io::ErrorKind::UnexpectedEof).into());
            }
        }
    }
}

struct WsSink<S> {
    sink: SplitSink<WebSocketStream<S>, WsMessage>,
}

#[async_trait]
impl<S: AsyncRead + AsyncWrite + Unpin + Send + 'static> FrameSink for WsSink<S> {
    async fn send_frame(&mut self, frame: Vec<u8>) -> Result<(), TransportError> {
        self.sink
            .send(WsMessage::Binary(frame))
            .await
            .map_err(|e| TransportError::WebSocket(e.to_string()))
    }

    async fn close(&mut self) {
        let _ = self.sink.close().await;
    }
}

struct WsSource<S> {
    stream: SplitStream<WebSocketStream<S>>,
}

#[async_trait]
impl<S: AsyncRead + AsyncWrite + Unpin + Send + 'static> FrameSource for WsSource<S> {
    async fn recv(&mut self) -> Result<Option<RpcMessage>, TransportError> {
        loop {
            match self.stream.next().await {
                None | Some(Ok(WsMessage::Close(_))) => return Ok(None),
                Some(Ok(WsMessage::Binary(b))) => return Ok(Some(decode_exact(&b)?)),
                Some(Ok(WsMessage::Ping(_) | WsMessage::Pong(_) | WsMessage::Frame(_))) => continue,
                Some(Ok(WsMessage::Text(_))) => {
                    return Err(TransportError::WebSocket("text messages are not part of the protocol".into()))
                }
                Some(Err(e)) => return Err(TransportError::WebSocket(e.to_string())),
            }
        }
    }
}
