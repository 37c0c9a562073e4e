//! Websocket session server. One thread and one `Session` per connection;
//! all sessions share the frozen weights through the backend's `Arc`.

use std::io;
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::Arc;
use std::thread::{self, JoinHandle};

use groundtrack_core::simworld::Scenario;
use groundtrack_core::tracker::{PromptSchedule, TrackerConfig};
use tungstenite::stream::MaybeTlsStream;
use tungstenite::{Message, WebSocket};

use crate::protocol::SessionMessage;
use crate::session::{Backend, Session};

/// Everything a new session starts from.
#[derive(Clone, Debug)]
pub struct ServeContext {
    pub scenario: Arc<Scenario>,
    pub schedule: PromptSchedule,
    pub backend: Backend,
    pub config: TrackerConfig,
}

impl ServeContext {
    pub fn session(&self) -> groundtrack_core::Result<Session> {
        Session::new(self.scenario.clone(), self.schedule.clone(), self.backend.clone(), self.config)
    }
}

pub struct Server {
    listener: TcpListener,
    ctx: Arc<ServeContext>,
}

impl Server {
    pub fn bind(addr: impl ToSocketAddrs, ctx: ServeContext) -> io::Result<Self> {
        Ok(Self {
            listener: TcpListener::bind(addr)?,
            ctx: Arc::new(ctx),
        })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    /// Accepts connections forever.
    pub fn run(self) -> io::Result<()> {
        for stream in self.listener.incoming() {
            let stream = stream?;
            let ctx = self.ctx.clone();
            thread::spawn(move || {
                if let Err(e) = serve_connection(stream, &ctx) {
                    eprintln!("session ended with error: {e}");
                }
            });
        }
        Ok(())
    }

    /// Runs the accept loop on a background thread.
    pub fn spawn(self) -> JoinHandle<io::Result<()>> {
        thread::spawn(move || self.run())
    }
}

fn send(ws: &mut WebSocket<TcpStream>, m: &SessionMessage) -> tungstenite::Result<()> {
    ws.send(Message::text(m.to_text()))
}

/// Drives one session until the client leaves or the session ends.
pub fn serve_connection(stream: TcpStream, ctx: &ServeContext) -> tungstenite::Result<()> {
    let mut ws = tungstenite::accept(stream).map_err(|e| match e {
        tungstenite::HandshakeError::Failure(f) => f,
        tungstenite::HandshakeError::Interrupted(_) => tungstenite::Error::ConnectionClosed,
    })?;
    let mut session = match ctx.session() {
        Ok(s) => s,
        Err(e) => {
            send(&mut ws, &SessionMessage::error(e.to_string(), true))?;
            return ws.close(None);
        }
    };
    send(&mut ws, &session.hello())?;
    loop {
        let msg = match ws.read() {
            Ok(Message::Text(t)) => t,
            Ok(Message::Close(_)) | Err(tungstenite::Error::ConnectionClosed) => return Ok(()),
            Ok(Message::Binary(_)) => {
                send(&mut ws, &SessionMessage::error("binary frames are not supported", false))?;
                continue;
            }
            Ok(_) => continue,
            Err(e) => return Err(e),
        };
        let replies = match SessionMessage::from_text(msg.as_str()) {
            Ok(m) => session.handle(m),
            Err(e) => vec![SessionMessage::error(e, false)],
        };
        for r in &replies {
            send(&mut ws, r)?;
        }
        if session.ended() {
            ws.close(None)?;
            // Drain until the peer acknowledges the close.
            loop {
                match ws.read() {
                    Ok(_) => {}
                    Err(tungstenite::Error::ConnectionClosed) => return Ok(()),
                    Err(e) => return Err(e),
                }
            }
        }
    }
}

/// Blocking client used by scripted sessions and tests.
pub struct Client {
    ws: WebSocket<MaybeTlsStream<TcpStream>>,
}

impl Client {
    pub fn connect(addr: SocketAddr) -> tungstenite::Result<Self> {
        let (ws, _) = tungstenite::connect(format!("ws://{addr}"))?;
        Ok(Self { ws })
    }

    pub fn send(&mut self, m: &SessionMessage) -> tungstenite::Result<()> {
        self.ws.send(Message::text(m.to_text()))
    }

    /// Next server message; `None` once the server has closed.
    pub fn recv(&mut self) -> tungstenite::Result<Option<SessionMessage>> {
        loop {
            match self.ws.read() {
                Ok(Message::Text(t)) => {
                    return SessionMessage::from_text(t.as_str())
                        .map(Some)
                        .map_err(|e| tungstenite::Error::Io(io::Error::new(io::ErrorKind::InvalidData, e)))
                }
                Ok(Message::Close(_)) => continue,
                Ok(_) => continue,
                Err(tungstenite::Error::ConnectionClosed) | Err(tungstenite::Error::AlreadyClosed) => {
                    return Ok(None)
                }
                Err(e) => return Err(e),
            }
        }
    }

    pub fn close(mut self) -> tungstenite::Result<()> {
        self.ws.close(None)?;
        while self.recv()?.is_some() {}
        Ok(())
    }
}
