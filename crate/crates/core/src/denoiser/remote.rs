//! Client side of the frame protocol in [`super::wire`].

use std::io::{self, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;
use std::time::Duration;

use super::wire::{self, HelloResponse, PredictResponseHeader, PROTOCOL_VERSION};
use super::{Condition, NoisePredictor, PredictOutput, PredictorError, Result};
use crate::tensor::{Shape, Tensor};

pub trait Duplex: Read + Write + Send {}
impl<T: Read + Write + Send> Duplex for T {}

/// stdin/stdout of a spawned server process, as one stream. Kills the child on drop.
pub struct ChildPipe {
    child: Child,
    stdin: ChildStdin,
    stdout: ChildStdout,
}

impl Read for ChildPipe {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        self.stdout.read(buf)
    }
}

impl Write for ChildPipe {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.stdin.write(buf)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.stdin.flush()
    }
}

impl Drop for ChildPipe {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn map_io(e: PredictorError) -> PredictorError {
    match e {
        PredictorError::Io(io) if matches!(io.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {
            PredictorError::Timeout
        }
        other => other,
    }
}

/// One connection to a predictor server. Each worker owns its own client.
pub struct RemotePredictorClient {
    conn: Mutex<Box<dyn Duplex>>,
    peer: String,
    want_attention: bool,
}

impl RemotePredictorClient {
    /// Wraps an already-open stream and performs the version handshake.
    pub fn from_stream(stream: Box<dyn Duplex>, peer: impl Into<String>) -> Result<Self> {
        let client = Self {
            conn: Mutex::new(stream),
            peer: peer.into(),
            want_attention: true,
        };
        client.handshake()?;
        Ok(client)
    }

    pub fn connect_tcp(addr: &str, timeout: Duration) -> Result<Self> {
        let sock = addr
            .to_socket_addrs()?
            .next()
            .ok_or_else(|| PredictorError::Protocol(format!("cannot resolve {addr}")))?;
        let stream = TcpStream::connect_timeout(&sock, timeout).map_err(|e| map_io(e.into()))?;
        stream.set_read_timeout(Some(timeout))?;
        stream.set_write_timeout(Some(timeout))?;
        stream.set_nodelay(true)?;
        Self::from_stream(Box::new(stream), addr)
    }

    /// Spawns `program args..` and speaks the protocol over its stdio.
    pub fn spawn(program: &str, args: &[String]) -> Result<Self> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        Self::from_stream(Box::new(ChildPipe { child, stdin, stdout }), program)
    }

    pub fn with_attention(mut self, want: bool) -> Self {
        self.want_attention = want;
        self
    }

    fn handshake(&self) -> Result<()> {
        let mut conn = self.conn.lock().expect("connection lock");
        wire::write_frame(&mut **conn, &wire::hello_request(), &[]).map_err(map_io)?;
        let header = wire::read_header(&mut **conn).map_err(map_io)?;
        let value: serde_json::Value = wire::parse_header(&header)?;
        if value.get("ok").and_then(|v| v.as_bool()) != Some(true) {
            let msg = value
                .get("error")
                .and_then(|v| v.as_str())
                .unwrap_or("handshake refused");
            return Err(PredictorError::Server(msg.to_string()));
        }
        let hello: HelloResponse = wire::parse_header(&header)?;
        if hello.version != PROTOCOL_VERSION {
            return Err(PredictorError::VersionMismatch {
                expected: PROTOCOL_VERSION,
                got: hello.version,
            });
        }
        Ok(())
    }

    pub fn peer(&self) -> &str {
        &self.peer
    }
}

/// Sends one predict request over the client's connection.
pub fn remote_predict(
    x_t: &Tensor,
    t: usize,
    cond: &Condition,
    client: &RemotePredictorClient,
) -> Result<PredictOutput> {
    let mut conn = client.conn.lock().expect("connection lock");
    let frame = wire::encode_predict_request(x_t, t, cond, client.want_attention)?;
    conn.write_all(&frame).map_err(|e| map_io(e.into()))?;
    conn.flush().map_err(|e| map_io(e.into()))?;

    let header = wire::read_header(&mut **conn).map_err(map_io)?;
    let resp: PredictResponseHeader = wire::parse_header(&header)?;
    if !resp.ok {
        return Err(PredictorError::Server(
            resp.error.unwrap_or_else(|| "unspecified".into()),
        ));
    }
    let dims = resp
        .shape
        .ok_or_else(|| PredictorError::Protocol("ok response without shape".into()))?;
    let shape = Shape::from_dims(dims).map_err(|e| PredictorError::Protocol(e.to_string()))?;
    let att_shape = match resp.attention_shape {
        Some(d) => Some(Shape::from_dims(d).map_err(|e| PredictorError::Protocol(e.to_string()))?),
        None => None,
    };
    // Drain the full payload before judging it so the stream stays aligned.
    let n = 4 * (shape.len() + att_shape.map_or(0, |s| s.len()));
    let payload = wire::read_payload(&mut **conn, n).map_err(map_io)?;
    drop(conn);

    if shape != x_t.shape() {
        return Err(PredictorError::ShapeMismatch {
            expected: x_t.shape(),
            got: shape,
        });
    }
    let floats = wire::bytes_to_f32s(&payload)?;
    let (eps, att) = floats.split_at(shape.len());
    let eps = Tensor::from_vec(shape, eps.to_vec())?;
    let attention = match att_shape {
        Some(s) => Some(Tensor::from_vec(s, att.to_vec())?),
        None => None,
    };
    PredictOutput::new(eps, attention)
}

impl NoisePredictor for RemotePredictorClient {
    fn predict(&self, x_t: &Tensor, t: usize, cond: &Condition) -> Result<PredictOutput> {
        remote_predict(x_t, t, cond, self)
    }

    fn name(&self) -> String {
        format!("remote({})", self.peer)
    }
}
