//! Wire protocol for external denoisers.
//!
//! Every message is framed as
//!
//! ```text
//! "SMFD" | version: u16 | msg_type: u16 | payload_len: u64 | payload
//! ```
//!
//! with all integers little-endian. Payloads:
//!
//! - `1` request: `run_token u64 | t_index u32 | t_value u32 | n_frames u32 |
//!   height u32 | width u32 | channels u32 | conditioning_len u32 |
//!   conditioning | tensor`
//! - `2` response: `run_token u64 | t_index u32 | n_frames u32 | height u32 |
//!   width u32 | channels u32 | tensor`
//! - `3` error: `run_token u64 | utf-8 message`
//!
//! A tensor is `n * H * W * C` little-endian `f32`, frame-major, row-major,
//! channel-interleaved.

use std::io::{self, Read, Write};
use std::os::unix::net::UnixStream;
use std::path::Path;
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::Duration;

use crate::error::{Error, Result};
use crate::raster::Frame;
use crate::sampler::{DenoiseRequest, Denoiser};
use crate::scalar::Scalar;

pub const MAGIC: [u8; 4] = *b"SMFD";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 16;
/// Payloads above this size are refused rather than allocated.
pub const MAX_PAYLOAD: u64 = 1 << 32;

pub const MSG_REQUEST: u16 = 1;
pub const MSG_RESPONSE: u16 = 2;
pub const MSG_ERROR: u16 = 3;

/// A batch of frames in wire layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub n_frames: u32,
    pub height: u32,
    pub width: u32,
    pub channels: u32,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn byte_len(n_frames: u32, height: u32, width: u32, channels: u32) -> u64 {
        n_frames as u64 * height as u64 * width as u64 * channels as u64 * 4
    }

    pub fn from_frames<T: Scalar>(frames: &[Frame<T>]) -> Result<Self> {
        let first = frames.first().ok_or(Error::Empty("tensor batch"))?;
        let (w, h, c) = first.dims();
        let mut data = Vec::with_capacity(frames.len() * w * h * c);
        for f in frames {
            first.check_dims(f, "tensor batch")?;
            data.extend(f.data().iter().map(|v| v.as_f32()));
        }
        Ok(Self {
            n_frames: frames.len() as u32,
            height: h as u32,
            width: w as u32,
            channels: c as u32,
            data,
        })
    }

    pub fn to_frames<T: Scalar>(&self) -> Result<Vec<Frame<T>>> {
        let (w, h, c) = (
            self.width as usize,
            self.height as usize,
            self.channels as usize,
        );
        let per = w * h * c;
        if self.data.len() != per * self.n_frames as usize {
            return Err(Error::Protocol(format!(
                "tensor holds {} values, header implies {}",
                self.data.len(),
                per * self.n_frames as usize
            )));
        }
        if per == 0 {
            return Ok((0..self.n_frames).map(|_| Frame::new(w, h, c)).collect());
        }
        self.data
            .chunks_exact(per)
            .map(|chunk| {
                Frame::from_vec(w, h, c, chunk.iter().map(|&v| T::lit(v as f64)).collect())
            })
            .collect()
    }

    fn write_header(&self, out: &mut Vec<u8>) {
        for v in [self.height, self.width, self.channels] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn write_data(&self, out: &mut Vec<u8>) {
        out.reserve(self.data.len() * 4);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Request {
    pub run_token: u64,
    pub t_index: u32,
    pub t_value: u32,
    pub conditioning: Vec<u8>,
    pub tensor: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Response {
    pub run_token: u64,
    pub t_index: u32,
    pub tensor: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Message {
    Request(Request),
    Response(Response),
    Error { run_token: u64, message: String },
}

impl Message {
    pub fn msg_type(&self) -> u16 {
        match self {
            Message::Request(_) => MSG_REQUEST,
            Message::Response(_) => MSG_RESPONSE,
            Message::Error { .. } => MSG_ERROR,
        }
    }

    fn payload(&self) -> Vec<u8> {
        let mut p = Vec::new();
        match self {
            Message::Request(r) => {
                p.extend_from_slice(&r.run_token.to_le_bytes());
                p.extend_from_slice(&r.t_index.to_le_bytes());
                p.extend_from_slice(&r.t_value.to_le_bytes());
                p.extend_from_slice(&r.tensor.n_frames.to_le_bytes());
                r.tensor.write_header(&mut p);
                p.extend_from_slice(&(r.conditioning.len() as u32).to_le_bytes());
                p.extend_from_slice(&r.conditioning);
                r.tensor.write_data(&mut p);
            }
            Message::Response(r) => {
                p.extend_from_slice(&r.run_token.to_le_bytes());
                p.extend_from_slice(&r.t_index.to_le_bytes());
                p.extend_from_slice(&r.tensor.n_frames.to_le_bytes());
                r.tensor.write_header(&mut p);
                r.tensor.write_data(&mut p);
            }
            Message::Error { run_token, message } => {
                p.extend_from_slice(&run_token.to_le_bytes());
                p.extend_from_slice(message.as_bytes());
            }
        }
        p
    }

    /// Full framed encoding.
    pub fn encode(&self) -> Vec<u8> {
        let payload = self.payload();
        let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.msg_type().to_le_bytes());
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
        out
    }

    pub fn write_to(&self, w: &mut impl Write) -> io::Result<()> {
        w.write_all(&self.encode())?;
        w.flush()
    }

    /// Decodes a payload of a version-1 frame.
    pub fn decode(msg_type: u16, payload: &[u8]) -> Result<Message> {
        let mut cur = Cursor {
            buf: payload,
            pos: 0,
        };
        match msg_type {
            MSG_REQUEST => {
                let run_token = cur.u64()?;
                let t_index = cur.u32()?;
                let t_value = cur.u32()?;
                let n_frames = cur.u32()?;
                let (height, width, channels) = (cur.u32()?, cur.u32()?, cur.u32()?);
                let cond_len = cur.u32()? as usize;
                let conditioning = cur.bytes(cond_len)?.to_vec();
                let data = cur.tensor(n_frames, height, width, channels)?;
                cur.finish()?;
                Ok(Message::Request(Request {
                    run_token,
                    t_index,
                    t_value,
                    conditioning,
                    tensor: Tensor {
                        n_frames,
                        height,
                        width,
                        channels,
                        data,
                    },
                }))
            }
            MSG_RESPONSE => {
                let run_token = cur.u64()?;
                let t_index = cur.u32()?;
                let n_frames = cur.u32()?;
                let (height, width, channels) = (cur.u32()?, cur.u32()?, cur.u32()?);
                let data = cur.tensor(n_frames, height, width, channels)?;
                cur.finish()?;
                Ok(Message::Response(Response {
                    run_token,
                    t_index,
                    tensor: Tensor {
                        n_frames,
                        height,
                        width,
                        channels,
                        data,
                    },
                }))
            }
            MSG_ERROR => {
                let run_token = cur.u64()?;
                let message = String::from_utf8_lossy(cur.rest()).into_owned();
                Ok(Message::Error { run_token, message })
            }
            other => Err(Error::Protocol(format!("unknown message type {other}"))),
        }
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                Error::Protocol(format!(
                    "payload truncated: need {} bytes at offset {}, have {}",
                    n,
                    self.pos,
                    self.buf.len() - self.pos
                ))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self, n: u32, h: u32, w: u32, c: u32) -> Result<Vec<f32>> {
        let expected = Tensor::byte_len(n, h, w, c);
        let have = (self.buf.len() - self.pos) as u64;
        if have < expected {
            return Err(Error::Protocol(format!(
                "truncated tensor payload: expected {expected} bytes, got {have}"
            )));
        }
        let raw = self.bytes(expected as usize)?;
        Ok(raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect())
    }

    fn rest(&mut self) -> &'a [u8] {
        let s = &self.buf[self.pos..];
        self.pos = self.buf.len();
        s
    }

    fn finish(&self) -> Result<()> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(Error::Protocol(format!(
                "{} trailing bytes after message body",
                self.buf.len() - self.pos
            )))
        }
    }
}

/// A frame as read off the wire, before payload decoding.
#[derive(Clone, Debug, PartialEq)]
pub struct RawMessage {
    pub version: u16,
    pub msg_type: u16,
    pub payload: Vec<u8>,
}

/// Outcome of reading one framed message.
#[derive(Debug)]
pub enum ReadOutcome {
    Message(RawMessage),
    /// Clean end of stream before any byte of a new message.
    Eof,
    /// The stream ended inside a payload.
    Truncated {
        expected: u64,
        got: u64,
        version: u16,
        msg_type: u16,
    },
}

/// Reads the next framed message, skipping any bytes before the next magic.
/// Returns the number of skipped bytes alongside the outcome.
pub fn read_message(r: &mut impl Read) -> io::Result<(ReadOutcome, usize)> {
    let mut window = [0u8; 4];
    let mut filled = 0usize;
    let mut skipped = 0usize;
    let mut byte = [0u8; 1];
    while !(filled == 4 && window == MAGIC) {
        if r.read(&mut byte)? == 0 {
            return Ok((ReadOutcome::Eof, skipped + filled));
        }
        if filled < 4 {
            window[filled] = byte[0];
            filled += 1;
        } else {
            window.copy_within(1.., 0);
            window[3] = byte[0];
            skipped += 1;
        }
    }
    let mut rest = [0u8; HEADER_LEN - 4];
    if let Err(e) = r.read_exact(&mut rest) {
        return if e.kind() == io::ErrorKind::UnexpectedEof {
            Ok((
                ReadOutcome::Truncated {
                    expected: HEADER_LEN as u64,
                    got: 4,
                    version: 0,
                    msg_type: 0,
                },
                skipped,
            ))
        } else {
            Err(e)
        };
    }
    let version = u16::from_le_bytes([rest[0], rest[1]]);
    let msg_type = u16::from_le_bytes([rest[2], rest[3]]);
    let len = u64::from_le_bytes(rest[4..12].try_into().unwrap());
    if len > MAX_PAYLOAD {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("payload length {len} exceeds the {MAX_PAYLOAD}-byte limit"),
        ));
    }
    let mut payload = Vec::with_capacity(len as usize);
    let got = r.by_ref().take(len).read_to_end(&mut payload)? as u64;
    if got < len {
        return Ok((
            ReadOutcome::Truncated {
                expected: len,
                got,
                version,
                msg_type,
            },
            skipped,
        ));
    }
    Ok((
        ReadOutcome::Message(RawMessage {
            version,
            msg_type,
            payload,
        }),
        skipped,
    ))
}

/// Reference responder that returns every request's frames unchanged.
///
/// Malformed input is answered with an error message and the responder then
/// scans forward to the next magic. Returns when the input stream ends.
pub fn serve_echo(r: &mut impl Read, w: &mut impl Write) -> Result<()> {
    loop {
        let (outcome, _) = read_message(r)?;
        let reply = match outcome {
            ReadOutcome::Eof => return Ok(()),
            ReadOutcome::Truncated { expected, got, .. } => {
                Message::Error {
                    run_token: 0,
                    message: format!(
                        "truncated message: expected {expected} payload bytes, got {got}"
                    ),
                }
                .write_to(w)?;
                return Ok(());
            }
            ReadOutcome::Message(raw) => echo_reply(&raw),
        };
        reply.write_to(w)?;
    }
}

fn echo_reply(raw: &RawMessage) -> Message {
    let token = raw
        .payload
        .get(..8)
        .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
        .unwrap_or(0);
    if raw.version != VERSION {
        return Message::Error {
            run_token: token,
            message: format!("unsupported version {}", raw.version),
        };
    }
    if raw.msg_type != MSG_REQUEST {
        return Message::Error {
            run_token: token,
            message: format!("expected a request, got message type {}", raw.msg_type),
        };
    }
    match Message::decode(raw.msg_type, &raw.payload) {
        Ok(Message::Request(req)) => Message::Response(Response {
            run_token: req.run_token,
            t_index: req.t_index,
            tensor: req.tensor,
        }),
        Ok(_) => unreachable!("request type decodes to a request"),
        Err(Error::Protocol(message)) => Message::Error {
            run_token: token,
            message,
        },
        Err(e) => Message::Error {
            run_token: token,
            message: e.to_string(),
        },
    }
}

/// Where an external denoiser lives.
#[derive(Clone, Debug, PartialEq)]
pub enum Transport {
    /// Child process speaking the protocol on stdin/stdout.
    Command(Vec<String>),
    /// Unix-domain socket of an already running server.
    Socket(std::path::PathBuf),
}

/// A [`Denoiser`] backed by a process speaking the bridge protocol.
pub struct BridgeDenoiser {
    writer: Box<dyn Write + Send>,
    replies: Receiver<io::Result<(ReadOutcome, usize)>>,
    child: Option<Child>,
    socket: Option<UnixStream>,
    conditioning: Vec<u8>,
    timeout: Duration,
}

impl BridgeDenoiser {
    /// Uses an arbitrary byte stream pair; the reader is drained on a helper
    /// thread so that `timeout` can be enforced.
    pub fn from_streams(
        reader: impl Read + Send + 'static,
        writer: impl Write + Send + 'static,
        conditioning: Vec<u8>,
        timeout: Duration,
    ) -> Self {
        let (tx, rx) = mpsc::channel();
        let mut reader = reader;
        thread::spawn(move || loop {
            let msg = read_message(&mut reader);
            let stop = !matches!(msg, Ok((ReadOutcome::Message(_), _)));
            if tx.send(msg).is_err() || stop {
                break;
            }
        });
        Self {
            writer: Box::new(writer),
            replies: rx,
            child: None,
            socket: None,
            conditioning,
            timeout,
        }
    }

    pub fn connect(
        transport: &Transport,
        conditioning: Vec<u8>,
        timeout: Duration,
    ) -> Result<Self> {
        match transport {
            Transport::Command(argv) => Self::spawn(argv, conditioning, timeout),
            Transport::Socket(path) => Self::connect_socket(path, conditioning, timeout),
        }
    }

    pub fn spawn(argv: &[String], conditioning: Vec<u8>, timeout: Duration) -> Result<Self> {
        let (prog, args) = argv
            .split_first()
            .ok_or_else(|| Error::config("denoiser.command", "must name a program"))?;
        let mut child = Command::new(prog)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Transport(format!("failed to start `{prog}`: {e}")))?;
        let stdin: ChildStdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let mut this = Self::from_streams(stdout, stdin, conditioning, timeout);
        this.child = Some(child);
        Ok(this)
    }

    pub fn connect_socket(path: &Path, conditioning: Vec<u8>, timeout: Duration) -> Result<Self> {
        let stream = UnixStream::connect(path)
            .map_err(|e| Error::Transport(format!("cannot connect to {}: {e}", path.display())))?;
        Self::from_socket(stream, conditioning, timeout)
    }

    /// Uses a connected socket; it is shut down when the denoiser is dropped.
    pub fn from_socket(
        stream: UnixStream,
        conditioning: Vec<u8>,
        timeout: Duration,
    ) -> Result<Self> {
        let reader = stream.try_clone()?;
        let handle = stream.try_clone()?;
        let mut this = Self::from_streams(reader, stream, conditioning, timeout);
        this.socket = Some(handle);
        Ok(this)
    }

    fn exchange(&mut self, request: Message) -> Result<Message> {
        request
            .write_to(&mut self.writer)
            .map_err(|e| Error::Transport(format!("failed to send request: {e}")))?;
        let (outcome, skipped) = match self.replies.recv_timeout(self.timeout) {
            Ok(r) => r.map_err(|e| Error::Transport(format!("failed to read reply: {e}")))?,
            Err(RecvTimeoutError::Timeout) => {
                return Err(Error::Transport(format!(
                    "no reply within {:?}",
                    self.timeout
                )))
            }
            Err(RecvTimeoutError::Disconnected) => {
                return Err(Error::Transport("reply stream closed".into()))
            }
        };
        if skipped > 0 {
            return Err(Error::Protocol(format!(
                "{skipped} stray bytes before reply"
            )));
        }
        let raw = match outcome {
            ReadOutcome::Message(raw) => raw,
            ReadOutcome::Eof => return Err(Error::Transport("denoiser closed the stream".into())),
            ReadOutcome::Truncated { expected, got, .. } => {
                return Err(Error::Protocol(format!(
                    "reply truncated: expected {expected} payload bytes, got {got}"
                )))
            }
        };
        if raw.version != VERSION {
            return Err(Error::Protocol(format!(
                "reply uses unsupported version {}",
                raw.version
            )));
        }
        Message::decode(raw.msg_type, &raw.payload)
    }
}

impl Drop for BridgeDenoiser {
    fn drop(&mut self) {
        // Closing stdin lets a well-behaved child exit on EOF.
        self.writer = Box::new(io::sink());
        if let Some(s) = self.socket.take() {
            let _ = s.shutdown(std::net::Shutdown::Both);
        }
        if let Some(mut child) = self.child.take() {
            for _ in 0..50 {
                if let Ok(Some(_)) = child.try_wait() {
                    return;
                }
                thread::sleep(Duration::from_millis(10));
            }
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

impl<T: Scalar> Denoiser<T> for BridgeDenoiser {
    fn predict(&mut self, request: &DenoiseRequest<'_, T>) -> Result<Vec<Frame<T>>> {
        let tensor = Tensor::from_frames(request.frames)?;
        let (n, h, w, c) = (
            tensor.n_frames,
            tensor.height,
            tensor.width,
            tensor.channels,
        );
        let msg = Message::Request(Request {
            run_token: request.run_token,
            t_index: request.t_index as u32,
            t_value: request.timestep as u32,
            conditioning: self.conditioning.clone(),
            tensor,
        });
        match self.exchange(msg)? {
            Message::Response(resp) => {
                if resp.run_token != request.run_token || resp.t_index != request.t_index as u32 {
                    return Err(Error::Protocol(format!(
                        "reply for token {} step {} does not match request token {} step {}",
                        resp.run_token, resp.t_index, request.run_token, request.t_index
                    )));
                }
                let t = &resp.tensor;
                if (t.n_frames, t.height, t.width, t.channels) != (n, h, w, c) {
                    return Err(Error::Protocol(format!(
                        "reply tensor {}x{}x{}x{} does not match request {n}x{h}x{w}x{c}",
                        t.n_frames, t.height, t.width, t.channels
                    )));
                }
                t.to_frames()
            }
            Message::Error { message, .. } => Err(Error::Denoiser(message)),
            Message::Request(_) => Err(Error::Protocol("denoiser replied with a request".into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Cursor as IoCursor;

    fn tensor(n: u32, h: u32, w: u32, c: u32) -> Tensor {
        let len = (n * h * w * c) as usize;
        Tensor {
            n_frames: n,
            height: h,
            width: w,
            channels: c,
            data: (0..len).map(|k| k as f32 * 0.25 - 1.0).collect(),
        }
    }

    fn request(t: Tensor) -> Message {
        Message::Request(Request {
            run_token: 0xDEAD_BEEF,
            t_index: 3,
            t_value: 800,
            conditioning: b"prompt=a cat".to_vec(),
            tensor: t,
        })
    }

    fn echo(input: &[u8]) -> Vec<Message> {
        let mut out = Vec::new();
        serve_echo(&mut IoCursor::new(input), &mut out).unwrap();
        let mut r = IoCursor::new(out);
        let mut msgs = Vec::new();
        while let (ReadOutcome::Message(raw), _) = read_message(&mut r).unwrap() {
            msgs.push(Message::decode(raw.msg_type, &raw.payload).unwrap());
        }
        msgs
    }

    #[test]
    fn header_layout_is_exact() {
        let bytes = Message::Error {
            run_token: 7,
            message: "no".into(),
        }
        .encode();
        assert_eq!(&bytes[..4], b"SMFD");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(&bytes[6..8], &[3, 0]);
        assert_eq!(&bytes[8..16], &10u64.to_le_bytes());
        assert_eq!(&bytes[16..24], &7u64.to_le_bytes());
        assert_eq!(&bytes[24..], b"no");
    }

    #[test]
    fn request_payload_layout() {
        let bytes = request(tensor(2, 1, 3, 1)).encode();
        let p = &bytes[HEADER_LEN..];
        assert_eq!(u64::from_le_bytes(p[0..8].try_into().unwrap()), 0xDEAD_BEEF);
        assert_eq!(u32::from_le_bytes(p[8..12].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(p[12..16].try_into().unwrap()), 800);
        // n, h, w, c, conditioning_len
        let words: Vec<u32> = p[16..36]
            .chunks(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        assert_eq!(words, vec![2, 1, 3, 1, 12]);
        assert_eq!(&p[36..48], b"prompt=a cat");
        assert_eq!(p.len(), 48 + 6 * 4);
        assert_eq!(f32::from_le_bytes(p[48..52].try_into().unwrap()), -1.0);
    }

    #[test]
    fn echo_returns_identical_tensor() {
        let t = tensor(3, 4, 5, 3);
        let replies = echo(&request(t.clone()).encode());
        assert_eq!(
            replies,
            vec![Message::Response(Response {
                run_token: 0xDEAD_BEEF,
                t_index: 3,
                tensor: t
            })]
        );
    }

    #[test]
    fn echo_rejects_other_versions() {
        let mut bytes = request(tensor(1, 1, 1, 1)).encode();
        bytes[4] = 2;
        let replies = echo(&bytes);
        assert!(
            matches!(&replies[..], [Message::Error { run_token: 0xDEAD_BEEF, message }] if message == "unsupported version 2")
        );
    }

    #[test]
    fn echo_names_expected_tensor_bytes() {
        // Header claims a 2x2x2x1 tensor (32 bytes) but only 8 are framed.
        let mut payload = Vec::new();
        payload.extend_from_slice(&1u64.to_le_bytes());
        for v in [0u32, 0, 2, 2, 2, 1, 0] {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        payload.extend_from_slice(&[0u8; 8]);
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&payload);
        let replies = echo(&bytes);
        match &replies[..] {
            [Message::Error { message, .. }] => {
                assert!(message.contains("expected 32 bytes"), "{message}")
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn echo_resynchronizes_after_garbage() {
        let mut bytes = b"xxSMFnoise".to_vec();
        bytes.extend_from_slice(&request(tensor(1, 2, 2, 1)).encode());
        let replies = echo(&bytes);
        assert!(matches!(&replies[..], [Message::Response(_)]));
    }

    #[test]
    fn truncated_stream_gets_an_error() {
        let bytes = request(tensor(1, 2, 2, 3)).encode();
        let replies = echo(&bytes[..bytes.len() - 5]);
        match &replies[..] {
            [Message::Error { message, .. }] => assert!(message.contains("truncated"), "{message}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bridge_denoiser_over_socket_pair() {
        let (client, server) = UnixStream::pair().unwrap();
        let handle = thread::spawn(move || {
            let mut r = server.try_clone().unwrap();
            let mut w = server;
            serve_echo(&mut r, &mut w).unwrap();
        });
        let mut d =
            BridgeDenoiser::from_socket(client, b"k=v".to_vec(), Duration::from_secs(10)).unwrap();
        let frames = vec![
            Frame::<f32>::filled(4, 3, 3, 0.5),
            Frame::filled(4, 3, 3, -0.25),
        ];
        let req = DenoiseRequest {
            run_token: 11,
            t_index: 2,
            timestep: 850,
            alpha_bar: 0.3,
            frame_indices: &[0, 1],
            frames: &frames,
        };
        let out: Vec<Frame<f32>> = d.predict(&req).unwrap();
        assert_eq!(out, frames);
        drop(d);
        handle.join().unwrap();
    }

    #[test]
    fn silent_server_times_out() {
        let (client, _server) = UnixStream::pair().unwrap();
        let mut d = BridgeDenoiser::from_socket(client, vec![], Duration::from_millis(50)).unwrap();
        let frames = vec![Frame::<f32>::new(2, 2, 1)];
        let req = DenoiseRequest {
            run_token: 1,
            t_index: 0,
            timestep: 0,
            alpha_bar: 0.5,
            frame_indices: &[0],
            frames: &frames,
        };
        let err = Denoiser::<f32>::predict(&mut d, &req).unwrap_err();
        assert!(matches!(err, Error::Transport(_)), "{err}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn framing_round_trips(
            n in 1u32..4, h in 1u32..6, w in 1u32..6, c in 1u32..4,
            token in any::<u64>(), t in any::<u32>(),
            cond in proptest::collection::vec(any::<u8>(), 0..32),
        ) {
            let msg = Message::Request(Request { run_token: token, t_index: t, t_value: t / 2, conditioning: cond, tensor: tensor(n, h, w, c) });
            let bytes = msg.encode();
            let (outcome, skipped) = read_message(&mut IoCursor::new(bytes)).unwrap();
            prop_assert_eq!(skipped, 0);
            let ReadOutcome::Message(raw) = outcome else { panic!("no message") };
            prop_assert_eq!(Message::decode(raw.msg_type, &raw.payload).unwrap(), msg);
        }
    }
}
