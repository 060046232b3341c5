//! Length-prefixed binary frames.
//!
//! Frame: `u32` payload length (big-endian), `u8` message type, payload.
//! Integers are big-endian, reals are IEEE-754 binary64, strings are a `u16`
//! byte length followed by UTF-8, lists are a `u32` count followed by items.

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::monitor::StepReport;

pub const PROTOCOL_VERSION: u16 = 1;
pub const MAX_FRAME: u32 = 16 * 1024 * 1024;

pub const HELLO: u8 = 1;
pub const BENCH_REQUEST: u8 = 2;
pub const BENCH_RESULT: u8 = 3;
pub const PLAN: u8 = 4;
pub const STEP_BEGIN: u8 = 5;
pub const STEP_REPORT: u8 = 6;
pub const RETUNE_NOTICE: u8 = 7;
pub const EPOCH_END: u8 = 8;
pub const SHUTDOWN: u8 = 9;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("frame truncated")]
    Truncated,
    #[error("{0} trailing bytes after payload")]
    Trailing(usize),
    #[error("frame of {0} bytes exceeds limit")]
    TooLarge(u32),
    #[error("invalid UTF-8 string")]
    BadUtf8,
    #[error("string of {0} bytes is too long")]
    StringTooLong(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanEntry {
    pub node_id: String,
    pub batch_size: u32,
    pub share_offset: u64,
    pub share_len: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Hello {
        version: u16,
        node_id: String,
        core_count: u32,
        node_class: String,
    },
    BenchRequest {
        batch_sizes: Vec<u32>,
        steps_per_probe: u32,
    },
    BenchResult {
        node_id: String,
        normal_cpu: f64,
        points: Vec<(u32, f64)>,
    },
    Plan {
        generation: u64,
        steps_per_epoch: u64,
        entries: Vec<PlanEntry>,
    },
    StepBegin {
        generation: u64,
        step: u64,
    },
    StepReport(StepReport),
    RetuneNotice {
        generation: u64,
    },
    EpochEnd {
        epoch: u64,
    },
    Shutdown,
}

impl Message {
    pub fn type_code(&self) -> u8 {
        match self {
            Message::Hello { .. } => HELLO,
            Message::BenchRequest { .. } => BENCH_REQUEST,
            Message::BenchResult { .. } => BENCH_RESULT,
            Message::Plan { .. } => PLAN,
            Message::StepBegin { .. } => STEP_BEGIN,
            Message::StepReport(_) => STEP_REPORT,
            Message::RetuneNotice { .. } => RETUNE_NOTICE,
            Message::EpochEnd { .. } => EPOCH_END,
            Message::Shutdown => SHUTDOWN,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Message::Hello { .. } => "HELLO",
            Message::BenchRequest { .. } => "BENCH_REQUEST",
            Message::BenchResult { .. } => "BENCH_RESULT",
            Message::Plan { .. } => "PLAN",
            Message::StepBegin { .. } => "STEP_BEGIN",
            Message::StepReport(_) => "STEP_REPORT",
            Message::RetuneNotice { .. } => "RETUNE_NOTICE",
            Message::EpochEnd { .. } => "EPOCH_END",
            Message::Shutdown => "SHUTDOWN",
        }
    }

    /// Payload bytes, without the frame header.
    pub fn encode_payload(&self) -> Result<Vec<u8>, WireError> {
        let mut b = Vec::new();
        match self {
            Message::Hello {
                version,
                node_id,
                core_count,
                node_class,
            } => {
                b.extend(version.to_be_bytes());
                put_str(&mut b, node_id)?;
                b.extend(core_count.to_be_bytes());
                put_str(&mut b, node_class)?;
            }
            Message::BenchRequest {
                batch_sizes,
                steps_per_probe,
            } => {
                put_len(&mut b, batch_sizes.len());
                for s in batch_sizes {
                    b.extend(s.to_be_bytes());
                }
                b.extend(steps_per_probe.to_be_bytes());
            }
            Message::BenchResult {
                node_id,
                normal_cpu,
                points,
            } => {
                put_str(&mut b, node_id)?;
                b.extend(normal_cpu.to_be_bytes());
                put_len(&mut b, points.len());
                for (bs, thr) in points {
                    b.extend(bs.to_be_bytes());
                    b.extend(thr.to_be_bytes());
                }
            }
            Message::Plan {
                generation,
                steps_per_epoch,
                entries,
            } => {
                b.extend(generation.to_be_bytes());
                b.extend(steps_per_epoch.to_be_bytes());
                put_len(&mut b, entries.len());
                for e in entries {
                    put_str(&mut b, &e.node_id)?;
                    b.extend(e.batch_size.to_be_bytes());
                    b.extend(e.share_offset.to_be_bytes());
                    b.extend(e.share_len.to_be_bytes());
                }
            }
            Message::StepBegin { generation, step } => {
                b.extend(generation.to_be_bytes());
                b.extend(step.to_be_bytes());
            }
            Message::StepReport(r) => {
                put_str(&mut b, &r.node_id)?;
                b.extend(r.generation.to_be_bytes());
                b.extend(r.step_index.to_be_bytes());
                b.extend(r.measured_throughput.to_be_bytes());
                b.extend(r.cpu_utilization.to_be_bytes());
                b.extend(r.wall_time.to_be_bytes());
            }
            Message::RetuneNotice { generation } => b.extend(generation.to_be_bytes()),
            Message::EpochEnd { epoch } => b.extend(epoch.to_be_bytes()),
            Message::Shutdown => {}
        }
        Ok(b)
    }

    /// Complete frame: header plus payload.
    pub fn encode(&self) -> Result<Vec<u8>, WireError> {
        let payload = self.encode_payload()?;
        let len = u32::try_from(payload.len()).map_err(|_| WireError::TooLarge(u32::MAX))?;
        if len > MAX_FRAME {
            return Err(WireError::TooLarge(len));
        }
        let mut frame = Vec::with_capacity(5 + payload.len());
        frame.extend(len.to_be_bytes());
        frame.push(self.type_code());
        frame.extend(payload);
        Ok(frame)
    }

    pub fn decode(msg_type: u8, payload: &[u8]) -> Result<Self, WireError> {
        let mut c = Cursor { buf: payload, pos: 0 };
        let msg = match msg_type {
            HELLO => Message::Hello {
                version: c.u16()?,
                node_id: c.string()?,
                core_count: c.u32()?,
                node_class: c.string()?,
            },
            BENCH_REQUEST => {
                let n = c.count(4)?;
                let batch_sizes = (0..n).map(|_| c.u32()).collect::<Result<_, _>>()?;
                Message::BenchRequest {
                    batch_sizes,
                    steps_per_probe: c.u32()?,
                }
            }
            BENCH_RESULT => {
                let node_id = c.string()?;
                let normal_cpu = c.f64()?;
                let n = c.count(12)?;
                let mut points = Vec::with_capacity(n);
                for _ in 0..n {
                    points.push((c.u32()?, c.f64()?));
                }
                Message::BenchResult {
                    node_id,
                    normal_cpu,
                    points,
                }
            }
            PLAN => {
                let generation = c.u64()?;
                let steps_per_epoch = c.u64()?;
                let n = c.count(22)?;
                let mut entries = Vec::with_capacity(n);
                for _ in 0..n {
                    entries.push(PlanEntry {
                        node_id: c.string()?,
                        batch_size: c.u32()?,
                        share_offset: c.u64()?,
                        share_len: c.u64()?,
                    });
                }
                Message::Plan {
                    generation,
                    steps_per_epoch,
                    entries,
                }
            }
            STEP_BEGIN => Message::StepBegin {
                generation: c.u64()?,
                step: c.u64()?,
            },
            STEP_REPORT => Message::StepReport(StepReport {
                node_id: c.string()?,
                generation: c.u64()?,
                step_index: c.u64()?,
                measured_throughput: c.f64()?,
                cpu_utilization: c.f64()?,
                wall_time: c.f64()?,
            }),
            RETUNE_NOTICE => Message::RetuneNotice {
                generation: c.u64()?,
            },
            EPOCH_END => Message::EpochEnd { epoch: c.u64()? },
            SHUTDOWN => Message::Shutdown,
            other => return Err(WireError::UnknownType(other)),
        };
        let rest = payload.len() - c.pos;
        if rest != 0 {
            return Err(WireError::Trailing(rest));
        }
        Ok(msg)
    }

    /// Decodes one complete frame held in `bytes`.
    pub fn decode_frame(bytes: &[u8]) -> Result<Self, WireError> {
        if bytes.len() < 5 {
            return Err(WireError::Truncated);
        }
        let len = u32::from_be_bytes(bytes[..4].try_into().unwrap());
        if len > MAX_FRAME {
            return Err(WireError::TooLarge(len));
        }
        let body = &bytes[5..];
        match body.len().cmp(&(len as usize)) {
            std::cmp::Ordering::Less => Err(WireError::Truncated),
            std::cmp::Ordering::Greater => Err(WireError::Trailing(body.len() - len as usize)),
            std::cmp::Ordering::Equal => Self::decode(bytes[4], body),
        }
    }
}

fn put_str(b: &mut Vec<u8>, s: &str) -> Result<(), WireError> {
    let len = u16::try_from(s.len()).map_err(|_| WireError::StringTooLong(s.len()))?;
    b.extend(len.to_be_bytes());
    b.extend(s.as_bytes());
    Ok(())
}

fn put_len(b: &mut Vec<u8>, n: usize) {
    b.extend((n as u32).to_be_bytes());
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], WireError> {
        let end = self.pos.checked_add(n).ok_or(WireError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(WireError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, WireError> {
        Ok(f64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, WireError> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| WireError::BadUtf8)
    }

    /// Reads a list count, rejecting counts the remaining bytes cannot hold.
    fn count(&mut self, min_item: usize) -> Result<usize, WireError> {
        let n = self.u32()? as usize;
        if n.saturating_mul(min_item) > self.buf.len() - self.pos {
            return Err(WireError::Truncated);
        }
        Ok(n)
    }
}

/// Reads one frame. Returns `Ok(None)` on a clean end of stream between
/// frames.
pub fn read_message<R: Read>(r: &mut R) -> Result<Option<Message>, WireError> {
    let mut header = [0u8; 5];
    let mut got = 0;
    while got < header.len() {
        match r.read(&mut header[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(WireError::Truncated),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_be_bytes(header[..4].try_into().unwrap());
    if len > MAX_FRAME {
        return Err(WireError::TooLarge(len));
    }
    let mut payload = vec![0u8; len as usize];
    r.read_exact(&mut payload).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => WireError::Truncated,
        _ => WireError::Io(e),
    })?;
    Message::decode(header[4], &payload).map(Some)
}

pub fn write_message<W: Write>(w: &mut W, msg: &Message) -> Result<(), WireError> {
    w.write_all(&msg.encode()?)?;
    w.flush()?;
    Ok(())
}
