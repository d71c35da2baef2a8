//! Newline-delimited JSON framing for hub commands and replies.
//!
//! Every message is one UTF-8 JSON object on its own line:
//!
//! ```text
//! {"id":7,"cmd":"launch","args":{"issued_at":1718000000000,"speed":65.0}}
//! {"id":7,"reply":"launch_done","args":{}}
//! ```

use std::io::{self, BufRead};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::mlcore::CrawlerState;

/// Frames longer than this are rejected without being buffered further.
pub const MAX_FRAME_LEN: usize = 64 * 1024;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("protocol error at byte {offset}: {message}")]
pub struct ProtocolError {
    pub offset: usize,
    pub message: String,
}

impl ProtocolError {
    fn new(offset: usize, message: impl Into<String>) -> Self {
        Self {
            offset,
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CommandKind {
    ReadColor,
    ReadDistance,
    Launch { speed: f64 },
    MoveArm { target: CrawlerState },
    Ping,
}

impl CommandKind {
    pub fn tag(&self) -> &'static str {
        match self {
            CommandKind::ReadColor => "read_color",
            CommandKind::ReadDistance => "read_distance",
            CommandKind::Launch { .. } => "launch",
            CommandKind::MoveArm { .. } => "move_arm",
            CommandKind::Ping => "ping",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviceCommand {
    pub id: u64,
    pub kind: CommandKind,
    /// Milliseconds since the Unix epoch.
    pub issued_at: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ReplyPayload {
    Green {
        value: u8,
    },
    DistanceMm {
        value: f64,
    },
    LaunchDone,
    ArmMoved {
        state: CrawlerState,
        displacement_mm: f64,
    },
    Pong,
    Error {
        code: String,
        message: String,
    },
}

impl ReplyPayload {
    pub fn tag(&self) -> &'static str {
        match self {
            ReplyPayload::Green { .. } => "green",
            ReplyPayload::DistanceMm { .. } => "distance_mm",
            ReplyPayload::LaunchDone => "launch_done",
            ReplyPayload::ArmMoved { .. } => "arm_moved",
            ReplyPayload::Pong => "pong",
            ReplyPayload::Error { .. } => "error",
        }
    }

    /// Whether this payload is a legal answer to `kind`. Errors answer anything.
    pub fn answers(&self, kind: &CommandKind) -> bool {
        matches!(
            (self, kind),
            (ReplyPayload::Error { .. }, _)
                | (ReplyPayload::Green { .. }, CommandKind::ReadColor)
                | (ReplyPayload::DistanceMm { .. }, CommandKind::ReadDistance)
                | (ReplyPayload::LaunchDone, CommandKind::Launch { .. })
                | (ReplyPayload::ArmMoved { .. }, CommandKind::MoveArm { .. })
                | (ReplyPayload::Pong, CommandKind::Ping)
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviceReply {
    pub id: u64,
    pub payload: ReplyPayload,
}

/// A message that can travel as one line on the wire.
pub trait Frame: Sized {
    /// Encodes to a single line, including the trailing `\n`.
    fn encode(&self) -> Vec<u8>;
    fn decode(frame: &[u8]) -> Result<Self, ProtocolError>;
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CommandWire {
    id: u64,
    cmd: String,
    args: Map<String, Value>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReplyWire {
    id: u64,
    reply: String,
    args: Map<String, Value>,
}

fn finish_line(value: &impl Serialize) -> Vec<u8> {
    let mut out = serde_json::to_vec(value).expect("wire structs always serialize");
    out.push(b'\n');
    out
}

/// Checks the terminator and parses the JSON body of one frame.
fn parse_line<T: for<'de> Deserialize<'de>>(frame: &[u8]) -> Result<T, ProtocolError> {
    let body = match frame.split_last() {
        Some((b'\n', body)) => body,
        _ => return Err(ProtocolError::new(frame.len(), "missing line terminator")),
    };
    if let Some(pos) = body.iter().position(|b| *b == b'\n') {
        return Err(ProtocolError::new(pos, "embedded newline"));
    }
    if body.len() > MAX_FRAME_LEN {
        return Err(ProtocolError::new(MAX_FRAME_LEN, "frame too long"));
    }
    let text = std::str::from_utf8(body)
        .map_err(|e| ProtocolError::new(e.valid_up_to(), "invalid utf-8"))?;
    serde_json::from_str(text).map_err(|e| {
        // single line, so the column is the byte position (1-based)
        let offset = e.column().saturating_sub(1).min(body.len());
        ProtocolError::new(offset, e.to_string())
    })
}

fn arg<'a>(args: &'a Map<String, Value>, key: &str) -> Result<&'a Value, ProtocolError> {
    args.get(key)
        .ok_or_else(|| ProtocolError::new(0, format!("missing argument `{key}`")))
}

fn arg_u64(args: &Map<String, Value>, key: &str) -> Result<u64, ProtocolError> {
    arg(args, key)?.as_u64().ok_or_else(|| {
        ProtocolError::new(0, format!("argument `{key}` must be an unsigned integer"))
    })
}

fn arg_f64(args: &Map<String, Value>, key: &str) -> Result<f64, ProtocolError> {
    arg(args, key)?
        .as_f64()
        .ok_or_else(|| ProtocolError::new(0, format!("argument `{key}` must be a number")))
}

fn arg_str(args: &Map<String, Value>, key: &str) -> Result<String, ProtocolError> {
    arg(args, key)?
        .as_str()
        .map(str::to_owned)
        .ok_or_else(|| ProtocolError::new(0, format!("argument `{key}` must be a string")))
}

fn arg_state(args: &Map<String, Value>, key: &str) -> Result<CrawlerState, ProtocolError> {
    let raw = arg_u64(args, key)?;
    u8::try_from(raw)
        .ok()
        .and_then(|i| CrawlerState::new(i).ok())
        .ok_or_else(|| ProtocolError::new(0, format!("arm position {raw} out of range")))
}

fn expect_keys(args: &Map<String, Value>, allowed: &[&str]) -> Result<(), ProtocolError> {
    match args.keys().find(|k| !allowed.contains(&k.as_str())) {
        Some(k) => Err(ProtocolError::new(0, format!("unexpected argument `{k}`"))),
        None => Ok(()),
    }
}

fn as_map(value: Value) -> Map<String, Value> {
    match value {
        Value::Object(map) => map,
        _ => Map::new(),
    }
}

impl Frame for DeviceCommand {
    fn encode(&self) -> Vec<u8> {
        let mut args = Map::new();
        args.insert("issued_at".into(), json!(self.issued_at));
        match &self.kind {
            CommandKind::Launch { speed } => {
                args.insert("speed".into(), json!(speed));
            }
            CommandKind::MoveArm { target } => {
                args.insert("target".into(), json!(target.index()));
            }
            CommandKind::ReadColor | CommandKind::ReadDistance | CommandKind::Ping => {}
        }
        finish_line(&CommandWire {
            id: self.id,
            cmd: self.kind.tag().to_owned(),
            args,
        })
    }

    fn decode(frame: &[u8]) -> Result<Self, ProtocolError> {
        let wire: CommandWire = parse_line(frame)?;
        let args = &wire.args;
        let issued_at = arg_u64(args, "issued_at")?;
        let kind = match wire.cmd.as_str() {
            "read_color" => CommandKind::ReadColor,
            "read_distance" => CommandKind::ReadDistance,
            "ping" => CommandKind::Ping,
            "launch" => {
                expect_keys(args, &["issued_at", "speed"])?;
                let speed = arg_f64(args, "speed")?;
                if !(0.0..=100.0).contains(&speed) {
                    return Err(ProtocolError::new(0, format!("speed {speed} out of range")));
                }
                CommandKind::Launch { speed }
            }
            "move_arm" => {
                expect_keys(args, &["issued_at", "target"])?;
                CommandKind::MoveArm {
                    target: arg_state(args, "target")?,
                }
            }
            other => return Err(ProtocolError::new(0, format!("unknown command `{other}`"))),
        };
        if matches!(
            kind,
            CommandKind::ReadColor | CommandKind::ReadDistance | CommandKind::Ping
        ) {
            expect_keys(args, &["issued_at"])?;
        }
        Ok(DeviceCommand {
            id: wire.id,
            kind,
            issued_at,
        })
    }
}

impl Frame for DeviceReply {
    fn encode(&self) -> Vec<u8> {
        let args = match &self.payload {
            ReplyPayload::Green { value } => json!({ "value": value }),
            ReplyPayload::DistanceMm { value } => json!({ "value": value }),
            ReplyPayload::ArmMoved {
                state,
                displacement_mm,
            } => json!({ "state": state.index(), "displacement_mm": displacement_mm }),
            ReplyPayload::Error { code, message } => json!({ "code": code, "message": message }),
            ReplyPayload::LaunchDone | ReplyPayload::Pong => json!({}),
        };
        finish_line(&ReplyWire {
            id: self.id,
            reply: self.payload.tag().to_owned(),
            args: as_map(args),
        })
    }

    fn decode(frame: &[u8]) -> Result<Self, ProtocolError> {
        let wire: ReplyWire = parse_line(frame)?;
        let args = &wire.args;
        let payload = match wire.reply.as_str() {
            "green" => {
                expect_keys(args, &["value"])?;
                let raw = arg_u64(args, "value")?;
                let value = u8::try_from(raw).map_err(|_| {
                    ProtocolError::new(0, format!("green value {raw} out of range"))
                })?;
                ReplyPayload::Green { value }
            }
            "distance_mm" => {
                expect_keys(args, &["value"])?;
                let value = arg_f64(args, "value")?;
                if value < 0.0 {
                    return Err(ProtocolError::new(0, "negative distance"));
                }
                ReplyPayload::DistanceMm { value }
            }
            "launch_done" => {
                expect_keys(args, &[])?;
                ReplyPayload::LaunchDone
            }
            "arm_moved" => {
                expect_keys(args, &["state", "displacement_mm"])?;
                ReplyPayload::ArmMoved {
                    state: arg_state(args, "state")?,
                    displacement_mm: arg_f64(args, "displacement_mm")?,
                }
            }
            "pong" => {
                expect_keys(args, &[])?;
                ReplyPayload::Pong
            }
            "error" => {
                expect_keys(args, &["code", "message"])?;
                ReplyPayload::Error {
                    code: arg_str(args, "code")?,
                    message: arg_str(args, "message")?,
                }
            }
            other => return Err(ProtocolError::new(0, format!("unknown reply `{other}`"))),
        };
        Ok(DeviceReply {
            id: wire.id,
            payload,
        })
    }
}

/// Reads one `\n`-terminated frame. Returns `None` on a clean end of stream;
/// a partial trailing line is reported as `UnexpectedEof`.
pub fn read_frame<R: BufRead>(reader: &mut R) -> io::Result<Option<Vec<u8>>> {
    let mut buf = Vec::new();
    let mut limited = <&mut R as io::Read>::take(reader, MAX_FRAME_LEN as u64 + 1);
    let n = limited.read_until(b'\n', &mut buf)?;
    if n == 0 {
        return Ok(None);
    }
    if buf.last() != Some(&b'\n') {
        let kind = if buf.len() > MAX_FRAME_LEN {
            io::ErrorKind::InvalidData
        } else {
            io::ErrorKind::UnexpectedEof
        };
        return Err(io::Error::new(kind, "incomplete frame"));
    }
    Ok(Some(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn read_color_round_trip() {
        let cmd = DeviceCommand {
            id: 7,
            kind: CommandKind::ReadColor,
            issued_at: 1_700_000_000_000,
        };
        let frame = cmd.encode();
        assert_eq!(frame.iter().filter(|b| **b == b'\n').count(), 1);
        assert_eq!(*frame.last().unwrap(), b'\n');
        let text = std::str::from_utf8(&frame).unwrap();
        assert!(text.contains("\"id\":7"));
        assert!(text.contains("\"cmd\":\"read_color\""));
        assert_eq!(DeviceCommand::decode(&frame).unwrap(), cmd);
    }

    #[test]
    fn truncated_line_is_rejected() {
        let frame = DeviceCommand {
            id: 1,
            kind: CommandKind::Launch { speed: 50.0 },
            issued_at: 3,
        }
        .encode();
        let cut = &frame[..frame.len() / 2];
        let err = DeviceCommand::decode(cut).unwrap_err();
        assert_eq!(err.offset, cut.len());

        let mut reterminated = cut.to_vec();
        reterminated.push(b'\n');
        let err = DeviceCommand::decode(&reterminated).unwrap_err();
        assert!(err.offset <= cut.len(), "{err}");
    }

    #[test]
    fn rejects_bad_values() {
        let bad = [
            &br#"{"id":1,"cmd":"launch","args":{"issued_at":0,"speed":101}}"#[..],
            br#"{"id":1,"cmd":"move_arm","args":{"issued_at":0,"target":4}}"#,
            br#"{"id":1,"cmd":"dance","args":{"issued_at":0}}"#,
            br#"{"id":1,"cmd":"ping","args":{}}"#,
            br#"{"id":1,"cmd":"ping","args":{"issued_at":0},"extra":1}"#,
            br#"{"id":-1,"cmd":"ping","args":{"issued_at":0}}"#,
        ];
        for b in bad {
            let mut frame = b.to_vec();
            frame.push(b'\n');
            assert!(
                DeviceCommand::decode(&frame).is_err(),
                "{}",
                String::from_utf8_lossy(b)
            );
        }
        let reply = b"{\"id\":1,\"reply\":\"green\",\"args\":{\"value\":300}}\n";
        assert!(DeviceReply::decode(reply).is_err());
    }

    #[test]
    fn reply_kind_matching() {
        assert!(ReplyPayload::Pong.answers(&CommandKind::Ping));
        assert!(!ReplyPayload::Pong.answers(&CommandKind::ReadColor));
        assert!(ReplyPayload::Error {
            code: "x".into(),
            message: "y".into()
        }
        .answers(&CommandKind::ReadDistance));
    }

    #[test]
    fn read_frame_handles_partial_lines() {
        let mut input = io::Cursor::new(b"{\"a\":1}\n{\"b\":".to_vec());
        assert_eq!(read_frame(&mut input).unwrap().unwrap(), b"{\"a\":1}\n");
        let err = read_frame(&mut input).unwrap_err();
        assert_eq!(err.kind(), io::ErrorKind::UnexpectedEof);
        assert!(read_frame(&mut io::Cursor::new(Vec::new()))
            .unwrap()
            .is_none());
    }

    fn any_state() -> impl Strategy<Value = CrawlerState> {
        (0u8..4).prop_map(|i| CrawlerState::new(i).unwrap())
    }

    fn any_command() -> impl Strategy<Value = DeviceCommand> {
        let kind = prop_oneof![
            Just(CommandKind::ReadColor),
            Just(CommandKind::ReadDistance),
            Just(CommandKind::Ping),
            (0.0f64..=100.0).prop_map(|speed| CommandKind::Launch { speed }),
            any_state().prop_map(|target| CommandKind::MoveArm { target }),
        ];
        (any::<u64>(), kind, any::<u64>()).prop_map(|(id, kind, issued_at)| DeviceCommand {
            id,
            kind,
            issued_at,
        })
    }

    fn any_reply() -> impl Strategy<Value = DeviceReply> {
        let payload = prop_oneof![
            any::<u8>().prop_map(|value| ReplyPayload::Green { value }),
            (0.0f64..1e6).prop_map(|value| ReplyPayload::DistanceMm { value }),
            Just(ReplyPayload::LaunchDone),
            Just(ReplyPayload::Pong),
            (any_state(), -1e3f64..1e3).prop_map(|(state, displacement_mm)| {
                ReplyPayload::ArmMoved {
                    state,
                    displacement_mm,
                }
            }),
            ("[a-z_]{1,12}", ".{0,40}")
                .prop_map(|(code, message)| ReplyPayload::Error { code, message }),
        ];
        (any::<u64>(), payload).prop_map(|(id, payload)| DeviceReply { id, payload })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn commands_round_trip(cmd in any_command()) {
            prop_assert_eq!(DeviceCommand::decode(&cmd.encode()).unwrap(), cmd);
        }

        #[test]
        fn replies_round_trip(reply in any_reply()) {
            prop_assert_eq!(DeviceReply::decode(&reply.encode()).unwrap(), reply);
        }
    }
}
