//! Newline-delimited JSON protocol to an external detector process.
//!
//! ```text
//! -> {"op":"hello"}
//! <- {"op":"hello","name":..,"input_size":[w,h],"key_grid":[Hk,Wk],"supports_attention":bool}
//! -> {"op":"detect","id":1,"image":"a.png","crop":[x1,y1,x2,y2]|null,"return_attention":bool}
//! <- {"op":"result","id":1,"detections":[..],"attention_file":path|null,"latency_ms":f}
//! <- {"op":"error","id":1,"message":".."}
//! ```
//!
//! Requests are single-flight: one pipe pair, one outstanding request.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{DetectionRequest, DetectionResponse, Detector, DetectorInfo, ImageRef};
use crate::attention::AttentionTensor;
use crate::error::{Error, Result};
use crate::fusion::{BoxFormat, CropDetection};

pub const DEFAULT_TIMEOUT_SECS: u64 = 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum BridgeRequest {
    Hello,
    Detect { id: u64, image: PathBuf, crop: Option<[f64; 4]>, return_attention: bool },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireDetection {
    #[serde(rename = "box")]
    pub coords: [f64; 4],
    pub box_format: BoxFormat,
    pub score: f64,
    #[serde(rename = "class")]
    pub class_id: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum BridgeReply {
    Hello {
        name: String,
        input_size: [u32; 2],
        key_grid: [usize; 2],
        supports_attention: bool,
    },
    Result {
        id: u64,
        detections: Vec<WireDetection>,
        attention_file: Option<PathBuf>,
        latency_ms: f64,
    },
    Error {
        #[serde(default)]
        id: Option<u64>,
        message: String,
    },
}

struct Channel {
    stdin: ChildStdin,
    replies: Receiver<std::io::Result<String>>,
    next_id: u64,
}

/// Client for a detector bridge child process.
pub struct BridgeClient {
    info: DetectorInfo,
    channel: Mutex<Channel>,
    child: Mutex<Child>,
    timeout: Duration,
}

impl BridgeClient {
    /// Spawns `command args..`, performs the handshake and returns a ready client.
    pub fn spawn(command: &str, args: &[String], timeout: Duration) -> Result<Self> {
        let mut child = Command::new(command)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Backend(format!("spawning bridge {command:?}: {e}")))?;
        let stdin = child.stdin.take().expect("stdin is piped");
        let stdout = child.stdout.take().expect("stdout is piped");

        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let stop = line.is_err();
                if tx.send(line).is_err() || stop {
                    break;
                }
            }
        });

        let mut channel = Channel { stdin, replies: rx, next_id: 1 };
        let hello = match exchange(&mut channel, &BridgeRequest::Hello, 0, timeout) {
            Ok(r) => r,
            Err(e) => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(e);
            }
        };
        let info = match hello {
            BridgeReply::Hello { name, input_size, key_grid, supports_attention } => DetectorInfo {
                name,
                input_size: (input_size[0], input_size[1]),
                key_grid: (key_grid[0], key_grid[1]),
                supports_attention,
                concurrent: false,
            },
            other => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(Error::Backend(format!("handshake: unexpected reply {other:?}")));
            }
        };
        Ok(BridgeClient { info, channel: Mutex::new(channel), child: Mutex::new(child), timeout })
    }
}

fn exchange(ch: &mut Channel, req: &BridgeRequest, id: u64, timeout: Duration) -> Result<BridgeReply> {
    let mut line = serde_json::to_string(req).expect("request serializes");
    line.push('\n');
    ch.stdin
        .write_all(line.as_bytes())
        .and_then(|_| ch.stdin.flush())
        .map_err(|e| Error::Backend(format!("writing to bridge: {e}")))?;
    let text = match ch.replies.recv_timeout(timeout) {
        Ok(Ok(text)) => text,
        Ok(Err(e)) => return Err(Error::Backend(format!("reading from bridge: {e}"))),
        Err(RecvTimeoutError::Timeout) => return Err(Error::Timeout { id, secs: timeout.as_secs() }),
        Err(RecvTimeoutError::Disconnected) => return Err(Error::Backend("bridge closed its output".into())),
    };
    serde_json::from_str(&text).map_err(|e| Error::Backend(format!("malformed reply {text:?}: {e}")))
}

impl Detector for BridgeClient {
    fn info(&self) -> &DetectorInfo {
        &self.info
    }

    fn detect(&self, req: &DetectionRequest) -> Result<DetectionResponse> {
        if req.want_attention && !self.info.supports_attention {
            return Err(Error::Capability("attention output"));
        }
        let image = match &req.image {
            ImageRef::Path(p) => p.clone(),
            ImageRef::Scene(s) => {
                s.image.clone().ok_or(Error::Capability("in-memory scenes without an image path"))?
            }
        };
        let mut ch = self.channel.lock().expect("bridge channel poisoned");
        let id = ch.next_id;
        ch.next_id += 1;
        let wire = BridgeRequest::Detect {
            id,
            image,
            crop: req.crop.map(|c| c.to_array()),
            return_attention: req.want_attention,
        };
        match exchange(&mut ch, &wire, id, self.timeout)? {
            BridgeReply::Result { id: got, detections, attention_file, latency_ms } => {
                if got != id {
                    return Err(Error::Backend(format!("reply id {got} for request {id}")));
                }
                let attention = match (req.want_attention, attention_file) {
                    (true, Some(path)) => Some(AttentionTensor::read(&path)?),
                    (true, None) => return Err(Error::Backend(format!("request {id}: attention missing"))),
                    (false, _) => None,
                };
                let detections = detections
                    .into_iter()
                    .map(|d| {
                        let c = CropDetection {
                            coords: d.coords,
                            box_format: d.box_format,
                            score: d.score,
                            class_id: d.class_id,
                            source_window: None,
                        };
                        c.validate().map(|_| c)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(DetectionResponse { detections, attention, latency_ms: latency_ms.max(0.0) })
            }
            BridgeReply::Error { message, .. } => Err(Error::Backend(format!("request {id}: {message}"))),
            other => Err(Error::Backend(format!("unexpected reply {other:?}"))),
        }
    }
}

impl Drop for BridgeClient {
    fn drop(&mut self) {
        if let Ok(mut child) = self.child.lock() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

/// Serves the bridge protocol from `detector` until `input` reaches EOF.
///
/// Attention tensors are written under `attention_dir`. Used to exercise the
/// client end to end without an ML runtime.
pub fn serve<R: BufRead, W: Write>(
    detector: &dyn Detector,
    input: R,
    mut output: W,
    attention_dir: &Path,
) -> Result<()> {
    for line in input.lines() {
        let line = line.map_err(|e| Error::io("reading request", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let reply = handle(detector, &line, attention_dir);
        let mut text = serde_json::to_string(&reply).expect("reply serializes");
        text.push('\n');
        output
            .write_all(text.as_bytes())
            .and_then(|_| output.flush())
            .map_err(|e| Error::io("writing reply", e))?;
    }
    Ok(())
}

fn handle(detector: &dyn Detector, line: &str, attention_dir: &Path) -> BridgeReply {
    let request: BridgeRequest = match serde_json::from_str(line) {
        Ok(r) => r,
        Err(e) => {
            let id = serde_json::from_str::<serde_json::Value>(line)
                .ok()
                .and_then(|v| v.get("id").and_then(|i| i.as_u64()));
            return BridgeReply::Error { id, message: format!("malformed request: {e}") };
        }
    };
    match request {
        BridgeRequest::Hello => {
            let info = detector.info();
            BridgeReply::Hello {
                name: info.name.clone(),
                input_size: [info.input_size.0, info.input_size.1],
                key_grid: [info.key_grid.0, info.key_grid.1],
                supports_attention: info.supports_attention,
            }
        }
        BridgeRequest::Detect { id, image, crop, return_attention } => {
            let run = || -> Result<BridgeReply> {
                let crop = crop.map(crate::geometry::BBox::try_from).transpose()?;
                let resp = detector.detect(&DetectionRequest {
                    image: ImageRef::Path(image),
                    crop,
                    want_attention: return_attention,
                })?;
                let attention_file = match &resp.attention {
                    Some(t) => {
                        let path = attention_dir.join(format!("attn_{id}.bin"));
                        t.write(&path)?;
                        Some(path)
                    }
                    None => None,
                };
                Ok(BridgeReply::Result {
                    id,
                    detections: resp
                        .detections
                        .iter()
                        .map(|d| WireDetection {
                            coords: d.coords,
                            box_format: d.box_format,
                            score: d.score,
                            class_id: d.class_id,
                        })
                        .collect(),
                    attention_file,
                    latency_ms: resp.latency_ms,
                })
            };
            run().unwrap_or_else(|e| BridgeReply::Error { id: Some(id), message: e.to_string() })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{MockDetector, MockDetectorParams};
    use crate::scenes::{generate_scene, SceneSpec};

    #[test]
    fn wire_shapes() {
        assert_eq!(serde_json::to_string(&BridgeRequest::Hello).unwrap(), r#"{"op":"hello"}"#);
        let d = BridgeRequest::Detect { id: 3, image: "a.png".into(), crop: None, return_attention: true };
        assert_eq!(
            serde_json::to_string(&d).unwrap(),
            r#"{"op":"detect","id":3,"image":"a.png","crop":null,"return_attention":true}"#
        );
        let e: BridgeReply = serde_json::from_str(r#"{"op":"error","id":4,"message":"boom"}"#).unwrap();
        assert_eq!(e, BridgeReply::Error { id: Some(4), message: "boom".into() });
    }

    #[test]
    fn serve_answers_hello_detect_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let scene_path = dir.path().join("s.json");
        generate_scene(&SceneSpec::default(), 5).unwrap().save(&scene_path).unwrap();
        let det = MockDetector::new(MockDetectorParams {
            simulate_latency: false,
            ..MockDetectorParams::default()
        })
        .unwrap();
        let input = format!(
            "{}\n{}\n{}\n",
            r#"{"op":"hello"}"#,
            serde_json::json!({"op":"detect","id":7,"image":scene_path,"crop":null,"return_attention":true}),
            r#"{"op":"detect","id":8,"image":"/nonexistent.json"}"#,
        );
        let mut out = Vec::new();
        serve(&det, input.as_bytes(), &mut out, dir.path()).unwrap();
        let replies: Vec<BridgeReply> =
            String::from_utf8(out).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert!(matches!(replies[0], BridgeReply::Hello { key_grid: [20, 20], .. }));
        match &replies[1] {
            BridgeReply::Result { id, attention_file: Some(p), .. } => {
                assert_eq!(*id, 7);
                let bytes = std::fs::read(p).unwrap();
                let t = AttentionTensor::from_bytes(&bytes).unwrap();
                let header_len = bytes.iter().filter(|&&b| b == b'\n').take(2).count();
                assert_eq!(header_len, 2);
                assert!(bytes.len() >= 4 * t.rows() * t.keys());
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(replies[2], BridgeReply::Error { id: Some(8), .. }));
    }
}
