//! JSON-lines wire protocol. Every message is one JSON object carrying
//! `"v": "1"`, an `"id"`, and a `"type"` tag; responses echo the request id.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::action::{Action, ActionChunk, RobotState};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::mask::RleSpec;

pub const PROTOCOL_VERSION: &str = "1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum RequestBody {
    PredictReq {
        image: String,
        instruction: String,
        k: usize,
        /// Sampling seed; backends without seeded sampling ignore it.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        state: Option<RobotState>,
    },
    ProposeReq {
        image: String,
        instruction: String,
        template_id: String,
    },
    SegmentReq {
        image: String,
        labels: Vec<String>,
        box_threshold: f64,
        text_threshold: f64,
    },
    InpaintReq {
        image: String,
        rle: RleSpec,
        dilation: u32,
    },
    AttnReq {
        image: String,
        instruction: String,
        layer: u32,
    },
}

impl RequestBody {
    pub fn op(&self) -> &'static str {
        match self {
            RequestBody::PredictReq { .. } => "predict",
            RequestBody::ProposeReq { .. } => "propose",
            RequestBody::SegmentReq { .. } => "segment",
            RequestBody::InpaintReq { .. } => "inpaint",
            RequestBody::AttnReq { .. } => "attn",
        }
    }

    /// Tag of the response type that answers this request.
    pub fn response_type(&self) -> &'static str {
        match self {
            RequestBody::PredictReq { .. } => "predict_resp",
            RequestBody::ProposeReq { .. } => "propose_resp",
            RequestBody::SegmentReq { .. } => "segment_resp",
            RequestBody::InpaintReq { .. } => "inpaint_resp",
            RequestBody::AttnReq { .. } => "attn_resp",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub v: String,
    pub id: u64,
    #[serde(flatten)]
    pub body: RequestBody,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireMask {
    pub label: String,
    pub score: f64,
    pub rle: RleSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ResponseBody {
    PredictResp {
        chunks: Vec<Vec<Action>>,
    },
    ProposeResp {
        not_relevant_objects: Vec<String>,
        not_relevant_backgrounds: Vec<String>,
        raw: String,
    },
    SegmentResp {
        masks: Vec<WireMask>,
    },
    InpaintResp {
        image: String,
    },
    AttnResp {
        #[serde(rename = "H")]
        h: usize,
        #[serde(rename = "J")]
        j: usize,
        layer: u32,
        #[serde(rename = "A")]
        a: Vec<f64>,
        #[serde(rename = "dA")]
        da: Vec<f64>,
    },
    ErrorResp {
        code: String,
        message: String,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub v: String,
    pub id: u64,
    #[serde(flatten)]
    pub body: ResponseBody,
}

impl Request {
    pub fn new(id: u64, body: RequestBody) -> Self {
        Request {
            v: PROTOCOL_VERSION.into(),
            id,
            body,
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("request serializes")
    }

    pub fn from_line(line: &str) -> Result<Self> {
        let r: Request = serde_json::from_str(line.trim_end())
            .map_err(|e| Error::protocol(format!("malformed request: {e}"), line))?;
        if r.v != PROTOCOL_VERSION {
            return Err(Error::protocol(format!("unsupported protocol version `{}`", r.v), line));
        }
        Ok(r)
    }
}

impl Response {
    pub fn new(id: u64, body: ResponseBody) -> Self {
        Response {
            v: PROTOCOL_VERSION.into(),
            id,
            body,
        }
    }

    pub fn error(id: u64, code: impl Into<String>, message: impl Into<String>) -> Self {
        Response::new(
            id,
            ResponseBody::ErrorResp {
                code: code.into(),
                message: message.into(),
            },
        )
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("response serializes")
    }

    /// Parses and checks a response line against the request it answers: version,
    /// echoed id, and response type (or `error_resp`).
    pub fn parse_for(line: &str, request: &Request) -> Result<Self> {
        let value: Value = serde_json::from_str(line.trim_end())
            .map_err(|e| Error::protocol(format!("response is not JSON: {e}"), line))?;
        let v = value.get("v").and_then(Value::as_str);
        if v != Some(PROTOCOL_VERSION) {
            return Err(Error::protocol(format!("bad protocol version {v:?}"), line));
        }
        let id = value.get("id").and_then(Value::as_u64);
        if id != Some(request.id) {
            return Err(Error::protocol(
                format!("response id {id:?} does not echo request id {}", request.id),
                line,
            ));
        }
        let ty = value.get("type").and_then(Value::as_str).unwrap_or("");
        if ty != request.body.response_type() && ty != "error_resp" {
            return Err(Error::protocol(
                format!("expected {} or error_resp, got `{ty}`", request.body.response_type()),
                line,
            ));
        }
        serde_json::from_value(value).map_err(|e| Error::protocol(format!("response schema: {e}"), line))
    }
}

pub fn encode_image(image: &Image) -> Result<String> {
    Ok(B64.encode(image.encode_png()?))
}

pub fn decode_image(s: &str) -> Result<Image> {
    let bytes = B64
        .decode(s)
        .map_err(|e| Error::Codec(format!("image is not base64: {e}")))?;
    Image::decode_png(&bytes)
}

/// Checks a predict response holds exactly `k` chunks of one common length.
pub fn validate_chunks(chunks: Vec<Vec<Action>>, k: usize, payload: &str) -> Result<Vec<ActionChunk>> {
    if chunks.len() != k {
        return Err(Error::protocol(format!("asked for {k} chunks, got {}", chunks.len()), payload));
    }
    let len = chunks.first().map(Vec::len).unwrap_or(0);
    if chunks.iter().any(|c| c.len() != len) {
        return Err(Error::protocol("chunks differ in length", payload));
    }
    chunks
        .into_iter()
        .map(|c| ActionChunk::new(c).map_err(|e| Error::protocol(format!("invalid chunk: {e}"), payload)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_wire_shape() {
        let r = Request::new(
            3,
            RequestBody::AttnReq {
                image: "x".into(),
                instruction: "put the cup".into(),
                layer: 6,
            },
        );
        let line = r.to_line();
        assert_eq!(
            line,
            r#"{"v":"1","id":3,"type":"attn_req","image":"x","instruction":"put the cup","layer":6}"#
        );
        assert_eq!(Request::from_line(&line).unwrap(), r);
    }

    #[test]
    fn response_id_must_echo() {
        let req = Request::new(7, RequestBody::AttnReq { image: String::new(), instruction: String::new(), layer: 0 });
        let ok = Response::error(7, "fixture_missing", "nope").to_line();
        assert!(Response::parse_for(&ok, &req).is_ok());
        let wrong = Response::error(8, "x", "y").to_line();
        assert!(matches!(Response::parse_for(&wrong, &req), Err(Error::Protocol { .. })));
        let other_type = Response::new(7, ResponseBody::InpaintResp { image: String::new() }).to_line();
        assert!(matches!(Response::parse_for(&other_type, &req), Err(Error::Protocol { .. })));
    }

    #[test]
    fn chunk_count_checked() {
        let c = vec![vec![[0.0; 7]; 2]];
        assert!(validate_chunks(c.clone(), 1, "").is_ok());
        assert!(matches!(validate_chunks(c, 2, ""), Err(Error::Protocol { .. })));
        let ragged = vec![vec![[0.0; 7]; 2], vec![[0.0; 7]; 3]];
        assert!(validate_chunks(ragged, 2, "").is_err());
    }
}
