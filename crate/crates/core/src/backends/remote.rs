//! Protocol client. One [`BackendClient`] implements every backend trait by
//! sending the corresponding request to its transport.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use log::{debug, warn};

use super::protocol::{self, Request, RequestBody, Response, ResponseBody};
use super::transport::{Exchange, Transcript, Transport};
use super::{AttnBackend, InpaintBackend, PolicyBackend, SegBackend, SegmentHit, VlmBackend};
use crate::action::{ActionChunk, Observation};
use crate::attribution::AttentionTensors;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::mask::Mask;
use crate::regions::PromptTemplate;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EndpointOptions {
    pub timeout: Duration,
    /// Extra attempts after a transport failure; protocol errors are not retried.
    pub retries: u32,
}

impl Default for EndpointOptions {
    fn default() -> Self {
        EndpointOptions {
            timeout: Duration::from_secs(30),
            retries: 1,
        }
    }
}

pub struct BackendClient {
    transport: Box<dyn Transport>,
    options: EndpointOptions,
    next_id: AtomicU64,
    transcript: Mutex<Transcript>,
}

impl BackendClient {
    pub fn new(transport: Box<dyn Transport>, options: EndpointOptions) -> Result<Self> {
        if options.timeout.is_zero() {
            return Err(Error::InvalidConfig("backend timeout must be positive".into()));
        }
        Ok(BackendClient {
            transport,
            options,
            next_id: AtomicU64::new(1),
            transcript: Mutex::new(Transcript::default()),
        })
    }

    pub fn transcript(&self) -> Transcript {
        self.transcript.lock().expect("transcript lock").clone()
    }

    /// Sends `body` and returns the validated response body. `error_resp` answers
    /// become typed errors.
    pub fn call(&self, body: RequestBody) -> Result<(ResponseBody, String)> {
        let request = Request::new(self.next_id.fetch_add(1, Ordering::SeqCst), body);
        let line = request.to_line();
        let op = request.body.op();
        let mut attempt = 0;
        let response = loop {
            match self.transport.roundtrip(&line, self.options.timeout) {
                Ok(r) => break r,
                Err(e @ Error::BackendUnavailable { .. }) if attempt < self.options.retries => {
                    attempt += 1;
                    warn!("{op} request {} failed ({e}); retry {attempt}", request.id);
                }
                Err(Error::BackendUnavailable { reason, .. }) => {
                    return Err(Error::backend(op, reason));
                }
                Err(e) => return Err(e),
            }
        };
        debug!("{op} request {} answered ({} bytes)", request.id, response.len());
        self.transcript.lock().expect("transcript lock").exchanges.push(Exchange {
            request: line,
            response: response.clone(),
        });
        match Response::parse_for(&response, &request)?.body {
            ResponseBody::ErrorResp { code, message } => Err(match code.as_str() {
                "fixture_missing" => Error::FixtureMissing(message),
                _ => Error::backend(op, format!("{code}: {message}")),
            }),
            body => Ok((body, response)),
        }
    }
}

fn unexpected(payload: &str) -> Error {
    Error::protocol("unexpected response type", payload)
}

impl PolicyBackend for BackendClient {
    fn predict(&self, obs: &Observation, instruction: &str, k: usize, seed: u64) -> Result<Vec<ActionChunk>> {
        let (body, raw) = self.call(RequestBody::PredictReq {
            image: protocol::encode_image(&obs.image)?,
            instruction: instruction.into(),
            k,
            seed: Some(seed),
            state: obs.state,
        })?;
        match body {
            ResponseBody::PredictResp { chunks } => protocol::validate_chunks(chunks, k, &raw),
            _ => Err(unexpected(&raw)),
        }
    }
}

impl VlmBackend for BackendClient {
    fn propose(&self, image: &Image, instruction: &str, template: &PromptTemplate) -> Result<String> {
        let (body, raw) = self.call(RequestBody::ProposeReq {
            image: protocol::encode_image(image)?,
            instruction: instruction.into(),
            template_id: format!("{}@v{}", template.id, template.version),
        })?;
        match body {
            ResponseBody::ProposeResp {
                not_relevant_objects,
                not_relevant_backgrounds,
                raw: text,
            } => Ok(if text.trim().is_empty() {
                serde_json::json!({
                    "not_relevant_objects": not_relevant_objects,
                    "not_relevant_backgrounds": not_relevant_backgrounds,
                })
                .to_string()
            } else {
                text
            }),
            _ => Err(unexpected(&raw)),
        }
    }
}

impl SegBackend for BackendClient {
    fn segment(&self, image: &Image, labels: &[String], box_threshold: f64, text_threshold: f64) -> Result<Vec<SegmentHit>> {
        let (body, raw) = self.call(RequestBody::SegmentReq {
            image: protocol::encode_image(image)?,
            labels: labels.to_vec(),
            box_threshold,
            text_threshold,
        })?;
        let ResponseBody::SegmentResp { masks } = body else {
            return Err(unexpected(&raw));
        };
        masks
            .into_iter()
            .map(|m| {
                if !(0.0..=1.0).contains(&m.score) {
                    return Err(Error::protocol(format!("score {} outside [0, 1]", m.score), &raw));
                }
                let mask = m
                    .rle
                    .decode()
                    .map_err(|e| Error::protocol(format!("mask `{}`: {e}", m.label), &raw))?;
                Ok(SegmentHit {
                    label: m.label,
                    score: m.score,
                    mask,
                })
            })
            .collect()
    }
}

impl InpaintBackend for BackendClient {
    fn inpaint(&self, image: &Image, mask: &Mask, dilation: u32) -> Result<Image> {
        let (body, raw) = self.call(RequestBody::InpaintReq {
            image: protocol::encode_image(image)?,
            rle: mask.to_rle(),
            dilation,
        })?;
        match body {
            ResponseBody::InpaintResp { image } => {
                protocol::decode_image(&image).map_err(|e| Error::protocol(format!("inpainted image: {e}"), &raw))
            }
            _ => Err(unexpected(&raw)),
        }
    }
}

impl AttnBackend for BackendClient {
    fn attention(&self, image: &Image, instruction: &str, layer: u32) -> Result<AttentionTensors> {
        let (body, raw) = self.call(RequestBody::AttnReq {
            image: protocol::encode_image(image)?,
            instruction: instruction.into(),
            layer,
        })?;
        match body {
            ResponseBody::AttnResp { h, j, layer, a, da } => {
                let t = AttentionTensors { h, j, layer, a, da };
                t.validate().map_err(|e| Error::protocol(e.to_string(), &raw))?;
                Ok(t)
            }
            _ => Err(unexpected(&raw)),
        }
    }
}
