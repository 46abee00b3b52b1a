//! Deterministic in-process backends and a protocol server that exposes any set
//! of backends over the wire.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::sync::Arc;

use super::protocol::{self, Request, RequestBody, Response, ResponseBody, WireMask};
use super::transport::LineHandler;
use super::{AttnBackend, InpaintBackend, PolicyBackend, SegBackend, SegmentHit, VlmBackend};
use crate::action::{Action, ActionChunk, Observation};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::intervene::onion_peel_fill;
use crate::mask::Mask;
use crate::regions::{parse_proposal, ParseMode, PromptTemplate};

/// Ignores its inputs and returns the same chunk `k` times.
#[derive(Clone, Debug)]
pub struct ConstantPolicy {
    pub chunk: ActionChunk,
}

impl ConstantPolicy {
    pub fn new(steps: Vec<Action>) -> Result<Self> {
        Ok(ConstantPolicy {
            chunk: ActionChunk::new(steps)?,
        })
    }
}

impl PolicyBackend for ConstantPolicy {
    fn predict(&self, _obs: &Observation, _instruction: &str, k: usize, _seed: u64) -> Result<Vec<ActionChunk>> {
        Ok(vec![self.chunk.clone(); k])
    }
}

/// Fixed raw answers keyed by instruction, with an optional fallback.
#[derive(Clone, Debug, Default)]
pub struct StubVlm {
    pub answers: BTreeMap<String, String>,
    pub fallback: Option<String>,
}

impl StubVlm {
    pub fn always(answer: impl Into<String>) -> Self {
        StubVlm {
            answers: BTreeMap::new(),
            fallback: Some(answer.into()),
        }
    }
}

impl VlmBackend for StubVlm {
    fn propose(&self, _image: &Image, instruction: &str, _template: &PromptTemplate) -> Result<String> {
        self.answers
            .get(instruction)
            .or(self.fallback.as_ref())
            .cloned()
            .ok_or_else(|| Error::FixtureMissing(format!("no proposal for instruction `{instruction}`")))
    }
}

/// Returns fixture masks for the requested labels.
#[derive(Clone, Debug, Default)]
pub struct StubSeg {
    pub fixtures: Vec<SegmentHit>,
}

impl StubSeg {
    pub fn rect(mut self, label: &str, score: f64, dims: (u32, u32), x0: i64, y0: i64, x1: i64, y1: i64) -> Self {
        self.fixtures.push(SegmentHit {
            label: label.into(),
            score,
            mask: Mask::rect(dims.0, dims.1, x0, y0, x1, y1),
        });
        self
    }
}

impl SegBackend for StubSeg {
    fn segment(&self, image: &Image, labels: &[String], _box: f64, _text: f64) -> Result<Vec<SegmentHit>> {
        let hits: Vec<SegmentHit> = self
            .fixtures
            .iter()
            .filter(|h| labels.contains(&h.label))
            .cloned()
            .collect();
        for h in &hits {
            h.mask.check_matches(image)?;
        }
        Ok(hits)
    }
}

/// The built-in onion-peel fill behind the inpainting interface.
#[derive(Clone, Copy, Debug, Default)]
pub struct OnionPeelInpaint;

impl InpaintBackend for OnionPeelInpaint {
    fn inpaint(&self, image: &Image, mask: &Mask, _dilation: u32) -> Result<Image> {
        onion_peel_fill(image, mask)
    }
}

/// Serves whichever backends are configured; requests for missing ones get an
/// `error_resp` with code `fixture_missing`.
#[derive(Clone, Default)]
pub struct StubServer {
    pub policy: Option<Arc<dyn PolicyBackend>>,
    pub vlm: Option<Arc<dyn VlmBackend>>,
    pub seg: Option<Arc<dyn SegBackend>>,
    pub inpaint: Option<Arc<dyn InpaintBackend>>,
    pub attn: Option<Arc<dyn AttnBackend>>,
}

fn missing(what: &str) -> Error {
    Error::FixtureMissing(format!("no {what} backend configured"))
}

impl StubServer {
    pub fn handle(&self, request: &Request) -> Result<ResponseBody> {
        match &request.body {
            RequestBody::PredictReq {
                image,
                instruction,
                k,
                seed,
                state,
            } => {
                let p = self.policy.as_ref().ok_or_else(|| missing("policy"))?;
                let obs = Observation {
                    image: protocol::decode_image(image)?,
                    state: *state,
                };
                let chunks = p.predict(&obs, instruction, *k, seed.unwrap_or(0))?;
                Ok(ResponseBody::PredictResp {
                    chunks: chunks.into_iter().map(Vec::from).collect(),
                })
            }
            RequestBody::ProposeReq { image, instruction, .. } => {
                let v = self.vlm.as_ref().ok_or_else(|| missing("vlm"))?;
                let raw = v.propose(&protocol::decode_image(image)?, instruction, &PromptTemplate::default_template())?;
                let parsed = parse_proposal(&raw, ParseMode::Lenient).unwrap_or_default();
                Ok(ResponseBody::ProposeResp {
                    not_relevant_objects: parsed.not_relevant_objects,
                    not_relevant_backgrounds: parsed.not_relevant_backgrounds,
                    raw,
                })
            }
            RequestBody::SegmentReq {
                image,
                labels,
                box_threshold,
                text_threshold,
            } => {
                let s = self.seg.as_ref().ok_or_else(|| missing("segmentation"))?;
                let hits = s.segment(&protocol::decode_image(image)?, labels, *box_threshold, *text_threshold)?;
                Ok(ResponseBody::SegmentResp {
                    masks: hits
                        .into_iter()
                        .map(|h| WireMask {
                            label: h.label,
                            score: h.score,
                            rle: h.mask.to_rle(),
                        })
                        .collect(),
                })
            }
            RequestBody::InpaintReq { image, rle, dilation } => {
                let b = self.inpaint.as_ref().ok_or_else(|| missing("inpaint"))?;
                let img = protocol::decode_image(image)?;
                let mask = rle.decode()?;
                mask.check_matches(&img)?;
                Ok(ResponseBody::InpaintResp {
                    image: protocol::encode_image(&b.inpaint(&img, &mask, *dilation)?)?,
                })
            }
            RequestBody::AttnReq { image, instruction, layer } => {
                let a = self.attn.as_ref().ok_or_else(|| missing("attention"))?;
                let t = a.attention(&protocol::decode_image(image)?, instruction, *layer)?;
                Ok(ResponseBody::AttnResp {
                    h: t.h,
                    j: t.j,
                    layer: t.layer,
                    a: t.a,
                    da: t.da,
                })
            }
        }
    }

    /// Answers stdin requests on stdout until EOF.
    pub fn serve(&self, input: impl BufRead, mut output: impl Write) -> std::io::Result<()> {
        for line in input.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            writeln!(output, "{}", self.handle_line(&line))?;
            output.flush()?;
        }
        Ok(())
    }
}

impl LineHandler for StubServer {
    fn handle_line(&self, line: &str) -> String {
        let request = match Request::from_line(line) {
            Ok(r) => r,
            Err(e) => {
                let id = serde_json::from_str::<serde_json::Value>(line)
                    .ok()
                    .and_then(|v| v.get("id").and_then(|i| i.as_u64()))
                    .unwrap_or(0);
                return Response::error(id, "bad_request", e.to_string()).to_line();
            }
        };
        match self.handle(&request) {
            Ok(body) => Response::new(request.id, body).to_line(),
            Err(e) => Response::error(request.id, e.code(), e.to_string()).to_line(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::remote::{BackendClient, EndpointOptions};
    use crate::backends::transport::InProcess;

    fn client(server: StubServer) -> BackendClient {
        BackendClient::new(Box::new(InProcess::new(Arc::new(server))), EndpointOptions::default()).unwrap()
    }

    #[test]
    fn predict_round_trip_echoes_id() {
        let policy = ConstantPolicy::new(vec![[0.001, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]; 4]).unwrap();
        let server = StubServer {
            policy: Some(Arc::new(policy.clone())),
            ..Default::default()
        };
        let c = client(server);
        let obs = Observation::new(Image::filled(4, 4, [1, 2, 3]));
        let got = c.predict(&obs, "go", 3, 9).unwrap();
        assert_eq!(got, vec![policy.chunk; 3]);
        let t = c.transcript();
        assert_eq!(t.exchanges.len(), 1);
        assert!(t.exchanges[0].response.contains("\"id\":1"));
    }

    #[test]
    fn missing_backend_is_typed() {
        let c = client(StubServer::default());
        let err = c.predict(&Observation::new(Image::filled(2, 2, [0; 3])), "x", 1, 0).unwrap_err();
        assert!(matches!(err, Error::FixtureMissing(_)), "{err:?}");
    }

    #[test]
    fn garbage_request_gets_error_resp() {
        let line = StubServer::default().handle_line("{not json");
        assert!(line.contains("\"type\":\"error_resp\""));
        assert!(line.contains("bad_request"));
    }
}
