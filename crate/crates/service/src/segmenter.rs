//! Client for an external promptable segmenter.
//!
//! Request: `POST {endpoint}` with JSON `{"image": <base64 PNG>, "prompts": [...]}`.
//! Response: either raw PNG bytes or JSON `{"mask": <base64 PNG>}`.

use std::time::Duration;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use transmask_core::imaging::{decode_mask, encode_rgb_png};
use transmask_core::inference::{finalize_mask, Prompt};
use transmask_core::{Error, Mask, Result, RgbImage};

#[derive(Serialize)]
struct SegmentRequest<'a> {
    image: String,
    prompts: &'a [Prompt],
}

#[derive(Deserialize)]
struct SegmentResponse {
    mask: String,
}

#[derive(Clone, Debug)]
pub struct HttpSegmenter {
    endpoint: String,
    client: reqwest::Client,
}

fn degraded(endpoint: &str, why: impl std::fmt::Display) -> Error {
    Error::Segmenter(format!(
        "segmenter at {endpoint} is unavailable ({why}); running in degraded mode, upload a mask file instead"
    ))
}

impl HttpSegmenter {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Result<Self> {
        let client = reqwest::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Segmenter(format!("cannot build HTTP client: {e}")))?;
        Ok(Self { endpoint: endpoint.into(), client })
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    /// Segment `image` with the given prompts and reduce the answer to one
    /// connected region at image resolution.
    pub async fn segment(&self, image: &RgbImage, prompts: &[Prompt]) -> Result<(Mask, Vec<String>)> {
        let body = SegmentRequest { image: STANDARD.encode(encode_rgb_png(image)?), prompts };
        let resp = self
            .client
            .post(&self.endpoint)
            .json(&body)
            .send()
            .await
            .map_err(|e| degraded(&self.endpoint, e))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(degraded(&self.endpoint, format!("HTTP {status}")));
        }
        let is_json = resp
            .headers()
            .get(reqwest::header::CONTENT_TYPE)
            .and_then(|v| v.to_str().ok())
            .is_some_and(|v| v.starts_with("application/json"));
        let bytes = resp.bytes().await.map_err(|e| degraded(&self.endpoint, e))?;
        let png = if is_json {
            let parsed: SegmentResponse =
                serde_json::from_slice(&bytes).map_err(|e| Error::Segmenter(format!("malformed segmenter reply: {e}")))?;
            STANDARD.decode(parsed.mask).map_err(|e| Error::Segmenter(format!("mask is not base64: {e}")))?
        } else {
            bytes.to_vec()
        };
        let (raw, _) = decode_mask(&png)?;
        finalize_mask(&raw, image.dims())
    }
}
