//! Adapter for a vision-language model served over HTTP.
//!
//! The server exposes three JSON endpoints:
//!
//! ```text
//! GET  /info         -> {"identity": str, "dim": int, "temperature": float}
//! POST /embed/image  {"png_base64": str} -> {"embedding": [float]}
//! POST /embed/text   {"text": str}       -> {"embedding": [float]}
//! ```
//!
//! The server is responsible for the model's own preprocessing (resize,
//! crop, normalisation); images are sent losslessly as PNG.
//! `scripts/clip_server.py` implements this protocol with an open CLIP
//! checkpoint.

use std::io::Cursor;
use std::time::Duration;

use base64::Engine;
use image::{ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};

use crate::embedding::Encoder;
use crate::error::{Error, Result};

#[derive(Debug, Deserialize)]
struct Info {
    identity: String,
    dim: usize,
    temperature: f64,
}

#[derive(Serialize)]
struct ImageRequest<'a> {
    png_base64: &'a str,
}

#[derive(Serialize)]
struct TextRequest<'a> {
    text: &'a str,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    embedding: Vec<f32>,
}

pub struct RemoteEncoder {
    base: String,
    agent: ureq::Agent,
    identity: String,
    dim: usize,
    temperature: f64,
}

fn remote_err(e: ureq::Error) -> Error {
    Error::Encoder(format!("remote encoder: {e}"))
}

impl RemoteEncoder {
    /// Connects to `base_url` and fetches the model description.
    pub fn connect(base_url: &str) -> Result<Self> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(120)))
            .build()
            .into();
        let base = base_url.trim_end_matches('/').to_string();
        let info: Info = agent
            .get(format!("{base}/info"))
            .call()
            .map_err(remote_err)?
            .body_mut()
            .read_json()
            .map_err(remote_err)?;
        if info.dim == 0 || !(info.temperature > 0.0) {
            return Err(Error::Config(format!(
                "remote encoder reports dim={} temperature={}",
                info.dim, info.temperature
            )));
        }
        Ok(RemoteEncoder {
            base,
            agent,
            identity: info.identity,
            dim: info.dim,
            temperature: info.temperature,
        })
    }

    fn post<T: Serialize>(&self, path: &str, body: &T) -> Result<Vec<f32>> {
        let resp: EmbeddingResponse = self
            .agent
            .post(format!("{}{path}", self.base))
            .send_json(body)
            .map_err(remote_err)?
            .body_mut()
            .read_json()
            .map_err(remote_err)?;
        Ok(resp.embedding)
    }
}

impl Encoder for RemoteEncoder {
    fn identity(&self) -> &str {
        &self.identity
    }

    fn visual_dim(&self) -> usize {
        self.dim
    }

    fn temperature(&self) -> f64 {
        self.temperature
    }

    fn encode_image_raw(&self, image: &RgbImage) -> Result<Vec<f32>> {
        let mut png = Vec::new();
        image
            .write_to(&mut Cursor::new(&mut png), ImageFormat::Png)
            .map_err(|e| Error::Encoder(format!("png encoding failed: {e}")))?;
        let encoded = base64::engine::general_purpose::STANDARD.encode(&png);
        self.post("/embed/image", &ImageRequest { png_base64: &encoded })
    }

    fn encode_text_raw(&self, prompt: &str) -> Result<Vec<f32>> {
        self.post("/embed/text", &TextRequest { text: prompt })
    }
}
