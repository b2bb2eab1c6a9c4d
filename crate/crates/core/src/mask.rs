//! Transient-mask providers and the HTTP clients for an external model
//! server.

use std::sync::Mutex;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{decode_gray_png, decode_png, encode_gray_png, encode_png};
use crate::scene::{ImageBuffer, ScalarMap, TransientMask};
use crate::synth::{oracle_mask, SynthScene};

pub const DEFAULT_PROMPT: &str = "dynamic humans, vehicles, animals, moving objects";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViewKind {
    Train(usize),
    Test(usize),
    Pseudo,
}

#[derive(Clone, Copy, Debug)]
pub struct MaskRequest<'a> {
    pub image: &'a ImageBuffer,
    pub prompt: &'a str,
    pub view: ViewKind,
}

/// Which mask backend a run uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    #[default]
    Oracle,
    Zero,
    Remote,
}

impl std::str::FromStr for ProviderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(ProviderKind::Oracle),
            "zero" => Ok(ProviderKind::Zero),
            "remote" => Ok(ProviderKind::Remote),
            other => Err(Error::Config(format!("unknown mask provider '{other}' (expected oracle, zero or remote)"))),
        }
    }
}

pub trait MaskProvider: Send + Sync {
    fn get_mask(&self, request: &MaskRequest) -> Result<TransientMask>;
    fn name(&self) -> &'static str;
}

fn check_request(request: &MaskRequest) -> Result<()> {
    if request.image.width == 0 || request.image.height == 0 {
        return Err(Error::InvalidInput("mask request with an empty image".into()));
    }
    Ok(())
}

/// Always returns an all-zero mask.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroMasks;

impl MaskProvider for ZeroMasks {
    fn get_mask(&self, request: &MaskRequest) -> Result<TransientMask> {
        check_request(request)?;
        Ok(TransientMask::zeros(request.image.width, request.image.height))
    }

    fn name(&self) -> &'static str {
        "zero"
    }
}

/// Exact masks from a synthetic scene, looked up by training-view index.
/// Test and pseudo views carry no distractors and get zero masks.
#[derive(Clone, Debug, Default)]
pub struct OracleMasks {
    masks: Option<Vec<TransientMask>>,
}

impl OracleMasks {
    pub fn new(masks: Vec<TransientMask>) -> Self {
        OracleMasks { masks: Some(masks) }
    }

    pub fn from_scene(scene: &SynthScene) -> Result<Self> {
        let masks = (0..scene.train_cameras.len()).map(|v| oracle_mask(scene, v)).collect::<Result<_>>()?;
        Ok(Self::new(masks))
    }

    /// A provider with no scene attached; every request fails.
    pub fn unconfigured() -> Self {
        OracleMasks { masks: None }
    }
}

impl MaskProvider for OracleMasks {
    fn get_mask(&self, request: &MaskRequest) -> Result<TransientMask> {
        check_request(request)?;
        let masks = self.masks.as_ref().ok_or_else(|| Error::Config("oracle mask provider has no scene".into()))?;
        let (w, h) = (request.image.width, request.image.height);
        match request.view {
            ViewKind::Train(i) => {
                let m = masks.get(i).ok_or_else(|| Error::InvalidInput(format!("no oracle mask for training view {i}")))?;
                if m.width != w || m.height != h {
                    return Err(Error::InvalidInput(format!("oracle mask is {}x{}, image is {w}x{h}", m.width, m.height)));
                }
                Ok(m.clone())
            }
            ViewKind::Test(_) | ViewKind::Pseudo => Ok(TransientMask::zeros(w, h)),
        }
    }

    fn name(&self) -> &'static str {
        "oracle"
    }
}

#[derive(Clone, Debug)]
pub struct RemoteOptions {
    pub timeout: Duration,
    pub retries: u32,
    pub backoff: Duration,
}

impl Default for RemoteOptions {
    fn default() -> Self {
        RemoteOptions { timeout: Duration::from_secs(30), retries: 2, backoff: Duration::from_millis(100) }
    }
}

struct Client {
    base_url: String,
    agent: ureq::Agent,
    options: RemoteOptions,
    // One request in flight per client.
    lock: Mutex<()>,
}

impl Client {
    fn new(base_url: &str, options: RemoteOptions) -> Result<Self> {
        if base_url.is_empty() {
            return Err(Error::Config("remote backend needs an endpoint URL".into()));
        }
        let agent = ureq::Agent::config_builder().timeout_global(Some(options.timeout)).build().into();
        Ok(Client { base_url: base_url.trim_end_matches('/').to_string(), agent, options, lock: Mutex::new(()) })
    }

    fn post<Req: Serialize, Resp: for<'de> Deserialize<'de>>(&self, route: &str, body: &Req) -> Result<Resp> {
        let _guard = self.lock.lock().unwrap_or_else(|e| e.into_inner());
        let url = format!("{}/{route}", self.base_url);
        let mut last = String::new();
        for attempt in 0..=self.options.retries {
            if attempt > 0 {
                std::thread::sleep(self.options.backoff * attempt);
            }
            match self.agent.post(&url).send_json(body) {
                Ok(mut resp) => {
                    return resp
                        .body_mut()
                        .read_json::<Resp>()
                        .map_err(|e| Error::Protocol(format!("malformed response from {url}: {e}")));
                }
                Err(ureq::Error::StatusCode(code)) if (400..500).contains(&code) => {
                    return Err(Error::Protocol(format!("{url} rejected the request with status {code}")));
                }
                Err(e) => {
                    log::warn!("request to {url} failed (attempt {}): {e}", attempt + 1);
                    last = e.to_string();
                }
            }
        }
        Err(Error::Transport { message: format!("{url}: {last}"), retries: self.options.retries })
    }
}

#[derive(Serialize)]
struct MaskBody<'a> {
    image: String,
    prompt: &'a str,
}

#[derive(Deserialize)]
struct MaskReply {
    mask: String,
}

fn decode_b64(s: &str, what: &str) -> Result<Vec<u8>> {
    B64.decode(s).map_err(|e| Error::Protocol(format!("{what} is not valid base64: {e}")))
}

fn decode_gray(s: &str, what: &str) -> Result<ScalarMap> {
    decode_gray_png(&decode_b64(s, what)?).map_err(|e| Error::Protocol(format!("{what} is not a PNG: {e}")))
}

/// Segmentation served over HTTP: `POST {url}/mask`.
pub struct RemoteMasks {
    client: Client,
}

impl RemoteMasks {
    pub fn new(base_url: &str, options: RemoteOptions) -> Result<Self> {
        Ok(RemoteMasks { client: Client::new(base_url, options)? })
    }
}

impl MaskProvider for RemoteMasks {
    fn get_mask(&self, request: &MaskRequest) -> Result<TransientMask> {
        check_request(request)?;
        let body = MaskBody { image: B64.encode(encode_png(request.image)?), prompt: request.prompt };
        let reply: MaskReply = self.client.post("mask", &body)?;
        let map = decode_gray(&reply.mask, "mask")?;
        if map.width != request.image.width || map.height != request.image.height {
            return Err(Error::Protocol(format!(
                "mask is {}x{}, image is {}x{}",
                map.width, map.height, request.image.width, request.image.height
            )));
        }
        TransientMask::new(map)
    }

    fn name(&self) -> &'static str {
        "remote"
    }
}

#[derive(Serialize)]
struct RefineBody {
    rendered: String,
    reference: String,
    mask: String,
}

#[derive(Deserialize)]
struct RefineReply {
    refined: String,
}

/// Refinement served over HTTP: `POST {url}/refine`.
pub struct RemoteRefiner {
    client: Client,
}

impl RemoteRefiner {
    pub fn new(base_url: &str, options: RemoteOptions) -> Result<Self> {
        Ok(RemoteRefiner { client: Client::new(base_url, options)? })
    }

    pub fn refine(&self, rendered: &ImageBuffer, reference: &ImageBuffer, mask: &ScalarMap) -> Result<ImageBuffer> {
        if !rendered.same_dims(reference) || mask.width != rendered.width || mask.height != rendered.height {
            return Err(Error::InvalidInput("rendered, reference and mask dimensions differ".into()));
        }
        let body = RefineBody {
            rendered: B64.encode(encode_png(rendered)?),
            reference: B64.encode(encode_png(reference)?),
            mask: B64.encode(encode_gray_png(mask)?),
        };
        let reply: RefineReply = self.client.post("refine", &body)?;
        let img = decode_png(&decode_b64(&reply.refined, "refined")?).map_err(|e| Error::Protocol(format!("refined is not a PNG: {e}")))?;
        if !img.same_dims(rendered) {
            return Err(Error::Protocol(format!("refined image is {}x{}", img.width, img.height)));
        }
        Ok(img)
    }
}
