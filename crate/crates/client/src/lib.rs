//! Blocking client for the `/v1` API. Images go over the wire as PNG bytes
//! exactly as produced by the library, so results are byte-identical to
//! in-process calls.

use std::io::Read;
use std::time::{Duration, Instant};

use reqwest::blocking::multipart::{Form, Part};
use reqwest::blocking::{Client as Http, RequestBuilder, Response};
use serde::{Deserialize, Serialize};

use outpaint_core::eval::{EvalConfig, EvalReport};
use outpaint_core::expansion::ExpansionReport;
use outpaint_core::pipeline::OutpaintParams;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: String,
    pub message: String,
}

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("service returned {status}: {} ({})", .error.message, .error.code)]
    Api { status: u16, error: ApiError },
    #[error("job {id} failed: {} ({})", .error.message, .error.code)]
    JobFailed { id: String, error: ApiError },
    #[error("timed out waiting for job {0}")]
    Timeout(String),
    #[error("transport: {0}")]
    Transport(#[from] reqwest::Error),
    #[error("unexpected response: {0}")]
    Protocol(String),
}

pub type Result<T> = std::result::Result<T, ClientError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultLocator {
    pub key: String,
    pub media_type: String,
    pub url: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub id: String,
    pub kind: String,
    pub state: JobState,
    pub request: serde_json::Value,
    pub result: Option<ResultLocator>,
    pub created_ms: u64,
    pub started_ms: Option<u64>,
    pub finished_ms: Option<u64>,
    pub error: Option<ApiError>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub build_hash: String,
    pub base_hash: String,
    pub adapter_hash: Option<String>,
    pub jobs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantMetrics {
    pub file: String,
    pub seed: u64,
    pub expansion: Option<f64>,
    pub expansion_error: Option<String>,
}

/// A downloaded outpaint result.
#[derive(Clone, Debug, PartialEq)]
pub struct OutpaintResult {
    /// PNG bytes per variant, in variant order.
    pub variants: Vec<Vec<u8>>,
    /// The object mask the service used, as PNG.
    pub mask: Vec<u8>,
    pub metrics: Vec<VariantMetrics>,
    /// The archive as served.
    pub archive: Vec<u8>,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalRequest {
    pub dataset: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<EvalConfig>,
    pub compare_baseline: bool,
}

#[derive(Deserialize)]
struct Submitted {
    job_id: String,
}

#[derive(Deserialize)]
struct ArchiveMetrics {
    variants: Vec<VariantMetrics>,
}

pub struct Client {
    base: String,
    token: Option<String>,
    http: Http,
    /// Interval between job status polls.
    pub poll: Duration,
}

fn png_part(bytes: &[u8], name: &str) -> Result<Part> {
    Ok(Part::bytes(bytes.to_vec())
        .file_name(name.to_string())
        .mime_str("image/png")?)
}

impl Client {
    pub fn new(base_url: impl Into<String>) -> Result<Self> {
        let http = Http::builder().timeout(Duration::from_secs(600)).build()?;
        Ok(Self {
            base: base_url.into().trim_end_matches('/').to_string(),
            token: None,
            http,
            poll: Duration::from_millis(200),
        })
    }

    pub fn with_token(mut self, token: Option<String>) -> Self {
        self.token = token;
        self
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    fn send(&self, req: RequestBuilder) -> Result<Response> {
        let req = match &self.token {
            Some(t) => req.bearer_auth(t),
            None => req,
        };
        let resp = req.send()?;
        if resp.status().is_success() {
            return Ok(resp);
        }
        let status = resp.status().as_u16();
        let text = resp.text().unwrap_or_default();
        let error = serde_json::from_str::<ApiError>(&text).unwrap_or(ApiError {
            code: "http".into(),
            message: if text.is_empty() {
                format!("status {status}")
            } else {
                text
            },
        });
        Err(ClientError::Api { status, error })
    }

    fn json<T: serde::de::DeserializeOwned>(&self, req: RequestBuilder) -> Result<T> {
        let bytes = self.send(req)?.bytes()?;
        serde_json::from_slice(&bytes).map_err(|e| ClientError::Protocol(e.to_string()))
    }

    pub fn health(&self) -> Result<Health> {
        self.json(self.http.get(self.url("/v1/health")))
    }

    /// Submits an outpaint job; `baseline` runs the frozen base alone.
    pub fn submit_outpaint(
        &self,
        image_png: &[u8],
        mask_png: Option<&[u8]>,
        params: &OutpaintParams,
        baseline: bool,
    ) -> Result<String> {
        let mut form = Form::new().part("image", png_part(image_png, "image.png")?);
        if let Some(m) = mask_png {
            form = form.part("mask", png_part(m, "mask.png")?);
        }
        let params = serde_json::to_string(params).map_err(|e| ClientError::Protocol(e.to_string()))?;
        form = form.text("params", params);
        let path = if baseline {
            "/v1/outpaint/baseline"
        } else {
            "/v1/outpaint"
        };
        let s: Submitted = self.json(self.http.post(self.url(path)).multipart(form))?;
        Ok(s.job_id)
    }

    pub fn job(&self, id: &str) -> Result<Job> {
        self.json(self.http.get(self.url(&format!("/v1/jobs/{id}"))))
    }

    /// Polls until the job finishes. A failed job is an error.
    pub fn wait(&self, id: &str, timeout: Duration) -> Result<Job> {
        let start = Instant::now();
        loop {
            let job = self.job(id)?;
            match job.state {
                JobState::Done => return Ok(job),
                JobState::Failed => {
                    let error = job.error.unwrap_or(ApiError {
                        code: "job_failed".into(),
                        message: "job failed".into(),
                    });
                    return Err(ClientError::JobFailed {
                        id: id.to_string(),
                        error,
                    });
                }
                _ if start.elapsed() > timeout => return Err(ClientError::Timeout(id.to_string())),
                _ => std::thread::sleep(self.poll),
            }
        }
    }

    pub fn result_bytes(&self, id: &str) -> Result<Vec<u8>> {
        Ok(self
            .send(self.http.get(self.url(&format!("/v1/jobs/{id}/result"))))?
            .bytes()?
            .to_vec())
    }

    /// Submits, waits and unpacks an outpaint job.
    pub fn outpaint(
        &self,
        image_png: &[u8],
        mask_png: Option<&[u8]>,
        params: &OutpaintParams,
        baseline: bool,
        timeout: Duration,
    ) -> Result<OutpaintResult> {
        let id = self.submit_outpaint(image_png, mask_png, params, baseline)?;
        self.wait(&id, timeout)?;
        unpack(self.result_bytes(&id)?)
    }

    pub fn expansion(&self, input_png: &[u8], outpainted_png: &[u8], seed: u64) -> Result<ExpansionReport> {
        let form = Form::new()
            .part("input", png_part(input_png, "input.png")?)
            .part("outpainted", png_part(outpainted_png, "outpainted.png")?)
            .text("seed", seed.to_string());
        self.json(self.http.post(self.url("/v1/metrics/expansion")).multipart(form))
    }

    /// Salient mask of an image as PNG.
    pub fn segment(&self, image_png: &[u8]) -> Result<Vec<u8>> {
        let form = Form::new().part("image", png_part(image_png, "image.png")?);
        Ok(self
            .send(self.http.post(self.url("/v1/segment")).multipart(form))?
            .bytes()?
            .to_vec())
    }

    pub fn submit_eval(&self, req: &EvalRequest) -> Result<String> {
        let s: Submitted = self.json(self.http.post(self.url("/v1/eval")).json(req))?;
        Ok(s.job_id)
    }

    pub fn eval(&self, req: &EvalRequest, timeout: Duration) -> Result<EvalReport> {
        let id = self.submit_eval(req)?;
        self.wait(&id, timeout)?;
        serde_json::from_slice(&self.result_bytes(&id)?).map_err(|e| ClientError::Protocol(e.to_string()))
    }
}

/// Splits a result archive into variants, mask and metrics.
pub fn unpack(archive: Vec<u8>) -> Result<OutpaintResult> {
    let proto = |e: zip::result::ZipError| ClientError::Protocol(format!("bad result archive: {e}"));
    let mut zip = zip::ZipArchive::new(std::io::Cursor::new(&archive)).map_err(proto)?;
    let mut read = |name: &str| -> Result<Vec<u8>> {
        let mut f = zip.by_name(name).map_err(proto)?;
        let mut buf = Vec::new();
        f.read_to_end(&mut buf)
            .map_err(|e| ClientError::Protocol(e.to_string()))?;
        Ok(buf)
    };
    let metrics: ArchiveMetrics =
        serde_json::from_slice(&read("metrics.json")?).map_err(|e| ClientError::Protocol(e.to_string()))?;
    let variants = metrics
        .variants
        .iter()
        .map(|v| read(&v.file))
        .collect::<Result<Vec<_>>>()?;
    let mask = read("mask.png")?;
    Ok(OutpaintResult {
        variants,
        mask,
        metrics: metrics.variants,
        archive,
    })
}
