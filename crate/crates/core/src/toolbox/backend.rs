//! Tool backends for the model-backed actions.
//!
//! Wire contract (`POST {base_url}/invoke`, JSON both ways):
//!
//! ```json
//! request:  {"action":"OCR","arguments":{"image":"<ref>"},
//!            "images":[{"ref":"<ref>","width":64,"height":32,"png_base64":"..."}]}
//! response: {"kind":"text","payload":"STOP"}
//!           {"kind":"image","payload":"<base64 png>"}
//!           {"kind":"structured","payload":{"boxes":[[0,0,10,10]]}}
//! ```

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{ActionKind, ToolError, ToolInvocation};
use crate::image::{ImageStore, Raster};
use crate::trajectory::Observation;
use crate::util::Semaphore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireImage {
    #[serde(rename = "ref")]
    pub image_ref: String,
    pub width: u32,
    pub height: u32,
    pub png_base64: String,
}

impl WireImage {
    pub fn decode(&self) -> Result<Raster, ToolError> {
        let bytes = B64
            .decode(&self.png_base64)
            .map_err(|e| crate::image::ImageError::Decode(e.to_string()))?;
        Ok(Raster::from_png(&bytes)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolRequest {
    pub action: ActionKind,
    pub arguments: BTreeMap<String, String>,
    pub images: Vec<WireImage>,
}

impl ToolRequest {
    pub fn new(inv: &ToolInvocation, images: &[Arc<Raster>]) -> Result<Self, ToolError> {
        let refs = inv.action.image_keys().iter().filter_map(|k| inv.arguments.get(*k));
        let images = refs
            .zip(images)
            .map(|(r, img)| {
                Ok(WireImage {
                    image_ref: r.clone(),
                    width: img.width(),
                    height: img.height(),
                    png_base64: B64.encode(img.to_png()?),
                })
            })
            .collect::<Result<Vec<_>, ToolError>>()?;
        Ok(Self {
            action: inv.action,
            arguments: inv.arguments.clone(),
            images,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum ToolResponse {
    Image(String),
    Text(String),
    Structured(Value),
}

impl ToolResponse {
    pub fn into_observation(self, action: ActionKind, store: &ImageStore) -> Result<Observation, ToolError> {
        Ok(match self {
            ToolResponse::Text(t) => Observation::text(action, t),
            ToolResponse::Structured(v) => Observation::structured(action, v),
            ToolResponse::Image(b64) => {
                let bytes = B64.decode(&b64).map_err(|e| ToolError::BackendUnavailable {
                    action,
                    reason: format!("image payload is not base64: {e}"),
                })?;
                let key = store.insert(Raster::from_png(&bytes)?)?;
                Observation::image(action, key)
            }
        })
    }
}

pub trait ToolService: Send + Sync {
    fn invoke(&self, request: &ToolRequest) -> Result<ToolResponse, ToolError>;
}

enum Handler {
    Native,
    Service(Arc<dyn ToolService>),
    Missing,
}

/// Maps every action to exactly one handler.
pub struct ToolBackend {
    handlers: BTreeMap<ActionKind, Handler>,
    in_flight: Semaphore,
}

impl std::fmt::Debug for ToolBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let map: BTreeMap<_, _> = self
            .handlers
            .iter()
            .map(|(k, h)| {
                let kind = match h {
                    Handler::Native => "native",
                    Handler::Service(_) => "service",
                    Handler::Missing => "missing",
                };
                (k.name(), kind)
            })
            .collect();
        f.debug_struct("ToolBackend").field("handlers", &map).finish()
    }
}

impl ToolBackend {
    /// Native tools only; the seven model-backed tools report unavailable.
    pub fn native_only() -> Self {
        Self::build(None, 1)
    }

    pub fn with_service(service: Arc<dyn ToolService>, max_in_flight: usize) -> Self {
        Self::build(Some(service), max_in_flight)
    }

    fn build(service: Option<Arc<dyn ToolService>>, max_in_flight: usize) -> Self {
        let handlers = ActionKind::ALL
            .into_iter()
            .map(|a| {
                let h = if a.is_native() {
                    Handler::Native
                } else if let Some(s) = &service {
                    Handler::Service(s.clone())
                } else {
                    Handler::Missing
                };
                (a, h)
            })
            .collect();
        Self {
            handlers,
            in_flight: Semaphore::new(max_in_flight),
        }
    }

    pub fn is_native(&self, action: ActionKind) -> bool {
        matches!(self.handlers.get(&action), Some(Handler::Native))
    }

    pub fn invoke(&self, action: ActionKind, request: &ToolRequest) -> Result<ToolResponse, ToolError> {
        match self.handlers.get(&action) {
            Some(Handler::Service(s)) => {
                let _permit = self.in_flight.acquire();
                s.invoke(request)
            }
            _ => Err(ToolError::BackendUnavailable {
                action,
                reason: "no service handler configured".into(),
            }),
        }
    }
}

/// HTTP JSON tool server client.
pub struct HttpToolService {
    base_url: String,
    agent: ureq::Agent,
}

impl HttpToolService {
    pub fn new(base_url: impl Into<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder().timeout_global(Some(timeout)).build().into();
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            agent,
        }
    }
}

impl ToolService for HttpToolService {
    fn invoke(&self, request: &ToolRequest) -> Result<ToolResponse, ToolError> {
        let url = format!("{}/invoke", self.base_url);
        let unavailable = |reason: String| ToolError::BackendUnavailable {
            action: request.action,
            reason,
        };
        let mut resp = self.agent.post(&url).send_json(request).map_err(|e| unavailable(e.to_string()))?;
        resp.body_mut()
            .read_json::<ToolResponse>()
            .map_err(|e| unavailable(format!("bad response body: {e}")))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    /// Deterministic synthetic observation derived from the request.
    #[default]
    Echo,
    /// Unmatched requests fail as unavailable.
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockToolEntry {
    pub action: ActionKind,
    /// Reference of the first input image, when the entry is image-specific.
    #[serde(default)]
    pub image: Option<String>,
    /// Non-image arguments that must match exactly (subset match).
    #[serde(default)]
    pub arguments: BTreeMap<String, String>,
    pub observation: ToolResponse,
}

/// Fixture table for [`MockToolService`].
///
/// ```json
/// {"entries":[{"action":"OCR","image":"<ref>","observation":{"kind":"text","payload":"STOP"}}],
///  "unavailable":["Depth"],
///  "fallback":"echo"}
/// ```
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockToolTable {
    #[serde(default)]
    pub entries: Vec<MockToolEntry>,
    #[serde(default)]
    pub unavailable: Vec<ActionKind>,
    #[serde(default)]
    pub fallback: Fallback,
}

impl MockToolTable {
    pub fn load(path: &Path) -> std::io::Result<Self> {
        let bytes = std::fs::read(path)?;
        serde_json::from_slice(&bytes).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }
}

#[derive(Debug, Clone, Default)]
pub struct MockToolService {
    table: MockToolTable,
}

impl MockToolService {
    pub fn new(table: MockToolTable) -> Self {
        Self { table }
    }

    fn echo(request: &ToolRequest) -> Result<ToolResponse, ToolError> {
        let first = request.images.first();
        let short = first.map(|i| &i.image_ref[..i.image_ref.len().min(12)]).unwrap_or("");
        let image_keys = request.action.image_keys();
        let plain_args: BTreeMap<&String, &String> = request
            .arguments
            .iter()
            .filter(|(k, _)| !image_keys.contains(&k.as_str()))
            .collect();
        Ok(match request.action {
            ActionKind::Depth | ActionKind::ImageSegment => {
                let img = first
                    .ok_or_else(|| ToolError::InvalidArguments {
                        action: request.action,
                        reason: "no input image".into(),
                    })?
                    .decode()?;
                ToolResponse::Image(B64.encode(inverted_luma(&img).to_png()?))
            }
            ActionKind::Ocr | ActionKind::ImageCaptioner => ToolResponse::Text(format!("{} of {short}", request.action.name())),
            _ => ToolResponse::Structured(serde_json::json!({
                "action": request.action.name(),
                "image": short,
                "arguments": plain_args,
            })),
        })
    }
}

fn inverted_luma(img: &Raster) -> Raster {
    let mut out = img.clone();
    for y in 0..img.height() {
        for x in 0..img.width() {
            let [r, g, b, _] = img.pixel(x, y);
            let l = ((r as u32 * 299 + g as u32 * 587 + b as u32 * 114) / 1000) as u8;
            out.set_pixel(x, y, [255 - l, 255 - l, 255 - l, 255]);
        }
    }
    out
}

impl ToolService for MockToolService {
    fn invoke(&self, request: &ToolRequest) -> Result<ToolResponse, ToolError> {
        if self.table.unavailable.contains(&request.action) {
            return Err(ToolError::BackendUnavailable {
                action: request.action,
                reason: "marked unavailable in mock fixture".into(),
            });
        }
        let first_ref = request.images.first().map(|i| i.image_ref.as_str());
        let hit = self.table.entries.iter().find(|e| {
            e.action == request.action
                && e.image.as_deref().is_none_or(|r| Some(r) == first_ref)
                && e.arguments.iter().all(|(k, v)| request.arguments.get(k) == Some(v))
        });
        match (hit, &self.table.fallback) {
            (Some(e), _) => Ok(e.observation.clone()),
            (None, Fallback::Echo) => Self::echo(request),
            (None, Fallback::Error) => Err(ToolError::BackendUnavailable {
                action: request.action,
                reason: "no mock entry matches".into(),
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toolbox::execute;

    fn fixture_image() -> Raster {
        let mut r = Raster::filled(16, 8, [255, 255, 255, 255]);
        for x in 2..14 {
            r.set_pixel(x, 4, [200, 0, 0, 255]);
        }
        r
    }

    #[test]
    fn mock_ocr_keyed_to_fixture_image() {
        let store = ImageStore::in_memory();
        let key = store.insert(fixture_image()).unwrap();
        let table = MockToolTable {
            entries: vec![MockToolEntry {
                action: ActionKind::Ocr,
                image: Some(key.clone()),
                arguments: BTreeMap::new(),
                observation: ToolResponse::Text("STOP".into()),
            }],
            ..Default::default()
        };
        let backend = ToolBackend::with_service(Arc::new(MockToolService::new(table)), 4);
        let inv = ToolInvocation::new(ActionKind::Ocr, [("image", key.as_str())]);
        let obs = execute(&inv, &store, &backend).unwrap();
        assert_eq!(obs, Observation::text(ActionKind::Ocr, "STOP"));
    }

    #[test]
    fn mock_unavailable_and_error_fallback() {
        let store = ImageStore::in_memory();
        let key = store.insert(fixture_image()).unwrap();
        let table = MockToolTable {
            unavailable: vec![ActionKind::Depth],
            fallback: Fallback::Error,
            ..Default::default()
        };
        let backend = ToolBackend::with_service(Arc::new(MockToolService::new(table)), 1);
        for action in [ActionKind::Depth, ActionKind::ImageCaptioner] {
            let inv = ToolInvocation::new(action, [("image", key.as_str())]);
            assert!(matches!(execute(&inv, &store, &backend), Err(ToolError::BackendUnavailable { .. })));
        }
    }

    #[test]
    fn echo_is_deterministic_for_every_service_tool() {
        let store = ImageStore::in_memory();
        let key = store.insert(fixture_image()).unwrap();
        let backend = ToolBackend::with_service(Arc::new(MockToolService::default()), 2);
        for action in ActionKind::ALL.into_iter().filter(|a| !a.is_native()) {
            let args: Vec<(&str, &str)> = match action {
                ActionKind::Grounding | ActionKind::VisualSearch => vec![("image", &key), ("target", "line")],
                ActionKind::SimilarityComputing => vec![("image", &key), ("other", &key)],
                _ => vec![("image", &key)],
            };
            let inv = ToolInvocation::new(action, args);
            let a = execute(&inv, &store, &backend).unwrap();
            let b = execute(&inv, &store, &backend).unwrap();
            assert_eq!(a, b, "{action}");
            assert_eq!(a.produced_by, action);
        }
    }

    #[test]
    fn response_wire_shapes() {
        let t: ToolResponse = serde_json::from_str(r#"{"kind":"text","payload":"hi"}"#).unwrap();
        assert_eq!(t, ToolResponse::Text("hi".into()));
        let s: ToolResponse = serde_json::from_str(r#"{"kind":"structured","payload":{"boxes":[[1,2,3,4]]}}"#).unwrap();
        assert!(matches!(s, ToolResponse::Structured(_)));
        let req = ToolRequest {
            action: ActionKind::Ocr,
            arguments: BTreeMap::new(),
            images: vec![],
        };
        let v = serde_json::to_value(&req).unwrap();
        assert_eq!(v["action"], "OCR");
    }
}
