//! The closed action set, its argument schemas, and tool execution.
//!
//! Crop, ZoomIn and Overlay run natively. The remaining seven tools are
//! model-backed and dispatch to a [`ToolService`]: either the HTTP backend or
//! the fixture-driven mock.
//!
//! Argument schemas (all values are strings in the directive; `image`-typed
//! values are `input`, `input:N`, `last`, or a store reference):
//!
//! | action              | required                 | optional            | observation |
//! |---------------------|--------------------------|---------------------|-------------|
//! | Grounding           | image, target            |                     | structured  |
//! | Depth               | image                    |                     | image       |
//! | ZoomIn              | image, x, y, w, h        | factor (default 2)  | image       |
//! | VisualSearch        | image, target            |                     | structured  |
//! | Crop                | image, x, y, w, h        |                     | image       |
//! | OCR                 | image                    | x, y, w, h          | text        |
//! | ImageSegment        | image                    | target              | image       |
//! | ImageCaptioner      | image                    |                     | text        |
//! | SimilarityComputing | image, other             |                     | structured  |
//! | Overlay             | base, layer              | dx, dy, alpha (0.5) | image       |

pub mod backend;
pub mod directive;
pub mod raster;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use backend::{
    Fallback, HttpToolService, MockToolEntry, MockToolService, MockToolTable, ToolBackend, ToolRequest, ToolResponse, ToolService,
    WireImage,
};
pub use directive::DirectiveError;
pub use raster::{crop, overlay, zoom_in, Rect};

use crate::image::{ImageError, ImageStore};
use crate::trajectory::{Observation, State};

#[derive(Debug, Error)]
pub enum ToolError {
    #[error("unknown action `{0}`")]
    UnknownAction(String),
    #[error("backend unavailable for {action}: {reason}")]
    BackendUnavailable { action: ActionKind, reason: String },
    #[error("invalid arguments for {action}: {reason}")]
    InvalidArguments { action: ActionKind, reason: String },
    #[error("region is empty after clamping")]
    EmptyRegion,
    #[error("zoom factor {0} must be >= 1")]
    FactorOutOfRange(f64),
    #[error("layer does not intersect base")]
    NoIntersection,
    #[error(transparent)]
    Image(#[from] ImageError),
}

/// The ten tools, in their canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ActionKind {
    Grounding,
    Depth,
    ZoomIn,
    VisualSearch,
    Crop,
    #[serde(rename = "OCR")]
    Ocr,
    ImageSegment,
    ImageCaptioner,
    SimilarityComputing,
    Overlay,
}

impl ActionKind {
    pub const ALL: [ActionKind; 10] = [
        ActionKind::Grounding,
        ActionKind::Depth,
        ActionKind::ZoomIn,
        ActionKind::VisualSearch,
        ActionKind::Crop,
        ActionKind::Ocr,
        ActionKind::ImageSegment,
        ActionKind::ImageCaptioner,
        ActionKind::SimilarityComputing,
        ActionKind::Overlay,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ActionKind::Grounding => "Grounding",
            ActionKind::Depth => "Depth",
            ActionKind::ZoomIn => "ZoomIn",
            ActionKind::VisualSearch => "VisualSearch",
            ActionKind::Crop => "Crop",
            ActionKind::Ocr => "OCR",
            ActionKind::ImageSegment => "ImageSegment",
            ActionKind::ImageCaptioner => "ImageCaptioner",
            ActionKind::SimilarityComputing => "SimilarityComputing",
            ActionKind::Overlay => "Overlay",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == name)
    }

    pub fn is_native(self) -> bool {
        matches!(self, ActionKind::Crop | ActionKind::ZoomIn | ActionKind::Overlay)
    }

    fn schema(self) -> (&'static [&'static str], &'static [&'static str]) {
        match self {
            ActionKind::Grounding | ActionKind::VisualSearch => (&["image", "target"], &[]),
            ActionKind::Depth | ActionKind::ImageCaptioner => (&["image"], &[]),
            ActionKind::ZoomIn => (&["image", "x", "y", "w", "h"], &["factor"]),
            ActionKind::Crop => (&["image", "x", "y", "w", "h"], &[]),
            ActionKind::Ocr => (&["image"], &["x", "y", "w", "h"]),
            ActionKind::ImageSegment => (&["image"], &["target"]),
            ActionKind::SimilarityComputing => (&["image", "other"], &[]),
            ActionKind::Overlay => (&["base", "layer"], &["dx", "dy", "alpha"]),
        }
    }

    /// Argument keys holding image references.
    pub fn image_keys(self) -> &'static [&'static str] {
        match self {
            ActionKind::Overlay => &["base", "layer"],
            ActionKind::SimilarityComputing => &["image", "other"],
            _ => &["image"],
        }
    }
}

impl fmt::Display for ActionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub fn list_actions() -> Vec<ActionKind> {
    ActionKind::ALL.to_vec()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolInvocation {
    pub action: ActionKind,
    #[serde(default)]
    pub arguments: BTreeMap<String, String>,
}

impl ToolInvocation {
    pub fn new<K, V>(action: ActionKind, args: impl IntoIterator<Item = (K, V)>) -> Self
    where
        K: Into<String>,
        V: Into<String>,
    {
        Self {
            action,
            arguments: args.into_iter().map(|(k, v)| (k.into(), v.into())).collect(),
        }
    }

    fn invalid(&self, reason: impl Into<String>) -> ToolError {
        ToolError::InvalidArguments {
            action: self.action,
            reason: reason.into(),
        }
    }

    /// Checks required/optional keys and numeric fields.
    pub fn validate(&self) -> Result<(), ToolError> {
        let (required, optional) = self.action.schema();
        for key in required {
            if !self.arguments.contains_key(*key) {
                return Err(self.invalid(format!("missing `{key}`")));
            }
        }
        for key in self.arguments.keys() {
            if !required.contains(&key.as_str()) && !optional.contains(&key.as_str()) {
                return Err(self.invalid(format!("unexpected `{key}`")));
            }
        }
        for key in ["x", "y", "w", "h", "dx", "dy"] {
            if self.arguments.contains_key(key) {
                self.int(key)?;
            }
        }
        if self.action == ActionKind::Ocr {
            let present = ["x", "y", "w", "h"].iter().filter(|k| self.arguments.contains_key(**k)).count();
            if present != 0 && present != 4 {
                return Err(self.invalid("OCR region needs all of x, y, w, h"));
            }
        }
        if let Some(f) = self.arguments.get("factor") {
            f.parse::<f64>()
                .map_err(|_| self.invalid(format!("factor `{f}` is not a number")))?;
        }
        if self.arguments.contains_key("alpha") {
            let a = self.float("alpha", 0.5)?;
            if !(0.0..=1.0).contains(&a) {
                return Err(self.invalid(format!("alpha {a} outside [0, 1]")));
            }
        }
        Ok(())
    }

    fn int(&self, key: &str) -> Result<i64, ToolError> {
        let raw = self.arguments.get(key).ok_or_else(|| self.invalid(format!("missing `{key}`")))?;
        raw.parse().map_err(|_| self.invalid(format!("`{key}`=`{raw}` is not an integer")))
    }

    fn int_or(&self, key: &str, default: i64) -> Result<i64, ToolError> {
        if self.arguments.contains_key(key) {
            self.int(key)
        } else {
            Ok(default)
        }
    }

    fn float(&self, key: &str, default: f64) -> Result<f64, ToolError> {
        match self.arguments.get(key) {
            None => Ok(default),
            Some(raw) => raw.parse().map_err(|_| self.invalid(format!("`{key}`=`{raw}` is not a number"))),
        }
    }

    pub fn rect(&self) -> Result<Rect, ToolError> {
        Ok(Rect::new(self.int("x")?, self.int("y")?, self.int("w")?, self.int("h")?))
    }

    /// Replaces `input`, `input:N` and `last` aliases with store references
    /// taken from `state`.
    pub fn resolve_images(&self, state: &State) -> Result<ToolInvocation, ToolError> {
        let mut out = self.clone();
        for key in self.action.image_keys() {
            let Some(value) = self.arguments.get(*key) else {
                continue;
            };
            let resolved = if value == "input" {
                state.initial.image_refs.first().cloned()
            } else if let Some(n) = value.strip_prefix("input:") {
                let idx: usize = n.parse().map_err(|_| self.invalid(format!("bad image index `{value}`")))?;
                state.initial.image_refs.get(idx).cloned()
            } else if value == "last" {
                state.latest_image().map(str::to_string)
            } else {
                Some(value.clone())
            };
            let resolved = resolved.ok_or_else(|| self.invalid(format!("`{key}`=`{value}` has no image")))?;
            out.arguments.insert(key.to_string(), resolved);
        }
        Ok(out)
    }
}

/// Runs one invocation whose image arguments are already store references.
///
/// Native tools register their output image in `store`; service tools get
/// the referenced rasters and any returned image is registered the same way.
pub fn execute(inv: &ToolInvocation, store: &ImageStore, backend: &ToolBackend) -> Result<Observation, ToolError> {
    inv.validate()?;
    let images = inv
        .action
        .image_keys()
        .iter()
        .filter_map(|k| inv.arguments.get(*k))
        .map(|r| store.get(r).map_err(ToolError::from))
        .collect::<Result<Vec<_>, _>>()?;

    if inv.action.is_native() && backend.is_native(inv.action) {
        let out = match inv.action {
            ActionKind::Crop => crop(&images[0], inv.rect()?)?,
            ActionKind::ZoomIn => zoom_in(&images[0], inv.rect()?, inv.float("factor", 2.0)?)?,
            ActionKind::Overlay => overlay(
                &images[0],
                &images[1],
                inv.int_or("dx", 0)?,
                inv.int_or("dy", 0)?,
                inv.float("alpha", 0.5)?,
            )?,
            _ => unreachable!(),
        };
        let key = store.insert(out)?;
        return Ok(Observation::image(inv.action, key));
    }

    let request = ToolRequest::new(inv, &images)?;
    let response = backend.invoke(inv.action, &request)?;
    response.into_observation(inv.action, store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Raster;

    #[test]
    fn ten_actions_in_order() {
        let all = list_actions();
        assert_eq!(all.len(), 10);
        assert_eq!(all[0], ActionKind::Grounding);
        assert_eq!(all[9], ActionKind::Overlay);
        for a in all {
            assert_eq!(ActionKind::parse(a.name()), Some(a));
            let json = serde_json::to_string(&a).unwrap();
            assert_eq!(json, format!("\"{}\"", a.name()));
            assert_eq!(serde_json::from_str::<ActionKind>(&json).unwrap(), a);
        }
    }

    #[test]
    fn schema_validation() {
        let ok = ToolInvocation::new(ActionKind::Crop, [("image", "a"), ("x", "0"), ("y", "0"), ("w", "5"), ("h", "5")]);
        assert!(ok.validate().is_ok());
        let missing = ToolInvocation::new(ActionKind::Crop, [("image", "a")]);
        assert!(matches!(missing.validate(), Err(ToolError::InvalidArguments { .. })));
        let extra = ToolInvocation::new(ActionKind::Depth, [("image", "a"), ("zoom", "2")]);
        assert!(matches!(extra.validate(), Err(ToolError::InvalidArguments { .. })));
        let bad_alpha = ToolInvocation::new(ActionKind::Overlay, [("base", "a"), ("layer", "b"), ("alpha", "1.5")]);
        assert!(matches!(bad_alpha.validate(), Err(ToolError::InvalidArguments { .. })));
        let partial_region = ToolInvocation::new(ActionKind::Ocr, [("image", "a"), ("x", "1")]);
        assert!(matches!(partial_region.validate(), Err(ToolError::InvalidArguments { .. })));
    }

    #[test]
    fn native_execute_registers_output() {
        let store = ImageStore::in_memory();
        let key = store.insert(Raster::filled(100, 100, [9, 9, 9, 255])).unwrap();
        let inv = ToolInvocation::new(
            ActionKind::Crop,
            [("image", key.as_str()), ("x", "0"), ("y", "0"), ("w", "50"), ("h", "50")],
        );
        let backend = ToolBackend::native_only();
        let obs = execute(&inv, &store, &backend).unwrap();
        assert_eq!(obs.produced_by, ActionKind::Crop);
        let out = store.get(obs.image_ref().unwrap()).unwrap();
        assert_eq!((out.width(), out.height()), (50, 50));
    }

    #[test]
    fn overlay_alpha_zero_returns_base_ref() {
        let store = ImageStore::in_memory();
        let base = store.insert(Raster::filled(6, 6, [255, 255, 255, 255])).unwrap();
        let layer = store.insert(Raster::filled(3, 3, [0, 0, 0, 255])).unwrap();
        let inv = ToolInvocation::new(
            ActionKind::Overlay,
            [("base", base.as_str()), ("layer", layer.as_str()), ("alpha", "0")],
        );
        let obs = execute(&inv, &store, &ToolBackend::native_only()).unwrap();
        assert_eq!(obs.image_ref(), Some(base.as_str()));
    }

    #[test]
    fn service_tool_without_service_is_unavailable() {
        let store = ImageStore::in_memory();
        let key = store.insert(Raster::filled(2, 2, [0; 4])).unwrap();
        let inv = ToolInvocation::new(ActionKind::Depth, [("image", key.as_str())]);
        assert!(matches!(
            execute(&inv, &store, &ToolBackend::native_only()),
            Err(ToolError::BackendUnavailable { .. })
        ));
    }

    #[test]
    fn alias_resolution() {
        let mut state = State::new(crate::trajectory::InitialState {
            question: "q".into(),
            image_refs: vec!["in0".into(), "in1".into()],
            system_prompt: String::new(),
        });
        let inv = ToolInvocation::new(ActionKind::SimilarityComputing, [("image", "input"), ("other", "input:1")]);
        let r = inv.resolve_images(&state).unwrap();
        assert_eq!(r.arguments["image"], "in0");
        assert_eq!(r.arguments["other"], "in1");

        state.history.push(crate::trajectory::ReasoningStep::new(
            "p",
            ToolInvocation::new(ActionKind::Depth, [("image", "input")]),
            Observation::image(ActionKind::Depth, "depthmap"),
        ));
        let last = ToolInvocation::new(ActionKind::Depth, [("image", "last")]);
        assert_eq!(last.resolve_images(&state).unwrap().arguments["image"], "depthmap");
        let oob = ToolInvocation::new(ActionKind::Depth, [("image", "input:5")]);
        assert!(oob.resolve_images(&state).is_err());
    }
}
